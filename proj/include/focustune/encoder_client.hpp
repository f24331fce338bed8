#pragma once

// Optional external dense encoder reached over HTTP. Request body:
//   {"texts": ["...", ...]}
// Response body:
//   {"embeddings": [[...], ...]}   one vector per input text, in order

#include <cstdlib>
#include <memory>
#include <string>
#include <vector>

#include "httplib.h"
#include "json.hpp"

#include "focustune/error.hpp"
#include "focustune/retrieval.hpp"

namespace focustune {

inline constexpr const char* kEncoderUrlEnv = "FOCUSTUNE_ENCODER_URL";

class HttpEmbedder final : public Embedder {
public:
    /// `base_url` like "http://127.0.0.1:8080"; requests go to <base_url>/embed.
    explicit HttpEmbedder(std::string base_url, int timeout_seconds = 30)
        : base_url_(std::move(base_url)), timeout_seconds_(timeout_seconds) {
        if (base_url_.rfind("http://", 0) != 0) {
            throw UsageError("encoder URL must start with http:// (got '" + base_url_ + "')");
        }
    }

    std::vector<Embedding> embed_batch(const std::vector<std::string>& texts) const override {
        httplib::Client client(base_url_);
        client.set_connection_timeout(timeout_seconds_, 0);
        client.set_read_timeout(timeout_seconds_, 0);
        const nlohmann::json body{{"texts", texts}};
        const auto res = client.Post("/embed", body.dump(), "application/json");
        if (!res) {
            throw TransportError("encoder request to " + base_url_ + "/embed failed: " +
                                 httplib::to_string(res.error()));
        }
        if (res->status != 200) {
            throw TransportError("encoder returned HTTP " + std::to_string(res->status));
        }
        std::vector<Embedding> out;
        try {
            const auto j = nlohmann::json::parse(res->body);
            for (const auto& v : j.at("embeddings")) {
                out.push_back(Embedding{v.get<std::vector<double>>()});
            }
        } catch (const nlohmann::json::exception& e) {
            throw TransportError(std::string("malformed encoder response: ") + e.what());
        }
        if (out.size() != texts.size()) {
            throw TransportError("encoder returned " + std::to_string(out.size()) + " vectors for " +
                                 std::to_string(texts.size()) + " texts");
        }
        return out;
    }

private:
    std::string base_url_;
    int timeout_seconds_;
};

/// HttpEmbedder when FOCUSTUNE_ENCODER_URL is set, otherwise the built-in HashEmbedder.
inline std::unique_ptr<Embedder> make_embedder() {
    const char* url = std::getenv(kEncoderUrlEnv);
    if (url != nullptr && *url != '\0') {
        return std::make_unique<HttpEmbedder>(url);
    }
    return std::make_unique<HashEmbedder>();
}

} // namespace focustune
