#pragma once

// Named-tensor checkpoint container.
//
// Layout (all integers little-endian):
//   "FOCUSCKPT1"
//   u64 header length, header JSON {"model": ModelConfig, "vocab": [tokens] | null}
//   u64 record count
//   per record: u32 name length, name, u8 dtype (1 = float64), u32 ndim,
//               u64 dims[ndim], float64 data (row-major)

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>

#include "json.hpp"

#include "focustune/error.hpp"
#include "focustune/model.hpp"
#include "focustune/text_corpus.hpp"

namespace focustune {

inline constexpr std::string_view kCheckpointMagic = "FOCUSCKPT1";
inline constexpr std::uint8_t kDtypeFloat64 = 1;

namespace detail {

template <class T>
void put_le(std::ostream& out, T value) {
    static_assert(std::is_unsigned_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        out.put(static_cast<char>((value >> (8 * i)) & 0xFF));
    }
}

template <class T>
T get_le(std::istream& in) {
    static_assert(std::is_unsigned_v<T>);
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        const int c = in.get();
        if (c == std::char_traits<char>::eof()) {
            throw DataError("truncated checkpoint");
        }
        value |= static_cast<T>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return value;
}

} // namespace detail

struct Checkpoint {
    ModelParams params;
    std::optional<Vocab> vocab;
};

inline void save_checkpoint(const std::string& path, const ModelParams& params, const Vocab* vocab = nullptr) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write checkpoint: " + path);
    }
    out.write(kCheckpointMagic.data(), static_cast<std::streamsize>(kCheckpointMagic.size()));
    nlohmann::json header{{"model", to_json(params.config)}};
    header["vocab"] = vocab ? vocab->to_json() : nlohmann::json(nullptr);
    const std::string header_text = header.dump();
    detail::put_le<std::uint64_t>(out, header_text.size());
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));

    const auto refs = parameter_refs(params);
    detail::put_le<std::uint64_t>(out, refs.size());
    for (const auto& r : refs) {
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
        out.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
        out.put(static_cast<char>(kDtypeFloat64));
        detail::put_le<std::uint32_t>(out, 2);
        detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(r.value->rows()));
        detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(r.value->cols()));
        for (Eigen::Index i = 0; i < r.value->size(); ++i) {
            detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(r.value->data()[i]));
        }
    }
    if (!out) {
        throw DataError("failed writing checkpoint: " + path);
    }
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot read checkpoint: " + path);
    }
    std::string magic(kCheckpointMagic.size(), '\0');
    in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
    if (!in || magic != kCheckpointMagic) {
        throw DataError("not a checkpoint (bad magic): " + path);
    }
    const auto header_len = detail::get_le<std::uint64_t>(in);
    std::string header_text(header_len, '\0');
    in.read(header_text.data(), static_cast<std::streamsize>(header_len));
    if (!in) {
        throw DataError("truncated checkpoint header: " + path);
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed checkpoint header: " + std::string(e.what()));
    }
    Checkpoint ckpt;
    ckpt.params = init_params(model_config_from_json(header.at("model")));
    if (!header["vocab"].is_null()) {
        ckpt.vocab = Vocab::from_json(header["vocab"]);
    }

    std::unordered_map<std::string, Mat*> by_name;
    for (auto& r : parameter_refs(ckpt.params)) {
        by_name.emplace(r.name, r.value);
    }
    const auto count = detail::get_le<std::uint64_t>(in);
    if (count != by_name.size()) {
        throw DataError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                        std::to_string(by_name.size()));
    }
    for (std::uint64_t n = 0; n < count; ++n) {
        const auto name_len = detail::get_le<std::uint32_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const int dtype = in.get();
        if (dtype != kDtypeFloat64) {
            throw DataError("unsupported dtype in tensor '" + name + "'");
        }
        const auto ndim = detail::get_le<std::uint32_t>(in);
        if (ndim != 2) {
            throw DataError("tensor '" + name + "' has rank " + std::to_string(ndim) + ", expected 2");
        }
        const auto rows = detail::get_le<std::uint64_t>(in);
        const auto cols = detail::get_le<std::uint64_t>(in);
        const auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw DataError("unexpected tensor '" + name + "' in checkpoint");
        }
        Mat& m = *it->second;
        if (static_cast<std::uint64_t>(m.rows()) != rows || static_cast<std::uint64_t>(m.cols()) != cols) {
            throw DataError("shape mismatch for tensor '" + name + "'");
        }
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            m.data()[i] = std::bit_cast<double>(detail::get_le<std::uint64_t>(in));
        }
    }
    return ckpt;
}

} // namespace focustune
