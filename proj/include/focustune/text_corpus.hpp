#pragma once

// Word-level tokenization, prompt templating and the JSONL sample model.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "focustune/error.hpp"

namespace focustune {

using TokenId = std::int32_t;

inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kMaskToken = "<mask>";
inline constexpr std::string_view kEosToken = "<eos>";
inline constexpr std::string_view kDocumentSeparator = "\n\n";

struct TokenSeq {
    std::vector<TokenId> ids;

    std::size_t size() const noexcept { return ids.size(); }
    bool empty() const noexcept { return ids.empty(); }
    bool operator==(const TokenSeq&) const = default;
};

/// A pre-token with its byte span in the source text.
struct Piece {
    std::string text;
    std::size_t begin = 0;
    std::size_t end = 0;
};

namespace detail {

inline bool is_space(char c) noexcept {
    return c == ' ' || c == '\n' || c == '\t' || c == '\r' || c == '\f' || c == '\v';
}

inline bool is_word_char(char c) noexcept {
    const auto u = static_cast<unsigned char>(c);
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' ||
           u >= 0x80;
}

inline constexpr std::string_view kSpecials[] = {kPadToken, kUnkToken, kMaskToken, kEosToken};

inline std::size_t special_at(std::string_view text, std::size_t pos) noexcept {
    for (auto special : kSpecials) {
        if (text.substr(pos, special.size()) == special) {
            return special.size();
        }
    }
    return 0;
}

// Length of the word run or single punctuation unit starting at pos.
inline std::size_t unit_at(std::string_view text, std::size_t pos) noexcept {
    if (is_word_char(text[pos])) {
        std::size_t end = pos;
        while (end < text.size() && is_word_char(text[end])) {
            ++end;
        }
        return end - pos;
    }
    return 1;
}

} // namespace detail

/// Split text into pieces whose concatenation is the text. A single space
/// directly before a word or punctuation unit is attached to it (" word");
/// other whitespace runs form their own pieces; special tokens are atomic.
inline std::vector<Piece> pretokenize(std::string_view text) {
    std::vector<Piece> pieces;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const std::size_t start = pos;
        if (const auto n = detail::special_at(text, pos); n > 0) {
            pos += n;
        } else if (text[pos] == ' ' && pos + 1 < text.size() && !detail::is_space(text[pos + 1]) &&
                   detail::special_at(text, pos + 1) == 0) {
            pos += 1 + detail::unit_at(text, pos + 1);
        } else if (detail::is_space(text[pos])) {
            std::size_t end = pos;
            while (end < text.size() && detail::is_space(text[end])) {
                ++end;
            }
            // Leave a trailing single space for the following unit.
            if (end - pos > 1 && text[end - 1] == ' ' && end < text.size() &&
                detail::special_at(text, end) == 0) {
                --end;
            }
            pos = end;
        } else {
            pos += detail::unit_at(text, pos);
        }
        pieces.push_back(Piece{std::string(text.substr(start, pos - start)), start, pos});
    }
    return pieces;
}

class Vocab {
public:
    Vocab() : Vocab(std::vector<std::string>{}) {}

    /// Specials missing from `tokens` are prepended in the order pad, unk, mask, eos.
    explicit Vocab(std::vector<std::string> tokens) {
        std::vector<std::string> all;
        for (auto special : detail::kSpecials) {
            if (std::find(tokens.begin(), tokens.end(), special) == tokens.end()) {
                all.emplace_back(special);
            }
        }
        all.insert(all.end(), std::make_move_iterator(tokens.begin()), std::make_move_iterator(tokens.end()));
        for (std::size_t i = 0; i < all.size(); ++i) {
            auto [it, inserted] = index_.emplace(all[i], static_cast<TokenId>(i));
            if (!inserted) {
                throw DataError("duplicate vocabulary token: '" + all[i] + "'");
            }
        }
        tokens_ = std::move(all);
        pad_ = index_.at(std::string(kPadToken));
        unk_ = index_.at(std::string(kUnkToken));
        mask_ = index_.at(std::string(kMaskToken));
        eos_ = index_.at(std::string(kEosToken));
    }

    /// Sorted distinct pieces of the given texts, after the special tokens.
    static Vocab from_texts(const std::vector<std::string>& texts) {
        std::set<std::string> seen;
        for (const auto& text : texts) {
            for (auto& piece : pretokenize(text)) {
                if (detail::special_at(piece.text, 0) != piece.text.size()) {
                    seen.insert(std::move(piece.text));
                }
            }
        }
        return Vocab(std::vector<std::string>(seen.begin(), seen.end()));
    }

    std::size_t size() const noexcept { return tokens_.size(); }
    const std::vector<std::string>& tokens() const noexcept { return tokens_; }
    const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }

    std::optional<TokenId> find(std::string_view token) const {
        const auto it = index_.find(std::string(token));
        if (it == index_.end()) {
            return std::nullopt;
        }
        return it->second;
    }

    TokenId lookup(std::string_view token) const { return find(token).value_or(unk_); }

    TokenId pad_id() const noexcept { return pad_; }
    TokenId unk_id() const noexcept { return unk_; }
    TokenId mask_id() const noexcept { return mask_; }
    TokenId eos_id() const noexcept { return eos_; }

    nlohmann::json to_json() const { return tokens_; }
    static Vocab from_json(const nlohmann::json& j) { return Vocab(j.get<std::vector<std::string>>()); }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) {
            throw DataError("cannot write vocabulary file: " + path);
        }
        out << to_json().dump() << '\n';
    }

    static Vocab load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) {
            throw DataError("cannot read vocabulary file: " + path);
        }
        try {
            return from_json(nlohmann::json::parse(in));
        } catch (const nlohmann::json::exception& e) {
            throw DataError("malformed vocabulary file " + path + ": " + e.what());
        }
    }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;
    TokenId pad_ = 0;
    TokenId unk_ = 0;
    TokenId mask_ = 0;
    TokenId eos_ = 0;
};

inline TokenSeq tokenize(std::string_view text, const Vocab& vocab) {
    TokenSeq seq;
    for (const auto& piece : pretokenize(text)) {
        seq.ids.push_back(vocab.lookup(piece.text));
    }
    return seq;
}

/// Tokens plus the byte span each one covers in `text`.
inline std::pair<TokenSeq, std::vector<Piece>> tokenize_with_offsets(std::string_view text,
                                                                     const Vocab& vocab) {
    auto pieces = pretokenize(text);
    TokenSeq seq;
    seq.ids.reserve(pieces.size());
    for (const auto& piece : pieces) {
        seq.ids.push_back(vocab.lookup(piece.text));
    }
    return {std::move(seq), std::move(pieces)};
}

inline std::string detokenize(const TokenSeq& seq, const Vocab& vocab) {
    std::string out;
    for (const auto id : seq.ids) {
        out += vocab.token(id);
    }
    return out;
}

// ----------------------------------------------------------------------------
// Samples

struct Document {
    std::string doc_id;
    std::string text;
    bool is_gold = false;

    bool operator==(const Document&) const = default;
};

struct QASample {
    std::string id;
    std::string question;
    std::vector<std::string> answers;
    std::vector<Document> documents;
    std::optional<std::vector<std::string>> evidence;
    std::optional<std::vector<std::string>> options;

    bool operator==(const QASample&) const = default;

    /// Index of the first gold document, if any.
    std::optional<std::size_t> gold_index() const {
        for (std::size_t i = 0; i < documents.size(); ++i) {
            if (documents[i].is_gold) {
                return i;
            }
        }
        return std::nullopt;
    }
};

inline void validate(const QASample& sample) {
    if (sample.answers.empty()) {
        throw DataError("sample '" + sample.id + "' has no answers");
    }
    if (sample.options && sample.options->size() < 2) {
        throw DataError("sample '" + sample.id + "' has fewer than two options");
    }
}

inline nlohmann::json to_json(const QASample& s) {
    nlohmann::json j;
    j["id"] = s.id;
    j["question"] = s.question;
    j["answers"] = s.answers;
    auto docs = nlohmann::json::array();
    for (const auto& d : s.documents) {
        docs.push_back({{"doc_id", d.doc_id}, {"text", d.text}, {"is_gold", d.is_gold}});
    }
    j["documents"] = std::move(docs);
    if (s.evidence) {
        j["evidence"] = *s.evidence;
    }
    if (s.options) {
        j["options"] = *s.options;
    }
    return j;
}

inline QASample sample_from_json(const nlohmann::json& j) {
    QASample s;
    try {
        s.id = j.at("id").get<std::string>();
        s.question = j.at("question").get<std::string>();
        s.answers = j.at("answers").get<std::vector<std::string>>();
        for (const auto& d : j.at("documents")) {
            s.documents.push_back(Document{d.at("doc_id").get<std::string>(), d.at("text").get<std::string>(),
                                           d.value("is_gold", false)});
        }
        if (j.contains("evidence") && !j["evidence"].is_null()) {
            s.evidence = j["evidence"].get<std::vector<std::string>>();
        }
        if (j.contains("options") && !j["options"].is_null()) {
            s.options = j["options"].get<std::vector<std::string>>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed sample record: ") + e.what());
    }
    validate(s);
    return s;
}

inline std::vector<nlohmann::json> read_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot read file: " + path);
    }
    std::vector<nlohmann::json> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            records.push_back(nlohmann::json::parse(line));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return records;
}

inline void write_jsonl(const std::string& path, const std::vector<nlohmann::json>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write file: " + path);
    }
    for (const auto& r : records) {
        out << r.dump() << '\n';
    }
}

inline std::vector<QASample> read_samples(const std::string& path) {
    std::vector<QASample> samples;
    for (const auto& j : read_jsonl(path)) {
        samples.push_back(sample_from_json(j));
    }
    return samples;
}

/// True when every gold answer reads "unanswerable" (case-insensitive, surrounding blanks ignored).
inline bool is_unanswerable(const QASample& s) {
    if (s.answers.empty()) {
        return false;
    }
    for (const auto& a : s.answers) {
        const auto b = a.find_first_not_of(" \t\n");
        const auto e = a.find_last_not_of(" \t\n");
        if (b == std::string::npos) {
            return false;
        }
        std::string lowered = a.substr(b, e - b + 1);
        for (auto& c : lowered) {
            c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        }
        if (lowered != "unanswerable") {
            return false;
        }
    }
    return true;
}

inline std::vector<QASample> drop_unanswerable(std::vector<QASample> samples) {
    std::erase_if(samples, is_unanswerable);
    return samples;
}

inline void write_samples(const std::string& path, const std::vector<QASample>& samples) {
    std::vector<nlohmann::json> records;
    records.reserve(samples.size());
    for (const auto& s : samples) {
        records.push_back(to_json(s));
    }
    write_jsonl(path, records);
}

// ----------------------------------------------------------------------------
// Prompts

inline std::string join_documents(const std::vector<Document>& documents) {
    std::string ctx;
    for (std::size_t i = 0; i < documents.size(); ++i) {
        if (i > 0) {
            ctx += kDocumentSeparator;
        }
        ctx += documents[i].text;
    }
    return ctx;
}

inline constexpr std::string_view kPromptArticle = "Article:";
inline constexpr std::string_view kPromptQuestion = "\n Question: ";
inline constexpr std::string_view kPromptAnswer = "\n Answer:";

inline std::string build_prompt(std::string_view context, std::string_view question) {
    std::string p;
    p.reserve(context.size() + question.size() + 32);
    p += kPromptArticle;
    p += context;
    p += kPromptQuestion;
    p += question;
    p += kPromptAnswer;
    return p;
}

inline std::string build_prompt(const QASample& sample) {
    if (sample.documents.empty()) {
        throw DataError("sample '" + sample.id + "' has no documents");
    }
    return build_prompt(join_documents(sample.documents), sample.question);
}

/// Prompt followed by the first answer; the EOS id is added at encoding time.
inline std::string build_training_text(std::string_view context, std::string_view question,
                                       std::string_view answer) {
    std::string t = build_prompt(context, question);
    t += ' ';
    t += answer;
    return t;
}

inline TokenSeq encode_training(std::string_view context, std::string_view question, std::string_view answer,
                                const Vocab& vocab) {
    auto seq = tokenize(build_training_text(context, question, answer), vocab);
    seq.ids.push_back(vocab.eos_id());
    return seq;
}

inline TokenSeq encode_training(const QASample& sample, const Vocab& vocab) {
    if (sample.documents.empty()) {
        throw DataError("sample '" + sample.id + "' has no documents");
    }
    return encode_training(join_documents(sample.documents), sample.question, sample.answers.at(0), vocab);
}

// ----------------------------------------------------------------------------
// Sentences

/// Byte spans of sentences. A sentence ends at '.', '!' or '?' followed by
/// whitespace (or at end of text); whitespace between sentences belongs to no span.
inline std::vector<std::pair<std::size_t, std::size_t>> sentence_spans(std::string_view text) {
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    std::size_t pos = 0;
    while (pos < text.size()) {
        while (pos < text.size() && detail::is_space(text[pos])) {
            ++pos;
        }
        if (pos == text.size()) {
            break;
        }
        const std::size_t start = pos;
        std::size_t end = text.size();
        for (std::size_t i = pos; i < text.size(); ++i) {
            const char c = text[i];
            if ((c == '.' || c == '!' || c == '?') && i + 1 < text.size() && detail::is_space(text[i + 1])) {
                end = i + 1;
                break;
            }
        }
        // A final sentence without terminal punctuation keeps no trailing whitespace.
        if (end == text.size()) {
            while (end > start && detail::is_space(text[end - 1])) {
                --end;
            }
        }
        spans.emplace_back(start, end);
        pos = end;
    }
    return spans;
}

inline std::vector<std::string> sentence_split(std::string_view text) {
    std::vector<std::string> out;
    for (const auto& [b, e] : sentence_spans(text)) {
        out.emplace_back(text.substr(b, e - b));
    }
    return out;
}

/// Collapse whitespace runs to one space and trim both ends.
inline std::string normalize_whitespace(std::string_view text) {
    std::string out;
    bool pending_space = false;
    for (const char c : text) {
        if (detail::is_space(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out += ' ';
            pending_space = false;
        }
        out += c;
    }
    return out;
}

} // namespace focustune
