#pragma once

// Chunking, relevance scoring, top-k selection and mask-based augmentation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "focustune/error.hpp"
#include "focustune/logging.hpp"
#include "focustune/text_corpus.hpp"

namespace focustune {

struct Chunk {
    int chunk_id = 0;
    std::string doc_id;
    std::size_t token_begin = 0; // half-open token span within the document
    std::size_t token_end = 0;
    std::string text;
    // Whitespace around the chunk in the original context. Joining
    // leading + text + trailing over all chunks of non-overlapping
    // chunkers reproduces the context.
    std::string leading;
    std::string trailing;
};

inline std::vector<std::pair<std::size_t, std::size_t>> fixed_spans(std::size_t n_tokens, std::size_t size,
                                                                    std::size_t overlap) {
    if (size == 0 || overlap >= size) {
        throw UsageError("chunk overlap must be smaller than chunk size (size=" + std::to_string(size) +
                         ", overlap=" + std::to_string(overlap) + ")");
    }
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    const std::size_t stride = size - overlap;
    for (std::size_t start = 0; start < n_tokens; start += stride) {
        const std::size_t end = std::min(start + size, n_tokens);
        spans.emplace_back(start, end);
        if (end == n_tokens) {
            break;
        }
    }
    return spans;
}

/// Fixed-size token windows with `overlap` tokens shared by neighbours. Text
/// is left empty; see chunk_fixed_text for chunks that carry their text.
inline std::vector<Chunk> chunk_fixed(const TokenSeq& doc, std::size_t size = 500, std::size_t overlap = 50,
                                      const std::string& doc_id = {}) {
    std::vector<Chunk> chunks;
    int id = 0;
    for (const auto& [b, e] : fixed_spans(doc.size(), size, overlap)) {
        chunks.push_back(Chunk{id++, doc_id, b, e, {}, {}, {}});
    }
    return chunks;
}

inline std::vector<Chunk> chunk_fixed_text(std::string_view text, std::size_t size = 500,
                                           std::size_t overlap = 50, const std::string& doc_id = {}) {
    const auto pieces = pretokenize(text);
    std::vector<Chunk> chunks;
    int id = 0;
    for (const auto& [b, e] : fixed_spans(pieces.size(), size, overlap)) {
        std::string chunk_text;
        for (std::size_t i = b; i < e; ++i) {
            chunk_text += pieces[i].text;
        }
        chunks.push_back(Chunk{id++, doc_id, b, e, std::move(chunk_text), {}, {}});
    }
    return chunks;
}

/// One chunk per sentence, in order, with the separating whitespace recorded.
inline std::vector<Chunk> chunk_sentences(std::string_view doc, const std::string& doc_id = {}) {
    const auto spans = sentence_spans(doc);
    const auto pieces = pretokenize(doc);
    std::vector<Chunk> chunks;
    std::size_t prev_end = 0;
    std::size_t piece = 0;
    for (std::size_t s = 0; s < spans.size(); ++s) {
        const auto [b, e] = spans[s];
        while (piece < pieces.size() && pieces[piece].end <= b) {
            ++piece;
        }
        const std::size_t token_begin = piece;
        while (piece < pieces.size() && pieces[piece].begin < e) {
            ++piece;
        }
        Chunk c;
        c.chunk_id = static_cast<int>(s);
        c.doc_id = doc_id;
        c.token_begin = token_begin;
        c.token_end = piece;
        c.text = std::string(doc.substr(b, e - b));
        c.leading = std::string(doc.substr(prev_end, b - prev_end));
        if (s + 1 == spans.size()) {
            c.trailing = std::string(doc.substr(e));
        }
        // A piece like " word" straddles the gap; let the next sentence rescan it.
        if (piece > token_begin && pieces[piece - 1].end > e) {
            --piece;
        }
        chunks.push_back(std::move(c));
        prev_end = e;
    }
    return chunks;
}

enum class ChunkerKind { fixed, sentence, document };

inline std::string to_string(ChunkerKind kind) {
    switch (kind) {
    case ChunkerKind::fixed: return "fixed";
    case ChunkerKind::sentence: return "sent";
    case ChunkerKind::document: return "doc";
    }
    return "unknown";
}

inline ChunkerKind parse_chunker(std::string_view name) {
    if (name == "fixed") return ChunkerKind::fixed;
    if (name == "sent" || name == "sentence") return ChunkerKind::sentence;
    if (name == "doc" || name == "document") return ChunkerKind::document;
    throw UsageError("unknown chunker '" + std::string(name) + "' (expected fixed|sent|doc)");
}

struct ChunkerConfig {
    ChunkerKind kind = ChunkerKind::fixed;
    std::size_t size = 500;
    std::size_t overlap = 50;
};

/// Default top-k per granularity: 3 fixed-size chunks, 20 sentences, 1 document.
inline std::size_t default_k(ChunkerKind kind) noexcept {
    switch (kind) {
    case ChunkerKind::fixed: return 3;
    case ChunkerKind::sentence: return 20;
    case ChunkerKind::document: return 1;
    }
    return 1;
}

/// Chunk every document of a sample. chunk_ids run consecutively across the
/// whole context; document boundaries are recorded as the separator in
/// `leading` of each document's first chunk.
inline std::vector<Chunk> chunk_context(const QASample& sample, const ChunkerConfig& config) {
    std::vector<Chunk> all;
    for (std::size_t d = 0; d < sample.documents.size(); ++d) {
        const auto& doc = sample.documents[d];
        std::vector<Chunk> chunks;
        switch (config.kind) {
        case ChunkerKind::fixed: chunks = chunk_fixed_text(doc.text, config.size, config.overlap, doc.doc_id); break;
        case ChunkerKind::sentence: chunks = chunk_sentences(doc.text, doc.doc_id); break;
        case ChunkerKind::document:
            chunks.push_back(Chunk{0, doc.doc_id, 0, pretokenize(doc.text).size(), doc.text, {}, {}});
            break;
        }
        if (d > 0 && !chunks.empty()) {
            chunks.front().leading.insert(0, kDocumentSeparator);
        }
        for (auto& c : chunks) {
            c.chunk_id = static_cast<int>(all.size());
            all.push_back(std::move(c));
        }
    }
    return all;
}

// ----------------------------------------------------------------------------
// Embeddings and scoring

struct Embedding {
    std::vector<double> values;

    std::size_t dim() const noexcept { return values.size(); }
};

class Embedder {
public:
    virtual ~Embedder() = default;
    virtual std::vector<Embedding> embed_batch(const std::vector<std::string>& texts) const = 0;

    Embedding embed(const std::string& text) const { return embed_batch({text}).at(0); }
};

/// Lowercased alphanumeric/underscore runs; the unit of the hashed embedder.
inline std::vector<std::string> embedding_terms(std::string_view text) {
    std::vector<std::string> terms;
    std::string current;
    for (const char c : text) {
        if (detail::is_word_char(c)) {
            current += (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c;
        } else if (!current.empty()) {
            terms.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) {
        terms.push_back(std::move(current));
    }
    return terms;
}

/// Deterministic built-in encoder: term counts hashed into `dim` buckets, L2-normalized.
/// Word order is ignored. Text without terms maps to the zero vector.
class HashEmbedder final : public Embedder {
public:
    static constexpr std::size_t kDefaultDim = 256;
    static constexpr std::uint64_t kDefaultSeed = 0x243F6A8885A308D3ull;

    explicit HashEmbedder(std::size_t dim = kDefaultDim, std::uint64_t seed = kDefaultSeed)
        : dim_(dim), seed_(seed) {
        if (dim_ == 0) {
            throw UsageError("embedding dimension must be positive");
        }
    }

    std::vector<Embedding> embed_batch(const std::vector<std::string>& texts) const override {
        std::vector<Embedding> out;
        out.reserve(texts.size());
        for (const auto& text : texts) {
            out.push_back(embed_one(text));
        }
        return out;
    }

    std::size_t bucket(std::string_view term) const noexcept {
        std::uint64_t h = 0xcbf29ce484222325ull ^ seed_;
        for (const char c : term) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        return static_cast<std::size_t>(h % dim_);
    }

private:
    Embedding embed_one(std::string_view text) const {
        Embedding e{std::vector<double>(dim_, 0.0)};
        for (const auto& term : embedding_terms(text)) {
            e.values[bucket(term)] += 1.0;
        }
        double norm = 0.0;
        for (const double v : e.values) {
            norm += v * v;
        }
        if (norm > 0.0) {
            const double inv = 1.0 / std::sqrt(norm);
            for (double& v : e.values) {
                v *= inv;
            }
        }
        return e;
    }

    std::size_t dim_;
    std::uint64_t seed_;
};

/// Cosine similarity.
inline double score(const Embedding& chunk_vec, const Embedding& query_vec) {
    if (chunk_vec.dim() != query_vec.dim()) {
        throw DataError("embedding dimensions differ: " + std::to_string(chunk_vec.dim()) + " vs " +
                        std::to_string(query_vec.dim()));
    }
    double dot = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (std::size_t i = 0; i < chunk_vec.dim(); ++i) {
        dot += chunk_vec.values[i] * query_vec.values[i];
        na += chunk_vec.values[i] * chunk_vec.values[i];
        nb += query_vec.values[i] * query_vec.values[i];
    }
    if (na == 0.0 || nb == 0.0) {
        throw DataError("cosine similarity of a zero vector");
    }
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

/// Indices of the k largest scores, ascending. Ties prefer the lower index.
inline std::vector<std::size_t> select_top_k(const std::vector<double>& scores, std::size_t k) {
    if (scores.empty()) {
        throw UsageError("select_top_k on an empty score list");
    }
    if (k < 1) {
        throw UsageError("select_top_k requires k >= 1");
    }
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t take = std::min(k, scores.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (scores[a] != scores[b]) {
                              return scores[a] > scores[b];
                          }
                          return a < b;
                      });
    order.resize(take);
    std::sort(order.begin(), order.end());
    return order;
}

// ----------------------------------------------------------------------------
// Augmentation

struct MaskedContext {
    std::string context;
    std::vector<int> selected_chunk_ids;
};

/// Rebuild the context from `chunks` keeping the selected ones verbatim. With
/// masking, each maximal run of unselected chunks becomes one mask token;
/// without it, unselected runs are dropped.
inline MaskedContext mask_augment(const std::vector<Chunk>& chunks, const std::vector<std::size_t>& selected,
                                  std::string_view mask_token = kMaskToken, bool use_masking = true) {
    std::vector<bool> keep(chunks.size(), false);
    for (const auto idx : selected) {
        if (idx >= chunks.size()) {
            throw UsageError("selected chunk index " + std::to_string(idx) + " out of range");
        }
        keep[idx] = true;
    }
    MaskedContext out;
    if (selected.empty()) {
        log_warning("empty chunk selection; augmented context is a single mask");
    }
    bool first_piece = true;
    // Leading whitespace is dropped only where an earlier chunk was removed.
    auto emit = [&](std::size_t index, std::string_view body, const std::string& trailing) {
        if (!first_piece || index == 0) {
            out.context += chunks[index].leading;
        }
        out.context += body;
        out.context += trailing;
        first_piece = false;
    };
    std::size_t i = 0;
    while (i < chunks.size()) {
        if (keep[i]) {
            emit(i, chunks[i].text, chunks[i].trailing);
            out.selected_chunk_ids.push_back(chunks[i].chunk_id);
            ++i;
            continue;
        }
        std::size_t run_end = i;
        while (run_end < chunks.size() && !keep[run_end]) {
            ++run_end;
        }
        if (use_masking) {
            emit(i, mask_token, chunks[run_end - 1].trailing);
        }
        i = run_end;
    }
    return out;
}

enum class QueryMode { question, answer, gold_evidence };

inline std::string to_string(QueryMode mode) {
    switch (mode) {
    case QueryMode::question: return "question";
    case QueryMode::answer: return "answer";
    case QueryMode::gold_evidence: return "gold_evidence";
    }
    return "unknown";
}

inline QueryMode parse_query_mode(std::string_view name) {
    if (name == "question" || name == "q" || name == "Q") return QueryMode::question;
    if (name == "answer" || name == "a" || name == "A") return QueryMode::answer;
    if (name == "gold_evidence" || name == "gold") return QueryMode::gold_evidence;
    throw UsageError("unknown query mode '" + std::string(name) + "' (expected question|answer|gold_evidence)");
}

struct AugmentedSample {
    std::string original_id;
    std::vector<int> selected_chunk_ids;
    std::string augmented_context;
    std::string question;
    std::vector<std::string> answers;
    QueryMode query_mode = QueryMode::question;
};

/// Original record plus the augmentation fields.
inline nlohmann::json to_json(const QASample& original, const AugmentedSample& aug) {
    auto j = to_json(original);
    j["augmented_context"] = aug.augmented_context;
    j["selected_chunk_ids"] = aug.selected_chunk_ids;
    j["query_mode"] = to_string(aug.query_mode);
    return j;
}

inline std::pair<QASample, AugmentedSample> augmented_from_json(const nlohmann::json& j) {
    auto sample = sample_from_json(j);
    AugmentedSample aug;
    try {
        aug.original_id = sample.id;
        aug.augmented_context = j.at("augmented_context").get<std::string>();
        aug.selected_chunk_ids = j.at("selected_chunk_ids").get<std::vector<int>>();
        aug.query_mode = parse_query_mode(j.at("query_mode").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw DataError("sample '" + sample.id + "' lacks augmentation fields: " + e.what());
    } catch (const UsageError& e) {
        throw DataError("sample '" + sample.id + "': " + e.what());
    }
    aug.question = sample.question;
    aug.answers = sample.answers;
    return {std::move(sample), std::move(aug)};
}

/// Reorder documents from least to most relevant to `query`; stable on ties.
inline QASample rerank_documents(const QASample& sample, const std::string& query, const Embedder& embedder) {
    if (sample.documents.size() <= 1) {
        return sample;
    }
    std::vector<std::string> texts{query};
    for (const auto& d : sample.documents) {
        texts.push_back(d.text);
    }
    const auto vecs = embedder.embed_batch(texts);
    std::vector<double> scores;
    for (std::size_t i = 1; i < vecs.size(); ++i) {
        scores.push_back(score(vecs[i], vecs[0]));
    }
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    QASample out = sample;
    for (std::size_t i = 0; i < order.size(); ++i) {
        out.documents[i] = sample.documents[order[i]];
    }
    return out;
}

namespace detail {

inline bool evidence_matches(const std::string& chunk_text, const std::vector<std::string>& evidence) {
    const auto chunk = normalize_whitespace(chunk_text);
    if (chunk.empty()) {
        return false;
    }
    for (const auto& ev : evidence) {
        const auto e = normalize_whitespace(ev);
        if (e.empty()) {
            continue;
        }
        if (chunk.find(e) != std::string::npos || e.find(chunk) != std::string::npos) {
            return true;
        }
    }
    return false;
}

} // namespace detail

/// Augment one sample. Retrieval modes score chunks against the question or
/// the first answer; gold_evidence selects chunks matching an evidence string.
inline AugmentedSample augment_sample(const QASample& sample, const ChunkerConfig& chunker, QueryMode mode,
                                      std::size_t k, const Embedder& embedder, bool use_masking = true) {
    const auto chunks = chunk_context(sample, chunker);
    std::vector<std::size_t> selected;
    if (mode == QueryMode::gold_evidence) {
        if (!sample.evidence || sample.evidence->empty()) {
            throw DataError("gold_evidence augmentation requires evidence; sample '" + sample.id + "' has none");
        }
        for (std::size_t i = 0; i < chunks.size(); ++i) {
            if (detail::evidence_matches(chunks[i].text, *sample.evidence)) {
                selected.push_back(i);
            }
        }
    } else if (!chunks.empty()) {
        std::vector<std::string> texts;
        texts.reserve(chunks.size() + 1);
        texts.push_back(mode == QueryMode::question ? sample.question : sample.answers.at(0));
        for (const auto& c : chunks) {
            texts.push_back(c.text);
        }
        const auto vecs = embedder.embed_batch(texts);
        if (vecs.size() != texts.size()) {
            throw TransportError("encoder returned " + std::to_string(vecs.size()) + " vectors for " +
                                 std::to_string(texts.size()) + " texts");
        }
        std::vector<double> scores;
        scores.reserve(chunks.size());
        for (std::size_t i = 1; i < vecs.size(); ++i) {
            scores.push_back(score(vecs[i], vecs[0]));
        }
        selected = select_top_k(scores, k);
    }
    auto masked = mask_augment(chunks, selected, kMaskToken, use_masking);
    return AugmentedSample{sample.id, std::move(masked.selected_chunk_ids), std::move(masked.context),
                           sample.question, sample.answers, mode};
}

inline std::vector<std::pair<QASample, AugmentedSample>> augment_dataset(const std::vector<QASample>& samples,
                                                                         const ChunkerConfig& chunker,
                                                                         QueryMode mode, std::size_t k,
                                                                         const Embedder& embedder,
                                                                         bool use_masking = true) {
    std::vector<std::pair<QASample, AugmentedSample>> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        out.emplace_back(s, augment_sample(s, chunker, mode, k, embedder, use_masking));
    }
    return out;
}

} // namespace focustune
