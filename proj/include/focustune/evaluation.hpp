#pragma once

// Decoding, answer metrics, evaluation modes (plain / retrieval / rerank),
// position sweeps and sentence-level attention heatmaps.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "focustune/error.hpp"
#include "focustune/model.hpp"
#include "focustune/retrieval.hpp"
#include "focustune/text_corpus.hpp"

namespace focustune {

// ----------------------------------------------------------------------------
// Decoding

/// Argmax continuation of `prompt`, stopping at the first EOS (not emitted) or
/// after `max_new_tokens`. Returns the generated ids.
inline TokenSeq greedy_decode_ids(const ModelParams& params, const TokenSeq& prompt, std::size_t max_new_tokens) {
    if (prompt.empty()) {
        throw UsageError("greedy_decode needs a non-empty prompt");
    }
    if (prompt.size() > static_cast<std::size_t>(params.config.max_len)) {
        throw UsageError("prompt length " + std::to_string(prompt.size()) + " exceeds max_len " +
                         std::to_string(params.config.max_len));
    }
    TokenSeq seq = prompt;
    TokenSeq generated;
    for (std::size_t step = 0; step < max_new_tokens; ++step) {
        if (seq.size() >= static_cast<std::size_t>(params.config.max_len)) {
            break;
        }
        const auto out = forward(params, seq);
        Eigen::Index best = 0;
        out.logits.row(out.logits.rows() - 1).maxCoeff(&best);
        const auto id = static_cast<TokenId>(best);
        if (id == params.config.eos_id) {
            break;
        }
        generated.ids.push_back(id);
        seq.ids.push_back(id);
    }
    return generated;
}

inline std::string greedy_decode(const ModelParams& params, const TokenSeq& prompt, std::size_t max_new_tokens,
                                 const Vocab& vocab) {
    return normalize_whitespace(detokenize(greedy_decode_ids(params, prompt, max_new_tokens), vocab));
}

// ----------------------------------------------------------------------------
// Metrics

/// Lowercase, strip ASCII punctuation, drop "a" / "an" / "the", collapse whitespace.
inline std::string normalize_answer(std::string_view text, bool drop_articles = true) {
    std::string lowered;
    lowered.reserve(text.size());
    for (const char c : text) {
        const auto u = static_cast<unsigned char>(c);
        if (u < 0x80 && std::ispunct(u)) {
            continue;
        }
        lowered += static_cast<char>(u < 0x80 ? std::tolower(u) : u);
    }
    std::istringstream words(lowered);
    std::string word;
    std::string out;
    while (words >> word) {
        if (drop_articles && (word == "a" || word == "an" || word == "the")) {
            continue;
        }
        if (!out.empty()) {
            out += ' ';
        }
        out += word;
    }
    return out;
}

/// F1 tokens: normalized like exact match, but articles count as tokens.
inline std::vector<std::string> answer_tokens(std::string_view text) {
    std::vector<std::string> toks;
    std::istringstream in(normalize_answer(text, false));
    std::string w;
    while (in >> w) {
        toks.push_back(w);
    }
    return toks;
}

inline int exact_match(std::string_view prediction, const std::vector<std::string>& golds) {
    if (golds.empty()) {
        throw UsageError("exact_match needs at least one gold answer");
    }
    const auto p = normalize_answer(prediction);
    for (const auto& g : golds) {
        if (p == normalize_answer(g)) {
            return 1;
        }
    }
    return 0;
}

/// Multiset token-overlap F1 on normalized tokens.
inline double token_f1(std::string_view prediction, std::string_view gold) {
    const auto p = answer_tokens(prediction);
    const auto g = answer_tokens(gold);
    if (p.empty() || g.empty()) {
        return p.empty() && g.empty() ? 1.0 : 0.0;
    }
    std::unordered_map<std::string, int> counts;
    for (const auto& t : g) {
        ++counts[t];
    }
    int common = 0;
    for (const auto& t : p) {
        auto it = counts.find(t);
        if (it != counts.end() && it->second > 0) {
            --it->second;
            ++common;
        }
    }
    if (common == 0) {
        return 0.0;
    }
    const double precision = static_cast<double>(common) / static_cast<double>(p.size());
    const double recall = static_cast<double>(common) / static_cast<double>(g.size());
    return 2.0 * precision * recall / (precision + recall);
}

inline double max_token_f1(std::string_view prediction, const std::vector<std::string>& golds) {
    double best = 0.0;
    for (const auto& g : golds) {
        best = std::max(best, token_f1(prediction, g));
    }
    return best;
}

// ----------------------------------------------------------------------------
// Multiple choice

/// Mean log-probability of the option tokens following the prompt.
inline double option_log_likelihood(const ModelParams& params, const TokenSeq& prompt, const TokenSeq& option) {
    if (option.empty()) {
        throw DataError("empty answer option");
    }
    TokenSeq seq = prompt;
    seq.ids.insert(seq.ids.end(), option.ids.begin(), option.ids.end());
    const auto out = forward(params, seq);
    double total = 0.0;
    for (std::size_t k = 0; k < option.size(); ++k) {
        const auto t = static_cast<Eigen::Index>(prompt.size() + k - 1);
        const auto row = out.logits.row(t);
        const double mx = row.maxCoeff();
        const double lse = mx + std::log((row.array() - mx).exp().sum());
        total += row(option.ids[k]) - lse;
    }
    return total / static_cast<double>(option.size());
}

/// Index of the best-scoring option; ties go to the lower index.
inline std::size_t argmax_first(const std::vector<double>& scores) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i) {
        if (scores[i] > scores[best]) {
            best = i;
        }
    }
    return best;
}

inline std::size_t mc_choice(const ModelParams& params, const QASample& sample, const Vocab& vocab) {
    if (!sample.options || sample.options->empty()) {
        throw DataError("sample '" + sample.id + "' has no options");
    }
    const auto prompt = tokenize(build_prompt(sample), vocab);
    std::vector<double> scores;
    for (const auto& o : *sample.options) {
        scores.push_back(option_log_likelihood(params, prompt, tokenize(" " + o, vocab)));
    }
    return argmax_first(scores);
}

inline int mc_accuracy(const ModelParams& params, const QASample& sample, const Vocab& vocab) {
    const auto choice = mc_choice(params, sample, vocab);
    return exact_match((*sample.options)[choice], sample.answers);
}

// ----------------------------------------------------------------------------
// Evaluation modes

enum class EvalMode { plain, retrieval, rerank };

inline std::string to_string(EvalMode mode) {
    switch (mode) {
    case EvalMode::plain: return "plain";
    case EvalMode::retrieval: return "retrieval";
    case EvalMode::rerank: return "rerank";
    }
    return "unknown";
}

inline EvalMode parse_eval_mode(std::string_view name) {
    if (name == "plain") return EvalMode::plain;
    if (name == "retrieval") return EvalMode::retrieval;
    if (name == "rerank") return EvalMode::rerank;
    throw UsageError("unknown eval mode '" + std::string(name) + "' (expected plain|retrieval|rerank)");
}

/// Context the model sees under `mode`: all documents, the single top-scored
/// document, or all documents from least to most relevant.
inline QASample prepare_for_mode(const QASample& sample, EvalMode mode, const Embedder& embedder) {
    switch (mode) {
    case EvalMode::plain: return sample;
    case EvalMode::rerank: return rerank_documents(sample, sample.question, embedder);
    case EvalMode::retrieval: {
        if (sample.documents.size() <= 1) {
            return sample;
        }
        std::vector<std::string> texts{sample.question};
        for (const auto& d : sample.documents) {
            texts.push_back(d.text);
        }
        const auto vecs = embedder.embed_batch(texts);
        if (vecs.size() != texts.size()) {
            throw TransportError("encoder returned " + std::to_string(vecs.size()) + " vectors for " +
                                 std::to_string(texts.size()) + " texts");
        }
        std::vector<double> scores;
        for (std::size_t i = 1; i < vecs.size(); ++i) {
            scores.push_back(score(vecs[i], vecs[0]));
        }
        QASample out = sample;
        out.documents = {sample.documents[select_top_k(scores, 1).front()]};
        return out;
    }
    }
    return sample;
}

struct SampleRecord {
    std::string id;
    std::string prediction;
    std::vector<std::string> golds;
    double em = 0.0;
    double f1 = 0.0;
    std::optional<double> accuracy;
};

struct EvalReport {
    std::string dataset;
    EvalMode mode = EvalMode::plain;
    std::vector<SampleRecord> records;
    std::map<std::string, double> aggregates;
    std::optional<std::size_t> n_documents;
    std::optional<std::size_t> gold_position;

    void finalize() {
        aggregates.clear();
        if (records.empty()) {
            return;
        }
        double em = 0.0;
        double f1 = 0.0;
        double acc = 0.0;
        std::size_t n_acc = 0;
        for (const auto& r : records) {
            em += r.em;
            f1 += r.f1;
            if (r.accuracy) {
                acc += *r.accuracy;
                ++n_acc;
            }
        }
        const auto n = static_cast<double>(records.size());
        aggregates["em"] = em / n;
        aggregates["f1"] = f1 / n;
        if (n_acc > 0) {
            aggregates["accuracy"] = acc / static_cast<double>(n_acc);
        }
    }
};

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json j{{"dataset", r.dataset}, {"mode", to_string(r.mode)}, {"aggregates", r.aggregates}};
    j["n_documents"] = r.n_documents ? nlohmann::json(*r.n_documents) : nlohmann::json(nullptr);
    j["gold_position"] = r.gold_position ? nlohmann::json(*r.gold_position) : nlohmann::json(nullptr);
    auto& recs = j["records"] = nlohmann::json::array();
    for (const auto& s : r.records) {
        nlohmann::json rec{{"id", s.id}, {"prediction", s.prediction}, {"golds", s.golds}, {"em", s.em}, {"f1", s.f1}};
        if (s.accuracy) {
            rec["accuracy"] = *s.accuracy;
        }
        recs.push_back(std::move(rec));
    }
    return j;
}

struct EvalOptions {
    EvalMode mode = EvalMode::plain;
    std::size_t max_new_tokens = 8;
};

inline SampleRecord eval_sample(const ModelParams& params, const Vocab& vocab, const QASample& sample,
                                const EvalOptions& options, const Embedder& embedder) {
    const auto prepared = prepare_for_mode(sample, options.mode, embedder);
    SampleRecord rec;
    rec.id = sample.id;
    rec.golds = sample.answers;
    if (sample.options) {
        const auto choice = mc_choice(params, prepared, vocab);
        rec.prediction = (*sample.options)[choice];
        rec.accuracy = exact_match(rec.prediction, sample.answers);
    } else {
        rec.prediction = greedy_decode(params, tokenize(build_prompt(prepared), vocab), options.max_new_tokens, vocab);
    }
    rec.em = exact_match(rec.prediction, sample.answers);
    rec.f1 = max_token_f1(rec.prediction, sample.answers);
    return rec;
}

inline EvalReport eval_dataset(const ModelParams& params, const Vocab& vocab, const std::vector<QASample>& samples,
                               const EvalOptions& options, const Embedder& embedder, std::string dataset = {}) {
    EvalReport report;
    report.dataset = std::move(dataset);
    report.mode = options.mode;
    for (const auto& s : samples) {
        report.records.push_back(eval_sample(params, vocab, s, options, embedder));
    }
    report.finalize();
    return report;
}

/// One report per (gold position, document count) cell.
struct SweepResult {
    std::vector<std::string> position_labels;
    std::vector<std::size_t> doc_counts;
    std::vector<std::vector<double>> em; // [position][doc count]
    std::vector<EvalReport> reports;
};

/// Evaluate datasets[p][c] (position p, document count c).
inline SweepResult eval_sweep(const ModelParams& params, const Vocab& vocab,
                              const std::vector<std::vector<std::vector<QASample>>>& datasets,
                              const std::vector<std::string>& position_labels,
                              const std::vector<std::size_t>& doc_counts, const EvalOptions& options,
                              const Embedder& embedder,
                              const std::vector<std::vector<std::size_t>>& gold_positions = {}) {
    if (datasets.size() != position_labels.size()) {
        throw UsageError("sweep datasets do not match the position labels");
    }
    SweepResult out{position_labels, doc_counts, {}, {}};
    for (std::size_t p = 0; p < datasets.size(); ++p) {
        if (datasets[p].size() != doc_counts.size()) {
            throw UsageError("sweep datasets do not match the document counts");
        }
        std::vector<double> row;
        for (std::size_t c = 0; c < doc_counts.size(); ++c) {
            auto report = eval_dataset(params, vocab, datasets[p][c], options, embedder,
                                       "pos_" + position_labels[p] + "/n_" + std::to_string(doc_counts[c]));
            report.n_documents = doc_counts[c];
            if (!gold_positions.empty()) {
                report.gold_position = gold_positions.at(p).at(c);
            }
            row.push_back(report.aggregates.count("em") ? report.aggregates.at("em") : 0.0);
            out.reports.push_back(std::move(report));
        }
        out.em.push_back(std::move(row));
    }
    return out;
}

/// Rows are gold positions, columns document counts.
inline std::string sweep_csv(const std::vector<std::string>& position_labels, const std::vector<std::size_t>& doc_counts,
                             const std::vector<std::vector<double>>& values) {
    std::ostringstream out;
    out.precision(17);
    out << "position";
    for (const auto n : doc_counts) {
        out << ",n" << n;
    }
    out << '\n';
    for (std::size_t p = 0; p < position_labels.size(); ++p) {
        out << position_labels[p];
        for (std::size_t c = 0; c < doc_counts.size(); ++c) {
            out << ',' << values.at(p).at(c);
        }
        out << '\n';
    }
    return out.str();
}

// ----------------------------------------------------------------------------
// Attention heatmap

struct Heatmap {
    std::vector<double> cells;       // mean attention per sentence
    std::vector<std::string> labels; // "<doc_id>:s<k>"
    std::vector<std::size_t> token_counts;
    std::vector<bool> gold;          // sentence belongs to the gold document
    double row_sum = 0.0;            // full attention row before averaging
    double context_mass = 0.0;       // attention on tokens inside any sentence
    std::size_t query_index = 0;

    std::optional<std::size_t> argmax() const {
        if (cells.empty()) {
            return std::nullopt;
        }
        return static_cast<std::size_t>(std::max_element(cells.begin(), cells.end()) - cells.begin());
    }
};

struct HeatmapOptions {
    std::optional<int> layer; // default: last layer
    std::optional<int> head;  // default: mean over heads
};

/// Attention row of the last prompt token (the position that emits the first
/// answer token), averaged over each context sentence's tokens.
inline Heatmap attention_heatmap(const ModelParams& params, const Vocab& vocab, const QASample& sample,
                                 const HeatmapOptions& options = {}) {
    const std::string prompt = build_prompt(sample);
    const auto [tokens, pieces] = tokenize_with_offsets(prompt, vocab);
    const int n_layers = params.config.n_layers;
    const int layer = options.layer.value_or(n_layers - 1);
    if (layer < 0 || layer >= n_layers) {
        throw UsageError("heatmap layer " + std::to_string(layer) + " outside [0, " + std::to_string(n_layers) + ")");
    }
    if (options.head && (*options.head < 0 || *options.head >= params.config.n_heads)) {
        throw UsageError("heatmap head outside [0, n_heads)");
    }
    const auto out = forward(params, tokens, true);
    const auto& maps = out.attention[static_cast<std::size_t>(layer)];
    const auto q = static_cast<Eigen::Index>(tokens.size() - 1);
    Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(tokens.size()));
    if (options.head) {
        row = maps[static_cast<std::size_t>(*options.head)].row(q);
    } else {
        for (const auto& m : maps) {
            row += m.row(q);
        }
        row /= static_cast<double>(maps.size());
    }

    Heatmap hm;
    hm.query_index = static_cast<std::size_t>(q);
    hm.row_sum = row.sum();
    std::size_t doc_offset = kPromptArticle.size();
    std::vector<bool> counted(pieces.size(), false);
    for (std::size_t d = 0; d < sample.documents.size(); ++d) {
        if (d > 0) {
            doc_offset += kDocumentSeparator.size();
        }
        const auto& doc = sample.documents[d];
        const auto spans = sentence_spans(doc.text);
        for (std::size_t s = 0; s < spans.size(); ++s) {
            const std::size_t begin = doc_offset + spans[s].first;
            const std::size_t end = doc_offset + spans[s].second;
            double sum = 0.0;
            std::size_t count = 0;
            for (std::size_t t = 0; t < pieces.size(); ++t) {
                if (pieces[t].begin < end && pieces[t].end > begin) {
                    sum += row(static_cast<Eigen::Index>(t));
                    ++count;
                    if (!counted[t]) {
                        counted[t] = true;
                        hm.context_mass += row(static_cast<Eigen::Index>(t));
                    }
                }
            }
            hm.cells.push_back(count > 0 ? sum / static_cast<double>(count) : 0.0);
            hm.token_counts.push_back(count);
            hm.labels.push_back(doc.doc_id + ":s" + std::to_string(s));
            hm.gold.push_back(doc.is_gold);
        }
        doc_offset += doc.text.size();
    }
    return hm;
}

inline std::string heatmap_csv(const Heatmap& hm) {
    std::ostringstream out;
    out.precision(17);
    out << "index,value,tokens\n";
    for (std::size_t i = 0; i < hm.cells.size(); ++i) {
        out << i << ',' << hm.cells[i] << ',' << hm.token_counts[i] << '\n';
    }
    return out.str();
}

inline std::string heatmap_labels(const Heatmap& hm) {
    std::string out;
    for (std::size_t i = 0; i < hm.labels.size(); ++i) {
        out += hm.labels[i];
        out += hm.gold[i] ? "\tgold\n" : "\t-\n";
    }
    return out;
}

} // namespace focustune
