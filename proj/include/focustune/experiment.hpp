#pragma once

// Desk-scale experiment driver: needle corpus -> training pairs -> training
// per (variant, seed) -> gold-position x document-count evaluation grid.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "focustune/dataset_synth.hpp"
#include "focustune/evaluation.hpp"
#include "focustune/model.hpp"
#include "focustune/retrieval.hpp"
#include "focustune/training.hpp"

namespace focustune {

struct PairOptions {
    ChunkerConfig chunker{ChunkerKind::document, 500, 50};
    QueryMode query = QueryMode::gold_evidence;
    std::size_t k = 1;
};

/// Encode originals and, when the ablation uses augmentation, their augmented
/// counterparts. Masking follows ablation.use_masking.
inline std::vector<TrainingPair> build_training_pairs(const std::vector<QASample>& samples, const Vocab& vocab,
                                                      const Ablation& ablation, const Embedder& embedder,
                                                      const PairOptions& options = {}) {
    std::vector<TrainingPair> pairs;
    pairs.reserve(samples.size());
    for (const auto& s : samples) {
        TrainingPair p;
        p.id = s.id;
        p.original = encode_training(s, vocab);
        if (ablation.use_da) {
            const auto aug = augment_sample(s, options.chunker, options.query, options.k, embedder, ablation.use_masking);
            p.augmented = encode_training(aug.augmented_context, s.question, s.answers.at(0), vocab);
        }
        pairs.push_back(std::move(p));
    }
    return pairs;
}

/// Pairs read back from an augmented JSONL file.
inline std::vector<TrainingPair> pairs_from_augmented(const std::vector<std::pair<QASample, AugmentedSample>>& data,
                                                      const Vocab& vocab, bool with_augmented) {
    std::vector<TrainingPair> pairs;
    for (const auto& [s, aug] : data) {
        TrainingPair p;
        p.id = s.id;
        p.original = encode_training(s, vocab);
        if (with_augmented) {
            p.augmented = encode_training(aug.augmented_context, s.question, s.answers.at(0), vocab);
        }
        pairs.push_back(std::move(p));
    }
    return pairs;
}

struct ToyConfig {
    NeedleSpec corpus;
    ModelConfig model;
    TrainConfig train;
    PairOptions pairs;
    std::size_t train_documents = 16;    // documents per training sample (upper bound)
    std::size_t min_train_documents = 0; // > 0: each training sample keeps a seeded count in [min, max]
    std::vector<std::size_t> doc_counts{4, 8, 16};
    std::vector<double> position_fractions{0.0, 0.25, 0.5, 0.75, 1.0};
    std::vector<std::string> position_labels{"0", "1/4", "1/2", "3/4", "last"};
    std::size_t max_new_tokens = 4;
};

/// Desk-scale defaults. Training samples carry 2 to 16 documents so every
/// evaluated position has a trained position embedding.
inline ToyConfig default_toy_config() {
    ToyConfig c;
    c.corpus.n_train = 16000;
    c.corpus.n_test = 32;
    c.corpus.n_documents = 16;
    c.corpus.n_keys = 64;
    c.corpus.n_values = 32;
    c.train_documents = 16;
    c.min_train_documents = 2;
    c.model.d_model = 64;
    c.model.n_layers = 2;
    c.model.n_heads = 4;
    c.model.max_len = 192;
    c.model.window = 24;
    c.train.steps = 1500;
    c.train.batch_size = 8;
    c.train.optimizer.lr = 1e-3;
    return c;
}

struct ToyData {
    NeedleCorpus corpus;
    Vocab vocab;
    // sweep[p][c]: test samples with gold at position p among doc_counts[c] documents
    std::vector<std::vector<std::vector<QASample>>> sweep;
    std::vector<std::vector<std::size_t>> gold_positions;
};

inline ToyData make_toy_data(const ToyConfig& cfg, std::uint64_t seed) {
    NeedleSpec spec = cfg.corpus;
    spec.seed = seed;
    ToyData data{synth_needle_corpus(spec), Vocab(std::vector<std::string>{}), {}, {}};
    if (cfg.train_documents != spec.n_documents) {
        // Same seed, same key split; only the training context length changes.
        NeedleSpec train_spec = spec;
        train_spec.n_documents = cfg.train_documents;
        train_spec.n_test = 0;
        data.corpus.train = synth_needle_corpus(train_spec).train;
    }
    if (cfg.min_train_documents > 0 && cfg.min_train_documents < cfg.train_documents) {
        Rng rng(derive_seed(seed, 0xD0C5));
        const auto span = cfg.train_documents - cfg.min_train_documents + 1;
        for (auto& s : data.corpus.train) {
            const auto keep = cfg.min_train_documents + static_cast<std::size_t>(rng.uniform_below(span));
            auto picks = rng.sample_without_replacement(s.documents.size() - 1, keep - 1);
            const auto gold = *s.gold_index();
            std::vector<bool> kept(s.documents.size(), false);
            kept[gold] = true;
            for (const auto p : picks) {
                kept[p < gold ? p : p + 1] = true;
            }
            std::vector<Document> docs;
            for (std::size_t d = 0; d < s.documents.size(); ++d) {
                if (kept[d]) {
                    docs.push_back(s.documents[d]);
                }
            }
            s.documents = std::move(docs);
        }
    }
    auto all = data.corpus.train;
    all.insert(all.end(), data.corpus.test.begin(), data.corpus.test.end());
    data.vocab = corpus_vocab(all);
    data.sweep.resize(cfg.position_fractions.size());
    data.gold_positions.resize(cfg.position_fractions.size());
    for (std::size_t c = 0; c < cfg.doc_counts.size(); ++c) {
        const auto n = cfg.doc_counts[c];
        std::vector<std::size_t> positions;
        for (const double f : cfg.position_fractions) {
            positions.push_back(position_from_fraction(f, n));
        }
        auto sets = position_sweep_set(data.corpus.test, n, positions, derive_seed(seed, 0x5EE9 + n));
        for (std::size_t p = 0; p < positions.size(); ++p) {
            data.sweep[p].push_back(std::move(sets[p]));
            data.gold_positions[p].push_back(positions[p]);
        }
    }
    return data;
}

struct ToyRun {
    std::string variant;
    std::uint64_t seed = 0;
    TrainResult train;
    SweepResult plain;
    std::optional<SweepResult> rerank;

    static double grid_mean(const SweepResult& r) {
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& row : r.em) {
            for (const double v : row) {
                sum += v;
                ++n;
            }
        }
        return n > 0 ? sum / static_cast<double>(n) : 0.0;
    }
};

inline ModelParams toy_init(const ToyConfig& cfg, const Vocab& vocab, std::uint64_t seed) {
    ModelConfig mc = cfg.model;
    mc.vocab_size = static_cast<int>(vocab.size());
    mc.eos_id = vocab.eos_id();
    mc.seed = derive_seed(seed, 0x1417);
    return init_params(mc);
}

/// Train one variant on one seed and evaluate it on the sweep grid.
inline ToyRun run_toy(const ToyConfig& cfg, const ToyData& data, const Ablation& ablation, std::uint64_t seed,
                      bool with_rerank, const Embedder& embedder,
                      const std::function<void(const StepLog&)>& on_step = {}) {
    ToyRun run;
    run.variant = ablation.label();
    run.seed = seed;
    const auto pairs = build_training_pairs(data.corpus.train, data.vocab, ablation, embedder, cfg.pairs);
    TrainConfig tc = cfg.train;
    tc.ablation = ablation;
    tc.seed = seed;
    run.train = train_loop(tc, toy_init(cfg, data.vocab, seed), pairs, on_step);
    EvalOptions eo{EvalMode::plain, cfg.max_new_tokens};
    run.plain = eval_sweep(run.train.final_params, data.vocab, data.sweep, cfg.position_labels, cfg.doc_counts, eo,
                           embedder, data.gold_positions);
    if (with_rerank) {
        eo.mode = EvalMode::rerank;
        run.rerank = eval_sweep(run.train.final_params, data.vocab, data.sweep, cfg.position_labels, cfg.doc_counts,
                                eo, embedder, data.gold_positions);
    }
    return run;
}

/// Element-wise mean of several grids of equal shape.
inline std::vector<std::vector<double>> mean_grid(const std::vector<const SweepResult*>& results) {
    if (results.empty()) {
        return {};
    }
    auto acc = results.front()->em;
    for (auto& row : acc) {
        for (auto& v : row) {
            v = 0.0;
        }
    }
    for (const auto* r : results) {
        for (std::size_t p = 0; p < acc.size(); ++p) {
            for (std::size_t c = 0; c < acc[p].size(); ++c) {
                acc[p][c] += r->em.at(p).at(c);
            }
        }
    }
    for (auto& row : acc) {
        for (auto& v : row) {
            v /= static_cast<double>(results.size());
        }
    }
    return acc;
}

} // namespace focustune
