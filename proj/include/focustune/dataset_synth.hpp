#pragma once

// Multi-document samples with a controlled gold position, gold-position
// sweeps, and the key/value needle corpus used for desk-scale training.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "focustune/error.hpp"
#include "focustune/rng.hpp"
#include "focustune/text_corpus.hpp"

namespace focustune {

struct SynthSpec {
    std::size_t n_documents = 50;
    std::optional<std::size_t> gold_position; // nullopt: seeded uniform position
    std::uint64_t seed = 0;
    std::vector<Document> distractor_pool;
};

/// Embed `gold_doc` among distractors drawn without replacement from the pool.
/// Pool entries equal to the gold text, or containing the answer string, are
/// never drawn.
inline QASample synth_multidoc(const std::string& id, const std::string& question, const std::string& answer,
                               const Document& gold_doc, const SynthSpec& spec) {
    if (spec.n_documents < 1) {
        throw UsageError("n_documents must be at least 1");
    }
    if (spec.gold_position && *spec.gold_position >= spec.n_documents) {
        throw UsageError("gold_position " + std::to_string(*spec.gold_position) + " outside [0, " +
                         std::to_string(spec.n_documents) + ")");
    }
    std::vector<const Document*> eligible;
    for (const auto& d : spec.distractor_pool) {
        if (d.text == gold_doc.text || (!answer.empty() && d.text.find(answer) != std::string::npos)) {
            continue;
        }
        eligible.push_back(&d);
    }
    const std::size_t needed = spec.n_documents - 1;
    if (eligible.size() < needed) {
        throw DataError("distractor pool too small for sample '" + id + "': need " + std::to_string(needed) +
                        ", have " + std::to_string(eligible.size()) + " eligible");
    }
    Rng rng(spec.seed);
    const auto picks = rng.sample_without_replacement(eligible.size(), needed);
    const std::size_t gold_at =
        spec.gold_position ? *spec.gold_position : static_cast<std::size_t>(rng.uniform_below(spec.n_documents));

    QASample s;
    s.id = id;
    s.question = question;
    s.answers = {answer};
    for (const auto p : picks) {
        Document d = *eligible[p];
        d.is_gold = false;
        s.documents.push_back(std::move(d));
    }
    Document gold = gold_doc;
    gold.is_gold = true;
    s.documents.insert(s.documents.begin() + static_cast<std::ptrdiff_t>(gold_at), std::move(gold));
    return s;
}

/// One dataset per requested gold position. Each base sample contributes the
/// same n_documents - 1 distractors (drawn from its non-gold documents) to
/// every position, so positions differ only in where the gold document sits.
inline std::vector<std::vector<QASample>> position_sweep_set(const std::vector<QASample>& base_samples,
                                                             std::size_t n_documents,
                                                             const std::vector<std::size_t>& positions,
                                                             std::uint64_t seed) {
    if (n_documents < 1) {
        throw UsageError("n_documents must be at least 1");
    }
    for (const auto p : positions) {
        if (p >= n_documents) {
            throw UsageError("sweep position " + std::to_string(p) + " outside [0, " + std::to_string(n_documents) +
                             ")");
        }
    }
    std::vector<std::vector<QASample>> out(positions.size());
    for (std::size_t i = 0; i < base_samples.size(); ++i) {
        const auto& base = base_samples[i];
        const auto gold_idx = base.gold_index();
        if (!gold_idx) {
            throw DataError("sweep base sample '" + base.id + "' has no gold document");
        }
        std::vector<const Document*> distractors;
        for (const auto& d : base.documents) {
            if (!d.is_gold) {
                distractors.push_back(&d);
            }
        }
        if (distractors.size() < n_documents - 1) {
            throw DataError("sweep base sample '" + base.id + "' has " + std::to_string(distractors.size()) +
                            " distractors, need " + std::to_string(n_documents - 1));
        }
        Rng rng(derive_seed(seed, i));
        const auto picks = rng.sample_without_replacement(distractors.size(), n_documents - 1);
        for (std::size_t pi = 0; pi < positions.size(); ++pi) {
            QASample s = base;
            s.documents.clear();
            for (const auto p : picks) {
                s.documents.push_back(*distractors[p]);
            }
            s.documents.insert(s.documents.begin() + static_cast<std::ptrdiff_t>(positions[pi]),
                               base.documents[*gold_idx]);
            out[pi].push_back(std::move(s));
        }
    }
    return out;
}

/// Gold index for a fractional position: 0 -> first, 1 -> last.
inline std::size_t position_from_fraction(double fraction, std::size_t n_documents) {
    if (n_documents == 0) {
        throw UsageError("n_documents must be at least 1");
    }
    const double clamped = std::clamp(fraction, 0.0, 1.0);
    return static_cast<std::size_t>(std::llround(clamped * static_cast<double>(n_documents - 1)));
}

/// Writes <dir>/sweep/pos_<p>/test.jsonl for each position.
inline void write_sweep(const std::filesystem::path& dir, const std::vector<std::size_t>& positions,
                        const std::vector<std::vector<QASample>>& datasets) {
    for (std::size_t i = 0; i < positions.size(); ++i) {
        const auto pos_dir = dir / "sweep" / ("pos_" + std::to_string(positions[i]));
        std::filesystem::create_directories(pos_dir);
        write_samples((pos_dir / "test.jsonl").string(), datasets.at(i));
    }
}

// ----------------------------------------------------------------------------
// Needle corpus

struct NeedleSpec {
    std::size_t n_train = 256;
    std::size_t n_test = 64;
    std::size_t n_documents = 16;
    std::size_t n_keys = 160;
    std::size_t n_values = 64;
    double test_key_fraction = 0.25;
    std::size_t filler_words = 1; // filler words before each key/value pair
    std::optional<std::size_t> gold_position;
    std::uint64_t seed = 0;
};

struct NeedleCorpus {
    std::vector<QASample> train;
    std::vector<QASample> test;
    std::vector<std::string> train_keys;
    std::vector<std::string> test_keys;
};

namespace detail {

inline constexpr const char* kFillerWords[] = {"alpha", "bravo",  "delta",  "echo",   "golf",  "hotel",
                                               "india", "juliet", "kilo",   "lima",   "oscar", "papa",
                                               "romeo", "sierra", "tango",  "victor", "xray",  "zulu"};

inline std::string padded_name(const std::string& prefix, std::size_t index, std::size_t count) {
    std::string digits = std::to_string(index);
    const std::size_t width = std::to_string(count > 0 ? count - 1 : 0).size();
    while (digits.size() < width) {
        digits.insert(digits.begin(), '0');
    }
    return prefix + digits;
}

inline std::string needle_fact(const std::string& key, const std::string& value) {
    return key + " = " + value;
}

} // namespace detail

/// Key/value lookup samples: every document states one "key = value" fact, the
/// question asks for the gold document's key. Keys and values are distinct
/// within a sample, so the answer occurs only in the gold document. Train and
/// test use disjoint key sets.
inline NeedleCorpus synth_needle_corpus(const NeedleSpec& spec) {
    if (spec.n_documents < 1) {
        throw UsageError("n_documents must be at least 1");
    }
    if (spec.n_values < spec.n_documents) {
        throw UsageError("n_values must be at least n_documents");
    }
    if (spec.gold_position && *spec.gold_position >= spec.n_documents) {
        throw UsageError("gold_position outside [0, n_documents)");
    }
    const auto n_test_keys =
        static_cast<std::size_t>(std::ceil(spec.test_key_fraction * static_cast<double>(spec.n_keys)));
    if (n_test_keys < spec.n_documents || spec.n_keys - n_test_keys < spec.n_documents) {
        throw UsageError("n_keys too small: each split needs at least n_documents distinct keys");
    }

    NeedleCorpus corpus;
    std::vector<std::string> keys;
    for (std::size_t i = 0; i < spec.n_keys; ++i) {
        keys.push_back(detail::padded_name("key_", i, spec.n_keys));
    }
    std::vector<std::string> values;
    for (std::size_t i = 0; i < spec.n_values; ++i) {
        values.push_back(detail::padded_name("value_", i, spec.n_values));
    }
    Rng split_rng(derive_seed(spec.seed, 0xC0FFEEull));
    split_rng.shuffle(keys);
    corpus.test_keys.assign(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(n_test_keys));
    corpus.train_keys.assign(keys.begin() + static_cast<std::ptrdiff_t>(n_test_keys), keys.end());

    constexpr std::size_t n_filler = std::size(detail::kFillerWords);
    auto make_split = [&](const std::vector<std::string>& split_keys, std::size_t count, std::uint64_t stream,
                          const std::string& prefix) {
        std::vector<QASample> samples;
        samples.reserve(count);
        for (std::size_t i = 0; i < count; ++i) {
            Rng rng(derive_seed(spec.seed, stream * 0x100000000ull + i));
            const auto key_picks = rng.sample_without_replacement(split_keys.size(), spec.n_documents);
            const auto value_picks = rng.sample_without_replacement(values.size(), spec.n_documents);
            const std::size_t gold_at = spec.gold_position
                                            ? *spec.gold_position
                                            : static_cast<std::size_t>(rng.uniform_below(spec.n_documents));
            QASample s;
            s.id = prefix + std::to_string(i);
            // Draw index 0 is the gold fact; it is moved to gold_at below.
            for (std::size_t d = 0; d < spec.n_documents; ++d) {
                std::string text;
                for (std::size_t f = 0; f < spec.filler_words; ++f) {
                    text += detail::kFillerWords[rng.uniform_below(n_filler)];
                    text += ' ';
                }
                text += detail::needle_fact(split_keys[key_picks[d]], values[value_picks[d]]);
                text += " .";
                s.documents.push_back(Document{"doc" + std::to_string(d), std::move(text), d == 0});
            }
            const std::string& gold_key = split_keys[key_picks[0]];
            const std::string& gold_value = values[value_picks[0]];
            std::rotate(s.documents.begin(), s.documents.begin() + 1,
                        s.documents.begin() + static_cast<std::ptrdiff_t>(gold_at) + 1);
            s.question = "what is " + gold_key + " ?";
            s.answers = {gold_value};
            s.evidence = std::vector<std::string>{detail::needle_fact(gold_key, gold_value)};
            samples.push_back(std::move(s));
        }
        return samples;
    };
    corpus.train = make_split(corpus.train_keys, spec.n_train, 1, "train-");
    corpus.test = make_split(corpus.test_keys, spec.n_test, 2, "test-");
    return corpus;
}

/// Vocabulary covering every piece of the given samples' training texts
/// (original and masked variants), plus each word with and without a leading
/// space so that re-ordered contexts stay in vocabulary.
inline Vocab corpus_vocab(const std::vector<QASample>& samples, const std::vector<std::string>& extra_texts = {}) {
    std::vector<std::string> texts = extra_texts;
    for (const auto& s : samples) {
        texts.push_back(build_training_text(join_documents(s.documents), s.question, s.answers.at(0)));
        std::string masked(kMaskToken);
        for (const auto& d : s.documents) {
            masked += std::string(kDocumentSeparator) + d.text + std::string(kDocumentSeparator) +
                      std::string(kMaskToken);
        }
        texts.push_back(build_training_text(masked, s.question, s.answers.at(0)));
        for (const auto& a : s.answers) {
            texts.push_back(" " + a);
        }
        if (s.options) {
            for (const auto& o : *s.options) {
                texts.push_back(" " + o);
            }
        }
    }
    std::vector<std::string> words;
    for (const auto& t : texts) {
        for (const auto& p : pretokenize(t)) {
            if (!p.text.empty() && p.text.front() == ' ' && p.text.size() > 1) {
                words.push_back(p.text.substr(1));
            } else if (!p.text.empty() && !detail::is_space(p.text.front())) {
                words.push_back(" " + p.text);
            }
        }
    }
    texts.insert(texts.end(), words.begin(), words.end());
    return Vocab::from_texts(texts);
}

} // namespace focustune
