#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "test_util.hpp"

using namespace focustune;
using namespace testutil;

TEST(SelectTopK, MatchesSortOracleOnRandomScores) {
    Rng rng(1);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + rng.uniform_below(40);
        const std::size_t k = 1 + rng.uniform_below(n + 3);
        std::vector<double> scores(n);
        for (auto& s : scores) {
            // Coarse values so ties are common.
            s = static_cast<double>(rng.uniform_below(8)) / 4.0 - 1.0;
        }
        std::vector<std::size_t> oracle(n);
        std::iota(oracle.begin(), oracle.end(), std::size_t{0});
        std::stable_sort(oracle.begin(), oracle.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
        oracle.resize(std::min(k, n));
        std::sort(oracle.begin(), oracle.end());
        ASSERT_EQ(select_top_k(scores, k), oracle) << "trial " << trial;
    }
}

TEST(SelectTopK, RejectsEmptyAndZeroK) {
    EXPECT_THROW(select_top_k({}, 1), UsageError);
    EXPECT_THROW(select_top_k({1.0}, 0), UsageError);
}

TEST(ChunkFixed, SpansFor950TokenDocument) {
    TokenSeq doc;
    doc.ids.assign(950, 7);
    const auto chunks = chunk_fixed(doc, 500, 50);
    ASSERT_EQ(chunks.size(), 2u);
    EXPECT_EQ(chunks[0].token_begin, 0u);
    EXPECT_EQ(chunks[0].token_end, 500u);
    EXPECT_EQ(chunks[1].token_begin, 450u);
    EXPECT_EQ(chunks[1].token_end, 950u);
}

TEST(ChunkFixed, ShortDocumentIsOneChunkAndBadOverlapRejected) {
    TokenSeq doc;
    doc.ids.assign(10, 7);
    const auto chunks = chunk_fixed(doc, 500, 50);
    ASSERT_EQ(chunks.size(), 1u);
    EXPECT_EQ(chunks[0].token_end, 10u);
    EXPECT_THROW(chunk_fixed(doc, 50, 50), UsageError);
}

TEST(ChunkFixedText, ChunksCarryTheirPieces) {
    const std::string text = "one two three four five six seven";
    const auto chunks = chunk_fixed_text(text, 3, 1);
    ASSERT_EQ(chunks.size(), 3u);
    EXPECT_EQ(chunks[0].text, "one two three");
    EXPECT_EQ(chunks[1].text, " three four five");
    EXPECT_EQ(chunks[2].text, " five six seven");
}

TEST(ChunkSentences, ReassemblesDocument) {
    const std::string doc = "First one.  Second? Third!\nFourth";
    const auto chunks = chunk_sentences(doc, "x");
    ASSERT_EQ(chunks.size(), 4u);
    std::string joined;
    for (const auto& c : chunks) {
        joined += c.leading + c.text + c.trailing;
    }
    EXPECT_EQ(joined, doc);
    EXPECT_EQ(chunks[1].text, "Second?");
}

TEST(MaskAugment, CollapseRuleOnAllThreeChunkSubsets) {
    const auto sample = make_sample("s", {"alpha .", "bravo .", "charlie ."}, 0, "q ?", "a");
    const auto chunks = chunk_context(sample, ChunkerConfig{ChunkerKind::document, 500, 50});
    ASSERT_EQ(chunks.size(), 3u);
    const std::string mask(kMaskToken);
    for (unsigned subset = 0; subset < 8; ++subset) {
        std::vector<std::size_t> selected;
        for (std::size_t i = 0; i < 3; ++i) {
            if (subset & (1u << i)) {
                selected.push_back(i);
            }
        }
        // Oracle: kept documents verbatim, each maximal removed run -> one mask, "\n\n" between parts.
        std::vector<std::string> parts;
        bool in_run = false;
        for (std::size_t i = 0; i < 3; ++i) {
            if (subset & (1u << i)) {
                parts.push_back(sample.documents[i].text);
                in_run = false;
            } else if (!in_run) {
                parts.push_back(mask);
                in_run = true;
            }
        }
        std::string expected;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            expected += (i ? "\n\n" : "") + parts[i];
        }
        const auto got = mask_augment(chunks, selected);
        EXPECT_EQ(got.context, expected) << "subset " << subset;
        EXPECT_EQ(got.selected_chunk_ids.size(), selected.size());

        // Without masking the removed runs vanish.
        std::string kept;
        for (std::size_t i : selected) {
            kept += (kept.empty() ? "" : "\n\n") + sample.documents[i].text;
        }
        EXPECT_EQ(mask_augment(chunks, selected, kMaskToken, false).context, kept) << "subset " << subset;
    }
}

TEST(MaskAugment, AllSelectedReproducesContext) {
    const auto sample = make_sample("s", {"one . two .", "three . four ."}, 1, "q", "a");
    for (const auto kind : {ChunkerKind::sentence, ChunkerKind::document}) {
        const auto chunks = chunk_context(sample, ChunkerConfig{kind, 500, 50});
        std::vector<std::size_t> all(chunks.size());
        std::iota(all.begin(), all.end(), std::size_t{0});
        EXPECT_EQ(mask_augment(chunks, all).context, join_documents(sample.documents));
    }
}

TEST(HashEmbedder, DeterministicNormalizedOrderInvariant) {
    const HashEmbedder e;
    const auto a = e.embed("The key is blue");
    const auto b = e.embed("blue is the KEY");
    EXPECT_EQ(a.values, b.values);
    double norm = 0.0;
    for (const double v : a.values) {
        norm += v * v;
    }
    EXPECT_NEAR(norm, 1.0, 1e-12);
    EXPECT_NEAR(score(a, b), 1.0, 1e-12);
    EXPECT_THROW(score(e.embed("apple"), e.embed("")), DataError);
}

TEST(Score, MatchesExtendedPrecisionCosine) {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        Embedding a, b;
        long double dot = 0, na = 0, nb = 0;
        for (int i = 0; i < 16; ++i) {
            a.values.push_back(rng.normal(0.0, 1.0));
            b.values.push_back(rng.normal(0.0, 1.0));
            dot += static_cast<long double>(a.values.back()) * b.values.back();
            na += static_cast<long double>(a.values.back()) * a.values.back();
            nb += static_cast<long double>(b.values.back()) * b.values.back();
        }
        ASSERT_NEAR(score(a, b), static_cast<double>(dot / std::sqrt(na * nb)), 1e-14);
    }
    const Embedding x{{1.0, 0.0}}, y{{0.0, 3.0}};
    EXPECT_EQ(score(x, y), 0.0);
    EXPECT_EQ(score(y, y), 1.0);
    EXPECT_THROW(score(x, Embedding{{1.0}}), DataError);
}

TEST(Augment, QuestionQueryKeepsMatchingChunk) {
    auto s = make_sample("s", {"the sky is green .", "key_7 = value_3 .", "rivers run far ."}, 1, "what is key_7 ?",
                         "value_3");
    const HashEmbedder e;
    const auto aug = augment_sample(s, ChunkerConfig{ChunkerKind::document, 500, 50}, QueryMode::question, 1, e);
    EXPECT_EQ(aug.augmented_context, std::string(kMaskToken) + "\n\nkey_7 = value_3 .\n\n" + std::string(kMaskToken));
    EXPECT_EQ(aug.selected_chunk_ids, std::vector<int>{1});
}

TEST(Augment, GoldEvidenceNeedsEvidence) {
    auto s = make_sample("s", {"a .", "b ."}, 0, "q", "a");
    const HashEmbedder e;
    const ChunkerConfig doc{ChunkerKind::document, 500, 50};
    EXPECT_THROW(augment_sample(s, doc, QueryMode::gold_evidence, 1, e), DataError);
    s.evidence = std::vector<std::string>{"b ."};
    EXPECT_EQ(augment_sample(s, doc, QueryMode::gold_evidence, 1, e).augmented_context,
              std::string(kMaskToken) + "\n\nb .");
}

TEST(Augment, JsonRoundTrip) {
    auto s = make_sample("s", {"x = 1 .", "y = 2 ."}, 0, "what is x ?", "1");
    const HashEmbedder e;
    const auto aug = augment_sample(s, ChunkerConfig{ChunkerKind::sentence, 500, 50}, QueryMode::answer, 1, e);
    const auto [s2, aug2] = augmented_from_json(to_json(s, aug));
    EXPECT_EQ(s2, s);
    EXPECT_EQ(aug2.augmented_context, aug.augmented_context);
    EXPECT_EQ(aug2.selected_chunk_ids, aug.selected_chunk_ids);
    EXPECT_EQ(aug2.query_mode, QueryMode::answer);
}

TEST(Rerank, AscendingRelevanceAndSingleDocumentIdentity) {
    const HashEmbedder e;
    auto s = make_sample("s", {"key_1 key_2 value", "nothing here", "key_1 only"}, 0, "key_1 key_2", "value");
    const auto r = rerank_documents(s, s.question, e);
    EXPECT_EQ(r.documents.back().doc_id, "d0");
    EXPECT_EQ(r.documents.front().doc_id, "d1");
    auto one = make_sample("t", {"solo"}, 0, "q", "a");
    EXPECT_EQ(rerank_documents(one, one.question, e), one);
}
