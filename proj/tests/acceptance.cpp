// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace focustune;
using namespace testutil;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail += (detail.empty() ? "" : "; ") + std::string("failed: ") + what;
        }
    }
    void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

std::string fmt(double v, int precision = 3) {
    std::ostringstream s;
    s.precision(precision);
    s << v;
    return s.str();
}

void progress(const std::string& msg) {
    std::cerr << "[acceptance] " << msg << std::endl;
}

std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

// ---------------------------------------------------------------------------
// 1-4, 7: properties

Outcome gradient_check() {
    Outcome o;
    const auto t0 = Clock::now();
    auto cfg = tiny_config(21);
    cfg.lora = LoraConfig{4, 8.0, {true, true, true, true}};
    auto params = init_params(cfg);
    Rng rng(21);
    randomize_lora(params, rng);
    const auto batch = random_batch(rng, 3, cfg.vocab_size, cfg.eos_id);
    GradCheckOptions go;
    go.coordinates = 200;
    go.tolerance = 1e-6;
    go.seed = 21;
    const auto report = grad_check(params, batch, Ablation{}, go);
    const double elapsed = seconds_since(t0);
    o.require(report.entries.size() >= 200, "200 coordinates sampled");
    o.require(report.max_rel_error < 1e-6, "max relative error < 1e-6");
    o.require(elapsed < 60.0, "runtime < 60 s");
    o.note("max rel err " + fmt(report.max_rel_error) + " (" + report.worst_tensor + "), " + fmt(elapsed) + " s");
    return o;
}

Outcome loss_oracles() {
    Outcome o;
    Rng rng(31);
    double worst_clm = 0.0;
    double worst_con = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        auto cfg = tiny_config(static_cast<std::uint64_t>(100 + trial));
        cfg.init_std = 0.5;
        const auto params = init_params(cfg);
        const auto batch = random_batch(rng, 3, cfg.vocab_size, cfg.eos_id);
        long double expected = 0.0L;
        for (const auto* branch : {&batch.originals, &batch.augmented}) {
            for (const auto& s : *branch) {
                expected += nll_oracle(forward(params, s.tokens).logits, s);
            }
        }
        worst_clm = std::max(worst_clm, std::abs(clm_loss(params, batch) - static_cast<double>(expected)));

        const Eigen::Index n = 2 + static_cast<Eigen::Index>(rng.uniform_below(7));
        const Eigen::Index d = 4 + static_cast<Eigen::Index>(rng.uniform_below(12));
        Mat h(n, d), ha(n, d);
        for (Eigen::Index i = 0; i < h.size(); ++i) {
            h.data()[i] = rng.normal(0.0, 1.0);
            ha.data()[i] = rng.normal(0.0, 1.0);
        }
        const double lit = rng.normal(1.0, 1.0);
        worst_con = std::max(worst_con, std::abs(contrastive_loss(h, ha, lit).loss -
                                                 static_cast<double>(contrastive_oracle(h, ha, lit))));
    }
    o.require(worst_clm < 1e-10, "clm within 1e-10");
    o.require(worst_con < 1e-10, "contrastive within 1e-10");

    // Orthogonal branches: every cosine is 0, so each row is uniform over N = 4.
    Mat h = Mat::Zero(4, 8);
    Mat ha = Mat::Zero(4, 8);
    for (int i = 0; i < 4; ++i) {
        h(i, i) = 1.0;
        ha(i, 4 + i) = 1.0;
    }
    const double anchor = 2.0 * 4.0 * std::log(4.0);
    const double con = contrastive_loss(h, ha, std::log(1.0 / 0.07)).loss;
    o.require(std::abs(con - anchor) <= 4 * std::numeric_limits<double>::epsilon() * anchor,
              "uniform-similarity anchor");

    auto cfg = tiny_config(33);
    auto params = init_params(cfg);
    params.head.setZero();
    PairedBatch b;
    std::size_t positions = 0;
    for (int i = 0; i < 4; ++i) {
        b.originals.push_back(make_sequence(random_tokens(rng, 9 + i, cfg.vocab_size, cfg.eos_id), cfg.eos_id));
        positions += b.originals.back().tokens.size() - 1;
    }
    const double clm_anchor = static_cast<double>(positions) * std::log(static_cast<double>(cfg.vocab_size));
    const double clm = clm_loss(params, b);
    o.require(std::abs(clm - clm_anchor) <= 1e-12 * clm_anchor, "uniform-logit anchor");
    o.note("worst clm " + fmt(worst_clm) + ", worst contrastive " + fmt(worst_con) + ", anchors " + fmt(con - anchor) +
           " / " + fmt(clm - clm_anchor));
    return o;
}

Outcome lora_noop() {
    Outcome o;
    Rng rng(41);
    double worst_noop = 0.0;
    double worst_merge = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        auto cfg = tiny_config(static_cast<std::uint64_t>(200 + trial));
        const auto base_cfg = cfg;
        cfg.lora = LoraConfig{4, 16.0, {true, true, true, true}};
        auto adapted = init_params(cfg);
        auto base = adapted;
        base.config = base_cfg;
        for (auto& l : base.layers) {
            l.lora = {};
        }
        const auto tokens = random_tokens(rng, 8 + rng.uniform_below(40), cfg.vocab_size);
        worst_noop =
            std::max(worst_noop, (forward(adapted, tokens).logits - forward(base, tokens).logits).cwiseAbs().maxCoeff());

        randomize_lora(adapted, rng, 0.2);
        ForwardOptions merged;
        merged.merge_lora = true;
        worst_merge = std::max(worst_merge, (forward(adapted, tokens).logits -
                                             forward(adapted, tokens, false, merged).logits)
                                                .cwiseAbs()
                                                .maxCoeff());
    }
    o.require(worst_noop < 1e-10, "no-op at init");
    o.require(worst_merge < 1e-10, "merged equals adapter path");
    o.note("init diff " + fmt(worst_noop) + ", merge diff " + fmt(worst_merge));
    return o;
}

Outcome retrieval_properties() {
    Outcome o;
    Rng rng(51);
    int top_k_bad = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + rng.uniform_below(40);
        const std::size_t k = 1 + rng.uniform_below(n + 3);
        std::vector<double> scores(n);
        for (auto& s : scores) {
            s = static_cast<double>(rng.uniform_below(8)) / 4.0 - 1.0;
        }
        std::vector<std::size_t> oracle(n);
        std::iota(oracle.begin(), oracle.end(), std::size_t{0});
        std::stable_sort(oracle.begin(), oracle.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
        oracle.resize(std::min(k, n));
        std::sort(oracle.begin(), oracle.end());
        top_k_bad += select_top_k(scores, k) != oracle;
    }
    o.require(top_k_bad == 0, std::to_string(top_k_bad) + " top-k mismatches");

    TokenSeq doc;
    doc.ids.assign(950, 7);
    const auto chunks = chunk_fixed(doc, 500, 50);
    o.require(chunks.size() == 2 && chunks[0].token_begin == 0 && chunks[0].token_end == 500 &&
                  chunks[1].token_begin == 450 && chunks[1].token_end == 950,
              "950-token spans");

    const auto sample = make_sample("s", {"alpha .", "bravo .", "charlie ."}, 0, "q ?", "a");
    const auto doc_chunks = chunk_context(sample, ChunkerConfig{ChunkerKind::document, 500, 50});
    const std::string mask(kMaskToken);
    int subsets_ok = 0;
    for (unsigned subset = 0; subset < 8; ++subset) {
        std::vector<std::size_t> selected;
        std::string expected;
        bool in_run = false;
        for (std::size_t i = 0; i < 3; ++i) {
            const bool keep = subset & (1u << i);
            if (keep) {
                selected.push_back(i);
            }
            if (keep || !in_run) {
                expected += (expected.empty() ? "" : "\n\n") + (keep ? sample.documents[i].text : mask);
            }
            in_run = !keep;
        }
        subsets_ok += mask_augment(doc_chunks, selected).context == expected;
    }
    o.require(subsets_ok == 8, "mask collapse rule");
    o.note("top-k 1000/1000 trials checked, mask subsets " + std::to_string(subsets_ok) + "/8");
    return o;
}

Outcome window_reachability() {
    Outcome o;
    auto cfg = tiny_config(71);
    cfg.n_layers = 1;
    cfg.window = 8;
    const auto params = init_params(cfg);
    Rng rng(71);
    const auto out = forward(params, random_tokens(rng, 64, cfg.vocab_size), true);
    std::size_t outside = 0;
    std::size_t nonzero = 0;
    for (const auto& head : out.attention.at(0)) {
        for (Eigen::Index i = 0; i < 64; ++i) {
            for (Eigen::Index j = 0; j <= i; ++j) {
                if (i - j >= 8) {
                    ++outside;
                    nonzero += head(i, j) != 0.0;
                }
            }
        }
    }
    o.require(nonzero == 0, std::to_string(nonzero) + " non-zero weights outside the window");

    int mismatches = 0;
    for (int trial = 0; trial < 500; ++trial) {
        const int w = 1 + static_cast<int>(rng.uniform_below(12));
        const int layers = 1 + static_cast<int>(rng.uniform_below(4));
        const std::size_t len = 1 + rng.uniform_below(64);
        const std::size_t i = rng.uniform_below(len);
        const std::size_t j = rng.uniform_below(i + 1);
        mismatches += reachability(w, layers, len, i, j) != bfs_reachable(w, layers, len, i, j);
    }
    o.require(mismatches == 0, std::to_string(mismatches) + " reachability mismatches");
    o.note(std::to_string(outside) + " out-of-window weights all zero, BFS agrees on 500 configs");
    return o;
}

// ---------------------------------------------------------------------------
// 5, 6, 8, 10: toy-scale training runs

struct VariantRuns {
    std::vector<ToyRun> runs;
    double seconds = 0.0;

    double mean_plain() const {
        double s = 0.0;
        for (const auto& r : runs) {
            s += ToyRun::grid_mean(r.plain);
        }
        return s / static_cast<double>(runs.size());
    }
    double mean_rerank() const {
        double s = 0.0;
        for (const auto& r : runs) {
            s += ToyRun::grid_mean(*r.rerank);
        }
        return s / static_cast<double>(runs.size());
    }
    std::vector<std::vector<double>> grid() const {
        std::vector<const SweepResult*> ptrs;
        for (const auto& r : runs) {
            ptrs.push_back(&r.plain);
        }
        return mean_grid(ptrs);
    }
};

struct ToySuite {
    ToyConfig cfg = default_toy_config();
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::vector<ToyData> data;
    std::map<std::string, VariantRuns> variants;
    std::map<std::string, std::string> seed1_logs; // metrics log text of seed 1, per variant
};

std::string log_text(const std::vector<StepLog>& log) {
    std::string s;
    for (const auto& step : log) {
        s += to_json(step).dump() + "\n";
    }
    return s;
}

void run_variant(ToySuite& suite, const std::string& name, const Ablation& ablation, bool rerank,
                 const fs::path& out) {
    const HashEmbedder embedder;
    auto& v = suite.variants[name];
    const auto t0 = Clock::now();
    for (std::size_t i = 0; i < suite.seeds.size(); ++i) {
        const auto seed = suite.seeds[i];
        const auto ts = Clock::now();
        v.runs.push_back(run_toy(suite.cfg, suite.data[i], ablation, seed, rerank, embedder));
        const auto& r = v.runs.back();
        const auto text = log_text(r.train.log);
        std::ofstream(out / ("metrics_" + name + "_s" + std::to_string(seed) + ".jsonl")) << text;
        if (seed == suite.seeds.front()) {
            suite.seed1_logs[name] = text;
        }
        progress(name + " seed " + std::to_string(seed) + ": em " + fmt(ToyRun::grid_mean(r.plain)) +
                 (r.rerank ? ", rerank em " + fmt(ToyRun::grid_mean(*r.rerank)) : "") + " (" + fmt(seconds_since(ts)) +
                 " s)");
    }
    v.seconds = seconds_since(t0);
}

Outcome directional_main(ToySuite& suite, const fs::path& out) {
    run_variant(suite, "vanilla", Ablation::vanilla(), false, out);
    run_variant(suite, "full", Ablation{}, true, out);
    const auto& van = suite.variants.at("vanilla");
    const auto& full = suite.variants.at("full");
    const double runtime = van.seconds + full.seconds;
    const double gap = full.mean_plain() - van.mean_plain();
    Outcome o;
    o.require(gap >= 0.05, "full - vanilla >= 5 EM points");
    o.require(full.mean_rerank() >= full.mean_plain(), "rerank does not reduce EM");
    o.require(runtime < 15 * 60, "runtime < 15 min");
    o.note("vanilla " + fmt(van.mean_plain()) + ", full " + fmt(full.mean_plain()) + ", full+rerank " +
           fmt(full.mean_rerank()) + ", gap " + fmt(100 * gap) + " pts, " + fmt(runtime / 60.0) + " min");
    return o;
}

Outcome ablation_order(ToySuite& suite, const fs::path& out) {
    Outcome o;
    const double full = suite.variants.at("full").mean_plain();
    o.note("full " + fmt(full));
    for (const std::string name : {"-contra", "-masking"}) {
        run_variant(suite, name, Ablation::parse({name}), false, out);
        const double m = suite.variants.at(name).mean_plain();
        o.require(full >= m, "full >= " + name);
        o.note(name + " " + fmt(m));
    }
    return o;
}

// Rerun of the seed-1 full model, shared by the sweep and determinism checks.
struct Rerun {
    ToyRun first;
    ToyRun second;
    fs::path ckpt_a;
    fs::path ckpt_b;
};

Outcome sweep_grid(ToySuite& suite, Rerun& rerun, const fs::path& out) {
    Outcome o;
    const auto& full = suite.variants.at("full");
    const auto& cfg = suite.cfg;
    for (const auto& [name, v] : suite.variants) {
        std::ofstream(out / ("sweep_" + name + ".csv")) << sweep_csv(cfg.position_labels, cfg.doc_counts, v.grid());
    }
    const std::string csv = sweep_csv(cfg.position_labels, cfg.doc_counts, full.grid());
    o.require(full.grid().size() == 5 && full.grid().front().size() == 3, "5 x 3 grid");

    const HashEmbedder embedder;
    const auto ts = Clock::now();
    rerun.first = full.runs.front();
    rerun.second = run_toy(cfg, suite.data.front(), Ablation{}, suite.seeds.front(), false, embedder);
    progress("full seed 1 rerun (" + fmt(seconds_since(ts)) + " s)");
    auto again = full;
    again.runs.front().plain = rerun.second.plain;
    const std::string csv_again = sweep_csv(cfg.position_labels, cfg.doc_counts, again.grid());
    o.require(csv_again == csv, "grid identical on rerun");
    o.note("grid written to " + (out / "sweep_full.csv").string() + ", rerun identical: " +
           (csv_again == csv ? "yes" : "no"));
    return o;
}

Outcome determinism(const ToySuite& suite, Rerun& rerun, const fs::path& out) {
    Outcome o;
    rerun.ckpt_a = out / "determinism_a.ckpt";
    rerun.ckpt_b = out / "determinism_b.ckpt";
    save_checkpoint(rerun.ckpt_a.string(), rerun.first.train.final_params);
    save_checkpoint(rerun.ckpt_b.string(), rerun.second.train.final_params);
    const auto log_b = log_text(rerun.second.train.log);
    std::ofstream(out / "determinism_b.jsonl") << log_b;
    const auto a = read_bytes(rerun.ckpt_a);
    const auto b = read_bytes(rerun.ckpt_b);
    o.require(suite.seed1_logs.at("full") == log_b, "metrics logs bitwise identical");
    o.require(!a.empty() && a == b, "checkpoints bitwise identical");
    o.note(std::to_string(rerun.second.train.log.size()) + " log lines, " + std::to_string(a.size()) +
           " checkpoint bytes compared");
    return o;
}

// ---------------------------------------------------------------------------
// 9: attention heatmap on an overfit model

// Every question asks the same key, so the training set cannot be fit by
// memorising question -> answer and the answer must be read from the gold document.
void fix_question_key(std::vector<QASample>& samples, const std::string& fixed) {
    for (auto& s : samples) {
        const std::string prefix = "what is ";
        const std::string key = s.question.substr(prefix.size(), s.question.size() - prefix.size() - 2);
        auto rename = [&](std::string& t) {
            if (const auto p = t.find(key); p != std::string::npos) {
                t.replace(p, key.size(), fixed);
            }
        };
        for (auto& d : s.documents) {
            rename(d.text);
        }
        rename(s.question);
        if (s.evidence) {
            for (auto& e : *s.evidence) {
                rename(e);
            }
        }
    }
}

Outcome heatmap(const fs::path& out) {
    Outcome o;
    const auto t0 = Clock::now();
    ToyConfig cfg = default_toy_config();
    cfg.corpus.n_train = 1024;
    cfg.corpus.n_test = 4;
    cfg.corpus.n_documents = 4;
    cfg.corpus.seed = 1;
    cfg.model.window.reset();
    cfg.model.max_len = 128;
    cfg.train.steps = 4000;
    cfg.train.optimizer.lr = 3e-3;
    cfg.train.seed = 1;
    auto corpus = synth_needle_corpus(cfg.corpus);
    fix_question_key(corpus.train, "key_fixed");
    auto all = corpus.train;
    all.insert(all.end(), corpus.test.begin(), corpus.test.end());
    const auto vocab = corpus_vocab(all);

    const HashEmbedder embedder;
    const auto pairs = build_training_pairs(corpus.train, vocab, Ablation{}, embedder, cfg.pairs);
    const auto result = train_loop(cfg.train, toy_init(cfg, vocab, 1), pairs);
    progress("overfit model trained (" + fmt(seconds_since(t0)) + " s)");

    std::size_t hits = 0;
    std::size_t correct = 0;
    double worst_row = 0.0;
    std::ofstream rows(out / "heatmap_overfit.csv");
    rows << "sample,argmax_label,argmax_is_gold,row_sum\n";
    for (const auto& s : corpus.train) {
        const auto hm = attention_heatmap(result.final_params, vocab, s);
        const auto top = *hm.argmax();
        hits += hm.gold[top];
        worst_row = std::max(worst_row, std::abs(hm.row_sum - 1.0));
        correct += exact_match(greedy_decode(result.final_params, tokenize(build_prompt(s), vocab), 4, vocab),
                               s.answers);
        rows << s.id << ',' << hm.labels[top] << ',' << hm.gold[top] << ',' << hm.row_sum << '\n';
    }
    const double rate = static_cast<double>(hits) / static_cast<double>(corpus.train.size());
    o.require(rate >= 0.8, "gold argmax on >= 80% of samples");
    o.require(worst_row <= 1e-5, "row sum 1 +- 1e-5");
    o.note("gold argmax " + std::to_string(hits) + "/" + std::to_string(corpus.train.size()) + ", train em " +
           fmt(static_cast<double>(correct) / static_cast<double>(corpus.train.size())) + ", worst row-sum error " +
           fmt(worst_row) + ", " + fmt(seconds_since(t0)) + " s");
    return o;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"focustune acceptance suite"};
    std::string out_dir = "acceptance";
    std::vector<int> only;
    app.add_option("--out", out_dir, "artifact directory");
    app.add_option("--only", only, "run only these criteria (5 is required by 6, 8 and 10)");
    CLI11_PARSE(app, argc, argv);
    const fs::path out(out_dir);
    fs::create_directories(out);

    auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };
    const bool toy = wanted(5) || wanted(6) || wanted(8) || wanted(10);

    const std::map<int, std::string> titles{
        {1, "gradient check"},     {2, "loss oracles"},       {3, "LoRA no-op"},
        {4, "retrieval"},          {5, "vanilla < full <= full+rerank"},
        {6, "ablation ordering"},  {7, "window reachability"}, {8, "position sweep grid"},
        {9, "attention heatmap"},  {10, "determinism"}};
    std::map<int, Outcome> results;
    auto record = [&](int c, const std::function<Outcome()>& fn) {
        if (!wanted(c)) {
            return;
        }
        progress("criterion " + std::to_string(c) + ": " + titles.at(c));
        try {
            results[c] = fn();
        } catch (const std::exception& e) {
            results[c] = Outcome{false, std::string("exception: ") + e.what()};
        }
    };

    record(1, gradient_check);
    record(2, loss_oracles);
    record(3, lora_noop);
    record(4, retrieval_properties);
    record(7, window_reachability);
    record(9, [&] { return heatmap(out); });

    if (toy) {
        ToySuite suite;
        for (const auto seed : suite.seeds) {
            suite.data.push_back(make_toy_data(suite.cfg, seed));
        }
        Rerun rerun;
        record(5, [&] { return directional_main(suite, out); });
        const bool have_main = suite.variants.count("full") > 0 && suite.variants.count("vanilla") > 0;
        if (have_main) {
            record(6, [&] { return ablation_order(suite, out); });
            record(8, [&] { return sweep_grid(suite, rerun, out); });
            if (!rerun.second.train.log.empty()) {
                record(10, [&] { return determinism(suite, rerun, out); });
            }
        }
        for (const int c : {6, 8, 10}) {
            if (wanted(c) && !results.count(c)) {
                results[c] = Outcome{false, "prerequisite toy runs unavailable"};
            }
        }
    }

    nlohmann::json summary = nlohmann::json::object();
    bool all_pass = true;
    for (const auto& [c, r] : results) {
        std::printf("criterion %2d %-32s %s  %s\n", c, titles.at(c).c_str(), r.pass ? "PASS" : "FAIL", r.detail.c_str());
        summary[std::to_string(c)] = {{"title", titles.at(c)}, {"pass", r.pass}, {"detail", r.detail}};
        all_pass = all_pass && r.pass;
    }
    std::ofstream(out / "summary.json") << summary.dump(2) << '\n';
    return all_pass ? 0 : 1;
}
