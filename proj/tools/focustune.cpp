// focustune command-line driver.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
// Every failure prints one line on stderr:
//   focustune: error kind=<usage|data|numeric|transport> code=<n> msg=<text>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "focustune/focustune.hpp"

namespace fs = std::filesystem;
using namespace focustune;

namespace {

int exit_code(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::usage: return 1;
    case ErrorKind::data: return 2;
    case ErrorKind::numeric: return 3;
    case ErrorKind::transport: return 2;
    }
    return 2;
}

void report_error(const char* kind, int code, std::string msg) {
    for (auto& c : msg) {
        if (c == '\n' || c == '\r') {
            c = ' ';
        }
    }
    std::cerr << "focustune: error kind=" << kind << " code=" << code << " msg=" << msg << std::endl;
}

/// Flag values that were given on the command line, keyed by config key.
struct FlagSet {
    RunConfig config;
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;
    std::string config_file;

    void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& def,
             const std::string& help) {
        config.declare(key, def);
        options[key] = app->add_option(flag, values[key], help + " [" + def + "]");
    }

    /// Defaults, then the config file, then explicit flags.
    void resolve() {
        if (!config_file.empty()) {
            config.load_file(config_file);
        }
        for (const auto& [key, opt] : options) {
            if (opt->count() > 0) {
                config.set_flag(key, values[key]);
            }
        }
    }

    const std::string& operator[](const std::string& key) const { return config.get(key); }
    double num(const std::string& key) const { return config.get_double(key); }
    std::int64_t integer(const std::string& key) const { return config.get_int(key); }
    bool flag(const std::string& key) const { return config.get_bool(key); }
};

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        const auto b = item.find_first_not_of(' ');
        const auto e = item.find_last_not_of(' ');
        if (b != std::string::npos) {
            out.push_back(item.substr(b, e - b + 1));
        }
    }
    return out;
}

std::size_t as_size(const FlagSet& f, const std::string& key) {
    const auto v = f.integer(key);
    if (v < 0) {
        throw UsageError("config key '" + key + "' must be non-negative");
    }
    return static_cast<std::size_t>(v);
}

void require_file(const std::string& path) {
    if (!fs::exists(path)) {
        throw DataError("missing input: " + path);
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    out << text;
}

std::optional<std::size_t> parse_position(const std::string& v) {
    if (v == "random") {
        return std::nullopt;
    }
    try {
        return static_cast<std::size_t>(std::stoul(v));
    } catch (const std::exception&) {
        throw UsageError("gold position must be an integer or 'random', got '" + v + "'");
    }
}

Ablation parse_ablation_list(const std::string& v) { return Ablation::parse(split_list(v)); }

// ----------------------------------------------------------------------------
// synth

void declare_synth(FlagSet& f, CLI::App* app) {
    f.add(app, "--out", "out", "data", "output directory");
    f.add(app, "--n-docs", "n_docs", "50", "documents per sample");
    f.add(app, "--n-train", "n_train", "256", "training samples");
    f.add(app, "--n-test", "n_test", "64", "test samples");
    f.add(app, "--n-keys", "n_keys", "0", "needle keys (0: 4 * n_docs)");
    f.add(app, "--n-values", "n_values", "0", "needle values (0: max(64, n_docs))");
    f.add(app, "--gold-position", "gold_position", "random", "gold index or 'random'");
    f.add(app, "--seed", "seed", "0", "generation seed");
    f.add(app, "--base", "base", "", "QA samples with gold documents (multi-document mode)");
    f.add(app, "--pool", "pool", "", "distractor pool JSONL, one {doc_id, text} per line");
    f.add(app, "--sweep-docs", "sweep_docs", "", "document counts for a position sweep, e.g. 4,8,16");
    f.add(app, "--sweep-positions", "sweep_positions", "0,0.25,0.5,0.75,1", "gold positions as fractions");
}

std::vector<Document> read_pool(const std::string& path) {
    std::vector<Document> pool;
    for (const auto& j : read_jsonl(path)) {
        try {
            pool.push_back(Document{j.at("doc_id").get<std::string>(), j.at("text").get<std::string>(), false});
        } catch (const nlohmann::json::exception& e) {
            throw DataError("malformed pool record in " + path + ": " + e.what());
        }
    }
    return pool;
}

void write_sweeps(const FlagSet& f, const fs::path& out, const std::vector<QASample>& test) {
    if (f["sweep_docs"].empty()) {
        return;
    }
    std::vector<double> fractions;
    for (const auto& s : split_list(f["sweep_positions"])) {
        fractions.push_back(std::stod(s));
    }
    for (const auto& n_str : split_list(f["sweep_docs"])) {
        const auto n = static_cast<std::size_t>(std::stoul(n_str));
        std::vector<std::size_t> positions;
        for (const double fr : fractions) {
            positions.push_back(position_from_fraction(fr, n));
        }
        const auto sets = position_sweep_set(test, n, positions, derive_seed(static_cast<std::uint64_t>(f.integer("seed")), n));
        write_sweep(out / ("n_" + std::to_string(n)), positions, sets);
    }
}

int run_synth(FlagSet& f) {
    const fs::path out = f["out"];
    fs::create_directories(out);
    const auto seed = static_cast<std::uint64_t>(f.integer("seed"));
    const auto n_docs = as_size(f, "n_docs");
    std::vector<QASample> train;
    std::vector<QASample> test;
    if (!f["base"].empty()) {
        // Multi-document mode: each base sample's gold document among pool distractors.
        require_file(f["base"]);
        require_file(f["pool"]);
        const auto base = read_samples(f["base"]);
        SynthSpec spec;
        spec.n_documents = n_docs;
        spec.gold_position = parse_position(f["gold_position"]);
        spec.distractor_pool = read_pool(f["pool"]);
        for (std::size_t i = 0; i < base.size(); ++i) {
            const auto gold = base[i].gold_index();
            if (!gold) {
                throw DataError("base sample '" + base[i].id + "' has no gold document");
            }
            spec.seed = derive_seed(seed, i);
            auto s = synth_multidoc(base[i].id, base[i].question, base[i].answers.at(0), base[i].documents[*gold], spec);
            s.answers = base[i].answers;
            s.evidence = base[i].evidence;
            s.options = base[i].options;
            (i < as_size(f, "n_train") ? train : test).push_back(std::move(s));
        }
    } else {
        NeedleSpec spec;
        spec.n_documents = n_docs;
        spec.n_train = as_size(f, "n_train");
        spec.n_test = as_size(f, "n_test");
        spec.n_keys = as_size(f, "n_keys") > 0 ? as_size(f, "n_keys") : 4 * n_docs;
        spec.n_values = as_size(f, "n_values") > 0 ? as_size(f, "n_values") : std::max<std::size_t>(64, n_docs);
        spec.gold_position = parse_position(f["gold_position"]);
        spec.seed = seed;
        auto corpus = synth_needle_corpus(spec);
        train = std::move(corpus.train);
        test = std::move(corpus.test);
    }
    write_samples((out / "train.jsonl").string(), train);
    write_samples((out / "test.jsonl").string(), test);
    auto all = train;
    all.insert(all.end(), test.begin(), test.end());
    corpus_vocab(all).save((out / "vocab.json").string());
    write_sweeps(f, out, test);
    f.config.write_snapshot((out / "synth.config").string());
    std::cout << "synth: " << train.size() << " train, " << test.size() << " test samples -> " << out.string() << '\n';
    return 0;
}

// ----------------------------------------------------------------------------
// augment

void declare_augment(FlagSet& f, CLI::App* app) {
    f.add(app, "--in", "in", "data/train.jsonl", "input samples");
    f.add(app, "--out", "out", "data/train.aug.jsonl", "augmented output");
    f.add(app, "--chunker", "chunker", "fixed", "fixed | sent | doc");
    f.add(app, "--size", "size", "500", "fixed chunk size in tokens");
    f.add(app, "--overlap", "overlap", "50", "fixed chunk overlap in tokens");
    f.add(app, "--k", "k", "3", "chunks kept");
    f.add(app, "--query", "query", "question", "question | answer | gold_evidence");
    f.add(app, "--masking", "masking", "true", "replace removed runs with a mask token");
}

int run_augment(FlagSet& f) {
    require_file(f["in"]);
    const auto samples = read_samples(f["in"]);
    const ChunkerConfig chunker{parse_chunker(f["chunker"]), as_size(f, "size"), as_size(f, "overlap")};
    const auto embedder = make_embedder();
    const auto data = augment_dataset(samples, chunker, parse_query_mode(f["query"]), as_size(f, "k"), *embedder,
                                      f.flag("masking"));
    std::vector<nlohmann::json> records;
    for (const auto& [s, aug] : data) {
        records.push_back(to_json(s, aug));
    }
    const fs::path out = f["out"];
    if (out.has_parent_path()) {
        fs::create_directories(out.parent_path());
    }
    write_jsonl(out.string(), records);
    f.config.write_snapshot(out.string() + ".config");
    std::cout << "augment: " << records.size() << " samples -> " << out.string() << '\n';
    return 0;
}

// ----------------------------------------------------------------------------
// train

void declare_model(FlagSet& f, CLI::App* app) {
    f.add(app, "--d-model", "d_model", "64", "model width");
    f.add(app, "--n-layers", "n_layers", "4", "transformer layers");
    f.add(app, "--n-heads", "n_heads", "4", "attention heads");
    f.add(app, "--max-len", "max_len", "512", "maximum sequence length");
    f.add(app, "--ffn-mult", "ffn_mult", "4", "feed-forward expansion");
    f.add(app, "--window", "window", "0", "sliding attention window (0: full causal)");
    f.add(app, "--lora-rank", "lora_rank", "0", "LoRA rank (0: full fine-tuning)");
    f.add(app, "--lora-alpha", "lora_alpha", "8", "LoRA alpha");
    f.add(app, "--tau0", "tau0", "0.07", "initial contrastive temperature");
    f.add(app, "--init-std", "init_std", "0.02", "initialization scale");
}

ModelConfig model_config(const FlagSet& f, const Vocab& vocab, std::uint64_t seed) {
    ModelConfig mc;
    mc.vocab_size = static_cast<int>(vocab.size());
    mc.d_model = static_cast<int>(f.integer("d_model"));
    mc.n_layers = static_cast<int>(f.integer("n_layers"));
    mc.n_heads = static_cast<int>(f.integer("n_heads"));
    mc.max_len = static_cast<int>(f.integer("max_len"));
    mc.ffn_mult = static_cast<int>(f.integer("ffn_mult"));
    if (f.integer("window") > 0) {
        mc.window = static_cast<int>(f.integer("window"));
    }
    if (f.integer("lora_rank") > 0) {
        mc.lora = LoraConfig{static_cast<int>(f.integer("lora_rank")), f.num("lora_alpha"), {true, true, true, true}};
    }
    mc.tau0 = f.num("tau0");
    mc.init_std = f.num("init_std");
    mc.eos_id = vocab.eos_id();
    mc.seed = derive_seed(seed, 0x1417);
    mc.validate();
    return mc;
}

void declare_train(FlagSet& f, CLI::App* app) {
    f.add(app, "--train", "train", "data/train.aug.jsonl", "training samples (augmented JSONL unless vanilla)");
    f.add(app, "--vocab", "vocab", "data/vocab.json", "vocabulary");
    f.add(app, "--out", "out", "run", "output directory");
    f.add(app, "--steps", "steps", "100", "optimizer steps");
    f.add(app, "--batch", "batch_size", "8", "pairs per batch");
    f.add(app, "--lr", "lr", "2e-5", "peak learning rate");
    f.add(app, "--beta1", "beta1", "0.9", "AdamW beta1");
    f.add(app, "--beta2", "beta2", "0.999", "AdamW beta2");
    f.add(app, "--eps", "eps", "1e-8", "AdamW epsilon");
    f.add(app, "--weight-decay", "weight_decay", "0", "decoupled weight decay");
    f.add(app, "--warmup", "warmup_frac", "0.05", "warmup fraction of total steps");
    f.add(app, "--clip", "clip_norm", "1.0", "global gradient-norm clip (0: off)");
    f.add(app, "--reduction", "reduction", "sum", "sum | mean");
    f.add(app, "--ablation", "ablation", "full", "full, vanilla, or comma list of -da/-contra/-masking");
    f.add(app, "--seed", "seed", "0", "training seed");
    declare_model(f, app);
}

bool contains_mask(const std::string& text) { return text.find(kMaskToken) != std::string::npos; }

int run_train(FlagSet& f) {
    const auto ablation = parse_ablation_list(f["ablation"]);
    const auto seed = static_cast<std::uint64_t>(f.integer("seed"));
    TrainConfig tc;
    tc.steps = f.integer("steps");
    tc.batch_size = as_size(f, "batch_size");
    tc.optimizer = AdamWConfig{f.num("lr"), f.num("beta1"), f.num("beta2"), f.num("eps"), f.num("weight_decay")};
    tc.warmup_frac = f.num("warmup_frac");
    tc.clip_norm = f.num("clip_norm");
    tc.seed = seed;
    tc.ablation = ablation;
    if (f["reduction"] == "sum") {
        tc.reduction = Reduction::sum;
    } else if (f["reduction"] == "mean") {
        tc.reduction = Reduction::mean;
    } else {
        throw UsageError("reduction must be sum or mean");
    }
    require_file(f["train"]);
    require_file(f["vocab"]);
    const auto vocab = Vocab::load(f["vocab"]);
    std::vector<TrainingPair> pairs;
    if (ablation.use_da) {
        std::vector<std::pair<QASample, AugmentedSample>> data;
        for (const auto& j : read_jsonl(f["train"])) {
            data.push_back(augmented_from_json(j));
            if (!ablation.use_masking && contains_mask(data.back().second.augmented_context)) {
                throw DataError("ablation -masking but sample '" + data.back().first.id +
                                "' has mask tokens; rerun augment with --masking false");
            }
        }
        pairs = pairs_from_augmented(data, vocab, true);
    } else {
        const auto samples = read_samples(f["train"]);
        for (const auto& s : samples) {
            pairs.push_back(TrainingPair{s.id, encode_training(s, vocab), {}});
        }
    }
    const fs::path out = f["out"];
    fs::create_directories(out);
    f.config.write_snapshot((out / "train.config").string());
    std::ofstream metrics(out / "metrics.jsonl");
    const auto result = train_loop(tc, init_params(model_config(f, vocab, seed)), pairs,
                                   [&](const StepLog& s) { metrics << to_json(s).dump() << '\n'; });
    save_checkpoint((out / "final.ckpt").string(), result.final_params, &vocab);
    save_checkpoint((out / "best.ckpt").string(), result.best_params, &vocab);
    std::cout << "train: " << tc.steps << " steps, final total " << result.log.back().loss.total << ", best step "
              << result.best_step << " -> " << out.string() << '\n';
    return 0;
}

// ----------------------------------------------------------------------------
// eval / sweep / attn

Checkpoint load_with_vocab(const std::string& path) {
    require_file(path);
    auto ckpt = load_checkpoint(path);
    if (!ckpt.vocab) {
        throw DataError("checkpoint has no vocabulary: " + path);
    }
    return ckpt;
}

void declare_eval(FlagSet& f, CLI::App* app) {
    f.add(app, "--ckpt", "ckpt", "run/final.ckpt", "checkpoint");
    f.add(app, "--data", "data", "data/test.jsonl", "evaluation samples");
    f.add(app, "--mode", "mode", "plain", "plain | retrieval | rerank");
    f.add(app, "--max-new-tokens", "max_new_tokens", "16", "decoding limit");
    f.add(app, "--exclude-unanswerable", "exclude_unanswerable", "false", "skip samples whose answer is 'unanswerable'");
    f.add(app, "--out", "out", "run/eval.json", "report path");
}

int run_eval(FlagSet& f) {
    const EvalOptions eo{parse_eval_mode(f["mode"]), as_size(f, "max_new_tokens")};
    const auto ckpt = load_with_vocab(f["ckpt"]);
    require_file(f["data"]);
    auto samples = read_samples(f["data"]);
    if (f.flag("exclude_unanswerable")) {
        samples = drop_unanswerable(std::move(samples));
    }
    const auto embedder = make_embedder();
    const auto report = eval_dataset(ckpt.params, *ckpt.vocab, samples, eo, *embedder, f["data"]);
    const fs::path out = f["out"];
    if (out.has_parent_path()) {
        fs::create_directories(out.parent_path());
    }
    write_text(out, to_json(report).dump(2) + "\n");
    f.config.write_snapshot(out.string() + ".config");
    std::cout << "eval:";
    for (const auto& [k, v] : report.aggregates) {
        std::cout << ' ' << k << '=' << v;
    }
    std::cout << '\n';
    return 0;
}

void declare_sweep(FlagSet& f, CLI::App* app) {
    f.add(app, "--ckpt", "ckpt", "run/final.ckpt", "checkpoint(s), comma separated; cells average over them");
    f.add(app, "--dir", "dir", "data", "directory holding n_<N>/sweep/pos_<p>/test.jsonl");
    f.add(app, "--docs", "docs", "4,8,16", "document counts");
    f.add(app, "--positions", "positions", "0,0.25,0.5,0.75,1", "gold positions as fractions");
    f.add(app, "--mode", "mode", "plain", "plain | retrieval | rerank");
    f.add(app, "--max-new-tokens", "max_new_tokens", "16", "decoding limit");
    f.add(app, "--out", "out", "run/sweep", "output prefix (.csv and .json)");
}

int run_sweep(FlagSet& f) {
    const EvalOptions eo{parse_eval_mode(f["mode"]), as_size(f, "max_new_tokens")};
    std::vector<std::size_t> docs;
    for (const auto& s : split_list(f["docs"])) {
        docs.push_back(static_cast<std::size_t>(std::stoul(s)));
    }
    const auto fractions = split_list(f["positions"]);
    std::vector<std::vector<std::vector<QASample>>> datasets(fractions.size());
    std::vector<std::vector<std::size_t>> gold(fractions.size());
    for (std::size_t p = 0; p < fractions.size(); ++p) {
        for (const auto n : docs) {
            const auto pos = position_from_fraction(std::stod(fractions[p]), n);
            const auto path = (fs::path(f["dir"]) / ("n_" + std::to_string(n)) / "sweep" /
                               ("pos_" + std::to_string(pos)) / "test.jsonl")
                                  .string();
            require_file(path);
            datasets[p].push_back(read_samples(path));
            gold[p].push_back(pos);
        }
    }
    const auto embedder = make_embedder();
    std::vector<SweepResult> results;
    for (const auto& path : split_list(f["ckpt"])) {
        const auto ckpt = load_with_vocab(path);
        results.push_back(eval_sweep(ckpt.params, *ckpt.vocab, datasets, fractions, docs, eo, *embedder, gold));
    }
    std::vector<const SweepResult*> ptrs;
    for (const auto& r : results) {
        ptrs.push_back(&r);
    }
    const auto grid = mean_grid(ptrs);
    const std::string out = f["out"];
    if (fs::path(out).has_parent_path()) {
        fs::create_directories(fs::path(out).parent_path());
    }
    write_text(out + ".csv", sweep_csv(fractions, docs, grid));
    nlohmann::json j{{"positions", fractions}, {"doc_counts", docs}, {"em", grid}, {"mode", f["mode"]}};
    for (const auto& r : results) {
        auto& reps = j["reports"].emplace_back(nlohmann::json::array());
        for (const auto& rep : r.reports) {
            reps.push_back(to_json(rep));
        }
    }
    write_text(out + ".json", j.dump(2) + "\n");
    f.config.write_snapshot(out + ".config");
    std::cout << sweep_csv(fractions, docs, grid);
    return 0;
}

void declare_attn(FlagSet& f, CLI::App* app) {
    f.add(app, "--ckpt", "ckpt", "run/final.ckpt", "checkpoint");
    f.add(app, "--data", "data", "data/test.jsonl", "samples");
    f.add(app, "--index", "index", "0", "sample index");
    f.add(app, "--layer", "layer", "-1", "layer (-1: last)");
    f.add(app, "--head", "head", "-1", "head (-1: mean over heads)");
    f.add(app, "--out", "out", "run/heatmap", "output prefix (.csv and .labels)");
}

int run_attn(FlagSet& f) {
    const auto ckpt = load_with_vocab(f["ckpt"]);
    require_file(f["data"]);
    const auto samples = read_samples(f["data"]);
    const auto index = as_size(f, "index");
    if (index >= samples.size()) {
        throw UsageError("sample index " + std::to_string(index) + " outside dataset of " +
                         std::to_string(samples.size()));
    }
    HeatmapOptions ho;
    if (f.integer("layer") >= 0) {
        ho.layer = static_cast<int>(f.integer("layer"));
    }
    if (f.integer("head") >= 0) {
        ho.head = static_cast<int>(f.integer("head"));
    }
    const auto hm = attention_heatmap(ckpt.params, *ckpt.vocab, samples[index], ho);
    const std::string out = f["out"];
    if (fs::path(out).has_parent_path()) {
        fs::create_directories(fs::path(out).parent_path());
    }
    write_text(out + ".csv", heatmap_csv(hm));
    write_text(out + ".labels", heatmap_labels(hm));
    f.config.write_snapshot(out + ".config");
    const auto top = hm.argmax();
    std::cout << "attn: " << hm.cells.size() << " sentences, row sum " << hm.row_sum;
    if (top) {
        std::cout << ", max at " << hm.labels[*top] << (hm.gold[*top] ? " (gold)" : "");
    }
    std::cout << '\n';
    return 0;
}

// ----------------------------------------------------------------------------
// gradcheck

void declare_gradcheck(FlagSet& f, CLI::App* app) {
    f.add(app, "--seed", "seed", "0", "seed for model, batch and coordinates");
    f.add(app, "--coords", "coords", "200", "sampled coordinates");
    f.add(app, "--tolerance", "tolerance", "1e-6", "maximum relative error");
    f.add(app, "--step", "step", "1.25e-4", "smallest finite-difference step");
    f.add(app, "--ladder", "ladder", "8", "doubling steps tried per coordinate");
    f.add(app, "--vocab-size", "vocab_size", "64", "tiny model vocabulary");
    f.add(app, "--d-model", "d_model", "32", "tiny model width");
    f.add(app, "--n-layers", "n_layers", "2", "tiny model depth");
    f.add(app, "--n-heads", "n_heads", "2", "tiny model heads");
    f.add(app, "--window", "window", "0", "sliding window (0: off)");
    f.add(app, "--lora-rank", "lora_rank", "4", "LoRA rank (0: off)");
    f.add(app, "--ablation", "ablation", "full", "loss switches");
}

/// Random tiny model (LoRA B perturbed away from zero) and a random paired batch.
std::pair<ModelParams, PairedBatch> gradcheck_problem(const FlagSet& f) {
    const auto seed = static_cast<std::uint64_t>(f.integer("seed"));
    ModelConfig mc;
    mc.vocab_size = static_cast<int>(f.integer("vocab_size"));
    mc.d_model = static_cast<int>(f.integer("d_model"));
    mc.n_layers = static_cast<int>(f.integer("n_layers"));
    mc.n_heads = static_cast<int>(f.integer("n_heads"));
    mc.max_len = 32;
    mc.eos_id = 3;
    mc.seed = seed;
    if (f.integer("window") > 0) {
        mc.window = static_cast<int>(f.integer("window"));
    }
    if (f.integer("lora_rank") > 0) {
        mc.lora = LoraConfig{static_cast<int>(f.integer("lora_rank")), 8.0, {true, true, true, true}};
    }
    if (mc.vocab_size < 5) {
        throw UsageError("gradcheck needs vocab_size >= 5");
    }
    auto params = init_params(mc);
    Rng rng(derive_seed(seed, 0xB0));
    for (auto& r : parameter_refs(params)) {
        if (r.group == ParamGroup::lora) {
            for (Eigen::Index i = 0; i < r.value->size(); ++i) {
                r.value->data()[i] = rng.normal(0.0, 0.1);
            }
        }
    }
    PairedBatch batch;
    for (int i = 0; i < 3; ++i) {
        TokenSeq o;
        TokenSeq a;
        for (int t = 0; t < 10; ++t) {
            o.ids.push_back(4 + static_cast<TokenId>(rng.uniform_below(static_cast<std::uint64_t>(mc.vocab_size - 4))));
        }
        for (int t = 0; t < 6; ++t) {
            a.ids.push_back(4 + static_cast<TokenId>(rng.uniform_below(static_cast<std::uint64_t>(mc.vocab_size - 4))));
        }
        o.ids.push_back(mc.eos_id);
        a.ids.push_back(mc.eos_id);
        batch.originals.push_back(make_sequence(o, mc.eos_id));
        batch.augmented.push_back(make_sequence(a, mc.eos_id));
    }
    return {std::move(params), std::move(batch)};
}

int run_gradcheck(FlagSet& f) {
    const auto [params, batch] = gradcheck_problem(f);
    GradCheckOptions go;
    go.coordinates = as_size(f, "coords");
    go.tolerance = f.num("tolerance");
    go.step = f.num("step");
    go.ladder = as_size(f, "ladder");
    go.seed = static_cast<std::uint64_t>(f.integer("seed"));
    const auto report = grad_check(params, batch, parse_ablation_list(f["ablation"]), go);
    std::cout << "gradcheck: " << report.entries.size() << " coordinates, max relative error "
              << report.max_rel_error << " (" << report.worst_tensor << ")\n";
    if (!report.passed) {
        throw NumericError("gradient check failed: max relative error " + std::to_string(report.max_rel_error) +
                           " in '" + report.worst_tensor + "'");
    }
    return 0;
}

// ----------------------------------------------------------------------------
// pipeline

void declare_pipeline(FlagSet& f, CLI::App* app) {
    f.add(app, "--out", "out", "pipeline", "working directory");
    f.add(app, "--seed", "seed", "0", "shared seed");
    f.add(app, "--n-docs", "n_docs", "8", "documents per sample");
    f.add(app, "--n-train", "n_train", "64", "training samples");
    f.add(app, "--n-test", "n_test", "16", "test samples");
    f.add(app, "--chunker", "chunker", "doc", "augmentation chunker");
    f.add(app, "--k", "k", "1", "chunks kept");
    f.add(app, "--query", "query", "gold_evidence", "augmentation query");
    f.add(app, "--steps", "steps", "30", "optimizer steps");
    f.add(app, "--lr", "lr", "1e-3", "peak learning rate");
    f.add(app, "--ablation", "ablation", "full", "loss switches");
    f.add(app, "--d-model", "d_model", "32", "model width");
    f.add(app, "--n-layers", "n_layers", "2", "layers");
    f.add(app, "--n-heads", "n_heads", "2", "heads");
    f.add(app, "--mode", "mode", "plain", "evaluation mode");
}

/// A stage runs when any output is missing or older than an input.
bool stale(const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs) {
    auto newest_input = fs::file_time_type::min();
    for (const auto& in : inputs) {
        if (!fs::exists(in)) {
            throw DataError("missing upstream artifact: " + in.string());
        }
        newest_input = std::max(newest_input, fs::last_write_time(in));
    }
    for (const auto& out : outputs) {
        if (!fs::exists(out) || fs::last_write_time(out) < newest_input) {
            return true;
        }
    }
    return false;
}

int run_pipeline(FlagSet& f);

int run_stage(const std::string& name, std::vector<std::pair<std::string, std::string>> settings) {
    CLI::App app;
    FlagSet stage;
    if (name == "synth") declare_synth(stage, &app);
    if (name == "augment") declare_augment(stage, &app);
    if (name == "train") declare_train(stage, &app);
    if (name == "eval") declare_eval(stage, &app);
    for (const auto& [k, v] : settings) {
        stage.config.set_flag(k, v);
    }
    if (name == "synth") return run_synth(stage);
    if (name == "augment") return run_augment(stage);
    if (name == "train") return run_train(stage);
    return run_eval(stage);
}

int run_pipeline(FlagSet& f) {
    const fs::path out = f["out"];
    fs::create_directories(out);
    f.config.write_snapshot((out / "pipeline.config").string());
    const auto data = out / "data";
    const auto aug = data / "train.aug.jsonl";
    const auto run = out / "run";
    const auto ablation = parse_ablation_list(f["ablation"]);
    const std::vector<fs::path> synth_out{data / "train.jsonl", data / "test.jsonl", data / "vocab.json"};
    const std::vector<fs::path> config_in{out / "pipeline.config"};

    auto if_stale = [&](const std::string& stage, const std::vector<fs::path>& in, const std::vector<fs::path>& outs,
                        std::vector<std::pair<std::string, std::string>> settings) {
        if (stale(in, outs)) {
            run_stage(stage, std::move(settings));
        } else {
            std::cout << stage << ": up to date\n";
        }
    };
    // The pipeline config is rewritten each run; only a content change should
    // invalidate stages, so stages compare against their own snapshots instead.
    auto snapshot_changed = [&](const fs::path& snap, const std::string& wanted) {
        std::ifstream in(snap);
        if (!in.is_open()) {
            return true;
        }
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str() != wanted;
    };
    const std::string fingerprint = f.config.snapshot();
    const auto stamp = out / "pipeline.stamp";
    if (snapshot_changed(stamp, fingerprint)) {
        fs::remove_all(data);
        fs::remove_all(run);
        write_text(stamp, fingerprint);
    }

    if_stale("synth", {stamp}, synth_out,
             {{"out", data.string()}, {"n_docs", f["n_docs"]}, {"n_train", f["n_train"]}, {"n_test", f["n_test"]},
              {"seed", f["seed"]}});
    if_stale("augment", {data / "train.jsonl"}, {aug},
             {{"in", (data / "train.jsonl").string()}, {"out", aug.string()}, {"chunker", f["chunker"]},
              {"k", f["k"]}, {"query", f["query"]}, {"masking", ablation.use_masking ? "true" : "false"}});
    if_stale("train", {aug, data / "vocab.json"}, {run / "final.ckpt"},
             {{"train", (ablation.use_da ? aug : data / "train.jsonl").string()},
              {"vocab", (data / "vocab.json").string()},
              {"out", run.string()},
              {"steps", f["steps"]},
              {"lr", f["lr"]},
              {"ablation", f["ablation"]},
              {"seed", f["seed"]},
              {"d_model", f["d_model"]},
              {"n_layers", f["n_layers"]},
              {"n_heads", f["n_heads"]},
              {"max_len", "512"}});
    run_stage("eval", {{"ckpt", (run / "final.ckpt").string()},
                       {"data", (data / "test.jsonl").string()},
                       {"mode", f["mode"]},
                       {"out", (run / "eval.json").string()}});
    return 0;
}

/// CLI11 reads "--ablation -contra" as two options; glue such values to their flag.
std::vector<std::string> normalize_args(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) {
        std::string a = argv[i];
        if (a == "--ablation" && i + 1 < argc && argv[i + 1][0] == '-') {
            args.push_back(a + "=" + argv[++i]);
        } else {
            args.push_back(std::move(a));
        }
    }
    std::reverse(args.begin(), args.end());
    return args;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"focustune: long-context fine-tuning toolkit"};
    app.require_subcommand(1);
    std::string config_file;
    app.add_option("--config", config_file, "key = value configuration file (flags override it)");
    app.add_flag_callback("--quiet", [] { warnings_enabled() = false; }, "suppress warnings");

    struct Command {
        const char* name;
        const char* help;
        void (*declare)(FlagSet&, CLI::App*);
        int (*run)(FlagSet&);
    };
    const std::vector<Command> commands{
        {"synth", "generate multi-document or needle datasets", declare_synth, run_synth},
        {"augment", "retrieval-based augmentation with masking", declare_augment, run_augment},
        {"train", "fine-tune with CLM and contrastive losses", declare_train, run_train},
        {"eval", "decode and score a dataset", declare_eval, run_eval},
        {"sweep", "gold-position x document-count grid", declare_sweep, run_sweep},
        {"attn", "sentence-level attention heatmap", declare_attn, run_attn},
        {"gradcheck", "finite-difference gradient verification", declare_gradcheck, run_gradcheck},
        {"pipeline", "synth -> augment -> train -> eval", declare_pipeline, run_pipeline},
    };
    std::vector<std::unique_ptr<FlagSet>> flagsets;
    std::vector<CLI::App*> subs;
    for (const auto& c : commands) {
        auto* sub = app.add_subcommand(c.name, c.help);
        flagsets.push_back(std::make_unique<FlagSet>());
        c.declare(*flagsets.back(), sub);
        subs.push_back(sub);
    }

    try {
        app.parse(normalize_args(argc, argv));
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        report_error("usage", 1, e.what());
        return 1;
    }

    try {
        for (std::size_t i = 0; i < commands.size(); ++i) {
            if (subs[i]->parsed()) {
                auto& f = *flagsets[i];
                f.config_file = config_file;
                f.resolve();
                return commands[i].run(f);
            }
        }
        throw UsageError("no subcommand");
    } catch (const Error& e) {
        const int code = exit_code(e.kind());
        report_error(to_string(e.kind()), code, e.what());
        return code;
    } catch (const nlohmann::json::exception& e) {
        report_error("data", 2, e.what());
        return 2;
    } catch (const std::invalid_argument& e) {
        report_error("usage", 1, std::string("invalid number: ") + e.what());
        return 1;
    } catch (const std::exception& e) {
        report_error("data", 2, e.what());
        return 2;
    }
}
