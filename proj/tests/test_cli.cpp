#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>
#include <sys/wait.h>

#include "focustune/config.hpp"

namespace fs = std::filesystem;
using focustune::RunConfig;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct CliResult {
    int code = -1;
    std::string out;
    std::string err;
};

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("focustune_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    CliResult run(const std::string& args, const std::string& env = "") const {
        const auto out = dir_ / "stdout.txt";
        const auto err = dir_ / "stderr.txt";
        const std::string cmd = "cd '" + dir_.string() + "' && " + env + " '" FOCUSTUNE_CLI_PATH "' " + args + " > '" +
                                out.string() + "' 2> '" + err.string() + "'";
        const int status = std::system(cmd.c_str());
        CliResult r;
        r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        r.out = slurp(out);
        r.err = slurp(err);
        return r;
    }

    void expect_error(const CliResult& r, int code, const std::string& kind) const {
        EXPECT_EQ(r.code, code) << r.err;
        static const std::regex line(R"(^focustune: error kind=(\w+) code=(\d) msg=[^\n]*\n$)");
        std::smatch m;
        ASSERT_TRUE(std::regex_match(r.err, m, line)) << "stderr: " << r.err;
        EXPECT_EQ(m[1].str(), kind);
        EXPECT_EQ(m[2].str(), std::to_string(code));
    }

    fs::path dir_;
};

} // namespace

TEST(RunConfig, FlagsOverrideFileAndSnapshotRecordsSource) {
    const auto path = fs::temp_directory_path() / "focustune_cfg_test.conf";
    {
        std::ofstream out(path);
        out << "# comment\nlr = 0.5\n\nsteps = 7  # trailing\n";
    }
    RunConfig c;
    c.declare("lr", "1e-3");
    c.declare("steps", "100");
    c.declare("seed", "0");
    c.load_file(path.string());
    c.set_flag("steps", "9");
    EXPECT_DOUBLE_EQ(c.get_double("lr"), 0.5);
    EXPECT_EQ(c.get_int("steps"), 9);
    EXPECT_EQ(c.source("lr"), RunConfig::Source::file);
    EXPECT_EQ(c.source("steps"), RunConfig::Source::flag);
    EXPECT_EQ(c.source("seed"), RunConfig::Source::default_value);
    EXPECT_EQ(c.snapshot(), "lr = 0.5  # file\nseed = 0  # default\nsteps = 9  # flag\n");

    // The snapshot reloads to the same values.
    {
        std::ofstream out(path);
        out << c.snapshot();
    }
    RunConfig d;
    d.declare("lr", "x");
    d.declare("steps", "x");
    d.declare("seed", "x");
    d.load_file(path.string());
    EXPECT_EQ(d.get("steps"), "9");
    EXPECT_EQ(d.get("lr"), "0.5");
    fs::remove(path);
}

TEST(RunConfig, UnknownKeysAndBadValuesRejected) {
    const auto path = fs::temp_directory_path() / "focustune_cfg_bad.conf";
    {
        std::ofstream out(path);
        out << "nope = 1\n";
    }
    RunConfig c;
    c.declare("lr", "1e-3");
    EXPECT_THROW(c.load_file(path.string()), focustune::UsageError);
    {
        std::ofstream out(path);
        out << "just words\n";
    }
    EXPECT_THROW(c.load_file(path.string()), focustune::DataError);
    EXPECT_THROW(c.set_flag("nope", "1"), focustune::UsageError);
    c.set_flag("lr", "fast");
    EXPECT_THROW(c.get_double("lr"), focustune::UsageError);
    EXPECT_THROW(c.get_bool("lr"), focustune::UsageError);
    fs::remove(path);
}

TEST_F(Cli, UsageErrorsExitOne) {
    expect_error(run(""), 1, "usage");
    expect_error(run("frobnicate"), 1, "usage");
    expect_error(run("train --no-such-flag 1"), 1, "usage");
    expect_error(run("train --steps many"), 1, "usage");
    expect_error(run("train --ablation -da"), 1, "usage");
    expect_error(run("eval --mode sideways"), 1, "usage");
    {
        std::ofstream(dir_ / "bad.conf") << "unknown_key = 3\n";
    }
    expect_error(run("--config bad.conf synth"), 1, "usage");
}

TEST_F(Cli, DataErrorsExitTwo) {
    const auto r = run("train --train missing.jsonl --vocab missing.json");
    expect_error(r, 2, "data");
    EXPECT_NE(r.err.find("missing.jsonl"), std::string::npos);
    {
        std::ofstream(dir_ / "broken.jsonl") << "{not json\n";
        std::ofstream(dir_ / "malformed.conf") << "no equals sign\n";
    }
    expect_error(run("augment --in broken.jsonl --out a.jsonl"), 2, "data");
    expect_error(run("--config malformed.conf synth"), 2, "data");
    expect_error(run("augment --in missing.jsonl"), 2, "data");
}

TEST_F(Cli, NumericFailureExitsThree) {
    expect_error(run("gradcheck --coords 20 --tolerance 1e-30"), 3, "numeric");
    const auto ok = run("gradcheck --coords 20");
    EXPECT_EQ(ok.code, 0) << ok.err;
    ASSERT_EQ(run("synth --out d --n-docs 4 --n-train 8 --n-test 4").code, 0);
    expect_error(run("train --train d/train.jsonl --vocab d/vocab.json --ablation vanilla --steps 3 --lr 1e300 "
                     "--clip 0 --out r"),
                 3, "numeric");
}

TEST_F(Cli, TransportFailureIsReported) {
    ASSERT_EQ(run("synth --out d --n-docs 4 --n-train 4 --n-test 2").code, 0);
    expect_error(run("augment --in d/train.jsonl --out d/a.jsonl --query question",
                     "FOCUSTUNE_ENCODER_URL=http://127.0.0.1:9"),
                 2, "transport");
}

TEST_F(Cli, MaskTokensWithoutMaskingAblationIsDataError) {
    ASSERT_EQ(run("synth --out d --n-docs 4 --n-train 4 --n-test 2").code, 0);
    ASSERT_EQ(run("augment --in d/train.jsonl --out d/a.jsonl --chunker doc --k 1").code, 0);
    expect_error(run("train --train d/a.jsonl --vocab d/vocab.json --ablation -masking --steps 1"), 2, "data");
    ASSERT_EQ(run("augment --in d/train.jsonl --out d/nm.jsonl --chunker doc --k 1 --masking false").code, 0);
    const auto ok = run("train --train d/nm.jsonl --vocab d/vocab.json --ablation -masking --steps 1 --out r "
                        "--d-model 16 --n-layers 1 --n-heads 2");
    EXPECT_EQ(ok.code, 0) << ok.err;
}

TEST_F(Cli, EveryOutputHasConfigSnapshot) {
    ASSERT_EQ(run("synth --out d --n-docs 4 --n-train 6 --n-test 3 --seed 7 --sweep-docs 4").code, 0);
    EXPECT_NE(slurp(dir_ / "d" / "synth.config").find("seed = 7  # flag"), std::string::npos);
    ASSERT_EQ(run("augment --in d/train.jsonl --out d/a.jsonl").code, 0);
    EXPECT_TRUE(fs::exists(dir_ / "d" / "a.jsonl.config"));
    const auto tr = run("train --train d/a.jsonl --vocab d/vocab.json --steps 2 --out r --d-model 16 --n-layers 1 "
                        "--n-heads 2 --max-len 256");
    ASSERT_EQ(tr.code, 0) << tr.err;
    EXPECT_TRUE(fs::exists(dir_ / "r" / "train.config"));
    EXPECT_TRUE(fs::exists(dir_ / "r" / "metrics.jsonl"));
    ASSERT_EQ(run("eval --ckpt r/final.ckpt --data d/test.jsonl --out r/eval.json").code, 0);
    EXPECT_TRUE(fs::exists(dir_ / "r" / "eval.json.config"));
    ASSERT_EQ(run("sweep --ckpt r/final.ckpt --dir d --docs 4 --out r/sweep").code, 0);
    EXPECT_EQ(slurp(dir_ / "r" / "sweep.csv").substr(0, 12), "position,n4\n");
    EXPECT_TRUE(fs::exists(dir_ / "r" / "sweep.config"));
    ASSERT_EQ(run("attn --ckpt r/final.ckpt --data d/test.jsonl --out r/hm").code, 0);
    EXPECT_TRUE(fs::exists(dir_ / "r" / "hm.csv"));
    EXPECT_TRUE(fs::exists(dir_ / "r" / "hm.labels"));
    EXPECT_TRUE(fs::exists(dir_ / "r" / "hm.config"));
}

TEST_F(Cli, PipelineStagingContract) {
    const std::string args = "pipeline --out p --n-docs 4 --n-train 8 --n-test 4 --steps 3 --d-model 16";
    const auto first = run(args);
    ASSERT_EQ(first.code, 0) << first.err;
    const auto metrics = slurp(dir_ / "p" / "run" / "eval.json");
    const auto ckpt = slurp(dir_ / "p" / "run" / "final.ckpt");

    // Identical rerun: nothing retrained, identical metrics.
    const auto second = run(args);
    ASSERT_EQ(second.code, 0);
    EXPECT_NE(second.out.find("train: up to date"), std::string::npos) << second.out;
    EXPECT_EQ(slurp(dir_ / "p" / "run" / "eval.json"), metrics);

    // Deleting the augmented file reruns augment (and its dependents).
    fs::remove(dir_ / "p" / "data" / "train.aug.jsonl");
    const auto third = run(args);
    ASSERT_EQ(third.code, 0);
    EXPECT_NE(third.out.find("synth: up to date"), std::string::npos);
    EXPECT_NE(third.out.find("augment: 8 samples"), std::string::npos) << third.out;
    EXPECT_EQ(slurp(dir_ / "p" / "run" / "final.ckpt"), ckpt); // same seed, same bits

    // Eval alone consumes the existing checkpoint.
    const auto ev = run("eval --ckpt p/run/final.ckpt --data p/data/test.jsonl --out p/run/eval2.json");
    ASSERT_EQ(ev.code, 0);
    EXPECT_EQ(slurp(dir_ / "p" / "run" / "eval2.json").find("\"records\""),
              slurp(dir_ / "p" / "run" / "eval.json").find("\"records\""));
}
