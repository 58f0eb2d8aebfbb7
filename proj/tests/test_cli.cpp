#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <sys/wait.h>

#include "flowtame/flowtame.hpp"

using namespace flowtame;
namespace fs = std::filesystem;

namespace {

class Cli : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = fs::temp_directory_path() / "flowtame_test_cli";
        fs::remove_all(dir_);
        fs::create_directories(dir_);
        ASSERT_EQ(run("gen --preset five-gaussians --seed 7 -o " + p("d.json")), 0);
    }

    static std::string p(const std::string& name) { return (dir_ / name).string(); }

    // Exit status of `flowtame <args>`; output goes to a log file.
    static int run(const std::string& args, const std::string& env = "") {
        const std::string cmd =
            env + " " + FLOWTAME_CLI + " " + args + " >>" + p("log.txt") + " 2>&1";
        const int status = std::system(cmd.c_str());
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    }

    static fs::path dir_;
};

fs::path Cli::dir_;

}  // namespace

TEST_F(Cli, GenWritesPresetAndIsReproducible) {
    const LabeledDataset ds = load_dataset(p("d.json"));
    EXPECT_EQ(ds.size(), 1000);
    ASSERT_EQ(run("gen --preset five-gaussians --seed 7 -o " + p("d2.json")), 0);
    EXPECT_EQ(read_text(p("d.json")), read_text(p("d2.json")));
    EXPECT_TRUE(fs::exists(p("d.json.config.toml")));
}

TEST_F(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(run("gen --preset five-gaussians"), 2);
    EXPECT_EQ(run("gen --preset nine-gaussians -o " + p("x.json")), 2);
    EXPECT_EQ(run(""), 2);
    EXPECT_EQ(run("train --data " + p("d.json") + " --layers 3 --out " + p("bad")), 2);
}

TEST_F(Cli, MissingFileIsRuntimeError) {
    EXPECT_EQ(run("train --data " + p("nope.json") + " --out " + p("bad")), 4);
}

TEST_F(Cli, TrainWithZeroIterationsSavesFreshInit) {
    ASSERT_EQ(run("train --data " + p("d.json") + " --iters 0 --seed 3 --out " + p("t0")), 0);
    const FlowModel fresh = init_model(2, 8, 32, 3);
    EXPECT_EQ(read_text(p("t0/model.json")), checkpoint_to_string(fresh));
}

TEST_F(Cli, TrainIsDeterministicAndReproducibleFromEchoedConfig) {
    const std::string args = "train --data " + p("d.json") + " --iters 2000 --seed 1 --layers 2 --hidden 4 --batch 32";
    ASSERT_EQ(run(args + " --out " + p("ta")), 0);
    ASSERT_EQ(run(args + " --out " + p("tb")), 0);
    EXPECT_EQ(read_text(p("ta/model.json")), read_text(p("tb/model.json")));
    ASSERT_EQ(run("train --config " + p("ta/config.toml") + " --out " + p("tc")), 0);
    EXPECT_EQ(read_text(p("ta/model.json")), read_text(p("tc/model.json")));
    EXPECT_EQ(read_text(p("ta/curve.csv")), read_text(p("tc/curve.csv")));
    // a config value can be overridden from the command line
    ASSERT_EQ(run("train --config " + p("ta/config.toml") + " --iters 0 --out " + p("td")), 0);
    EXPECT_EQ(read_text(p("td/model.json")), checkpoint_to_string(init_model(2, 2, 4, 1)));
}

TEST_F(Cli, TameImmediateExitAndArtifacts) {
    ASSERT_EQ(run("train --data " + p("d.json") + " --iters 0 --layers 2 --hidden 4 --out " + p("id")), 0);
    const FlowModel base = load_checkpoint(p("id/model.json"));
    const LabeledDataset ds = load_dataset(p("d.json"));
    // pick the point closest to mu + 1 sigma of the other points' NLLs
    const Eigen::VectorXd nll = nll_values(base, ds.points);
    const GaussianFit fit = fit_gaussian(nll);
    Eigen::Index best = 0;
    (nll.array() - (fit.mu + fit.sigma)).abs().minCoeff(&best);
    const std::string common = "--base " + p("id/model.json") + " --data " + p("d.json") +
                               " --forget-indices " + std::to_string(best) + " --delta 1 --epsilon 0.9";
    ASSERT_EQ(run("tame " + common + " --remember-batch 999 --out " + p("im")), 0);
    EXPECT_EQ(parse_csv(read_text(p("im/trace.csv"))).size(), 2u);  // header + 1 row
    for (const char* f : {"tamed.json", "trace.csv", "report.json", "quantiles.csv", "config.toml"})
        EXPECT_TRUE(fs::exists(p("im") + "/" + f)) << f;
    const auto report = nlohmann::json::parse(read_text(p("im/report.json")));
    EXPECT_EQ(report["status"], "threshold_met");
    EXPECT_EQ(report["iterations"], 1);
}

TEST_F(Cli, TameDefaultsAndExitCodes) {
    ASSERT_EQ(run("train --data " + p("d.json") + " --iters 0 --layers 2 --hidden 4 --out " + p("id2")), 0);
    const std::string common = "--base " + p("id2/model.json") + " --data " + p("d.json") + " --forget-label 0";
    EXPECT_EQ(run("tame " + common + " --max-iters 2 --out " + p("mx")), 3);
    const std::string cfg = read_text(p("mx/config.toml"));
    for (const char* kv : {"delta=4", "epsilon=0.6", "alpha=0.6", "gamma=0.6", "stats-refresh=10"})
        EXPECT_NE(cfg.find(kv), std::string::npos) << kv;
    EXPECT_TRUE(fs::exists(p("mx/tamed.json")));

    EXPECT_EQ(run("tame " + common + " --no-remember --max-iters 2 --out " + p("nr")), 3);
    EXPECT_NE(read_text(p("nr/config.toml")).find("no-remember=true"), std::string::npos);

    EXPECT_EQ(run("tame " + common + " --epsilon 5 --out " + p("bad")), 2);
    EXPECT_EQ(run("tame --base " + p("id2/model.json") + " --data " + p("d.json") + " --out " + p("bad")), 2);
    EXPECT_EQ(run("tame --base " + p("id2/model.json") + " --data " + p("d.json") + " --forget-label 9 --out " +
                  p("bad")),
              4);
}

TEST_F(Cli, EvalOfBaseAgainstItself) {
    ASSERT_EQ(run("train --data " + p("d.json") + " --iters 0 --layers 2 --hidden 4 --out " + p("id3")), 0);
    ASSERT_EQ(run("eval --base " + p("id3/model.json") + " --data " + p("d.json") +
                  " --forget-label 0 --forget-limit 10 --samples 500 --out " + p("ev")),
              0);
    const auto j = nlohmann::json::parse(read_text(p("ev/report.json")));
    ASSERT_EQ(j["sets"].size(), 3u);
    for (const auto& s : j["sets"]) EXPECT_EQ(s["quantile_drop"].get<double>(), 0.0) << s["set_name"];
    EXPECT_NEAR(j["threshold_quantile"].get<double>(), 3.167e-5, 1e-8);
    EXPECT_TRUE(j.contains("ks_remember"));
    for (const char* f : {"hist_remember_base.csv", "hist_remember_tamed.csv", "fractions.csv", "quantiles.csv"})
        EXPECT_TRUE(fs::exists(p("ev") + "/" + f)) << f;
}

TEST_F(Cli, SampleIsSeededAndRejectsZero) {
    ASSERT_EQ(run("train --data " + p("d.json") + " --iters 0 --layers 2 --hidden 4 --out " + p("id4")), 0);
    const std::string m = "sample --model " + p("id4/model.json") + " --data " + p("d.json");
    ASSERT_EQ(run(m + " -n 100 --seed 5 -o " + p("s1.csv")), 0);
    ASSERT_EQ(run(m + " -n 100 --seed 5 -o " + p("s2.csv")), 0);
    ASSERT_EQ(run(m + " -n 100 --seed 6 -o " + p("s3.csv")), 0);
    EXPECT_EQ(read_text(p("s1.csv")), read_text(p("s2.csv")));
    EXPECT_NE(read_text(p("s1.csv")), read_text(p("s3.csv")));
    EXPECT_EQ(parse_csv(read_text(p("s1.csv"))).size(), 101u);
    EXPECT_EQ(run(m + " -n 0 -o " + p("s0.csv")), 2);
}

TEST_F(Cli, OutputRootFromEnvironment) {
    const std::string root = p("envroot");
    ASSERT_EQ(run("train --data " + p("d.json") + " --iters 0 --layers 2 --hidden 4", "FLOWTAME_OUT_ROOT=" + root), 0);
    EXPECT_TRUE(fs::exists(root + "/train/model.json"));
}
