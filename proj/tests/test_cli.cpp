#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <sys/wait.h>

#include "refgen/cli/commands.hpp"

using namespace refgen;
using namespace refgen::cli;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("refgen_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct Run {
  int code;
  std::string output;
};

Run run_cli(const std::string& args) {
  const auto log = fs::temp_directory_path() / "refgen_cli_run.log";
  const std::string cmd = std::string(REFGEN_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

std::string message_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(RunConfig, DefaultsParseFromEmptyText) {
  const auto c = parse_run_config("train", "", "t.ini", {}, false);
  EXPECT_EQ(c.train.steps, 2000);
  EXPECT_EQ(c.out_dir, fs::path("out"));
  EXPECT_EQ(c.checkpoint(), fs::path("out") / "model.ckpt");
  EXPECT_EQ(c.adapt.steps, 1000);
}

TEST(RunConfig, ErrorsCarryFileAndLine) {
  EXPECT_EQ(message_of([] { parse_run_config("train", "[train]\nsteps = 5\nbogus = 1\n", "a.ini", {}, false); }),
            "a.ini:3: train.bogus: unknown key");
  EXPECT_EQ(message_of([] { parse_run_config("train", "[run]\nseed = 1\n[train]\nlr = fast\n", "b.ini", {}, false); }),
            "b.ini:4: train.lr: cannot parse 'fast'");
  EXPECT_NE(message_of([] { parse_run_config("train", "[train\n", "c.ini", {}, false); }).find("c.ini:1"), std::string::npos);
  EXPECT_NE(message_of([] { parse_run_config("forge", "\n[forge]\nmode = braid\n", "d.ini", {}, false); }).find("d.ini:3"),
            std::string::npos);
}

TEST(RunConfig, OverridesWinOverFile) {
  const auto c = parse_run_config("train", "[train]\nsteps = 5\n", "a.ini", {"train.steps=7", "model.attention=111"}, false);
  EXPECT_EQ(c.train.steps, 7);
  EXPECT_TRUE(c.model.attention[0]);
  EXPECT_FALSE(message_of([] { parse_run_config("train", "", "a.ini", {"steps=7"}, false); }).empty());
}

TEST(RunConfig, EnvironmentOverridesPathsOnly) {
  ::setenv("REFGEN_BANK", "/tmp/elsewhere.tsv", 1);
  ::setenv("REFGEN_STEPS", "3", 1);
  const auto c = parse_run_config("train", "[paths]\nbank = here.tsv\n", "a.ini");
  ::unsetenv("REFGEN_BANK");
  ::unsetenv("REFGEN_STEPS");
  EXPECT_EQ(c.paths.bank, fs::path("/tmp/elsewhere.tsv"));
  EXPECT_EQ(c.train.steps, 2000);
}

TEST(RunConfig, SeedsDeriveFromRunSeed) {
  const auto a = parse_run_config("train", "[run]\nseed = 1\n", "a.ini", {}, false);
  const auto b = parse_run_config("train", "[run]\nseed = 2\n", "a.ini", {}, false);
  EXPECT_NE(a.forge.rng_seed, b.forge.rng_seed);
  EXPECT_NE(a.model.seed, a.train.seed);
  EXPECT_EQ(a.forge.rng_seed, parse_run_config("forge", "[run]\nseed = 1\n", "x", {}, false).forge.rng_seed);
}

TEST(RunConfig, EchoRoundTrips) {
  const auto c = parse_run_config("train",
                                  "[run]\nseed = 9\n[train]\nlr = 0.00031\ncosine = true\n[forge]\nmode = overlay\ntest_count = 3\n"
                                  "[model]\nattention = 101\n[generate]\nprompt = a dog barks\n",
                                  "a.ini", {}, false);
  const auto text = echo(c);
  const auto d = parse_run_config("train", text, "echo.ini", {}, false);
  EXPECT_EQ(echo(d), text);
  EXPECT_EQ(d.train.lr, 0.00031);
  EXPECT_TRUE(d.train.cosine);
  EXPECT_EQ(d.forge.mode, forge::Mode::Overlay);
  EXPECT_EQ(*d.forge.test_count, 3u);
  EXPECT_EQ(d.prompt, "a dog barks");
}

TEST(Cli, SelftestPasses) {
  std::ostringstream os;
  EXPECT_TRUE(cmd_selftest(os)) << os.str();
  const auto r = run_cli("selftest");
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(r.output.find("FAIL"), std::string::npos);
}

TEST(Cli, UsageAndConfigErrorsExitTwo) {
  EXPECT_EQ(run_cli("").code, 2);
  EXPECT_EQ(run_cli("frobnicate").code, 2);
  const auto dir = fresh_dir("usage");
  std::ofstream(dir / "bad.ini") << "[train]\nsteps = 1\nbatchsize = 2\n";
  const auto r = run_cli("train -c " + (dir / "bad.ini").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("bad.ini:3"), std::string::npos) << r.output;
}

TEST(Cli, TrainWithoutManifestNamesThePath) {
  const auto dir = fresh_dir("missing");
  const auto r = run_cli("train -o " + (dir / "nowhere").string());
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.output.find((dir / "nowhere" / "train.jsonl").string()), std::string::npos) << r.output;
}

TEST(Cli, ForgeFromEchoIsByteIdentical) {
  const auto dir = fresh_dir("echo");
  auto r = run_cli("forge -o " + (dir / "a").string() + " --seed 5 --set forge.n_examples=6 --set forge.mode=general");
  ASSERT_EQ(r.code, 0) << r.output;
  auto ini = slurp(dir / "a" / "forge.config.ini");
  const auto pos = ini.find((dir / "a").string());
  ASSERT_NE(pos, std::string::npos);
  ini.replace(pos, (dir / "a").string().size(), (dir / "b").string());
  std::ofstream(dir / "b.ini") << ini;
  r = run_cli("forge -c " + (dir / "b.ini").string());
  ASSERT_EQ(r.code, 0) << r.output;
  for (const char* f : {"train.jsonl", "test.jsonl", "bank.tsv"}) EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  EXPECT_EQ(slurp(dir / "b" / "forge.config.ini"), ini);
}

TEST(Cli, TrainGenerateAdaptPipeline) {
  const auto dir = fresh_dir("pipeline");
  const std::string o = " -o " + dir.string();
  const std::string small = " --set model.n_hidden=4 --set model.d_text=16 --set model.pos_channels=4";
  ASSERT_EQ(run_cli("forge" + o + " --set forge.n_examples=5").code, 0);
  auto r = run_cli("train" + o + small + " --set train.steps=3 --set train.batch=1");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(dir / "model.ckpt"));
  auto csv = slurp(dir / "train_loss.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);

  r = run_cli("train" + o + small + " --set train.steps=5 --set train.batch=1 --set train.resume=true");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("resuming from step 3"), std::string::npos);
  csv = slurp(dir / "train_loss.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 6);

  r = run_cli("generate" + o + " --set generate.steps=2 --set generate.griffin_lim_iterations=2");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto gen = forge::read_manifest(dir / "generated" / "generated.jsonl");
  const auto test = forge::read_manifest(dir / "test.jsonl");
  ASSERT_EQ(gen.records.size(), test.records.size());
  for (std::size_t i = 0; i < gen.records.size(); ++i) {
    EXPECT_EQ(gen.records[i].id, test.records[i].id);
    const auto clip = bank::ingest_wav(gen.resolve(gen.records[i].target_path));
    EXPECT_EQ(clip.samples.size(), 160000u);
    for (const auto& ref : gen.records[i].references)
      if (!ref.path.empty()) EXPECT_TRUE(fs::exists(gen.resolve(ref.path))) << ref.path;
  }

  const auto ref_wav = dir / "generated" / gen.records[0].target_path;
  r = run_cli("generate" + o + " --set generate.steps=1 --set generate.griffin_lim_iterations=1 --set \"generate.prompt=a bell rings\"" +
              " --set \"generate.references=" + ref_wav.string() + "|a bell ringing\" --set paths.generated_manifest=" +
              (dir / "prompt" / "p.jsonl").string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(dir / "prompt" / "audio" / "prompt.wav"));

  const auto adir = dir / "k4";
  ASSERT_EQ(run_cli("forge -o " + adir.string() + " --set forge.n_examples=3 --set forge.k_max=4").code, 0);
  r = run_cli("adapt -o " + adir.string() + " --set paths.base_checkpoint=" + (dir / "model.ckpt").string() +
              " --set adapt.steps=2");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(adir / "adapted_k4.ckpt"));
  EXPECT_TRUE(fs::exists(adir / "adapt.config.ini"));
}

TEST(Cli, EvalReportsMissingGeneratedManifest) {
  const auto dir = fresh_dir("eval_missing");
  const auto r = run_cli("eval -o " + dir.string());
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.output.find("generated.jsonl"), std::string::npos) << r.output;
}
