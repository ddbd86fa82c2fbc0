#include <CLI11.hpp>

#include "refgen/cli/commands.hpp"

using namespace refgen;

int main(int argc, char** argv) {
  CLI::App app{"refgen: reference-conditioned audio generation toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  long long seed = -1;
  app.add_option("-c,--config", config, "INI run configuration")->check(CLI::ExistingFile);
  app.add_option("--set", sets, "override, section.key=value (repeatable)")->allow_extra_args(false);
  app.add_option("-o,--out", out, "output directory (run.out_dir)");
  app.add_option("--seed", seed, "run seed (run.seed)");

  const std::vector<std::pair<std::string, std::string>> subs = {
      {"forge", "build train/test manifests from the event bank"},
      {"train", "train the generator on the train manifest"},
      {"generate", "sample audio for a prompt or for every test record"},
      {"adapt", "grow the reference count of a trained checkpoint"},
      {"eval", "score a generated manifest against its targets"},
      {"selftest", "run built-in property checks"},
  };
  for (const auto& [name, help] : subs) app.add_subcommand(name, help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  const std::string sub = app.get_subcommands().front()->get_name();
  if (sub == "selftest") return cli::cmd_selftest() ? 0 : 1;

  try {
    if (!out.empty()) sets.push_back("run.out_dir=" + out);
    if (seed >= 0) sets.push_back("run.seed=" + std::to_string(seed));
    const auto c = cli::load_run_config(sub, config, sets);
    if (sub == "forge") return cli::cmd_forge(c);
    if (sub == "train") return cli::cmd_train(c);
    if (sub == "generate") return cli::cmd_generate(c);
    if (sub == "adapt") return cli::cmd_adapt(c);
    if (sub == "eval") return cli::cmd_eval(c);
  } catch (const Error& e) {
    std::cerr << "refgen " << sub << ": " << kind_name(e.kind()) << " error: " << e.what() << '\n';
    return cli::exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "refgen " << sub << ": " << e.what() << '\n';
    return 1;
  }
  return 1;
}
