#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mdgp/mdgp.hpp"

namespace {

enum Exit { kOk = 0, kConfig = 1, kNumerical = 2, kVerification = 3 };

void summarize(const mdgp::EvalResult& r) {
  std::printf("accuracy %.4f +- %.4f  nll %.4f  ece %.4f  mce %.4f\n", r.accuracy_mean, r.accuracy_stderr, r.nll,
              r.ece, r.mce);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"Few-shot classification with deep-kernel GPs and mirror-descent inference"};
  cli.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;
  int parallel = 1;
  cli.add_option("-c,--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  cli.add_option("-s,--set", overrides, "Override a config entry, e.g. --set outer.epochs=5")->take_all();
  cli.add_option("--parallel-episodes", parallel,
                 "Fit this many episodes concurrently per outer step (results differ from sequential mode)")
      ->check(CLI::PositiveNumber);

  auto* train = cli.add_subcommand("train", "Meta-train the deep kernel");
  auto* eval = cli.add_subcommand("eval", "Evaluate a checkpoint on held-out episodes");
  std::string checkpoint;
  eval->add_option("--checkpoint", checkpoint, "checkpoint.json written by train")->required();
  auto* ci = cli.add_subcommand("compare-inner", "Inner-loop ELBO traces, mirror descent vs gradient descent");
  auto* co = cli.add_subcommand("compare-outer", "Outer-loop traces with each inner method");
  auto* verify = cli.add_subcommand("verify", "Run the numerical oracle suite");
  auto* gen = cli.add_subcommand("gen-data", "Write a synthetic labelled CSV dataset");
  int classes = 20, rows = 30;
  std::string out_csv;
  gen->add_option("--classes", classes, "number of classes")->check(CLI::PositiveNumber);
  gen->add_option("--rows", rows, "rows per class")->check(CLI::PositiveNumber);
  gen->add_option("--out", out_csv, "output CSV path")->required();

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return cli.exit(e) == 0 ? kOk : kConfig;
  }

  try {
    const mdgp::RunConfig cfg = mdgp::load_config(config_path, overrides);
    if (train->parsed()) {
      const auto r = mdgp::cmd_train(cfg, parallel);
      if (!r.trace.empty()) std::printf("final objective %.6g\n", r.trace.back().objective);
    } else if (eval->parsed()) {
      summarize(mdgp::cmd_eval(cfg, checkpoint));
    } else if (ci->parsed()) {
      const auto r = mdgp::cmd_compare_inner(cfg);
      int wins = 0;
      for (double g : r.final_gap) wins += g >= 0.0;
      std::printf("MD final ELBO >= GD on %d/%zu episodes\n", wins, r.final_gap.size());
    } else if (co->parsed()) {
      const auto r = mdgp::cmd_compare_outer(cfg);
      int wins = 0;
      for (std::size_t i = 0; i < r.final_ce_md.size(); ++i) wins += r.final_ce_md[i] <= r.final_ce_gd[i];
      std::printf("MD final cross-entropy <= GD on %d/%zu seeds\n", wins, r.final_ce_md.size());
    } else if (verify->parsed()) {
      try {
        for (const auto& c : mdgp::cmd_verify(cfg))
          std::printf("PASS %-40s %.3e <= %.3e\n", c.name.c_str(), c.deviation, c.tolerance);
      } catch (const mdgp::VerificationFailed& e) {
        std::cerr << "verification failed; see " << cfg.output_dir << "/verify_report.json\n";
        return kVerification;
      }
    } else if (gen->parsed()) {
      mdgp::cmd_gen_data(cfg, classes, rows, out_csv);
    }
  } catch (const mdgp::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const mdgp::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  }
  return kOk;
}
