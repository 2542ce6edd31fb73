#include <filesystem>
#include <iostream>
#include <string>
#include <thread>

#include "CLI11.hpp"
#include "t2fnorm/config.hpp"
#include "t2fnorm/experiment.hpp"

using namespace t2fnorm;

int main(int argc, char** argv) {
  CLI::App app{"T2FNorm out-of-distribution detection workbench"};
  app.require_subcommand(1);

  std::string config_path;
  bool force = false;
  unsigned threads = 1;
  auto* run = app.add_subcommand("run", "Train and score every configured run");
  run->add_option("--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_flag("--force", force, "Rerun even if the output directory holds this config");
  run->add_option("--threads", threads, "Parallel runs")->check(CLI::Range(1u, 256u));

  std::string report_path;
  auto* compare = app.add_subcommand("compare", "Print the method comparison table");
  compare->add_option("--report", report_path, "report.json of a finished run")->required()->check(CLI::ExistingFile);
  bool csv = false;
  compare->add_flag("--csv", csv, "Emit CSV instead of the text table");

  std::string kind;
  auto* exp = app.add_subcommand("export", "Write plot data for one figure kind");
  exp->add_option("--report", report_path, "report.json of a finished run")->required()->check(CLI::ExistingFile);
  exp->add_option("--kind", kind, "separability_progression | norm_progression | msp_histogram | tau_sweep | "
                                  "dice_sweep | fc_heatmap")
      ->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const ExperimentConfig cfg = load_config(config_path);
      RunOptions opts;
      opts.force = force;
      opts.threads = threads;
      opts.log = &std::cerr;
      const RunReport report = run_experiment(cfg, opts);
      std::cout << "config " << report.config_hash << ": " << report.runs.size() << " runs, "
                << report.metrics.size() << " metric rows -> " << (cfg.output_dir / "report.json").string() << '\n';
      if (!report.all_ok()) {
        for (const auto& r : report.runs) {
          if (!r.ok) std::cerr << "run " << r.run_id << " failed: " << r.error << '\n';
        }
        return 1;
      }
    } else if (*compare) {
      const ComparisonTable t = compare_methods(load_report(report_path));
      std::cout << (csv ? t.to_csv() : t.to_text());
    } else if (*exp) {
      const PlotKind k = parse_plot_kind(kind);
      std::cout << export_plotdata(load_report(report_path), k).string() << '\n';
    }
  } catch (const ExperimentExists& e) {
    std::cerr << "refused: " << e.what() << '\n';
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
