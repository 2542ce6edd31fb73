#ifndef T2FNORM_EXPERIMENT_HPP
#define T2FNORM_EXPERIMENT_HPP

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "t2fnorm/config.hpp"
#include "t2fnorm/metrics.hpp"

namespace t2fnorm {

inline constexpr const char* kCodeVersion = "t2fnorm 0.1.0";

/// Raised when the output directory already holds a run of the same config.
class ExperimentExists : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One trained model: a (method, seed) pair, or a T2FNorm sweep variant.
struct RunRecord {
  std::string run_id;
  // Aggregation key: the method name, or e.g. "t2fnorm_tau0.5" for sweep variants.
  std::string group;
  std::string method;
  std::string variant = "main";  // main | tau | p_norm | layer
  double variant_value = 0.0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double test_accuracy = 0.0;
  double final_train_loss = 0.0;
  double tau = 0.0;
  int p_norm = 2;
  std::size_t normalize_after_block = 0;
  // Fitted tempscale temperature (0 when not fitted).
  double fitted_temperature = 0.0;
  // Paths relative to the output directory.
  std::string model_file;
  std::string trace_file;
};

/// Detection metrics for one (run, scorer, OOD set, scoring route).
struct MetricRecord {
  std::string run_id;
  std::string group;
  std::string method;
  std::uint64_t seed = 0;
  std::string scorer;
  std::string scorer_kind;
  // DICE sparsity or tempscale temperature; 0 otherwise.
  double scorer_param = 0.0;
  std::string ood_set;
  bool normalize_at_scoring = false;
  MetricsReport metrics;
  std::string id_scores_file;
  std::string ood_scores_file;
};

/// Mean and sample standard deviation across seeds.
struct AggregateRecord {
  std::string group;
  std::string scorer;
  std::string ood_set;
  bool normalize_at_scoring = false;
  std::size_t n = 0;
  MetricsReport mean;
  MetricsReport stddev;
};

struct AccuracyAggregate {
  std::string group;
  std::size_t n = 0;
  double mean = 0.0;
  double stddev = 0.0;
};

struct RunReport {
  std::string config_hash;
  std::string code_version;
  std::string started_at;
  std::string finished_at;
  std::filesystem::path output_dir;
  std::vector<std::string> methods;
  std::vector<std::string> ood_sets;
  std::vector<RunRecord> runs;
  std::vector<MetricRecord> metrics;
  std::vector<AggregateRecord> aggregates;
  std::vector<AccuracyAggregate> accuracy;

  bool all_ok() const;
  const RunRecord* find_run(const std::string& run_id) const;
};

struct RunOptions {
  bool force = false;
  unsigned threads = 1;
  // Progress lines; null silences them.
  std::ostream* log = nullptr;
};

/// Trains every configured model, scores every (scorer, OOD set) and writes
/// all artifacts under config.output_dir. Failed runs are recorded, not thrown.
RunReport run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

/// Groups per-seed metric records; exposed so reports can be re-derived.
std::vector<AggregateRecord> aggregate_metrics(const std::vector<MetricRecord>& records);
std::vector<AccuracyAggregate> aggregate_accuracy(const std::vector<RunRecord>& runs);

void write_report(const RunReport& r, const std::filesystem::path& path);
/// Reads report.json; output_dir becomes the file's directory.
RunReport load_report(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Method comparison

struct ComparisonRow {
  std::string scorer;
  std::string ood_set;  // "mean" for the average over OOD sets
  // values[metric][method]
  std::vector<std::vector<double>> values;
  // Index of the best method per metric.
  std::vector<std::size_t> best;
};

struct ComparisonTable {
  std::vector<std::string> methods;
  std::vector<std::string> metrics;
  std::vector<ComparisonRow> rows;

  /// scorer,ood_set,methods,<metric>... with "a/b/c" cells, best suffixed by '*'.
  std::string to_csv() const;
  std::string to_text() const;
};

/// Main-variant runs with the plain scoring route, averaged over seeds.
/// Lower is better for fpr_at_95, higher for every other metric.
ComparisonTable compare_methods(const RunReport& report,
                                const std::vector<std::string>& metrics = {"fpr_at_95", "auroc", "aupr"});

// ---------------------------------------------------------------------------
// Plot data

enum class PlotKind { separability_progression, norm_progression, msp_histogram, tau_sweep, dice_sweep, fc_heatmap };

std::string to_string(PlotKind k);
PlotKind parse_plot_kind(const std::string& name);

inline constexpr std::size_t kHistogramBins = 20;

/// Writes <output_dir>/plots/<kind>.csv and returns its path. Throws
/// std::runtime_error when the report lacks the data for `kind`.
std::filesystem::path export_plotdata(const RunReport& report, PlotKind kind);

}  // namespace t2fnorm

#endif  // T2FNORM_EXPERIMENT_HPP
