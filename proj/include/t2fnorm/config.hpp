#ifndef T2FNORM_CONFIG_HPP
#define T2FNORM_CONFIG_HPP

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "t2fnorm/data.hpp"
#include "t2fnorm/nn.hpp"
#include "t2fnorm/score.hpp"
#include "t2fnorm/train.hpp"

namespace t2fnorm {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct IdxSource {
  std::string id;
  std::filesystem::path images;
  std::optional<std::filesystem::path> labels;
};

struct DataConfig {
  // Synthetic source (used when `idx_train` is absent).
  SyntheticSpec synthetic;
  std::size_t test_per_class = 250;
  std::size_t val_per_class = 250;
  std::vector<OodSpec> ood_sets{{OodKind::uniform_noise, 1000, 0, 0.5},
                                {OodKind::held_out_classes, 1000, 0, 0.5}};

  // IDX source: labelled train/test (and optional validation) plus OOD files.
  std::optional<IdxSource> idx_train;
  std::optional<IdxSource> idx_test;
  std::optional<IdxSource> idx_val;
  std::vector<IdxSource> idx_ood;

  bool uses_idx() const { return idx_train.has_value(); }
};

struct ScorerConfig {
  ScorerSpec spec;
  // tempscale only: pick T on the validation split instead of using spec.tempscale_T.
  bool fit_temperature = false;

  /// Grouping label; fitted temperature scaling is "tempscale_fit".
  std::string label() const;
};

struct Sweep {
  bool enabled = false;
  std::vector<double> values;
  // Empty means every configured seed.
  std::vector<std::uint64_t> seeds;
};

struct Ablations {
  bool normalize_at_scoring = false;
  Sweep tau;
  Sweep p_norm;
  Sweep layer;
  Sweep dice_p;
};

struct ExperimentConfig {
  DataConfig data;
  ModelSpec model;
  TrainConfig train;
  std::vector<Method> methods;
  std::vector<ScorerConfig> scorers;
  std::vector<std::uint64_t> seeds;
  Ablations ablations;
  std::filesystem::path output_dir = "t2fnorm_out";

  void validate() const;
};

/// Parses a JSON config. Unknown keys, wrong types and invalid values all
/// raise ConfigError naming the offending key path.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Fully expanded form (every default written out), keys sorted.
nlohmann::json to_json(const ExperimentConfig& c);
/// FNV-1a over the canonical JSON, output directory excluded; 16 hex digits.
std::string config_hash(const ExperimentConfig& c);

}  // namespace t2fnorm

#endif  // T2FNORM_CONFIG_HPP
