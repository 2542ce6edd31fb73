#ifndef T2FNORM_DATA_HPP
#define T2FNORM_DATA_HPP

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "t2fnorm/tensor.hpp"

namespace t2fnorm {

/// Per-channel affine map applied to raw pixels: (raw - mean) / std.
struct Standardization {
  Eigen::ArrayXd mean;
  Eigen::ArrayXd stddev;
};

/// Image set in N x C x H x W layout. Labels are empty for OOD sets.
struct Dataset {
  std::string id;
  Tensor images;
  std::vector<std::size_t> labels;
  Standardization stats;
  // Bank index of the generating template, -1 where not applicable.
  std::vector<int> template_ids;

  std::size_t size() const { return images.rank() == 4 ? images.dim(0) : 0; }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }
  bool labelled() const { return !labels.empty(); }

  /// Copies the selected samples into a new tensor, preserving order.
  Tensor gather(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> gather_labels(std::span<const std::size_t> indices) const;
  /// First `count` samples (or all of them) as a new dataset.
  Dataset head(std::size_t count) const;
};

Standardization compute_standardization(const Tensor& raw_images);
Tensor standardize(const Tensor& raw_images, const Standardization& stats);
Tensor destandardize(const Tensor& images, const Standardization& stats);

// ---------------------------------------------------------------------------
// Synthetic generators

/// Oriented sinusoidal grating; one bank entry per template.
struct GratingTemplate {
  double orientation = 0.0;  // radians
  double frequency = 2.0;    // cycles across the image
  double phase = 0.0;
};

/// The fixed template bank. ID classes use entries [0, classes); held-out
/// OOD classes use entries from `classes` onward.
const std::vector<GratingTemplate>& template_bank();
std::size_t template_bank_size();

struct SyntheticSpec {
  std::size_t classes = 4;
  std::size_t samples_per_class = 1000;
  std::size_t image_size = 16;
  std::size_t channels = 1;
  double amplitude = 0.15;
  double noise = 0.3;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Raw pixel values for one template (no noise), H x W row-major.
Eigen::ArrayXd render_template(const GratingTemplate& t, std::size_t size, double amplitude);

/// Labelled ID set standardized with its own statistics.
Dataset gen_synthetic_id(const SyntheticSpec& spec, const std::string& id = "synthetic_id");
/// Labelled ID set standardized with externally supplied statistics.
Dataset gen_synthetic_id(const SyntheticSpec& spec, const Standardization& stats,
                         const std::string& id);

enum class OodKind { uniform_noise, gaussian_noise, shifted_templates, held_out_classes };

std::string to_string(OodKind kind);
OodKind parse_ood_kind(const std::string& name);

struct OodSpec {
  OodKind kind = OodKind::uniform_noise;
  std::size_t size = 1000;
  std::uint64_t seed = 0;
  // Orientation offset in radians for shifted_templates.
  double shift = 0.5;
};

/// Unlabelled OOD set standardized with the ID statistics.
Dataset gen_ood(const OodSpec& ood, const SyntheticSpec& id_spec, const Standardization& stats,
                const std::string& id = "");

// ---------------------------------------------------------------------------
// IDX ingestion

class IdxError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, truncated, count_mismatch };
  IdxError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct IdxImages {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;
};

IdxImages parse_idx_images(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> bytes);

/// Reads an IDX image file (and optional label file), scales pixels to [0,1]
/// and standardizes them. Without `stats`, statistics come from the file.
Dataset read_idx(const std::filesystem::path& images,
                 const std::optional<std::filesystem::path>& labels = std::nullopt,
                 const std::optional<Standardization>& stats = std::nullopt,
                 const std::string& id = "idx");

/// Encodes bytes in the IDX layout; used to produce fixtures.
std::vector<std::uint8_t> encode_idx_images(const IdxImages& images);
std::vector<std::uint8_t> encode_idx_labels(std::span<const std::uint8_t> labels);

// ---------------------------------------------------------------------------
// Batching

struct Batch {
  Tensor images;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> indices;
};

/// Permutation of [0, n) fixed by (seed, epoch).
std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::uint64_t epoch);

/// Shuffled minibatches; the final partial batch is kept.
std::vector<Batch> batches(const Dataset& d, std::size_t batch_size, std::uint64_t seed,
                           std::uint64_t epoch);

/// Sequential (unshuffled) chunks for evaluation passes.
std::vector<Batch> sequential_batches(const Dataset& d, std::size_t batch_size);

/// Audit manifest: sample_index,label,template_id,raw_mean
void write_manifest(const Dataset& d, const std::filesystem::path& path);

}  // namespace t2fnorm

#endif  // T2FNORM_DATA_HPP
