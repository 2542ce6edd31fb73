#include "t2fnorm/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

namespace t2fnorm {

namespace {

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxError::Kind::io, "cannot open IDX file " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Dataset assemble(std::string id, std::size_t n, std::size_t c, std::size_t size,
                 Eigen::ArrayXd raw, std::vector<std::size_t> labels, std::vector<int> templates,
                 const Standardization& stats) {
  Tensor raw_t({n, c, size, size}, std::move(raw));
  Dataset d;
  d.id = std::move(id);
  d.images = standardize(raw_t, stats);
  d.labels = std::move(labels);
  d.stats = stats;
  d.template_ids = std::move(templates);
  return d;
}

// Raw ID pixels and labels in class-major order.
Eigen::ArrayXd render_id_raw(const SyntheticSpec& spec, std::vector<std::size_t>& labels,
                             std::vector<int>& templates) {
  const std::size_t plane = spec.image_size * spec.image_size;
  const std::size_t n = spec.classes * spec.samples_per_class;
  Eigen::ArrayXd raw(idx(n * spec.channels * plane));
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::size_t s = 0;
  for (std::size_t k = 0; k < spec.classes; ++k) {
    const Eigen::ArrayXd tmpl = render_template(template_bank()[k], spec.image_size, spec.amplitude);
    for (std::size_t i = 0; i < spec.samples_per_class; ++i, ++s) {
      for (std::size_t c = 0; c < spec.channels; ++c) {
        auto dst = raw.segment(idx((s * spec.channels + c) * plane), idx(plane));
        for (std::size_t p = 0; p < plane; ++p) dst(idx(p)) = tmpl(idx(p)) + spec.noise * noise(rng);
      }
      labels.push_back(k);
      templates.push_back(static_cast<int>(k));
    }
  }
  return raw;
}

}  // namespace

// ---------------------------------------------------------------------------
// Dataset

Tensor Dataset::gather(std::span<const std::size_t> indices) const {
  const std::size_t per = size() == 0 ? 0 : images.numel() / size();
  Eigen::ArrayXd out(idx(indices.size() * per));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw std::out_of_range("Dataset::gather: index out of range");
    out.segment(idx(i * per), idx(per)) = images.values().segment(idx(indices[i] * per), idx(per));
  }
  return Tensor({indices.size(), channels(), height(), width()}, std::move(out));
}

std::vector<std::size_t> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<std::size_t> out;
  if (!labelled()) return out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::head(std::size_t count) const {
  count = std::min(count, size());
  std::vector<std::size_t> first(count);
  for (std::size_t i = 0; i < count; ++i) first[i] = i;
  Dataset d;
  d.id = id;
  d.images = gather(first);
  d.labels = gather_labels(first);
  d.stats = stats;
  if (!template_ids.empty()) d.template_ids.assign(template_ids.begin(), template_ids.begin() + idx(count));
  return d;
}

// ---------------------------------------------------------------------------
// Standardization

Standardization compute_standardization(const Tensor& raw) {
  if (raw.rank() != 4) throw TensorError("compute_standardization: expected N x C x H x W");
  const std::size_t N = raw.dim(0), C = raw.dim(1), HW = raw.dim(2) * raw.dim(3);
  Standardization st{Eigen::ArrayXd::Zero(idx(C)), Eigen::ArrayXd::Ones(idx(C))};
  if (N == 0 || HW == 0) return st;
  const double count = static_cast<double>(N * HW);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t n = 0; n < N; ++n) s += raw.values().segment(idx((n * C + c) * HW), idx(HW)).sum();
    const double mu = s / count;
    double v = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      v += (raw.values().segment(idx((n * C + c) * HW), idx(HW)) - mu).square().sum();
    }
    const double sd = std::sqrt(v / count);
    st.mean(idx(c)) = mu;
    st.stddev(idx(c)) = sd > 0.0 ? sd : 1.0;
  }
  return st;
}

namespace {

Tensor affine_per_channel(const Tensor& x, const Standardization& st, bool forward) {
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (static_cast<std::size_t>(st.mean.size()) != C || static_cast<std::size_t>(st.stddev.size()) != C) {
    throw TensorError("standardize: statistics do not match channel count");
  }
  Eigen::ArrayXd out = x.values();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      auto seg = out.segment(idx((n * C + c) * HW), idx(HW));
      if (forward) {
        seg = (seg - st.mean(idx(c))) / st.stddev(idx(c));
      } else {
        seg = seg * st.stddev(idx(c)) + st.mean(idx(c));
      }
    }
  }
  return Tensor(x.shape(), std::move(out));
}

}  // namespace

Tensor standardize(const Tensor& raw, const Standardization& stats) {
  return affine_per_channel(raw, stats, true);
}

Tensor destandardize(const Tensor& images, const Standardization& stats) {
  return affine_per_channel(images, stats, false);
}

// ---------------------------------------------------------------------------
// Synthetic data

const std::vector<GratingTemplate>& template_bank() {
  using std::numbers::pi;
  // ID classes first, held-out classes after.
  static const std::vector<GratingTemplate> bank = {
      {0.0, 2.0, 0.0},
      {pi / 2, 2.0, 0.0},
      {pi / 4, 3.0, 0.0},
      {3 * pi / 4, 3.0, 0.0},
      {pi / 8, 5.0, 0.0},
      {5 * pi / 8, 5.0, 0.0},
      {3 * pi / 8, 1.0, pi / 2},
      {7 * pi / 8, 1.0, pi / 2},
  };
  return bank;
}

std::size_t template_bank_size() { return template_bank().size(); }

void SyntheticSpec::validate() const {
  if (classes == 0) throw std::invalid_argument("SyntheticSpec: classes must be positive");
  if (classes > template_bank_size()) {
    throw std::invalid_argument("SyntheticSpec: at most " + std::to_string(template_bank_size()) +
                                " classes are available");
  }
  if (image_size == 0 || channels == 0) throw std::invalid_argument("SyntheticSpec: empty images");
  if (!(noise >= 0.0)) throw std::invalid_argument("SyntheticSpec: noise must be non-negative");
}

Eigen::ArrayXd render_template(const GratingTemplate& t, std::size_t size, double amplitude) {
  Eigen::ArrayXd out(idx(size * size));
  const double c = std::cos(t.orientation), s = std::sin(t.orientation);
  const double w = 2.0 * std::numbers::pi * t.frequency / static_cast<double>(size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double u = static_cast<double>(x) * c + static_cast<double>(y) * s;
      out(idx(y * size + x)) = 0.5 + amplitude * std::sin(w * u + t.phase);
    }
  }
  return out;
}

Dataset gen_synthetic_id(const SyntheticSpec& spec, const std::string& id) {
  spec.validate();
  std::vector<std::size_t> labels;
  std::vector<int> templates;
  Eigen::ArrayXd raw = render_id_raw(spec, labels, templates);
  const std::size_t n = labels.size();
  Tensor raw_t({n, spec.channels, spec.image_size, spec.image_size}, raw);
  const Standardization stats = compute_standardization(raw_t);
  return assemble(id, n, spec.channels, spec.image_size, std::move(raw), std::move(labels),
                  std::move(templates), stats);
}

Dataset gen_synthetic_id(const SyntheticSpec& spec, const Standardization& stats,
                         const std::string& id) {
  spec.validate();
  std::vector<std::size_t> labels;
  std::vector<int> templates;
  Eigen::ArrayXd raw = render_id_raw(spec, labels, templates);
  const std::size_t n = labels.size();
  return assemble(id, n, spec.channels, spec.image_size, std::move(raw), std::move(labels),
                  std::move(templates), stats);
}

std::string to_string(OodKind kind) {
  switch (kind) {
    case OodKind::uniform_noise: return "uniform_noise";
    case OodKind::gaussian_noise: return "gaussian_noise";
    case OodKind::shifted_templates: return "shifted_templates";
    case OodKind::held_out_classes: return "held_out_classes";
  }
  return "unknown";
}

OodKind parse_ood_kind(const std::string& name) {
  for (auto k : {OodKind::uniform_noise, OodKind::gaussian_noise, OodKind::shifted_templates,
                 OodKind::held_out_classes}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown OOD kind '" + name + "'");
}

Dataset gen_ood(const OodSpec& ood, const SyntheticSpec& id_spec, const Standardization& stats,
                const std::string& id) {
  id_spec.validate();
  const std::size_t size = id_spec.image_size, ch = id_spec.channels, plane = size * size;
  Eigen::ArrayXd raw(idx(ood.size * ch * plane));
  std::vector<int> templates(ood.size, -1);
  std::mt19937_64 rng(ood.seed);

  switch (ood.kind) {
    case OodKind::uniform_noise: {
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (Eigen::Index i = 0; i < raw.size(); ++i) raw(i) = u(rng);
      break;
    }
    case OodKind::gaussian_noise: {
      std::normal_distribution<double> g(0.5, 0.3);
      for (Eigen::Index i = 0; i < raw.size(); ++i) raw(i) = g(rng);
      break;
    }
    case OodKind::shifted_templates:
    case OodKind::held_out_classes: {
      std::vector<GratingTemplate> pool;
      if (ood.kind == OodKind::shifted_templates) {
        for (std::size_t k = 0; k < id_spec.classes; ++k) {
          GratingTemplate t = template_bank()[k];
          t.orientation += ood.shift;
          pool.push_back(t);
        }
      } else {
        for (std::size_t k = id_spec.classes; k < template_bank_size(); ++k) {
          pool.push_back(template_bank()[k]);
        }
        if (pool.empty()) {
          throw std::invalid_argument("gen_ood: no held-out templates left for " +
                                      std::to_string(id_spec.classes) + " ID classes");
        }
      }
      std::vector<Eigen::ArrayXd> rendered;
      for (const auto& t : pool) rendered.push_back(render_template(t, size, id_spec.amplitude));
      std::normal_distribution<double> noise(0.0, 1.0);
      for (std::size_t s = 0; s < ood.size; ++s) {
        const std::size_t k = s % pool.size();
        templates[s] = ood.kind == OodKind::held_out_classes
                           ? static_cast<int>(id_spec.classes + k)
                           : static_cast<int>(k);
        for (std::size_t c = 0; c < ch; ++c) {
          auto dst = raw.segment(idx((s * ch + c) * plane), idx(plane));
          for (std::size_t p = 0; p < plane; ++p) {
            dst(idx(p)) = rendered[k](idx(p)) + id_spec.noise * noise(rng);
          }
        }
      }
      break;
    }
  }
  return assemble(id.empty() ? to_string(ood.kind) : id, ood.size, ch, size, std::move(raw), {},
                  std::move(templates), stats);
}

// ---------------------------------------------------------------------------
// IDX

IdxImages parse_idx_images(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw IdxError(IdxError::Kind::truncated, "IDX image header truncated");
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic != kIdxImageMagic) {
    throw IdxError(IdxError::Kind::bad_magic, "bad IDX image magic " + std::to_string(magic));
  }
  if (bytes.size() < 16) throw IdxError(IdxError::Kind::truncated, "IDX image header truncated");
  IdxImages out;
  out.count = read_be32(bytes, 4);
  out.rows = read_be32(bytes, 8);
  out.cols = read_be32(bytes, 12);
  const std::size_t payload = out.count * out.rows * out.cols;
  if (bytes.size() - 16 < payload) {
    throw IdxError(IdxError::Kind::truncated, "IDX image payload truncated: expected " +
                                                  std::to_string(payload) + " bytes, found " +
                                                  std::to_string(bytes.size() - 16));
  }
  out.pixels.assign(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(payload));
  return out;
}

std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw IdxError(IdxError::Kind::truncated, "IDX label header truncated");
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic != kIdxLabelMagic) {
    throw IdxError(IdxError::Kind::bad_magic, "bad IDX label magic " + std::to_string(magic));
  }
  if (bytes.size() < 8) throw IdxError(IdxError::Kind::truncated, "IDX label header truncated");
  const std::size_t n = read_be32(bytes, 4);
  if (bytes.size() - 8 < n) throw IdxError(IdxError::Kind::truncated, "IDX label payload truncated");
  return {bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n)};
}

Dataset read_idx(const std::filesystem::path& images, const std::optional<std::filesystem::path>& labels,
                 const std::optional<Standardization>& stats, const std::string& id) {
  const auto image_bytes = slurp(images);
  const IdxImages parsed = parse_idx_images(image_bytes);
  std::vector<std::size_t> ys;
  if (labels) {
    const auto label_bytes = slurp(*labels);
    const auto raw_labels = parse_idx_labels(label_bytes);
    if (raw_labels.size() != parsed.count) {
      throw IdxError(IdxError::Kind::count_mismatch,
                     "IDX label count " + std::to_string(raw_labels.size()) +
                         " differs from image count " + std::to_string(parsed.count));
    }
    ys.assign(raw_labels.begin(), raw_labels.end());
  }
  Eigen::ArrayXd raw(idx(parsed.pixels.size()));
  for (std::size_t i = 0; i < parsed.pixels.size(); ++i) raw(idx(i)) = parsed.pixels[i] / 255.0;
  Tensor raw_t({parsed.count, 1, parsed.rows, parsed.cols}, std::move(raw));
  Dataset d;
  d.id = id;
  d.stats = stats ? *stats : compute_standardization(raw_t);
  d.images = standardize(raw_t, d.stats);
  d.labels = std::move(ys);
  d.template_ids.assign(parsed.count, -1);
  return d;
}

std::vector<std::uint8_t> encode_idx_images(const IdxImages& images) {
  std::vector<std::uint8_t> out;
  write_be32(out, kIdxImageMagic);
  write_be32(out, static_cast<std::uint32_t>(images.count));
  write_be32(out, static_cast<std::uint32_t>(images.rows));
  write_be32(out, static_cast<std::uint32_t>(images.cols));
  out.insert(out.end(), images.pixels.begin(), images.pixels.end());
  return out;
}

std::vector<std::uint8_t> encode_idx_labels(std::span<const std::uint8_t> labels) {
  std::vector<std::uint8_t> out;
  write_be32(out, kIdxLabelMagic);
  write_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

// ---------------------------------------------------------------------------
// Batching

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32),
                    0x5eedu};
  std::mt19937_64 rng(seq);
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

namespace {

std::vector<Batch> chunk(const Dataset& d, const std::vector<std::size_t>& order, std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("batches: batch_size must be at least 1");
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    Batch b;
    b.indices.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
    b.images = d.gather(b.indices);
    b.labels = d.gather_labels(b.indices);
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace

std::vector<Batch> batches(const Dataset& d, std::size_t batch_size, std::uint64_t seed,
                           std::uint64_t epoch) {
  return chunk(d, epoch_permutation(d.size(), seed, epoch), batch_size);
}

std::vector<Batch> sequential_batches(const Dataset& d, std::size_t batch_size) {
  std::vector<std::size_t> order(d.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  return chunk(d, order, batch_size);
}

void write_manifest(const Dataset& d, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  const Tensor raw = destandardize(d.images, d.stats);
  const std::size_t per = d.size() == 0 ? 0 : raw.numel() / d.size();
  out << "sample_index,label,template_id,raw_mean\n";
  char buf[64];
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double m = raw.values().segment(idx(i * per), idx(per)).mean();
    std::snprintf(buf, sizeof buf, "%.17g", m);
    out << i << ',' << (d.labelled() ? std::to_string(d.labels[i]) : std::string("-1")) << ','
        << (i < d.template_ids.size() ? d.template_ids[i] : -1) << ',' << buf << '\n';
  }
}

}  // namespace t2fnorm
