#include <array>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>

#include "t2fnorm/nn.hpp"

namespace t2fnorm {

namespace {

constexpr std::array<char, 8> kMagic = {'T', '2', 'F', 'N', 'S', 'N', 'A', 'P'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw std::runtime_error("model snapshot truncated");
  return v;
}

void put_size(std::ostream& out, std::size_t v) { put<std::uint64_t>(out, v); }
std::size_t get_size(std::istream& in) { return static_cast<std::size_t>(get<std::uint64_t>(in)); }

}  // namespace

void save_model(const ModelState& m, std::ostream& out) {
  const ModelSpec& s = m.spec;
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, kVersion);
  put_size(out, s.in_channels);
  put_size(out, s.in_height);
  put_size(out, s.in_width);
  put_size(out, s.blocks.size());
  for (const auto& b : s.blocks) {
    put_size(out, b.out_channels);
    put_size(out, b.stride);
  }
  put_size(out, s.classes);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.method));
  put<double>(out, s.tau);
  put<double>(out, s.tau_logit);
  put<std::int32_t>(out, s.p_norm);
  put_size(out, s.normalize_after_block);
  put<double>(out, s.penalty_weight);
  put_size(out, m.epoch);

  put_size(out, m.params.size());
  for (const auto& p : m.params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.role));
    put_size(out, p.value.rank());
    for (auto d : p.value.shape()) put_size(out, d);
    out.write(reinterpret_cast<const char*>(p.value.values().data()),
              static_cast<std::streamsize>(p.value.numel() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("failed writing model snapshot");
}

ModelState load_model(std::istream& in) {
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw std::runtime_error("not a model snapshot (bad magic)");
  if (get<std::uint32_t>(in) != kVersion) throw std::runtime_error("unsupported snapshot version");

  ModelState m;
  ModelSpec& s = m.spec;
  s.in_channels = get_size(in);
  s.in_height = get_size(in);
  s.in_width = get_size(in);
  s.blocks.resize(get_size(in));
  for (auto& b : s.blocks) {
    b.out_channels = get_size(in);
    b.stride = get_size(in);
  }
  s.classes = get_size(in);
  const auto method = get<std::uint32_t>(in);
  if (method > static_cast<std::uint32_t>(Method::feature_penalty)) {
    throw std::runtime_error("snapshot has an unknown method tag");
  }
  s.method = static_cast<Method>(method);
  s.tau = get<double>(in);
  s.tau_logit = get<double>(in);
  s.p_norm = get<std::int32_t>(in);
  s.normalize_after_block = get_size(in);
  s.penalty_weight = get<double>(in);
  m.epoch = get_size(in);
  s.validate();

  const std::size_t count = get_size(in);
  for (std::size_t i = 0; i < count; ++i) {
    Parameter p;
    p.name.resize(get<std::uint32_t>(in));
    in.read(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    const auto role = get<std::uint32_t>(in);
    if (role > static_cast<std::uint32_t>(ParamRole::fc_bias)) {
      throw std::runtime_error("snapshot has an unknown parameter role");
    }
    p.role = static_cast<ParamRole>(role);
    Shape shape(get_size(in));
    for (auto& d : shape) d = get_size(in);
    Eigen::ArrayXd values(static_cast<Eigen::Index>(shape_numel(shape)));
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * static_cast<Eigen::Index>(sizeof(double))));
    if (!in) throw std::runtime_error("model snapshot truncated");
    p.value = Tensor(std::move(shape), std::move(values), true);
    m.params.push_back(std::move(p));
  }
  // Shape check against a fresh model of the same spec.
  const ModelState ref = init_model(s, 0);
  if (ref.params.size() != m.params.size()) throw std::runtime_error("snapshot parameter count mismatch");
  for (std::size_t i = 0; i < ref.params.size(); ++i) {
    if (ref.params[i].name != m.params[i].name || ref.params[i].value.shape() != m.params[i].value.shape()) {
      throw std::runtime_error("snapshot parameter '" + m.params[i].name + "' does not match spec");
    }
  }
  return m;
}

void save_model(const ModelState& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  save_model(m, out);
}

ModelState load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return load_model(in);
}

}  // namespace t2fnorm
