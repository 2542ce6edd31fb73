#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "t2fnorm/data.hpp"

using namespace t2fnorm;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("t2fnorm_data_" + name);
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// Two 2x2 images, written byte by byte.
const std::vector<std::uint8_t> kTwoImages = {
    0x00, 0x00, 0x08, 0x03,  // magic
    0x00, 0x00, 0x00, 0x02,  // count
    0x00, 0x00, 0x00, 0x02,  // rows
    0x00, 0x00, 0x00, 0x02,  // cols
    0, 255, 128, 64,         // image 0
    1, 2, 3, 4,              // image 1
};
const std::vector<std::uint8_t> kTwoLabels = {0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x02, 7, 3};

Eigen::ArrayXd sample(const Dataset& d, std::size_t i) {
  const std::size_t per = d.images.numel() / d.size();
  return d.images.values().segment(static_cast<Eigen::Index>(i * per), static_cast<Eigen::Index>(per));
}

}  // namespace

TEST_CASE("gen_synthetic_id") {
  SyntheticSpec spec;
  spec.samples_per_class = 20;

  SUBCASE("noiseless classes are constant") {
    spec.noise = 0.0;
    const Dataset d = gen_synthetic_id(spec);
    REQUIRE(d.size() == 80);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const std::size_t first = d.labels[i] * 20;
      CHECK((sample(d, i) == sample(d, first)).all());
    }
  }
  SUBCASE("seeded and deterministic") {
    spec.seed = 9;
    const Dataset a = gen_synthetic_id(spec), b = gen_synthetic_id(spec);
    CHECK((a.images.values() == b.images.values()).all());
    CHECK(a.labels == b.labels);
    spec.seed = 10;
    CHECK_FALSE((gen_synthetic_id(spec).images.values() == a.images.values()).all());
  }
  SUBCASE("standardized per channel") {
    spec.channels = 2;
    const Dataset d = gen_synthetic_id(spec);
    CHECK(d.images.shape() == Shape{80, 2, 16, 16});
    for (std::size_t c = 0; c < 2; ++c) {
      double s = 0.0, s2 = 0.0, n = 0.0;
      for (std::size_t i = 0; i < d.size(); ++i)
        for (std::size_t p = 0; p < 256; ++p) {
          const double v = d.images.at((i * 2 + c) * 256 + p);
          s += v, s2 += v * v, n += 1.0;
        }
      CHECK(std::abs(s / n) < 1e-12);
      CHECK(std::abs(s2 / n - 1.0) < 1e-9);
    }
  }
  SUBCASE("nearest-template classification") {
    spec.noise = 0.2;
    spec.samples_per_class = 250;
    const Dataset d = gen_synthetic_id(spec);
    const Tensor raw = destandardize(d.images, d.stats);
    std::vector<Eigen::ArrayXd> templates;
    for (std::size_t k = 0; k < spec.classes; ++k) {
      templates.push_back(render_template(template_bank()[k], 16, spec.amplitude));
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      const Eigen::ArrayXd x = raw.values().segment(static_cast<Eigen::Index>(i * 256), 256);
      std::size_t best = 0;
      for (std::size_t k = 1; k < templates.size(); ++k) {
        if ((x - templates[k]).square().sum() < (x - templates[best]).square().sum()) best = k;
      }
      correct += best == d.labels[i];
    }
    CHECK(static_cast<double>(correct) / static_cast<double>(d.size()) > 0.99);
  }
  SUBCASE("validation") {
    spec.noise = -0.1;
    CHECK_THROWS(gen_synthetic_id(spec));
    spec.noise = 0.3;
    spec.classes = 9;
    CHECK_THROWS(gen_synthetic_id(spec));
  }
}

TEST_CASE("gen_ood") {
  SyntheticSpec spec;
  spec.samples_per_class = 100;
  const Dataset id = gen_synthetic_id(spec);

  SUBCASE("uniform noise stays inside the standardized unit range") {
    OodSpec o;
    o.size = 300;
    o.seed = 4;
    const Dataset d = gen_ood(o, spec, id.stats);
    CHECK_FALSE(d.labelled());
    const double lo = (0.0 - id.stats.mean(0)) / id.stats.stddev(0);
    const double hi = (1.0 - id.stats.mean(0)) / id.stats.stddev(0);
    CHECK(d.images.values().minCoeff() >= lo);
    CHECK(d.images.values().maxCoeff() <= hi);
    CHECK((gen_ood(o, spec, id.stats).images.values() == d.images.values()).all());
  }
  SUBCASE("held-out classes share no template with the ID classes") {
    OodSpec o;
    o.kind = OodKind::held_out_classes;
    o.size = 40;
    const Dataset d = gen_ood(o, spec, id.stats);
    std::set<int> ood_ids(d.template_ids.begin(), d.template_ids.end());
    std::set<int> id_ids(id.template_ids.begin(), id.template_ids.end());
    for (int t : ood_ids) CHECK(id_ids.count(t) == 0);
    CHECK(ood_ids.size() == template_bank_size() - spec.classes);
    for (int t : ood_ids) {
      const Eigen::ArrayXd a = render_template(template_bank()[static_cast<std::size_t>(t)], 16, 0.15);
      for (int k : id_ids) {
        CHECK((a - render_template(template_bank()[static_cast<std::size_t>(k)], 16, 0.15)).abs().maxCoeff() > 0.01);
      }
    }
    SyntheticSpec all = spec;
    all.classes = template_bank_size();
    CHECK_THROWS(gen_ood(o, all, id.stats));
  }
  SUBCASE("zero shift reproduces the ID distribution") {
    SyntheticSpec clean = spec;
    clean.noise = 0.0;
    const Dataset idc = gen_synthetic_id(clean);
    OodSpec o;
    o.kind = OodKind::shifted_templates;
    o.shift = 0.0;
    o.size = 40;
    const Dataset d = gen_ood(o, clean, idc.stats);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const std::size_t k = static_cast<std::size_t>(d.template_ids[i]);
      CHECK((sample(d, i) - sample(idc, k * 100)).abs().maxCoeff() < 1e-12);
    }
    // With noise the set means agree up to sampling error.
    o.size = 400;
    const Dataset noisy = gen_ood(o, spec, id.stats);
    const double se = 4.0 * 0.3 / id.stats.stddev(0) / std::sqrt(400.0 * 256.0);
    CHECK(std::abs(noisy.images.values().mean() - id.images.values().mean()) < se * std::sqrt(2.0));

    o.shift = 0.5;
    const Dataset moved = gen_ood(o, clean, idc.stats);
    CHECK((sample(moved, 0) - sample(idc, 0)).abs().maxCoeff() > 0.1);
  }
  SUBCASE("kind names") {
    for (auto k : {OodKind::uniform_noise, OodKind::gaussian_noise, OodKind::shifted_templates,
                   OodKind::held_out_classes}) {
      CHECK(parse_ood_kind(to_string(k)) == k);
    }
    CHECK_THROWS(parse_ood_kind("svhn"));
  }
}

TEST_CASE("IDX ingestion") {
  SUBCASE("hand-built stream") {
    const IdxImages parsed = parse_idx_images(kTwoImages);
    CHECK(parsed.count == 2);
    CHECK(parsed.rows == 2);
    CHECK(parsed.cols == 2);
    CHECK(parsed.pixels == std::vector<std::uint8_t>{0, 255, 128, 64, 1, 2, 3, 4});
    CHECK(parse_idx_labels(kTwoLabels) == std::vector<std::uint8_t>{7, 3});
    CHECK(encode_idx_images(parsed) == kTwoImages);

    const auto img = temp_file("images.idx"), lab = temp_file("labels.idx");
    write_bytes(img, kTwoImages);
    write_bytes(lab, kTwoLabels);
    const Dataset d = read_idx(img, lab);
    CHECK(d.images.shape() == Shape{2, 1, 2, 2});
    CHECK(d.labels == std::vector<std::size_t>{7, 3});
    const Tensor raw = destandardize(d.images, d.stats);
    const double want[] = {0, 255, 128, 64, 1, 2, 3, 4};
    for (std::size_t i = 0; i < 8; ++i) CHECK(std::abs(raw.at(i) - want[i] / 255.0) < 1e-9);

    // Externally supplied statistics are used unchanged.
    Standardization s{Eigen::ArrayXd::Constant(1, 0.5), Eigen::ArrayXd::Constant(1, 0.25)};
    const Dataset e = read_idx(img, std::nullopt, s);
    CHECK_FALSE(e.labelled());
    CHECK(e.images.at(1) == (1.0 - 0.5) / 0.25);
    std::filesystem::remove(img);
    std::filesystem::remove(lab);
  }
  SUBCASE("bad magic") {
    auto bytes = kTwoImages;
    bytes[2] = bytes[3] = 0;
    try {
      parse_idx_images(bytes);
      FAIL("accepted a zero magic");
    } catch (const IdxError& e) {
      CHECK(e.kind() == IdxError::Kind::bad_magic);
    }
    CHECK_THROWS_AS(parse_idx_labels(kTwoImages), IdxError);
  }
  SUBCASE("truncated payload") {
    for (std::size_t cut : {std::size_t{2}, std::size_t{10}, kTwoImages.size() - 1}) {
      const std::vector<std::uint8_t> bytes(kTwoImages.begin(), kTwoImages.begin() + static_cast<long>(cut));
      try {
        parse_idx_images(bytes);
        FAIL("accepted a truncated stream");
      } catch (const IdxError& e) {
        CHECK(e.kind() == IdxError::Kind::truncated);
      }
    }
  }
  SUBCASE("label count mismatch") {
    const auto img = temp_file("mm_images.idx"), lab = temp_file("mm_labels.idx");
    write_bytes(img, kTwoImages);
    const std::vector<std::uint8_t> one{1};
    write_bytes(lab, encode_idx_labels(one));
    try {
      read_idx(img, lab);
      FAIL("accepted mismatched labels");
    } catch (const IdxError& e) {
      CHECK(e.kind() == IdxError::Kind::count_mismatch);
    }
    std::filesystem::remove(img);
    std::filesystem::remove(lab);
    try {
      read_idx(temp_file("does_not_exist.idx"));
      FAIL("read a missing file");
    } catch (const IdxError& e) {
      CHECK(e.kind() == IdxError::Kind::io);
    }
  }
  SUBCASE("empty payload") {
    const std::vector<std::uint8_t> empty = {0, 0, 8, 3, 0, 0, 0, 0, 0, 0, 0, 28, 0, 0, 0, 28};
    CHECK(parse_idx_images(empty).count == 0);
    const auto img = temp_file("empty.idx");
    write_bytes(img, empty);
    const Dataset d = read_idx(img);
    CHECK(d.size() == 0);
    std::filesystem::remove(img);
  }
}

TEST_CASE("batching") {
  SyntheticSpec spec;
  spec.samples_per_class = 13;
  spec.image_size = 4;
  const Dataset d = gen_synthetic_id(spec);

  SUBCASE("batches partition the dataset") {
    const auto bs = batches(d, 10, 7, 3);
    CHECK(bs.size() == 6);
    CHECK(bs.back().indices.size() == 2);
    std::vector<std::size_t> all;
    for (const auto& b : bs) {
      all.insert(all.end(), b.indices.begin(), b.indices.end());
      for (std::size_t j = 0; j < b.indices.size(); ++j) {
        CHECK(b.labels[j] == d.labels[b.indices[j]]);
        CHECK((b.images.values().segment(static_cast<Eigen::Index>(j * 16), 16) ==
               sample(d, b.indices[j])).all());
      }
    }
    std::sort(all.begin(), all.end());
    for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i] == i);
  }
  SUBCASE("one batch when it is large enough") {
    const auto bs = batches(d, 1000, 1, 1);
    REQUIRE(bs.size() == 1);
    std::vector<std::size_t> idx = bs[0].indices;
    std::sort(idx.begin(), idx.end());
    CHECK(idx.size() == d.size());
    CHECK(std::adjacent_find(idx.begin(), idx.end()) == idx.end());
  }
  SUBCASE("replay") {
    CHECK(epoch_permutation(52, 7, 3) == epoch_permutation(52, 7, 3));
    CHECK(epoch_permutation(52, 7, 3) != epoch_permutation(52, 7, 4));
    CHECK(epoch_permutation(52, 7, 3) != epoch_permutation(52, 8, 3));
    CHECK_THROWS(batches(d, 0, 1, 1));
  }
  SUBCASE("sequential") {
    const auto bs = sequential_batches(d, 20);
    CHECK(bs.size() == 3);
    CHECK(bs[1].indices.front() == 20);
  }
}

TEST_CASE("standardization round trip and manifest") {
  SyntheticSpec spec;
  spec.samples_per_class = 5;
  spec.channels = 3;
  spec.image_size = 6;
  const Dataset d = gen_synthetic_id(spec);
  const Tensor raw = destandardize(d.images, d.stats);
  CHECK((standardize(raw, d.stats).values() - d.images.values()).abs().maxCoeff() < 1e-9);
  CHECK((destandardize(standardize(raw, d.stats), d.stats).values() - raw.values()).abs().maxCoeff() < 1e-9);

  const auto path = temp_file("manifest.csv");
  write_manifest(d, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "sample_index,label,template_id,raw_mean");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    const std::size_t i = rows++;
    CHECK(line.rfind(std::to_string(i) + "," + std::to_string(d.labels[i]) + "," + std::to_string(d.labels[i]) + ",", 0) == 0);
  }
  CHECK(rows == d.size());
  std::filesystem::remove(path);

  const Dataset h = d.head(3);
  CHECK(h.size() == 3);
  CHECK(h.labels.size() == 3);
  CHECK(d.head(1000).size() == d.size());
}
