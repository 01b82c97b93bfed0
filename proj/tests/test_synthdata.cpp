#include <doctest.h>

#include <cmath>
#include <map>
#include <numbers>
#include <set>

#include "cseg/eval.hpp"
#include "cseg/synthdata.hpp"
#include "support.hpp"

using namespace cseg;
using namespace cseg::testing;

namespace {

bool binary_values(const Tensor& t) {
  for (double v : t.values()) {
    if (v != 0.0 && v != 1.0) return false;
  }
  return true;
}

// Foreground rows (or cols) span of a [1,H,W] mask.
std::pair<std::size_t, std::size_t> foreground_span(const Tensor& mask, CropAxis axis) {
  const std::size_t rows = mask.dim(1), cols = mask.dim(2);
  std::size_t lo = SIZE_MAX, hi = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      if (mask[r * cols + c] == 0.0) continue;
      const std::size_t k = axis == CropAxis::rows ? r : c;
      lo = std::min(lo, k);
      hi = std::max(hi, k);
    }
  }
  return {lo, hi};
}

SegSample single(int patient) {
  SegSample s;
  s.sample_id = "p" + std::to_string(patient);
  s.patient_id = patient;
  s.image = Tensor({1, 8, 8});
  s.mask = Tensor({1, 8, 8});
  return s;
}

GenParams full_geometry() {
  GenParams p;
  p.rows = 256;
  p.cols = 256;
  p.radius_min = 12;
  p.radius_max = 18;
  return p;
}

}  // namespace

TEST_SUITE("synthdata") {
  TEST_CASE("same seed gives a bit-identical sample") {
    const GenParams p;
    Rng a(42), b(42), c(43);
    const SegSample s1 = generate_sample(p, a), s2 = generate_sample(p, b), s3 = generate_sample(p, c);
    CHECK(s1.image == s2.image);
    CHECK(s1.mask == s2.mask);
    CHECK(s1.laterality == s2.laterality);
    CHECK_FALSE(s1.image == s3.image);
  }

  TEST_CASE("generated samples are well formed and the disc stays in the band") {
    GenParams p;
    Rng rng(1);
    for (int i = 0; i < 100; ++i) {
      const SegSample s = generate_sample(p, rng);
      REQUIRE(s.image.shape() == Shape{1, p.rows, p.cols});
      REQUIRE(s.mask.shape() == s.image.shape());
      CHECK(binary_values(s.mask));
      for (double v : s.image.values()) CHECK((v >= 0.0 && v <= 1.0));
      const auto c = centroid(s.mask);
      REQUIRE(c.has_value());
      CHECK(c->row >= p.band_lo * double(p.rows));
      CHECK(c->row <= p.band_hi * double(p.rows));
      const auto [lo, hi] = foreground_span(s.mask, CropAxis::rows);
      CHECK(double(lo) >= p.band_lo * double(p.rows));
      CHECK(double(hi) <= p.band_hi * double(p.rows));
      CHECK(largest_component(s.mask) == s.mask);
    }
  }

  TEST_CASE("disc area fraction respects the radius interval") {
    const GenParams p;
    const double hw = double(p.rows * p.cols), half_diag = std::sqrt(0.5);
    const double lo = std::numbers::pi * std::pow(p.radius_min - half_diag, 2) / hw;
    const double hi = std::numbers::pi * std::pow(p.radius_max + half_diag, 2) / hw;
    Rng rng(2);
    double sum = 0.0;
    for (int i = 0; i < 100; ++i) {
      const double frac = double(generate_sample(p, rng).foreground()) / hw;
      CHECK(frac >= lo);
      CHECK(frac <= hi);
      sum += frac;
    }
    const double mean_r2 = (std::pow(p.radius_max, 3) - std::pow(p.radius_min, 3)) / (3 * (p.radius_max - p.radius_min));
    CHECK(sum / 100.0 == doctest::Approx(std::numbers::pi * mean_r2 / hw).epsilon(0.15));
  }

  TEST_CASE("left eyes mirror image and mask of the same anatomy") {
    const GenParams p;
    Rng a(3);
    EyeAnatomy right = draw_anatomy(p, Laterality::right, a);
    EyeAnatomy left = right;
    left.laterality = Laterality::left;
    Rng r1(9), r2(9);
    const SegSample sr = render_scan(p, right, r1), sl = render_scan(p, left, r2);
    CHECK(sl.laterality == Laterality::left);
    CHECK(mirror_columns(sr).image == sl.image);
    CHECK(mirror_columns(sr).mask == sl.mask);
  }

  TEST_CASE("infeasible geometry is rejected") {
    GenParams p;
    p.radius_max = 20;
    Rng rng(1);
    CHECK_THROWS_AS(generate_sample(p, rng), std::invalid_argument);
    p = GenParams{};
    p.band_lo = 0.7;
    p.band_hi = 0.6;
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
    p = GenParams{};
    p.radius_min = 0;
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  }

  TEST_CASE("split examples") {
    std::vector<SegSample> ten;
    for (int i = 0; i < 10; ++i) ten.push_back(single(i));
    Rng rng(4);
    const Split s = split_by_patient(ten, {0.8, 0.1, 0.1}, rng);
    CHECK(s.train.size() == 8);
    CHECK(s.validation.size() == 1);
    CHECK(s.test.size() == 1);

    std::vector<SegSample> two{single(1), single(2)};
    CHECK_THROWS_AS(split_by_patient(two, {0.8, 0.1, 0.1}, rng), std::invalid_argument);
    CHECK_THROWS_AS(split_by_patient(ten, {0.8, 0.1, 0.2}, rng), std::invalid_argument);
    CHECK_THROWS_AS(split_by_patient(ten, {1.0, 0.0, 0.0}, rng), std::invalid_argument);
  }

  TEST_CASE("64 patients split disjointly") {
    std::vector<SegSample> all;
    for (int i = 0; i < 64; ++i) all.push_back(single(i));
    Rng rng(5);
    const Split s = split_by_patient(all, {0.75, 0.1, 0.15}, rng);
    std::map<int, int> seen;
    for (const auto* part : {&s.train, &s.validation, &s.test}) {
      for (const auto& x : *part) seen[x.patient_id]++;
    }
    CHECK(seen.size() == 64);
    for (auto [id, n] : seen) CHECK(n == 1);
  }

  TEST_CASE("corpus co-locates every patient's scans") {
    const GenParams p;
    CorpusSpec spec;
    spec.patients = 30;
    spec.repeat_probability = 0.8;
    spec.both_eyes_probability = 0.8;
    Rng rng(6);
    const auto corpus = generate_corpus(p, spec, rng);
    std::map<int, int> per_patient;
    std::set<std::string> ids;
    for (const auto& s : corpus) {
      per_patient[s.patient_id]++;
      ids.insert(s.sample_id);
      CHECK(s.sample_id.rfind("p" + std::to_string(s.patient_id) + "_e" + std::to_string(s.eye_id) + "_s", 0) == 0);
    }
    CHECK(ids.size() == corpus.size());
    CHECK(per_patient.size() == 30);
    CHECK(std::any_of(per_patient.begin(), per_patient.end(), [](auto kv) { return kv.second > 1; }));

    Rng srng(7);
    const Split s = split_by_patient(corpus, {0.7, 0.15, 0.15}, srng);
    std::map<int, int> home;
    int idx = 0;
    for (const auto* part : {&s.train, &s.validation, &s.test}) {
      for (const auto& x : *part) {
        auto [it, fresh] = home.emplace(x.patient_id, idx);
        CHECK(it->second == idx);
      }
      ++idx;
    }
    CHECK(s.train.size() + s.validation.size() + s.test.size() == corpus.size());
  }

  TEST_CASE("preprocess examples") {
    Tensor big({2048, 2048});
    Rng rng(8);
    for (auto& v : big.values()) v = rng.uniform(0, 4000);
    const Tensor small = preprocess(big, 8);
    CHECK(small.shape() == Shape{256, 256});

    Tensor unit({1, 3, 4});
    for (std::size_t i = 0; i < unit.size(); ++i) unit[i] = double(i) / double(unit.size() - 1);
    CHECK(preprocess(unit, 1) == unit);

    const Tensor flat({1, 8, 8}, 0.3);
    const Tensor zeros = preprocess(flat, 2);
    for (double v : zeros.values()) CHECK(v == 0.0);
    CHECK_THROWS_AS(preprocess(Tensor({1, 9, 8}), 2), std::invalid_argument);

    // 2x4 ramp: block means 2.5 and 4.5 normalise to 0 and 1.
    Tensor ramp({1, 2, 4});
    for (std::size_t i = 0; i < 8; ++i) ramp[i] = double(i);
    const Tensor pr = preprocess(ramp, 2);
    CHECK(pr.shape() == Shape{1, 1, 2});
    CHECK(pr[0] == 0.0);
    CHECK(pr[1] == 1.0);

    Tensor mask({1, 4, 4});
    mask.at({0, 0, 0}) = mask.at({0, 0, 1}) = 1;
    mask.at({0, 2, 2}) = 1;
    const Tensor dm = downscale_mask(mask, 2);
    CHECK(dm.at({0, 0, 0}) == 1.0);
    CHECK(dm.at({0, 1, 1}) == 0.0);
  }

  TEST_CASE("crop examples") {
    Rng rng(9);
    const SegSample s = generate_sample(GenParams{}, rng);
    const SegSample same = crop_band(s, {s.rows(), 0, CropAxis::rows});
    CHECK(same.image == s.image);
    CHECK(same.mask == s.mask);
    CHECK_FALSE(same.truncated);

    const GenParams big = full_geometry();
    Rng r2(10);
    const SegSample ps = generate_sample(big, r2);
    const CropSpec spec = CropSpec::centered(256, 96, 0.5 * (big.band_lo + big.band_hi) * 256, CropAxis::rows);
    CHECK(spec.offset == 80);
    const SegSample c = crop_band(ps, spec);
    CHECK(c.image.shape() == Shape{1, 96, 256});
    CHECK(c.foreground() == ps.foreground());
    CHECK_FALSE(c.truncated);
    CHECK(c.patient_id == ps.patient_id);
    CHECK(c.sample_id == ps.sample_id);

    // Band far from the disc: empty mask and a truncation flag.
    const SegSample away = crop_band(s, {8, 0, CropAxis::rows});
    CHECK(away.truncated);
    CHECK(away.foreground() == 0);

    CHECK_THROWS_AS(crop_band(s, {40, 30, CropAxis::rows}), std::invalid_argument);
    CHECK_THROWS_AS(crop_band(s, {0, 0, CropAxis::rows}), std::invalid_argument);
    CHECK(CropSpec::centered(64, 24, 2.0, CropAxis::rows).offset == 0);
    CHECK(CropSpec::centered(64, 24, 63.0, CropAxis::rows).offset == 40);
  }
}

TEST_SUITE("synthdata-properties") {
  TEST_CASE("crop to the full extent is the identity") {
    Rng rng(11);
    for (int i = 0; i < 30; ++i) {
      const SegSample s = generate_sample(GenParams{}, rng);
      for (CropAxis a : {CropAxis::rows, CropAxis::cols}) {
        const SegSample c = crop_band(s, {a == CropAxis::rows ? s.rows() : s.cols(), 0, a});
        CHECK(c.image == s.image);
        CHECK(c.mask == s.mask);
      }
    }
  }

  TEST_CASE("row crops commute with the column mirror") {
    Rng rng(12);
    for (int i = 0; i < 30; ++i) {
      const SegSample s = generate_sample(GenParams{}, rng);
      const std::size_t extent = 1 + rng.below(s.rows());
      const CropSpec spec{extent, rng.below(s.rows() - extent + 1), CropAxis::rows};
      const SegSample a = mirror_columns(crop_band(s, spec)), b = crop_band(mirror_columns(s), spec);
      CHECK(a.image == b.image);
      CHECK(a.mask == b.mask);
    }
  }

  TEST_CASE("crop foreground never grows and equality matches the flag") {
    Rng rng(13);
    for (int i = 0; i < 200; ++i) {
      const SegSample s = generate_sample(GenParams{}, rng);
      const CropAxis axis = rng.bernoulli(0.5) ? CropAxis::rows : CropAxis::cols;
      const std::size_t full = axis == CropAxis::rows ? s.rows() : s.cols();
      const std::size_t extent = 1 + rng.below(full);
      const SegSample c = crop_band(s, {extent, rng.below(full - extent + 1), axis});
      CHECK(c.foreground() <= s.foreground());
      CHECK((c.foreground() == s.foreground()) == !c.truncated);
    }
  }

  TEST_CASE("preprocess output lies in [0,1]") {
    Rng rng(14);
    for (int i = 0; i < 100; ++i) {
      const std::size_t f = 1 + rng.below(4);
      const Tensor img = random_tensor({1, f * (1 + rng.below(6)), f * (1 + rng.below(6))}, rng, -50, 50);
      const Tensor out = preprocess(img, f);
      for (double v : out.values()) CHECK((v >= 0.0 && v <= 1.0));
    }
  }

  TEST_CASE("splits of random corpora are disjoint and complete") {
    Rng rng(15);
    for (int i = 0; i < 30; ++i) {
      std::vector<SegSample> all;
      const int patients = 3 + int(rng.below(40));
      for (int p = 0; p < patients; ++p) {
        const int scans = 1 + int(rng.below(4));
        for (int k = 0; k < scans; ++k) all.push_back(single(p));
      }
      double a = rng.uniform(0.2, 1), b = rng.uniform(0.05, 1), c = rng.uniform(0.05, 1);
      const double t = a + b + c;
      const Split s = split_by_patient(all, {a / t, b / t, c / t}, rng);
      CHECK(s.train.size() + s.validation.size() + s.test.size() == all.size());
      CHECK_FALSE(s.train.empty());
      CHECK_FALSE(s.validation.empty());
      CHECK_FALSE(s.test.empty());
      std::set<int> tr, va, te;
      for (auto& x : s.train) tr.insert(x.patient_id);
      for (auto& x : s.validation) va.insert(x.patient_id);
      for (auto& x : s.test) te.insert(x.patient_id);
      for (int id : va) CHECK(tr.count(id) == 0);
      for (int id : te) CHECK((tr.count(id) == 0 && va.count(id) == 0));
    }
  }
}
