#include "cseg/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>

namespace cseg {

namespace {

// Rendering canvas in (band, cross) coordinates.
struct Canvas {
  std::size_t nb, nc;
  std::vector<double> value;
  std::vector<double> mask;

  Canvas(std::size_t b, std::size_t c) : nb(b), nc(c), value(b * c, 0.0), mask(b * c, 0.0) {}
  double& at(std::size_t b, std::size_t c) { return value[b * nc + c]; }
};

// Normalised elliptical radius of (b, c) w.r.t. a disc.
double ellipse_rho(double b, double c, double cb, double cc, double rb, double rc) {
  const double db = (b - cb) / rb, dc = (c - cc) / rc;
  return std::sqrt(db * db + dc * dc);
}

// Dome-shaped disc profile, slightly softened past the rim.
double disc_profile(double rho) {
  if (rho <= 1.0) return 0.85 + 0.15 * (1.0 - rho * rho);
  return std::max(0.0, 0.85 * (1.0 - (rho - 1.0) / 0.15));
}

void stamp_disc(Canvas& cv, double cb, double cc, double rb, double rc, double contrast, bool write_mask) {
  const double reach = std::max(rb, rc) * 1.2 + 1.0;
  const auto b0 = static_cast<std::ptrdiff_t>(std::floor(cb - reach));
  const auto b1 = static_cast<std::ptrdiff_t>(std::ceil(cb + reach));
  const auto c0 = static_cast<std::ptrdiff_t>(std::floor(cc - reach));
  const auto c1 = static_cast<std::ptrdiff_t>(std::ceil(cc + reach));
  for (std::ptrdiff_t b = std::max<std::ptrdiff_t>(0, b0); b <= std::min<std::ptrdiff_t>(cv.nb - 1, b1); ++b) {
    for (std::ptrdiff_t c = std::max<std::ptrdiff_t>(0, c0); c <= std::min<std::ptrdiff_t>(cv.nc - 1, c1); ++c) {
      const double rho = ellipse_rho(static_cast<double>(b), static_cast<double>(c), cb, cc, rb, rc);
      const std::size_t i = static_cast<std::size_t>(b) * cv.nc + static_cast<std::size_t>(c);
      cv.value[i] += contrast * disc_profile(rho);
      if (write_mask && rho <= 1.0) cv.mask[i] = 1.0;
    }
  }
}

double signed_contrast(const GenParams& p, Rng& rng) {
  const double magnitude = rng.uniform(p.contrast_min, p.contrast_max);
  return rng.bernoulli(p.dark_probability) ? -magnitude : magnitude;
}

void draw_background(const GenParams& p, Canvas& cv, Rng& rng) {
  const double level = rng.uniform(0.45, 0.55);
  const double grad_b = rng.uniform(-0.06, 0.06), grad_c = rng.uniform(-0.06, 0.06);
  const double vignette = rng.uniform(0.05, 0.15);
  const double scale = static_cast<double>(std::max(cv.nb, cv.nc)) / 64.0;
  struct Bump {
    double b, c, sigma, amp;
  };
  std::vector<Bump> bumps(6);
  for (auto& bump : bumps) {
    bump = {rng.uniform(0.0, static_cast<double>(cv.nb)), rng.uniform(0.0, static_cast<double>(cv.nc)),
            rng.uniform(4.0, 10.0) * scale, rng.uniform(-0.04, 0.04)};
  }
  const double hb = static_cast<double>(cv.nb) / 2.0, hc = static_cast<double>(cv.nc) / 2.0;
  for (std::size_t b = 0; b < cv.nb; ++b) {
    for (std::size_t c = 0; c < cv.nc; ++c) {
      const double ub = (static_cast<double>(b) - hb) / hb, uc = (static_cast<double>(c) - hc) / hc;
      double v = level + grad_b * ub / 2.0 + grad_c * uc / 2.0 - vignette * (ub * ub + uc * uc) / 2.0;
      for (const auto& bump : bumps) {
        const double db = static_cast<double>(b) - bump.b, dc = static_cast<double>(c) - bump.c;
        v += bump.amp * std::exp(-(db * db + dc * dc) / (2.0 * bump.sigma * bump.sigma));
      }
      cv.at(b, c) = v;
    }
  }
  (void)p;
}

void draw_distractors(const GenParams& p, const EyeAnatomy& eye, double cb, double cc, Canvas& cv, Rng& rng) {
  const int count = rng.between(p.distractors_min, p.distractors_max);
  const double disc_r = std::max(eye.radius_band, eye.radius_cross);
  for (int k = 0; k < count; ++k) {
    const double rb = rng.uniform(0.7, 1.0) * rng.uniform(p.radius_min, p.radius_max);
    const double rc = rng.uniform(0.7, 1.0) * rng.uniform(p.radius_min, p.radius_max);
    const double contrast = p.distractor_contrast * signed_contrast(p, rng);
    // Rejection-sample a centre clear of the disc.
    for (int attempt = 0; attempt < 50; ++attempt) {
      const double b = rng.uniform(0.0, static_cast<double>(cv.nb - 1));
      const double c = rng.uniform(0.0, static_cast<double>(cv.nc - 1));
      if (std::hypot(b - cb, c - cc) > disc_r + std::max(rb, rc) * 1.2 + 2.0) {
        stamp_disc(cv, b, c, rb, rc, contrast, false);
        break;
      }
    }
  }
}

void draw_vessels(const GenParams& p, const EyeAnatomy& eye, double cb, double cc, Canvas& cv) {
  Rng rng(eye.vessel_seed);
  const int count = rng.between(p.vessels_min, p.vessels_max);
  const double span = static_cast<double>(std::max(cv.nb, cv.nc));
  for (int k = 0; k < count; ++k) {
    double heading = 2.0 * std::numbers::pi * (static_cast<double>(k) + rng.uniform(-0.3, 0.3)) / count;
    const double depth = p.vessel_depth * rng.uniform(0.6, 1.0);
    const auto steps = static_cast<int>(rng.uniform(0.4, 0.9) * span);
    double b = cb, c = cc;
    for (int s = 0; s < steps; ++s) {
      heading += 0.25 * rng.normal();
      b += std::sin(heading);
      c += std::cos(heading);
      const auto ib = static_cast<std::ptrdiff_t>(std::lround(b));
      const auto ic = static_cast<std::ptrdiff_t>(std::lround(c));
      if (ib < 0 || ic < 0 || ib >= static_cast<std::ptrdiff_t>(cv.nb) || ic >= static_cast<std::ptrdiff_t>(cv.nc)) {
        break;
      }
      const double taper = 1.0 - 0.6 * static_cast<double>(s) / steps;
      cv.at(static_cast<std::size_t>(ib), static_cast<std::size_t>(ic)) -= depth * taper;
    }
  }
}

SegSample canvas_to_sample(const GenParams& p, const Canvas& cv, Laterality laterality) {
  Tensor image({1, p.rows, p.cols}), mask({1, p.rows, p.cols});
  for (std::size_t r = 0; r < p.rows; ++r) {
    for (std::size_t c = 0; c < p.cols; ++c) {
      const std::size_t src = p.band_axis == CropAxis::rows ? r * cv.nc + c : c * cv.nc + r;
      const std::size_t col = laterality == Laterality::left ? p.cols - 1 - c : c;
      image[r * p.cols + col] = std::clamp(cv.value[src], 0.0, 1.0);
      mask[r * p.cols + col] = cv.mask[src];
    }
  }
  SegSample s;
  s.laterality = laterality;
  s.image = std::move(image);
  s.mask = std::move(mask);
  return s;
}

std::size_t band_extent(const GenParams& p) { return p.band_axis == CropAxis::rows ? p.rows : p.cols; }
std::size_t cross_extent(const GenParams& p) { return p.band_axis == CropAxis::rows ? p.cols : p.rows; }

}  // namespace

std::string_view to_string(Laterality l) { return l == Laterality::right ? "right" : "left"; }

Laterality parse_laterality(std::string_view text) {
  if (text == "right") return Laterality::right;
  if (text == "left") return Laterality::left;
  throw std::invalid_argument("unknown laterality '" + std::string(text) + "'");
}

std::string_view to_string(CropAxis a) { return a == CropAxis::rows ? "rows" : "cols"; }

CropAxis parse_crop_axis(std::string_view text) {
  if (text == "rows") return CropAxis::rows;
  if (text == "cols") return CropAxis::cols;
  throw std::invalid_argument("unknown crop axis '" + std::string(text) + "' (expected rows or cols)");
}

std::size_t SegSample::foreground() const {
  std::size_t n = 0;
  for (double v : mask.values()) n += v != 0.0;
  return n;
}

void GenParams::validate() const {
  if (rows < 8 || cols < 8) throw std::invalid_argument("gen params: image must be at least 8x8");
  if (!(0.0 <= band_lo && band_lo < band_hi && band_hi <= 1.0)) {
    throw std::invalid_argument("gen params: band fractions need 0 <= band_lo < band_hi <= 1");
  }
  if (!(0.0 <= cross_lo && cross_lo <= cross_hi && cross_hi <= 1.0)) {
    throw std::invalid_argument("gen params: cross fractions need 0 <= cross_lo <= cross_hi <= 1");
  }
  if (!(radius_min > 0.0 && radius_min <= radius_max)) {
    throw std::invalid_argument("gen params: radius range needs 0 < radius_min <= radius_max");
  }
  const double band_pixels = (band_hi - band_lo) * static_cast<double>(band_extent(*this));
  if (2.0 * radius_max > band_pixels) {
    throw std::invalid_argument("gen params: disc diameter " + std::to_string(2.0 * radius_max) +
                                " px does not fit in the " + std::to_string(band_pixels) + " px band");
  }
  if (2.0 * radius_max > static_cast<double>(cross_extent(*this))) {
    throw std::invalid_argument("gen params: disc diameter exceeds the image");
  }
  if (!(contrast_min >= 0.0 && contrast_min <= contrast_max)) {
    throw std::invalid_argument("gen params: contrast range needs 0 <= contrast_min <= contrast_max");
  }
  if (!(dark_probability >= 0.0 && dark_probability <= 1.0) || !(flip_probability >= 0.0 && flip_probability <= 1.0)) {
    throw std::invalid_argument("gen params: probabilities must lie in [0,1]");
  }
  if (vessels_min < 0 || vessels_min > vessels_max || distractors_min < 0 || distractors_min > distractors_max) {
    throw std::invalid_argument("gen params: count ranges need 0 <= min <= max");
  }
  if (noise_sd < 0.0) throw std::invalid_argument("gen params: noise_sd must be non-negative");
  if (band_axis == CropAxis::cols && flip_probability > 0.0 && std::abs(band_lo + band_hi - 1.0) > 1e-9) {
    throw std::invalid_argument("gen params: a column band must be symmetric when laterality flips occur");
  }
}

EyeAnatomy draw_anatomy(const GenParams& params, Rng& rng) {
  const Laterality l = rng.bernoulli(params.flip_probability) ? Laterality::left : Laterality::right;
  return draw_anatomy(params, l, rng);
}

EyeAnatomy draw_anatomy(const GenParams& p, Laterality laterality, Rng& rng) {
  p.validate();
  EyeAnatomy eye;
  eye.laterality = laterality;
  eye.radius_band = rng.uniform(p.radius_min, p.radius_max);
  eye.radius_cross = rng.uniform(p.radius_min, p.radius_max);
  const double nb = static_cast<double>(band_extent(p)), nc = static_cast<double>(cross_extent(p));
  const double lo = p.band_lo * nb + eye.radius_band, hi = p.band_hi * nb - eye.radius_band;
  eye.band_center = rng.uniform(lo, hi);
  const double clo = std::max(p.cross_lo * nc, eye.radius_cross);
  const double chi = std::min(p.cross_hi * nc, nc - 1.0 - eye.radius_cross);
  eye.cross_center = rng.uniform(std::min(clo, chi), std::max(clo, chi));
  eye.contrast = signed_contrast(p, rng);
  eye.vessel_seed = rng.next_u64();
  return eye;
}

SegSample render_scan(const GenParams& p, const EyeAnatomy& eye, Rng& rng) {
  p.validate();
  Canvas cv(band_extent(p), cross_extent(p));
  // Small repositioning jitter between scans, kept inside the band.
  const double nb = static_cast<double>(cv.nb);
  const double cb = std::clamp(eye.band_center + 0.5 * rng.normal(), p.band_lo * nb + eye.radius_band,
                               p.band_hi * nb - eye.radius_band);
  const double cc = eye.cross_center + 0.5 * rng.normal();

  draw_background(p, cv, rng);
  draw_distractors(p, eye, cb, cc, cv, rng);
  stamp_disc(cv, cb, cc, eye.radius_band, eye.radius_cross, eye.contrast, true);
  draw_vessels(p, eye, cb, cc, cv);
  for (auto& v : cv.value) v += p.noise_sd * rng.normal();
  return canvas_to_sample(p, cv, eye.laterality);
}

SegSample generate_sample(const GenParams& params, Rng& rng) {
  const EyeAnatomy eye = draw_anatomy(params, rng);
  SegSample s = render_scan(params, eye, rng);
  s.sample_id = "sample";
  return s;
}

void CorpusSpec::validate() const {
  if (patients < 1) throw std::invalid_argument("corpus: need at least one patient");
  if (max_scans_per_eye < 1) throw std::invalid_argument("corpus: max_scans_per_eye must be >= 1");
  if (!(both_eyes_probability >= 0.0 && both_eyes_probability <= 1.0) ||
      !(repeat_probability >= 0.0 && repeat_probability <= 1.0)) {
    throw std::invalid_argument("corpus: probabilities must lie in [0,1]");
  }
}

std::vector<SegSample> generate_corpus(const GenParams& params, const CorpusSpec& spec, Rng& rng) {
  params.validate();
  spec.validate();
  std::vector<SegSample> out;
  for (int patient = 0; patient < spec.patients; ++patient) {
    Rng prng = rng.fork({static_cast<std::uint64_t>(patient)});
    const bool both = prng.bernoulli(spec.both_eyes_probability);
    const Laterality first = prng.bernoulli(params.flip_probability) ? Laterality::left : Laterality::right;
    const int eyes = both ? 2 : 1;
    for (int e = 0; e < eyes; ++e) {
      const Laterality l = e == 0 ? first : (first == Laterality::left ? Laterality::right : Laterality::left);
      const EyeAnatomy eye = draw_anatomy(params, l, prng);
      const int scans = prng.bernoulli(spec.repeat_probability) ? prng.between(2, std::max(2, spec.max_scans_per_eye))
                                                               : 1;
      for (int s = 0; s < std::min(scans, spec.max_scans_per_eye); ++s) {
        SegSample sample = render_scan(params, eye, prng);
        sample.patient_id = patient;
        sample.eye_id = e;
        sample.sample_id = "p" + std::to_string(patient) + "_e" + std::to_string(e) + "_s" + std::to_string(s);
        out.push_back(std::move(sample));
      }
    }
  }
  return out;
}

Split split_by_patient(const std::vector<SegSample>& samples, std::array<double, 3> fractions, Rng& rng) {
  double total_fraction = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw std::invalid_argument("split: fractions must be positive");
    total_fraction += f;
  }
  if (std::abs(total_fraction - 1.0) > 1e-9) throw std::invalid_argument("split: fractions must sum to 1");

  std::map<int, std::vector<std::size_t>> by_patient;
  for (std::size_t i = 0; i < samples.size(); ++i) by_patient[samples[i].patient_id].push_back(i);
  if (by_patient.size() < 3) {
    throw std::invalid_argument("split: need at least 3 patients, got " + std::to_string(by_patient.size()));
  }
  std::vector<int> patients;
  for (const auto& [id, _] : by_patient) patients.push_back(id);
  for (std::size_t i = patients.size(); i > 1; --i) std::swap(patients[i - 1], patients[rng.below(i)]);

  const double n = static_cast<double>(samples.size());
  std::array<double, 3> target{fractions[0] * n, fractions[1] * n, fractions[2] * n};
  std::array<double, 3> count{0.0, 0.0, 0.0};
  std::array<std::vector<int>, 3> assigned;
  for (int p : patients) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < 3; ++k) {
      if (target[k] - count[k] > target[best] - count[best]) best = k;
    }
    assigned[best].push_back(p);
    count[best] += static_cast<double>(by_patient[p].size());
  }
  // Every split needs a patient: take the smallest one from the largest split.
  for (std::size_t k = 0; k < 3; ++k) {
    if (!assigned[k].empty()) continue;
    std::size_t donor = 0;
    for (std::size_t j = 1; j < 3; ++j) {
      if (assigned[j].size() > assigned[donor].size()) donor = j;
    }
    auto smallest = std::min_element(assigned[donor].begin(), assigned[donor].end(),
                                     [&](int a, int b) { return by_patient[a].size() < by_patient[b].size(); });
    assigned[k].push_back(*smallest);
    assigned[donor].erase(smallest);
  }

  Split split;
  std::array<std::vector<SegSample>*, 3> dst{&split.train, &split.validation, &split.test};
  for (std::size_t k = 0; k < 3; ++k) {
    std::sort(assigned[k].begin(), assigned[k].end());
    for (int p : assigned[k]) {
      for (std::size_t i : by_patient[p]) dst[k]->push_back(samples[i]);
    }
  }
  return split;
}

Tensor preprocess(const Tensor& image, std::size_t factor) {
  if (factor == 0) throw std::invalid_argument("preprocess: factor must be positive");
  if (image.rank() < 2) throw std::invalid_argument("preprocess: expected an image, got " + shape_string(image.shape()));
  const std::size_t rows = image.dim(image.rank() - 2), cols = image.dim(image.rank() - 1);
  if (rows % factor != 0 || cols % factor != 0) {
    throw std::invalid_argument("preprocess: extents " + std::to_string(rows) + "x" + std::to_string(cols) +
                                " not divisible by factor " + std::to_string(factor));
  }
  const std::size_t planes = image.size() / (rows * cols);
  const std::size_t orows = rows / factor, ocols = cols / factor;
  Shape shape = image.shape();
  shape[shape.size() - 2] = orows;
  shape[shape.size() - 1] = ocols;
  Tensor out(shape);
  const double inv = 1.0 / static_cast<double>(factor * factor);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t r = 0; r < orows; ++r) {
      for (std::size_t c = 0; c < ocols; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < factor; ++i) {
          for (std::size_t j = 0; j < factor; ++j) acc += image[p * rows * cols + (r * factor + i) * cols + c * factor + j];
        }
        out[p * orows * ocols + r * ocols + c] = acc * inv;
      }
    }
  }
  const auto [lo, hi] = std::minmax_element(out.values().begin(), out.values().end());
  const double mn = *lo, range = *hi - *lo;
  for (auto& v : out.values()) v = range > 0.0 ? (v - mn) / range : 0.0;
  return out;
}

Tensor downscale_mask(const Tensor& mask, std::size_t factor) {
  if (factor == 0) throw std::invalid_argument("downscale_mask: factor must be positive");
  const std::size_t rows = mask.dim(mask.rank() - 2), cols = mask.dim(mask.rank() - 1);
  if (rows % factor != 0 || cols % factor != 0 || rows * cols != mask.size()) {
    throw std::invalid_argument("downscale_mask: extents not divisible by factor " + std::to_string(factor));
  }
  Shape shape = mask.shape();
  shape[shape.size() - 2] = rows / factor;
  shape[shape.size() - 1] = cols / factor;
  Tensor out(shape);
  const std::size_t ocols = cols / factor;
  for (std::size_t r = 0; r < rows / factor; ++r) {
    for (std::size_t c = 0; c < ocols; ++c) {
      std::size_t on = 0;
      for (std::size_t i = 0; i < factor; ++i) {
        for (std::size_t j = 0; j < factor; ++j) on += mask[(r * factor + i) * cols + c * factor + j] != 0.0;
      }
      out[r * ocols + c] = 2 * on >= factor * factor ? 1.0 : 0.0;
    }
  }
  return out;
}

CropSpec CropSpec::centered(std::size_t full, std::size_t extent, double center, CropAxis axis) {
  if (extent == 0 || extent > full) {
    throw std::invalid_argument("crop: extent " + std::to_string(extent) + " must lie in [1, " + std::to_string(full) + "]");
  }
  const double start = std::round(center - static_cast<double>(extent) / 2.0);
  const double clamped = std::clamp(start, 0.0, static_cast<double>(full - extent));
  return CropSpec{extent, static_cast<std::size_t>(clamped), axis};
}

SegSample crop_band(const SegSample& sample, const CropSpec& spec) {
  const std::size_t rows = sample.rows(), cols = sample.cols();
  const std::size_t full = spec.axis == CropAxis::rows ? rows : cols;
  if (spec.extent == 0 || spec.offset + spec.extent > full) {
    throw std::invalid_argument("crop_band: band [" + std::to_string(spec.offset) + ", " +
                                std::to_string(spec.offset + spec.extent) + ") exceeds the " + std::to_string(full) +
                                " " + std::string(to_string(spec.axis)) + " of sample " + sample.sample_id);
  }
  const std::size_t orows = spec.axis == CropAxis::rows ? spec.extent : rows;
  const std::size_t ocols = spec.axis == CropAxis::cols ? spec.extent : cols;
  const std::size_t r0 = spec.axis == CropAxis::rows ? spec.offset : 0;
  const std::size_t c0 = spec.axis == CropAxis::cols ? spec.offset : 0;

  SegSample out;
  out.sample_id = sample.sample_id;
  out.patient_id = sample.patient_id;
  out.eye_id = sample.eye_id;
  out.laterality = sample.laterality;
  out.image = Tensor({1, orows, ocols});
  out.mask = Tensor({1, orows, ocols});
  for (std::size_t r = 0; r < orows; ++r) {
    for (std::size_t c = 0; c < ocols; ++c) {
      out.image[r * ocols + c] = sample.image[(r + r0) * cols + c + c0];
      out.mask[r * ocols + c] = sample.mask[(r + r0) * cols + c + c0];
    }
  }
  out.truncated = sample.truncated || out.foreground() < sample.foreground();
  return out;
}

SegSample mirror_columns(const SegSample& sample) {
  SegSample out = sample;
  const std::size_t rows = sample.rows(), cols = sample.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      out.image[r * cols + c] = sample.image[r * cols + cols - 1 - c];
      out.mask[r * cols + c] = sample.mask[r * cols + cols - 1 - c];
    }
  }
  out.laterality = sample.laterality == Laterality::left ? Laterality::right : Laterality::left;
  return out;
}

}  // namespace cseg
