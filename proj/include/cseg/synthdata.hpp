#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "cseg/random.hpp"
#include "cseg/tensor.hpp"

namespace cseg {

enum class Laterality { right, left };

std::string_view to_string(Laterality l);
Laterality parse_laterality(std::string_view text);

// One en face image with its binary disc mask, both [1,H,W].
struct SegSample {
  std::string sample_id;
  int patient_id = 0;
  int eye_id = 0;
  Laterality laterality = Laterality::right;
  Tensor image;
  Tensor mask;
  // Set by crop_band when foreground pixels fell outside the kept band.
  bool truncated = false;

  std::size_t rows() const { return image.dim(1); }
  std::size_t cols() const { return image.dim(2); }
  std::size_t foreground() const;
};

enum class CropAxis { rows, cols };

std::string_view to_string(CropAxis a);
CropAxis parse_crop_axis(std::string_view text);

// Synthetic en face appearance. Positions are fractions of the image extent.
// The band axis is the axis later reduced by cropping; the whole disc lies in
// [band_lo, band_hi] along it. Along the other axis the disc centre lies in
// [cross_lo, cross_hi] for a right eye and is mirrored for a left eye.
struct GenParams {
  std::size_t rows = 64;
  std::size_t cols = 64;
  CropAxis band_axis = CropAxis::rows;
  double radius_min = 3.0;
  double radius_max = 4.5;
  // Magnitude of the disc's intensity offset; the sign is dark with
  // probability dark_probability.
  double contrast_min = 0.22;
  double contrast_max = 0.40;
  double dark_probability = 1.0;
  double band_lo = 0.3125;
  double band_hi = 0.6875;
  double cross_lo = 0.15;
  double cross_hi = 0.40;
  int vessels_min = 4;
  int vessels_max = 7;
  double vessel_depth = 0.12;
  // Disc-like background blobs (lesions, reflections) anywhere in the image.
  int distractors_min = 1;
  int distractors_max = 4;
  double distractor_contrast = 0.8;
  double noise_sd = 0.04;
  double flip_probability = 0.5;

  void validate() const;
};

// Disc and vessel geometry of one eye, shared by its repeated scans.
struct EyeAnatomy {
  double band_center = 0.0;   // pixels along the band axis
  double cross_center = 0.0;  // pixels along the other axis, right-eye frame
  double radius_band = 0.0;
  double radius_cross = 0.0;
  double contrast = 0.0;  // signed
  std::uint64_t vessel_seed = 0;
  Laterality laterality = Laterality::right;
};

EyeAnatomy draw_anatomy(const GenParams& params, Rng& rng);
EyeAnatomy draw_anatomy(const GenParams& params, Laterality laterality, Rng& rng);

// Renders one scan of an eye: background shading and texture, distractor
// blobs, the elliptical disc, vessel polylines, additive noise, clipped to
// [0,1]. A left eye mirrors image and mask along the columns.
SegSample render_scan(const GenParams& params, const EyeAnatomy& eye, Rng& rng);

SegSample generate_sample(const GenParams& params, Rng& rng);

struct CorpusSpec {
  int patients = 40;
  // Probability that a patient contributes both eyes.
  double both_eyes_probability = 0.4;
  // Probability that an eye has more than one scan, and the cap on scans.
  double repeat_probability = 0.35;
  int max_scans_per_eye = 3;

  void validate() const;
};

// Patient/eye/scan corpus; sample ids are "p<patient>_e<eye>_s<scan>".
std::vector<SegSample> generate_corpus(const GenParams& params, const CorpusSpec& spec, Rng& rng);

struct Split {
  std::vector<SegSample> train;
  std::vector<SegSample> validation;
  std::vector<SegSample> test;
};

// Patient-level split. Patients are shuffled, then each goes to the split
// furthest below its sample-count target; every split gets at least one
// patient.
Split split_by_patient(const std::vector<SegSample>& samples, std::array<double, 3> fractions, Rng& rng);

// Block-mean downscale by `factor` then min-max normalisation to [0,1]. A
// constant image maps to zeros.
Tensor preprocess(const Tensor& image, std::size_t factor);
// Block downscale of a binary mask: a block is foreground if at least half
// of its pixels are.
Tensor downscale_mask(const Tensor& mask, std::size_t factor);

struct CropSpec {
  std::size_t extent = 0;
  std::size_t offset = 0;
  CropAxis axis = CropAxis::rows;

  // Band of `extent` centred on `center` (pixels), clamped into [0, full).
  static CropSpec centered(std::size_t full, std::size_t extent, double center, CropAxis axis);
};

// Crops image and mask identically; metadata is kept and `truncated` set
// when foreground pixels were cut away.
SegSample crop_band(const SegSample& sample, const CropSpec& spec);

// Reverses the column order of a sample's image and mask.
SegSample mirror_columns(const SegSample& sample);

}  // namespace cseg
