#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cseg/losses.hpp"
#include "cseg/synthdata.hpp"
#include "cseg/tensor.hpp"
#include "cseg/unet.hpp"

namespace cseg {

struct PrPoint {
  double threshold;
  double precision;
  double recall;
  // Hard counts when every score >= threshold is labelled foreground.
  ConfusionCounts counts;
};

// Precision-recall curve over pooled pixel scores, one point per distinct
// score in strictly decreasing threshold order (recall non-decreasing).
struct PrCurve {
  std::vector<PrPoint> points;
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

struct RocPoint {
  double threshold;
  double fpr;
  double tpr;
};

PrCurve pr_curve(std::span<const double> scores, std::span<const double> labels);

// Step integral sum_i (R_i - R_{i-1}) * P_i with R_0 = 0.
double average_precision(const PrCurve& curve);

// Rank formulation with ties counted as 1/2.
double roc_auc(std::span<const double> scores, std::span<const double> labels);
std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const double> labels);

double f1_score(double precision, double recall);

// Threshold with maximal F1 over the curve points, ties toward the higher
// threshold. A curve with a single point (all scores equal) has no ranking
// information; the cut-off is then +infinity and nothing is labelled
// foreground.
double optimal_cutoff(const PrCurve& curve);

// Pixels with score >= threshold become 1.
Tensor binarize(const Tensor& scores, double threshold);

// Exact counts; throws if either tensor holds a value other than 0 or 1.
ConfusionCounts hard_confusion(const Tensor& pred_binary, const Tensor& target);

struct Point2 {
  double row;
  double col;
};

// Mean (row, col) of foreground pixels of the last two axes; nullopt if empty.
std::optional<Point2> centroid(const Tensor& mask);

// Euclidean distance between foreground centroids in pixels. Throws if the
// ground truth is empty; nullopt if the prediction is empty.
std::optional<double> centroid_distance(const Tensor& gt_mask, const Tensor& pred_mask);

// Keeps the 4-connected foreground component with the most pixels; ties go to
// the component whose first pixel comes first in row-major order. Works on
// the last two axes of a single-image mask.
Tensor largest_component(const Tensor& mask);

struct Rgb {
  std::uint8_t r, g, b;
  friend bool operator==(Rgb, Rgb) = default;
};

inline constexpr Rgb kTruePositive{255, 255, 0};
inline constexpr Rgb kFalsePositive{255, 0, 0};
inline constexpr Rgb kFalseNegative{0, 255, 0};
inline constexpr Rgb kBandLine{255, 255, 255};

struct RgbImage {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Rgb> pixels;

  Rgb at(std::size_t r, std::size_t c) const { return pixels[r * cols + c]; }
};

// TP yellow, FP red, FN green, TN the image's gray value. When given,
// `band_rows` are drawn as white horizontal lines.
RgbImage render_overlay(const Tensor& image, const Tensor& pred_binary, const Tensor& gt_mask,
                        std::span<const std::size_t> band_rows = {});

struct EvalOptions {
  bool largest_component = false;
};

struct EvalSummary {
  double sensitivity = 0.0;
  double specificity = 0.0;
  double precision = 0.0;
  double auc = 0.0;
  double apr = 0.0;
  double dice = 0.0;
  std::optional<double> edist;
  double cutoff = 0.0;
  ConfusionCounts counts;
};

// Pooled-pixel metrics for a test set: `scores` and `masks` hold one [1,H,W]
// map per image. eDist is the mean per-image centroid distance at the
// optimal cut-off, undefined if any binarized prediction is empty.
EvalSummary evaluate_predictions(std::span<const Tensor> scores, std::span<const Tensor> masks,
                                 const EvalOptions& options = {});

// Per-image binarized predictions used for eDist (after the optional
// largest-component filter).
std::vector<Tensor> binarized_predictions(std::span<const Tensor> scores, double cutoff, const EvalOptions& options);

// Inference score maps ([1,H,W] each) for every sample.
std::vector<Tensor> predict_all(const Model& model, const std::vector<SegSample>& samples);

EvalSummary evaluate_model(const Model& model, const std::vector<SegSample>& test_set, const EvalOptions& options = {});

}  // namespace cseg
