#include "cseg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace cseg {

namespace {

void check_lengths(std::span<const double> scores, std::span<const double> labels, const char* op) {
  if (scores.size() != labels.size()) {
    throw std::invalid_argument(std::string(op) + ": " + std::to_string(scores.size()) + " scores but " +
                                std::to_string(labels.size()) + " labels");
  }
  for (double y : labels) {
    if (y != 0.0 && y != 1.0) throw std::invalid_argument(std::string(op) + ": labels must be 0 or 1");
  }
}

// Indices ordered by descending score; equal scores keep input order.
std::vector<std::size_t> descending_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

struct Grid {
  std::size_t rows, cols;
};

Grid image_grid(const Tensor& t, const char* op) {
  if (t.rank() < 2) throw std::invalid_argument(std::string(op) + ": expected an image, got " + shape_string(t.shape()));
  const std::size_t rows = t.dim(t.rank() - 2), cols = t.dim(t.rank() - 1);
  if (rows * cols != t.size()) {
    throw std::invalid_argument(std::string(op) + ": expected a single-channel image, got " + shape_string(t.shape()));
  }
  return {rows, cols};
}

double ratio_or_zero(double num, double den) { return den > 0.0 ? num / den : 0.0; }

}  // namespace

PrCurve pr_curve(std::span<const double> scores, std::span<const double> labels) {
  check_lengths(scores, labels, "pr_curve");
  PrCurve curve;
  for (double y : labels) (y == 1.0 ? curve.positives : curve.negatives) += 1;
  if (curve.positives == 0) throw std::invalid_argument("pr_curve: no positive labels, curve undefined");

  const auto order = descending_order(scores);
  const auto pos = static_cast<double>(curve.positives), neg = static_cast<double>(curve.negatives);
  double tp = 0.0, fp = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    const double threshold = scores[order[i]];
    while (i < order.size() && scores[order[i]] == threshold) {
      (labels[order[i]] == 1.0 ? tp : fp) += 1.0;
      ++i;
    }
    const ConfusionCounts counts{tp, fp, pos - tp, neg - fp};
    curve.points.push_back({threshold, tp / (tp + fp), tp / pos, counts});
  }
  return curve;
}

double average_precision(const PrCurve& curve) {
  double ap = 0.0, prev_recall = 0.0;
  for (const auto& p : curve.points) {
    ap += (p.recall - prev_recall) * p.precision;
    prev_recall = p.recall;
  }
  return ap;
}

double roc_auc(std::span<const double> scores, std::span<const double> labels) {
  check_lengths(scores, labels, "roc_auc");
  double pos = 0.0, neg = 0.0;
  for (double y : labels) (y == 1.0 ? pos : neg) += 1.0;
  if (pos == 0.0 || neg == 0.0) throw std::invalid_argument("roc_auc: needs both positive and negative labels");

  // Walk tie groups from the lowest score up; every positive beats all
  // negatives in lower groups and half of the negatives in its own group.
  auto order = descending_order(scores);
  std::reverse(order.begin(), order.end());
  double wins = 0.0, negatives_below = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    double p = 0.0, q = 0.0;
    while (i < order.size() && scores[order[i]] == s) {
      (labels[order[i]] == 1.0 ? p : q) += 1.0;
      ++i;
    }
    wins += p * negatives_below + 0.5 * p * q;
    negatives_below += q;
  }
  return wins / (pos * neg);
}

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const double> labels) {
  check_lengths(scores, labels, "roc_curve");
  double pos = 0.0, neg = 0.0;
  for (double y : labels) (y == 1.0 ? pos : neg) += 1.0;
  if (pos == 0.0 || neg == 0.0) throw std::invalid_argument("roc_curve: needs both positive and negative labels");
  std::vector<RocPoint> points{{std::numeric_limits<double>::infinity(), 0.0, 0.0}};
  const auto order = descending_order(scores);
  double tp = 0.0, fp = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    const double threshold = scores[order[i]];
    while (i < order.size() && scores[order[i]] == threshold) {
      (labels[order[i]] == 1.0 ? tp : fp) += 1.0;
      ++i;
    }
    points.push_back({threshold, fp / neg, tp / pos});
  }
  return points;
}

double f1_score(double precision, double recall) {
  const double s = precision + recall;
  return s > 0.0 ? 2.0 * precision * recall / s : 0.0;
}

double optimal_cutoff(const PrCurve& curve) {
  if (curve.points.size() <= 1) return std::numeric_limits<double>::infinity();
  double best_f1 = -1.0, best_threshold = curve.points.front().threshold;
  for (const auto& p : curve.points) {
    const double f1 = f1_score(p.precision, p.recall);
    // Points arrive in decreasing threshold order, so strict > keeps the highest on ties.
    if (f1 > best_f1) {
      best_f1 = f1;
      best_threshold = p.threshold;
    }
  }
  return best_threshold;
}

Tensor binarize(const Tensor& scores, double threshold) {
  Tensor out(scores.shape());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] >= threshold ? 1.0 : 0.0;
  return out;
}

ConfusionCounts hard_confusion(const Tensor& pred_binary, const Tensor& target) {
  if (pred_binary.shape() != target.shape()) {
    throw std::invalid_argument("hard_confusion: shape mismatch " + shape_string(pred_binary.shape()) + " vs " +
                                shape_string(target.shape()));
  }
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double p = pred_binary[i], y = target[i];
    if ((p != 0.0 && p != 1.0) || (y != 0.0 && y != 1.0)) {
      throw std::invalid_argument("hard_confusion: non-binary value at index " + std::to_string(i));
    }
    if (p == 1.0) {
      (y == 1.0 ? tp : fp) += 1;
    } else {
      (y == 1.0 ? fn : tn) += 1;
    }
  }
  return {static_cast<double>(tp), static_cast<double>(fp), static_cast<double>(fn), static_cast<double>(tn)};
}

std::optional<Point2> centroid(const Tensor& mask) {
  const Grid g = image_grid(mask, "centroid");
  double rows = 0.0, cols = 0.0, count = 0.0;
  for (std::size_t r = 0; r < g.rows; ++r) {
    for (std::size_t c = 0; c < g.cols; ++c) {
      if (mask[r * g.cols + c] != 0.0) {
        rows += static_cast<double>(r);
        cols += static_cast<double>(c);
        count += 1.0;
      }
    }
  }
  if (count == 0.0) return std::nullopt;
  return Point2{rows / count, cols / count};
}

std::optional<double> centroid_distance(const Tensor& gt_mask, const Tensor& pred_mask) {
  if (gt_mask.shape() != pred_mask.shape()) {
    throw std::invalid_argument("centroid_distance: shape mismatch " + shape_string(gt_mask.shape()) + " vs " +
                                shape_string(pred_mask.shape()));
  }
  const auto gt = centroid(gt_mask);
  if (!gt) throw std::invalid_argument("centroid_distance: ground-truth mask is empty");
  const auto pred = centroid(pred_mask);
  if (!pred) return std::nullopt;
  return std::hypot(gt->row - pred->row, gt->col - pred->col);
}

Tensor largest_component(const Tensor& mask) {
  const Grid g = image_grid(mask, "largest_component");
  std::vector<int> label(mask.size(), -1);
  std::vector<std::size_t> stack;
  int best_label = -1;
  std::size_t best_size = 0;
  int next_label = 0;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (mask[start] == 0.0 || label[start] >= 0) continue;
    std::size_t size = 0;
    stack.push_back(start);
    label[start] = next_label;
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      ++size;
      const std::size_t r = i / g.cols, c = i % g.cols;
      auto visit = [&](std::size_t j) {
        if (mask[j] != 0.0 && label[j] < 0) {
          label[j] = next_label;
          stack.push_back(j);
        }
      };
      if (r > 0) visit(i - g.cols);
      if (r + 1 < g.rows) visit(i + g.cols);
      if (c > 0) visit(i - 1);
      if (c + 1 < g.cols) visit(i + 1);
    }
    // Components are discovered in row-major order of their first pixel.
    if (size > best_size) {
      best_size = size;
      best_label = next_label;
    }
    ++next_label;
  }
  Tensor out(mask.shape(), 0.0);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (label[i] == best_label && best_label >= 0) out[i] = mask[i];
  }
  return out;
}

RgbImage render_overlay(const Tensor& image, const Tensor& pred_binary, const Tensor& gt_mask,
                        std::span<const std::size_t> band_rows) {
  if (image.shape() != pred_binary.shape() || image.shape() != gt_mask.shape()) {
    throw std::invalid_argument("render_overlay: shape mismatch image " + shape_string(image.shape()) + ", pred " +
                                shape_string(pred_binary.shape()) + ", gt " + shape_string(gt_mask.shape()));
  }
  const Grid g = image_grid(image, "render_overlay");
  RgbImage out{g.rows, g.cols, std::vector<Rgb>(image.size())};
  for (std::size_t i = 0; i < image.size(); ++i) {
    const bool p = pred_binary[i] != 0.0, y = gt_mask[i] != 0.0;
    if (p && y) {
      out.pixels[i] = kTruePositive;
    } else if (p) {
      out.pixels[i] = kFalsePositive;
    } else if (y) {
      out.pixels[i] = kFalseNegative;
    } else {
      const auto v = static_cast<std::uint8_t>(std::lround(std::clamp(image[i], 0.0, 1.0) * 255.0));
      out.pixels[i] = {v, v, v};
    }
  }
  for (std::size_t r : band_rows) {
    if (r >= g.rows) throw std::invalid_argument("render_overlay: band row " + std::to_string(r) + " outside image");
    std::fill_n(out.pixels.begin() + static_cast<std::ptrdiff_t>(r * g.cols), g.cols, kBandLine);
  }
  return out;
}

std::vector<Tensor> binarized_predictions(std::span<const Tensor> scores, double cutoff, const EvalOptions& options) {
  std::vector<Tensor> out;
  out.reserve(scores.size());
  for (const auto& s : scores) {
    Tensor b = binarize(s, cutoff);
    if (options.largest_component) b = largest_component(b);
    out.push_back(std::move(b));
  }
  return out;
}

EvalSummary evaluate_predictions(std::span<const Tensor> scores, std::span<const Tensor> masks,
                                 const EvalOptions& options) {
  if (scores.empty()) throw std::invalid_argument("evaluate: empty test set");
  if (scores.size() != masks.size()) throw std::invalid_argument("evaluate: score/mask count mismatch");
  std::vector<double> pooled_scores, pooled_labels;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i].shape() != masks[i].shape()) {
      throw std::invalid_argument("evaluate: image " + std::to_string(i) + " score shape " +
                                  shape_string(scores[i].shape()) + " vs mask " + shape_string(masks[i].shape()));
    }
    pooled_scores.insert(pooled_scores.end(), scores[i].values().begin(), scores[i].values().end());
    pooled_labels.insert(pooled_labels.end(), masks[i].values().begin(), masks[i].values().end());
  }

  EvalSummary s;
  const PrCurve curve = pr_curve(pooled_scores, pooled_labels);
  s.apr = average_precision(curve);
  s.auc = curve.negatives > 0 ? roc_auc(pooled_scores, pooled_labels) : 1.0;
  s.cutoff = optimal_cutoff(curve);

  ConfusionCounts counts;
  for (std::size_t i = 0; i < scores.size(); ++i) counts += hard_confusion(binarize(scores[i], s.cutoff), masks[i]);
  s.counts = counts;
  s.sensitivity = ratio_or_zero(counts.tp, counts.tp + counts.fn);
  s.specificity = ratio_or_zero(counts.tn, counts.tn + counts.fp);
  s.precision = ratio_or_zero(counts.tp, counts.tp + counts.fp);
  s.dice = dsc(counts);

  const auto preds = binarized_predictions(scores, s.cutoff, options);
  double total = 0.0;
  bool defined = true;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (!centroid(masks[i])) continue;
    const auto d = centroid_distance(masks[i], preds[i]);
    if (!d) {
      defined = false;
      break;
    }
    total += *d;
    ++counted;
  }
  if (defined && counted > 0) s.edist = total / static_cast<double>(counted);
  return s;
}

std::vector<Tensor> predict_all(const Model& model, const std::vector<SegSample>& samples) {
  constexpr std::size_t kBatch = 8;
  std::vector<Tensor> out;
  out.reserve(samples.size());
  for (std::size_t first = 0; first < samples.size(); first += kBatch) {
    const std::size_t count = std::min(kBatch, samples.size() - first);
    const std::size_t rows = samples[first].rows(), cols = samples[first].cols();
    Tensor batch({count, 1, rows, cols});
    for (std::size_t i = 0; i < count; ++i) {
      const Tensor& img = samples[first + i].image;
      if (img.size() != rows * cols) throw std::invalid_argument("predict: samples differ in extents");
      std::copy(img.values().begin(), img.values().end(), batch.data() + i * rows * cols);
    }
    const Tensor pred = model.predict(batch);
    for (std::size_t i = 0; i < count; ++i) {
      Tensor map({1, rows, cols});
      std::copy_n(pred.data() + i * rows * cols, rows * cols, map.data());
      out.push_back(std::move(map));
    }
  }
  return out;
}

EvalSummary evaluate_model(const Model& model, const std::vector<SegSample>& test_set, const EvalOptions& options) {
  if (test_set.empty()) throw std::invalid_argument("evaluate: empty test set");
  const auto scores = predict_all(model, test_set);
  std::vector<Tensor> masks;
  masks.reserve(test_set.size());
  for (const auto& s : test_set) masks.push_back(s.mask);
  return evaluate_predictions(scores, masks, options);
}

}  // namespace cseg
