// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails. `--only 1,3` runs a subset.
#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "cseg/checkpoint.hpp"
#include "cseg/eval.hpp"
#include "cseg/experiment.hpp"
#include "cseg/losses.hpp"
#include "cseg/ops.hpp"
#include "cseg/optim.hpp"
#include "support.hpp"

using namespace cseg;
using namespace cseg::testing;
using namespace cseg::ops;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Tensor binary_tensor(const Shape& s, Rng& rng, double p) {
  Tensor t(s);
  for (auto& v : t.values()) v = rng.bernoulli(p) ? 1.0 : 0.0;
  return t;
}

// Values at least `gap` away from zero so ReLU is differentiable there.
Tensor off_kink(const Shape& s, Rng& rng, double gap = 0.05) {
  Tensor t(s);
  for (auto& v : t.values()) v = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(gap, 1.0);
  return t;
}

// Pairwise-distinct values so max pooling has a unique argmax.
Tensor distinct(const Shape& s, Rng& rng) {
  Tensor t(s);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.01 * double(i) + rng.uniform(0.0, 0.005);
  for (std::size_t i = t.size(); i > 1; --i) std::swap(t[i - 1], t[rng.below(i)]);
  return t;
}

// ---------------------------------------------------------------------------

Outcome gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  std::vector<std::pair<std::string, double>> worst;
  // A fixed random weighting turns any op output into a scalar.
  auto weighted = [](GradTape& t, Var out, std::uint64_t seed) {
    Rng w(seed);
    const Tensor wt = random_tensor(t.value(out).shape(), w);
    return sum(t, mul(t, out, t.constant(wt)));
  };
  auto check = [&](const std::string& name, const std::vector<Tensor>& in, const LossBuilder& b) {
    worst.emplace_back(name, finite_difference_check(in, b).max_rel);
  };

  check("conv2d", {random_tensor({2, 2, 5, 6}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)},
        [&](GradTape& t, const std::vector<Var>& v) { return weighted(t, conv2d(t, v[0], v[1], v[2]), 1); });
  check("conv2d 1x1", {random_tensor({1, 3, 4, 4}, rng), random_tensor({2, 3, 1, 1}, rng), random_tensor({2}, rng)},
        [&](GradTape& t, const std::vector<Var>& v) { return weighted(t, conv2d(t, v[0], v[1], v[2]), 2); });
  check("relu", {off_kink({2, 3, 4, 4}, rng)},
        [&](GradTape& t, const std::vector<Var>& v) { return weighted(t, relu(t, v[0]), 3); });
  check("maxpool2", {distinct({2, 2, 6, 4}, rng)},
        [&](GradTape& t, const std::vector<Var>& v) { return weighted(t, maxpool2(t, v[0]), 4); });
  check("upsample2", {random_tensor({1, 2, 3, 4}, rng)},
        [&](GradTape& t, const std::vector<Var>& v) { return weighted(t, upsample2(t, v[0]), 5); });
  check("concat", {random_tensor({2, 2, 3, 3}, rng), random_tensor({2, 1, 3, 3}, rng)},
        [&](GradTape& t, const std::vector<Var>& v) { return weighted(t, concat_channels(t, v[0], v[1]), 6); });
  check("sigmoid", {random_tensor({1, 1, 5, 5}, rng, -4, 4)},
        [&](GradTape& t, const std::vector<Var>& v) { return weighted(t, sigmoid(t, v[0]), 7); });
  check("mul", {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)},
        [&](GradTape& t, const std::vector<Var>& v) { return weighted(t, mul(t, v[0], v[1]), 8); });
  check("sum", {random_tensor({3, 4}, rng)}, [&](GradTape& t, const std::vector<Var>& v) { return sum(t, v[0]); });
  check("dropout", {random_tensor({1, 2, 4, 4}, rng)}, [&](GradTape& t, const std::vector<Var>& v) {
    Rng mask(9);  // same mask on every evaluation
    return weighted(t, dropout(t, v[0], 0.3, mask, true), 9);
  });
  const Tensor y = binary_tensor({2, 1, 4, 4}, rng, 0.4);
  check("bce loss", {random_tensor({2, 1, 4, 4}, rng, 0.05, 0.95)},
        [&](GradTape& t, const std::vector<Var>& v) { return bce_loss(t, v[0], y); });
  check("tversky loss", {random_tensor({2, 1, 4, 4}, rng, 0.05, 0.95)},
        [&](GradTape& t, const std::vector<Var>& v) { return tversky_loss(t, v[0], y, 0.3, 1e-6); });

  double per_op = 0.0;
  std::string worst_op;
  for (const auto& [name, e] : worst) {
    if (e >= per_op) {
      per_op = e;
      worst_op = name;
    }
  }

  // Composed tiny U-Net, every parameter, both losses. Biases are moved off
  // zero so no ReLU input sits exactly on its kink.
  UNetConfig cfg;
  cfg.encoder_filters = {2, 4, 4};
  cfg.decoder_filters = {4, 2};
  cfg.input_rows = 8;
  cfg.input_cols = 8;
  Model m = build_unet(cfg, rng);
  for (auto& p : m.params()) {
    if (p.name.ends_with(".bias")) {
      for (auto& v : p.value.values()) v = rng.uniform(-0.1, 0.1);
    }
  }
  std::vector<Tensor> params;
  for (const auto& p : m.params()) params.push_back(p.value);
  const Tensor x = random_tensor({2, 1, 8, 8}, rng, 0.0, 1.0);
  const Tensor target = binary_tensor({2, 1, 8, 8}, rng, 0.3);
  double e2e = 0.0;
  std::size_t checked = 0;
  for (LossKind kind : {LossKind::bce, LossKind::tversky}) {
    const LossSpec spec{kind};
    const FdReport r = finite_difference_check(params, [&](GradTape& t, const std::vector<Var>& v) {
      Rng unused(0);
      return loss(t, spec, m.forward(t, v, t.constant(x), false, unused), target);
    });
    e2e = std::max(e2e, r.max_rel);
    checked += r.checked;
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = per_op < 1e-4 && e2e < 1e-3 && secs < 120.0;
  o.detail = "max per-op rel err " + num(per_op, 3) + " (" + worst_op + ") < 1e-4; end-to-end " + num(e2e, 3) +
             " over " + std::to_string(checked) + " parameter checks < 1e-3; " + num(secs, 3) + " s < 120 s";
  return o;
}

Outcome algebraic_identities() {
  Rng rng(202);
  double tv_gap = 0.0;
  for (int i = 0; i < 1000; ++i) {
    ConfusionCounts c{rng.uniform(0, 100), rng.uniform(0, 100), rng.uniform(0, 100), rng.uniform(0, 100)};
    if (i % 3 == 0) c = {double(rng.below(50)), double(rng.below(50)), double(rng.below(50)), 0};
    tv_gap = std::max(tv_gap, std::abs(tversky_index(c, 0.5) - dsc(c)));
  }
  double f1_gap = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t rows = 4 + rng.below(8), cols = 4 + rng.below(8);
    Tensor mask({1, rows, cols}), score({1, rows, cols});
    for (std::size_t k = 0; k < mask.size(); ++k) {
      mask[k] = rng.bernoulli(0.3) ? 1.0 : 0.0;
      score[k] = std::clamp(0.4 * mask[k] + rng.uniform(0.0, 0.7), 0.0, 1.0);
    }
    mask[0] = 1.0;
    const std::vector<Tensor> s{score}, y{mask};
    const EvalSummary e = evaluate_predictions(s, y);
    f1_gap = std::max(f1_gap, std::abs(e.dice - f1_score(e.precision, e.sensitivity)));
  }
  return {tv_gap <= 1e-12 && f1_gap <= 1e-12, "max |tversky(0.5) - dsc| = " + num(tv_gap, 3) +
                                                  " over 1000 triples; max |Dice - F1 at cut-off| = " + num(f1_gap, 3) +
                                                  " over 1000 draws (limit 1e-12)"};
}

Outcome metric_oracles() {
  Rng rng(303);
  double ap_gap = 0.0, auc_gap = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1000;
    std::vector<double> s(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = rng.bernoulli(0.3) ? 1.0 : 0.0;
      s[i] = trial % 2 ? double(rng.below(25)) / 25.0 : rng.uniform();
    }
    y[0] = 1;
    y[1] = 0;
    // Exhaustive thresholds, high to low.
    std::set<double, std::greater<>> th(s.begin(), s.end());
    double pos = 0;
    for (double v : y) pos += v;
    double ap = 0.0, prev = 0.0;
    for (double t : th) {
      double tp = 0, fp = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (s[i] >= t) (y[i] == 1 ? tp : fp) += 1;
      }
      ap += (tp / pos - prev) * tp / (tp + fp);
      prev = tp / pos;
    }
    double wins = 0, pairs = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (y[i] != 1) continue;
      for (std::size_t j = 0; j < n; ++j) {
        if (y[j] != 0) continue;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
        pairs += 1;
      }
    }
    ap_gap = std::max(ap_gap, std::abs(average_precision(pr_curve(s, y)) - ap));
    auc_gap = std::max(auc_gap, std::abs(roc_auc(s, y) - wins / pairs));
  }
  std::vector<double> flat(1000, 0.37), labels(1000);
  for (auto& v : labels) v = rng.bernoulli(0.2) ? 1.0 : 0.0;
  labels[0] = 1;
  labels[1] = 0;
  const double flat_auc = roc_auc(flat, labels);
  return {ap_gap <= 1e-12 && auc_gap <= 1e-12 && flat_auc == 0.5,
          "max aPr gap " + num(ap_gap, 3) + ", max AUC gap " + num(auc_gap, 3) +
              " on 20 x 1000-pixel inputs (limit 1e-12); constant-score AUC = " + num(flat_auc, 17)};
}

Outcome overfit_capability() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng g(101);
  const GenParams gp;
  const std::vector<SegSample> pair{generate_sample(gp, g), generate_sample(gp, g)};
  UNetConfig cfg;
  cfg.encoder_filters = {8, 16, 32};
  cfg.decoder_filters = {16, 8};
  cfg.dropout_rate = 0.0;
  cfg.input_rows = gp.rows;
  cfg.input_cols = gp.cols;
  bool ok = true;
  std::string detail;
  for (LossKind kind : {LossKind::bce, LossKind::tversky}) {
    Rng init(1);
    const Model m = build_unet(cfg, init);
    TrainConfig tc;
    tc.epochs = 300;
    tc.batch_size = 2;
    tc.loss.kind = kind;
    tc.seed = 1;
    const TrainResult r = train(m, pair, pair, tc);
    const double d = dice_at_half(r.best, pair);
    ok = ok && d >= 0.99;
    detail += std::string(to_string(kind)) + " Dice " + num(d) + " (best epoch " + std::to_string(r.best_epoch) + "); ";
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < 300.0;
  return {ok, detail + "threshold 0.99, " + num(secs, 3) + " s < 300 s"};
}

Outcome directional_reproduction(const fs::path& out) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentConfig c;
  c.seeds = {1, 2, 3, 4, 5};
  c.output_dir = out / "ablation";
  c.workers = std::max(1u, std::thread::hardware_concurrency());
  const ExperimentReport r = run_ablation(c, [](const std::string& line) { std::fprintf(stderr, "%s\n", line.c_str()); });
  const double secs = seconds_since(t0);
  const std::size_t full = *std::max_element(c.crops.begin(), c.crops.end());
  const std::size_t tight = *std::min_element(c.crops.begin(), c.crops.end());
  bool ok = secs < 3600.0;
  std::string detail;
  for (LossKind kind : c.losses) {
    const MedianRow *a = nullptr, *b = nullptr;
    for (const auto& m : r.medians) {
      if (m.loss != kind) continue;
      if (m.extent == full) a = &m;
      if (m.extent == tight) b = &m;
    }
    if (!a || !b) return {false, "median rows missing"};
    const bool dice_ok = b->dice >= a->dice, edist_ok = b->edist <= a->edist;
    ok = ok && dice_ok && edist_ok;
    detail += std::string(to_string(kind)) + ": Dice ir" + std::to_string(full) + " " + num(a->dice) + " -> ir" +
              std::to_string(tight) + " " + num(b->dice) + (dice_ok ? "" : " (WRONG DIRECTION)") + ", eDist " +
              num(a->edist) + " -> " + num(b->edist) + (edist_ok ? "" : " (WRONG DIRECTION)") + "; ";
  }
  return {ok, "medians over 5 seeds, " + detail + num(secs / 60.0, 3) + " min < 60 min; report in " +
                  c.output_dir.string()};
}

Outcome nan_semantics() {
  ExperimentConfig c;
  const Split split = make_split(c, 1);
  const std::size_t extent = c.crops.front();
  Rng rng(1);
  Model m = build_unet(c.model_config(extent), rng);
  for (auto& p : m.params()) {
    for (auto& v : p.value.values()) v = 0.0;
  }
  std::vector<SegSample> test;
  for (const auto& s : split.test) test.push_back(crop_band(s, c.crop_for(extent)));
  const EvalSummary e = evaluate_model(m, test);
  ExperimentReport report;
  report.config = c;
  CellResult cell;
  cell.extent = extent;
  cell.summary = e;
  report.cells = {cell};
  const std::string csv = report_csv(report);
  const std::string row = csv.substr(csv.find('\n') + 1);
  const std::string last = row.substr(row.rfind(',') + 1);
  const bool ok = !e.edist && e.auc == 0.5 && e.sensitivity == 0.0 && last == "nan\n";
  std::string shown = row;
  if (!shown.empty() && shown.back() == '\n') shown.pop_back();
  return {ok, "constant model row: " + shown};
}

Outcome determinism(const fs::path& out) {
  ExperimentConfig c;
  c.seeds = {7};
  c.train.epochs = 3;
  c.write_overlays = false;
  ExperimentConfig serial = c, parallel = c;
  serial.output_dir = out / "determinism_a";
  parallel.output_dir = out / "determinism_b";
  parallel.workers = 3;
  run_ablation(serial);
  run_ablation(parallel);
  const std::string a = slurp(serial.output_dir / "report.csv"), b = slurp(parallel.output_dir / "report.csv");
  const bool reports_equal = !a.empty() && a == b;

  // Checkpoint written by the run: reload, re-save, and compare forward passes.
  const fs::path ck = serial.output_dir / "cells" / cell_name(7, c.crops.back(), LossKind::bce) / "model.ckpt";
  const Model loaded = load_checkpoint(ck, c.model_config(c.crops.back()));
  save_checkpoint(loaded, out / "resaved.ckpt");
  const bool bytes_equal = slurp(ck) == slurp(out / "resaved.ckpt");
  Rng rng(3);
  const Model fresh = build_unet(c.model_config(c.crops.back()), rng);
  save_checkpoint(fresh, out / "fresh.ckpt");
  const Model back = load_checkpoint(out / "fresh.ckpt");
  const Tensor x = random_tensor({2, 1, c.crops.back(), c.gen.cols}, rng, 0.0, 1.0);
  const bool forward_equal = back.predict(x) == fresh.quantized_f32().predict(x);
  return {reports_equal && bytes_equal && forward_equal,
          std::string("report.csv identical across 1 and 3 workers: ") + (reports_equal ? "yes" : "NO") +
              "; checkpoint re-save byte-identical: " + (bytes_equal ? "yes" : "NO") +
              "; reloaded forward bit-exact at f32 parameters: " + (forward_equal ? "yes" : "NO")};
}

Outcome postprocessing_property() {
  Rng rng(808);
  const GenParams gp;
  int worse = 0, improved = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const SegSample s = generate_sample(gp, rng);
    const Tensor& gt = s.mask;
    const std::size_t rows = gt.dim(1), cols = gt.dim(2);
    // Speckle clusters of 1-3 pixels, never within two pixels of the disc.
    auto near_disc = [&](std::size_t r, std::size_t c) {
      for (std::size_t i = r >= 2 ? r - 2 : 0; i <= std::min(rows - 1, r + 2); ++i) {
        for (std::size_t j = c >= 2 ? c - 2 : 0; j <= std::min(cols - 1, c + 2); ++j) {
          if (gt[i * cols + j] != 0.0) return true;
        }
      }
      return false;
    };
    Tensor pred = gt;
    const int clusters = 1 + int(rng.below(12));
    for (int k = 0; k < clusters; ++k) {
      const std::size_t r = rng.below(rows - 1), c = rng.below(cols - 1);
      const std::size_t size = 1 + rng.below(3);
      const std::size_t cells[3][2] = {{r, c}, {r, c + 1}, {r + 1, c}};
      for (std::size_t q = 0; q < size; ++q) {
        if (!near_disc(cells[q][0], cells[q][1])) pred[cells[q][0] * cols + cells[q][1]] = 1.0;
      }
    }
    const double before = centroid_distance(gt, pred).value();
    const double after = centroid_distance(gt, largest_component(pred)).value();
    if (after > before + 1e-12) ++worse;
    if (after < before - 1e-12) ++improved;
  }
  return {worse == 0, "100 cases: eDist increased in " + std::to_string(worse) + ", decreased in " +
                          std::to_string(improved) + ", unchanged in " + std::to_string(100 - worse - improved)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cseg acceptance checks"};
  std::vector<int> only;
  std::string out = "acceptance_out";
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
  app.add_option("--out", out, "scratch directory for ablation artifacts");
  CLI11_PARSE(app, argc, argv);

  const fs::path dir(out);
  fs::create_directories(dir);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradient_correctness},
      {"algebraic identities", algebraic_identities},
      {"metric oracles", metric_oracles},
      {"overfit capability", overfit_capability},
      {"directional reproduction", [&] { return directional_reproduction(dir); }},
      {"nan semantics", nan_semantics},
      {"determinism", [&] { return determinism(dir); }},
      {"postprocessing property", postprocessing_property},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = int(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("criterion %d %-26s %s  %s\n", id, criteria[i].first.c_str(), o.pass ? "PASS" : "FAIL",
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
