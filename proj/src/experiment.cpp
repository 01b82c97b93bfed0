#include "cseg/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "cseg/checkpoint.hpp"
#include "cseg/io.hpp"

namespace cseg {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kCorpusTag = 0x434f52505553ULL;
constexpr std::uint64_t kSplitTag = 0x53504c4954ULL;
constexpr std::uint64_t kCellTag = 0x43454c4cULL;
constexpr std::uint64_t kInitTag = 0x494e4954ULL;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) out.push_back(trim(item));
  return out;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError("config: " + key + " = '" + value + "' is not " + expected);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) bad_value(key, v, "a number");
  return out;
}

template <typename Int>
Int to_int(const std::string& key, const std::string& v) {
  Int out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) bad_value(key, v, "an integer");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, v, "a boolean");
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
std::string join_list(const std::vector<T>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ",";
    if constexpr (std::is_same_v<T, LossKind>) {
      out += to_string(items[i]);
    } else {
      out += std::to_string(items[i]);
    }
  }
  return out;
}

template <typename F>
auto as_config_error(F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

struct Field {
  const char* key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

#define DOUBLE_FIELD(KEY, MEMBER)                                                         \
  Field {                                                                                  \
    KEY, [](const ExperimentConfig& c) { return fmt(c.MEMBER); },                          \
        [](ExperimentConfig& c, const std::string& v) { c.MEMBER = to_double(KEY, v); } \
  }
#define INT_FIELD(KEY, MEMBER)                                                                              \
  Field {                                                                                                    \
    KEY, [](const ExperimentConfig& c) { return std::to_string(c.MEMBER); },                                 \
        [](ExperimentConfig& c, const std::string& v) { c.MEMBER = to_int<decltype(c.MEMBER)>(KEY, v); } \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      INT_FIELD("gen.rows", gen.rows),
      INT_FIELD("gen.cols", gen.cols),
      Field{"gen.band_axis", [](const ExperimentConfig& c) { return std::string(to_string(c.gen.band_axis)); },
            [](ExperimentConfig& c, const std::string& v) {
              c.gen.band_axis = as_config_error([&] { return parse_crop_axis(v); });
            }},
      DOUBLE_FIELD("gen.radius_min", gen.radius_min),
      DOUBLE_FIELD("gen.radius_max", gen.radius_max),
      DOUBLE_FIELD("gen.contrast_min", gen.contrast_min),
      DOUBLE_FIELD("gen.contrast_max", gen.contrast_max),
      DOUBLE_FIELD("gen.dark_probability", gen.dark_probability),
      DOUBLE_FIELD("gen.band_lo", gen.band_lo),
      DOUBLE_FIELD("gen.band_hi", gen.band_hi),
      DOUBLE_FIELD("gen.cross_lo", gen.cross_lo),
      DOUBLE_FIELD("gen.cross_hi", gen.cross_hi),
      INT_FIELD("gen.vessels_min", gen.vessels_min),
      INT_FIELD("gen.vessels_max", gen.vessels_max),
      DOUBLE_FIELD("gen.vessel_depth", gen.vessel_depth),
      INT_FIELD("gen.distractors_min", gen.distractors_min),
      INT_FIELD("gen.distractors_max", gen.distractors_max),
      DOUBLE_FIELD("gen.distractor_contrast", gen.distractor_contrast),
      DOUBLE_FIELD("gen.noise_sd", gen.noise_sd),
      DOUBLE_FIELD("gen.flip_probability", gen.flip_probability),
      INT_FIELD("corpus.patients", corpus.patients),
      DOUBLE_FIELD("corpus.both_eyes_probability", corpus.both_eyes_probability),
      DOUBLE_FIELD("corpus.repeat_probability", corpus.repeat_probability),
      INT_FIELD("corpus.max_scans_per_eye", corpus.max_scans_per_eye),
      DOUBLE_FIELD("split.train", split_fractions[0]),
      DOUBLE_FIELD("split.validation", split_fractions[1]),
      DOUBLE_FIELD("split.test", split_fractions[2]),
      Field{"crops", [](const ExperimentConfig& c) { return join_list(c.crops); },
            [](ExperimentConfig& c, const std::string& v) {
              c.crops.clear();
              for (const auto& item : split_list(v)) c.crops.push_back(to_int<std::size_t>("crops", item));
            }},
      Field{"crop.center",
            [](const ExperimentConfig& c) { return c.crop_center ? fmt(*c.crop_center) : std::string("band"); },
            [](ExperimentConfig& c, const std::string& v) {
              if (v == "band") {
                c.crop_center.reset();
              } else {
                c.crop_center = to_double("crop.center", v);
              }
            }},
      Field{"losses", [](const ExperimentConfig& c) { return join_list(c.losses); },
            [](ExperimentConfig& c, const std::string& v) {
              c.losses.clear();
              for (const auto& item : split_list(v)) {
                c.losses.push_back(as_config_error([&] { return parse_loss_kind(item); }));
              }
            }},
      DOUBLE_FIELD("loss.beta", tversky_beta),
      DOUBLE_FIELD("loss.epsilon", tversky_epsilon),
      INT_FIELD("train.epochs", train.epochs),
      DOUBLE_FIELD("train.learning_rate", train.learning_rate),
      INT_FIELD("train.batch_size", train.batch_size),
      Field{"train.selection_metric",
            [](const ExperimentConfig& c) { return std::string(to_string(c.train.selection_metric)); },
            [](ExperimentConfig& c, const std::string& v) {
              c.train.selection_metric = as_config_error([&] { return parse_selection_metric(v); });
            }},
      Field{"model.arch", [](const ExperimentConfig& c) { return std::string(to_string(c.arch)); },
            [](ExperimentConfig& c, const std::string& v) {
              c.arch = as_config_error([&] { return parse_arch_kind(v); });
            }},
      DOUBLE_FIELD("model.dropout", dropout_rate),
      Field{"eval.largest_component",
            [](const ExperimentConfig& c) { return std::string(c.largest_component ? "true" : "false"); },
            [](ExperimentConfig& c, const std::string& v) {
              c.largest_component = to_bool("eval.largest_component", v);
            }},
      Field{"seeds", [](const ExperimentConfig& c) { return join_list(c.seeds); },
            [](ExperimentConfig& c, const std::string& v) {
              c.seeds.clear();
              for (const auto& item : split_list(v)) c.seeds.push_back(to_int<std::uint64_t>("seeds", item));
            }},
      Field{"output_dir", [](const ExperimentConfig& c) { return c.output_dir.string(); },
            [](ExperimentConfig& c, const std::string& v) { c.output_dir = v; }},
      INT_FIELD("workers", workers),
      Field{"output.overlays",
            [](const ExperimentConfig& c) { return std::string(c.write_overlays ? "true" : "false"); },
            [](ExperimentConfig& c, const std::string& v) { c.write_overlays = to_bool("output.overlays", v); }},
  };
  return table;
}

#undef DOUBLE_FIELD
#undef INT_FIELD

template <typename T>
bool has_duplicates(std::vector<T> v) {
  std::sort(v.begin(), v.end());
  return std::adjacent_find(v.begin(), v.end()) != v.end();
}

std::vector<SegSample> crop_all(const std::vector<SegSample>& samples, const CropSpec& spec, std::size_t& truncated) {
  std::vector<SegSample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    out.push_back(crop_band(s, spec));
    if (out.back().truncated) ++truncated;
  }
  return out;
}

void assert_patient_disjoint(const Split& split, const std::string& where) {
  std::set<int> train, val;
  for (const auto& s : split.train) train.insert(s.patient_id);
  for (const auto& s : split.validation) {
    if (train.count(s.patient_id)) throw std::logic_error(where + ": patient in train and validation");
    val.insert(s.patient_id);
  }
  for (const auto& s : split.test) {
    if (train.count(s.patient_id) || val.count(s.patient_id)) {
      throw std::logic_error(where + ": test patient also in another split");
    }
  }
}

// Places a cropped [1,h,w] mask back into a full-size zero canvas.
Tensor uncrop(const Tensor& cropped, const CropSpec& spec, std::size_t rows, std::size_t cols) {
  Tensor full({1, rows, cols}, 0.0);
  const std::size_t h = cropped.dim(1), w = cropped.dim(2);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t fr = spec.axis == CropAxis::rows ? r + spec.offset : r;
      const std::size_t fc = spec.axis == CropAxis::cols ? c + spec.offset : c;
      full[fr * cols + fc] = cropped[r * w + c];
    }
  }
  return full;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write to " + path.string() + " failed");
}

void write_cell_artifacts(const ExperimentConfig& config, const CellResult& cell, const TrainResult& trained,
                          const std::vector<Tensor>& scores, const std::vector<Tensor>& masks,
                          const std::vector<SegSample>& full_test, const CropSpec& crop, const fs::path& dir) {
  fs::create_directories(dir);
  save_checkpoint(trained.best, dir / "model.ckpt");

  std::string history = "epoch,train_loss,validation_metric\n";
  for (const auto& h : trained.history) {
    history += std::to_string(h.epoch) + "," + fmt(h.train_loss) + "," + fmt(h.validation_metric) + "\n";
  }
  write_text(dir / "history.csv", history);

  std::vector<double> pooled_scores, pooled_labels;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    pooled_scores.insert(pooled_scores.end(), scores[i].values().begin(), scores[i].values().end());
    pooled_labels.insert(pooled_labels.end(), masks[i].values().begin(), masks[i].values().end());
  }
  const PrCurve pr = pr_curve(pooled_scores, pooled_labels);
  io::write_pr_csv(dir / "pr_curve.csv", pr);
  io::SvgSeries pr_series{"aPr " + io::format_metric(cell.summary->apr), {}};
  for (const auto& p : pr.points) pr_series.points.emplace_back(p.recall, p.precision);
  const std::string title = cell_name(cell.seed, cell.extent, cell.loss);
  io::write_svg_plot(dir / "pr_curve.svg", "PR " + title, "recall", "precision", {pr_series});

  if (pr.negatives > 0) {
    const auto roc = roc_curve(pooled_scores, pooled_labels);
    io::write_roc_csv(dir / "roc_curve.csv", roc);
    io::SvgSeries roc_series{"AUC " + io::format_metric(cell.summary->auc), {}};
    for (const auto& p : roc) roc_series.points.emplace_back(p.fpr, p.tpr);
    io::write_svg_plot(dir / "roc_curve.svg", "ROC " + title, "false positive rate", "true positive rate",
                       {roc_series});
  }

  if (!config.write_overlays) return;
  fs::create_directories(dir / "overlays");
  const EvalOptions options{config.largest_component};
  const auto binary = binarized_predictions(scores, cell.summary->cutoff, options);
  std::vector<std::size_t> band_rows;
  // Lines are horizontal, so only a row band is delineated.
  if (crop.axis == CropAxis::rows) {
    if (crop.offset > 0) band_rows.push_back(crop.offset - 1);
    if (crop.offset + crop.extent < config.gen.rows) band_rows.push_back(crop.offset + crop.extent);
  }
  for (std::size_t i = 0; i < full_test.size(); ++i) {
    const SegSample& s = full_test[i];
    const Tensor pred_full = uncrop(binary[i], crop, s.rows(), s.cols());
    io::write_ppm(dir / "overlays" / (s.sample_id + ".ppm"), render_overlay(s.image, pred_full, s.mask, band_rows));
  }
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  const double a = v[n / 2 - 1], b = v[n / 2];
  if (std::isinf(a) || std::isinf(b)) return std::isinf(a) ? a : b;
  return 0.5 * (a + b);
}

std::string row_csv(std::size_t extent, LossKind loss, double sens, double spec, double prec, double auc, double apr,
                    double dice, double edist) {
  std::string out = std::to_string(extent) + "," + std::string(to_string(loss));
  for (double v : {sens, spec, prec, auc, apr, dice}) out += "," + io::format_metric(v);
  out += "," + (std::isfinite(edist) ? io::format_metric(edist) : std::string("nan"));
  return out + "\n";
}

}  // namespace

std::string_view to_string(ArchKind a) { return a == ArchKind::desk ? "desk" : "full"; }

ArchKind parse_arch_kind(std::string_view text) {
  if (text == "desk") return ArchKind::desk;
  if (text == "full") return ArchKind::full;
  throw std::invalid_argument("unknown architecture '" + std::string(text) + "' (expected desk or full)");
}

double ExperimentConfig::resolved_crop_center() const {
  return crop_center ? *crop_center : 0.5 * (gen.band_lo + gen.band_hi);
}

std::size_t ExperimentConfig::band_extent() const { return gen.band_axis == CropAxis::rows ? gen.rows : gen.cols; }

CropSpec ExperimentConfig::crop_for(std::size_t extent) const {
  const std::size_t full = band_extent();
  return CropSpec::centered(full, extent, resolved_crop_center() * static_cast<double>(full), gen.band_axis);
}

UNetConfig ExperimentConfig::model_config(std::size_t extent) const {
  const std::size_t rows = gen.band_axis == CropAxis::rows ? extent : gen.rows;
  const std::size_t cols = gen.band_axis == CropAxis::cols ? extent : gen.cols;
  UNetConfig c = arch == ArchKind::full ? UNetConfig::full(rows, cols) : UNetConfig::desk(rows, cols);
  c.dropout_rate = dropout_rate;
  return c;
}

LossSpec ExperimentConfig::loss_spec(LossKind kind) const { return LossSpec{kind, tversky_beta, tversky_epsilon}; }

void ExperimentConfig::validate() const {
  as_config_error([&] {
    gen.validate();
    corpus.validate();
    train.validate();
    for (auto kind : losses) loss_spec(kind).validate();
    return 0;
  });
  double total = 0.0;
  for (double f : split_fractions) {
    if (!(f > 0.0)) throw ConfigError("config: split fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("config: split fractions must sum to 1, got " + fmt(total));
  if (crops.empty()) throw ConfigError("config: at least one crop is required");
  if (losses.empty()) throw ConfigError("config: at least one loss is required");
  if (seeds.empty()) throw ConfigError("config: at least one seed is required");
  if (has_duplicates(crops)) throw ConfigError("config: duplicate crop extent");
  if (has_duplicates(losses)) throw ConfigError("config: duplicate loss");
  if (has_duplicates(seeds)) throw ConfigError("config: duplicate seed");
  if (workers < 1) throw ConfigError("config: workers must be >= 1");
  if (crop_center && !(*crop_center >= 0.0 && *crop_center <= 1.0)) {
    throw ConfigError("config: crop.center must lie in [0,1]");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("config: model.dropout must lie in [0,1)");
  for (std::size_t extent : crops) {
    if (extent == 0 || extent > band_extent()) {
      throw ConfigError("config: crop " + std::to_string(extent) + " outside (0, " + std::to_string(band_extent()) +
                        "]");
    }
    as_config_error([&] {
      model_config(extent).validate();
      return 0;
    });
  }
}

std::vector<std::pair<std::string, std::string>> ExperimentConfig::to_key_values() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : fields()) out.emplace_back(f.key, f.get(*this));
  return out;
}

void apply_setting(ExperimentConfig& config, const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(config, value);
      return;
    }
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

ExperimentConfig parse_config(const std::string& text, ExperimentConfig base) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    try {
      apply_setting(base, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  base.validate();
  return base;
}

ExperimentConfig load_config(const fs::path& path, ExperimentConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot read " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str(), std::move(base));
}

Split make_split(const ExperimentConfig& config, std::uint64_t seed) {
  Rng corpus_rng(mix_seed(seed, {kCorpusTag}));
  const auto corpus = generate_corpus(config.gen, config.corpus, corpus_rng);
  Rng split_rng(mix_seed(seed, {kSplitTag}));
  return split_by_patient(corpus, config.split_fractions, split_rng);
}

std::uint64_t cell_seed(std::uint64_t seed, std::size_t extent, LossKind loss) {
  return mix_seed(seed, {kCellTag, static_cast<std::uint64_t>(extent), static_cast<std::uint64_t>(loss)});
}

std::string cell_name(std::uint64_t seed, std::size_t extent, LossKind loss) {
  return "s" + std::to_string(seed) + "_ir" + std::to_string(extent) + "_" + std::string(to_string(loss));
}

CellResult run_cell(const ExperimentConfig& config, const Split& split, std::uint64_t seed, std::size_t extent,
                    LossKind loss, const fs::path& cell_dir, const LogSink& log) {
  const auto start = std::chrono::steady_clock::now();
  CellResult cell;
  cell.seed = seed;
  cell.extent = extent;
  cell.loss = loss;
  const std::string name = cell_name(seed, extent, loss);

  const CropSpec crop = config.crop_for(extent);
  Split cropped;
  cropped.train = crop_all(split.train, crop, cell.truncated_samples);
  cropped.validation = crop_all(split.validation, crop, cell.truncated_samples);
  cropped.test = crop_all(split.test, crop, cell.truncated_samples);
  assert_patient_disjoint(cropped, name);
  if (cell.truncated_samples > 0 && log) {
    log("warning: " + name + ": crop truncated the disc in " + std::to_string(cell.truncated_samples) + " samples");
  }

  const std::uint64_t cs = cell_seed(seed, extent, loss);
  Rng init(mix_seed(cs, {kInitTag}));
  const Model model = build_unet(config.model_config(extent), init);
  TrainConfig tc = config.train;
  tc.loss = config.loss_spec(loss);
  tc.seed = cs;

  auto finish = [&](CellResult& c) {
    c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (log) {
      char buf[256];
      if (c.failed) {
        std::snprintf(buf, sizeof buf, "%s: FAILED (%s) after %.1fs", name.c_str(), c.failure.c_str(), c.seconds);
      } else {
        std::snprintf(buf, sizeof buf, "%s: best epoch %d, Dice %.4f, eDist %s (%.1fs)", name.c_str(), c.best_epoch,
                      c.summary->dice, io::format_metric(c.summary->edist).c_str(), c.seconds);
      }
      log(buf);
    }
    return c;
  };

  std::optional<TrainResult> trained;
  try {
    trained = train(model, cropped.train, cropped.validation, tc);
  } catch (const TrainingError& e) {
    cell.failed = true;
    cell.failure = e.what();
    return finish(cell);
  }
  cell.best_epoch = trained->best_epoch;

  const auto scores = predict_all(trained->best, cropped.test);
  std::vector<Tensor> masks;
  std::size_t positives = 0;
  for (const auto& s : cropped.test) {
    masks.push_back(s.mask);
    positives += s.foreground();
  }
  if (positives == 0) {
    cell.failed = true;
    cell.failure = "no foreground left in the cropped test set";
    return finish(cell);
  }
  cell.summary = evaluate_predictions(scores, masks, EvalOptions{config.largest_component});
  if (!cell_dir.empty()) {
    write_cell_artifacts(config, cell, *trained, scores, masks, split.test, crop, cell_dir);
  }
  return finish(cell);
}

std::vector<MedianRow> median_rows(const ExperimentConfig& config, const std::vector<CellResult>& cells) {
  std::vector<MedianRow> rows;
  const double inf = std::numeric_limits<double>::infinity();
  for (std::size_t extent : config.crops) {
    for (LossKind loss : config.losses) {
      std::array<std::vector<double>, 7> v;
      for (const auto& c : cells) {
        if (c.extent != extent || c.loss != loss) continue;
        if (c.failed || !c.summary) {
          for (std::size_t k = 0; k < 6; ++k) v[k].push_back(0.0);
          v[6].push_back(inf);
          continue;
        }
        const EvalSummary& s = *c.summary;
        v[0].push_back(s.sensitivity);
        v[1].push_back(s.specificity);
        v[2].push_back(s.precision);
        v[3].push_back(s.auc);
        v[4].push_back(s.apr);
        v[5].push_back(s.dice);
        v[6].push_back(s.edist ? *s.edist : inf);
      }
      if (v[0].empty()) continue;
      rows.push_back({extent, loss, median_of(v[0]), median_of(v[1]), median_of(v[2]), median_of(v[3]),
                      median_of(v[4]), median_of(v[5]), median_of(v[6])});
    }
  }
  return rows;
}

ExperimentReport run_ablation(const ExperimentConfig& config, const LogSink& log) {
  config.validate();
  io::ensure_writable_dir(config.output_dir);
  const fs::path cells_dir = config.output_dir / "cells";
  fs::create_directories(cells_dir);

  std::vector<Split> splits;
  for (auto seed : config.seeds) splits.push_back(make_split(config, seed));

  struct Task {
    std::size_t seed_index;
    std::size_t extent;
    LossKind loss;
  };
  std::vector<Task> tasks;
  for (std::size_t si = 0; si < config.seeds.size(); ++si) {
    for (auto extent : config.crops) {
      for (auto loss : config.losses) tasks.push_back({si, extent, loss});
    }
  }

  std::mutex log_mutex;
  const LogSink locked_log = [&](const std::string& msg) {
    if (!log) return;
    std::lock_guard<std::mutex> lock(log_mutex);
    log(msg);
  };

  std::vector<CellResult> results(tasks.size());
  std::vector<std::exception_ptr> errors(tasks.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) {
      const Task& t = tasks[i];
      const auto seed = config.seeds[t.seed_index];
      try {
        results[i] = run_cell(config, splits[t.seed_index], seed, t.extent, t.loss,
                              cells_dir / cell_name(seed, t.extent, t.loss), locked_log);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const unsigned n_threads = std::min<unsigned>(config.workers, static_cast<unsigned>(tasks.size()));
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned k = 0; k < n_threads; ++k) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  ExperimentReport report;
  report.config = config;
  report.cells = std::move(results);
  report.medians = median_rows(config, report.cells);
  for (const auto& c : report.cells) {
    const std::string name = cell_name(c.seed, c.extent, c.loss);
    if (c.truncated_samples > 0) {
      report.warnings.push_back(name + ": crop truncated the disc in " + std::to_string(c.truncated_samples) +
                                " samples");
    }
    if (c.failed) report.warnings.push_back(name + ": cell failed: " + c.failure);
  }
  emit_report(report, config.output_dir);
  return report;
}

std::string report_csv(const ExperimentReport& report) {
  std::string out = std::string(kReportHeader) + "\n";
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const auto& c : report.cells) {
    if (c.failed || !c.summary) {
      out += row_csv(c.extent, c.loss, nan, nan, nan, nan, nan, nan, nan);
      continue;
    }
    const EvalSummary& s = *c.summary;
    out += row_csv(c.extent, c.loss, s.sensitivity, s.specificity, s.precision, s.auc, s.apr, s.dice,
                   s.edist ? *s.edist : nan);
  }
  return out;
}

std::string medians_csv(const ExperimentReport& report) {
  std::string out = std::string(kReportHeader) + "\n";
  for (const auto& m : report.medians) {
    // An infinite median means undefined, printed like an undefined cell.
    const double edist = std::isinf(m.edist) ? std::numeric_limits<double>::quiet_NaN() : m.edist;
    out += row_csv(m.extent, m.loss, m.sensitivity, m.specificity, m.precision, m.auc, m.apr, m.dice, edist);
  }
  return out;
}

std::string run_metadata(const ExperimentConfig& config) {
  std::string out = "# Resolved configuration (loadable with --config)\n";
  for (const auto& [k, v] : config.to_key_values()) out += k + " = " + v + "\n";
  out += "\n# Defaults not fixed by the reference experiment\n";
  out += "# tversky beta: " + fmt(config.tversky_beta) + "\n";
  out += "# tversky epsilon: " + fmt(config.tversky_epsilon) + "\n";
  out += "# learning rate: " + fmt(config.train.learning_rate) + " (Adam, beta1 0.9, beta2 0.999, eps 1e-8)\n";
  out += "# batch size: " + std::to_string(config.train.batch_size) + "\n";
  out += "# epochs: " + std::to_string(config.train.epochs) + "\n";
  out += "# model selection: " + std::string(to_string(config.train.selection_metric)) +
         " (dice pooled over the validation set at threshold 0.5), earliest best epoch kept\n";
  out += "# cut-off rule: maximal F1 on the pooled test PR curve, ties to the higher threshold; "
         "constant scores give an empty prediction\n";
  out += "# binarization: score >= cut-off\n";
  out += "# PR/ROC pooling: pixels pooled over the test set\n";
  out += "# eDist: mean per-image centroid distance at the cut-off, nan if any prediction is empty\n";
  out += "# medians: over seeds, undefined eDist and failed cells rank as worst\n";
  out += "# tversky aggregation: soft counts summed over the whole batch\n";
  out += "# bce clamp: probabilities clamped to [1e-7, 1-1e-7]\n";
  out += "# architecture: " + std::string(to_string(config.arch)) + ", nearest-neighbour upsampling, ReLU, "
         "He-uniform kernels, zero biases\n";
  out += "# crop placement: centred at " + fmt(config.resolved_crop_center()) + " of the band axis\n";
  out += "# synthetic data: generated corpus, patient-level split, min-max normalised images\n";
  out += "# checkpoints: parameters stored as 32-bit floats\n";
  return out;
}

void emit_report(const ExperimentReport& report, const fs::path& dir) {
  io::ensure_writable_dir(dir);
  write_text(dir / "report.csv", report_csv(report));
  write_text(dir / "medians.csv", medians_csv(report));
  std::string cells = "seed,ir,loss,status,best_epoch,cutoff,truncated_samples,detail\n";
  for (const auto& c : report.cells) {
    cells += std::to_string(c.seed) + "," + std::to_string(c.extent) + "," + std::string(to_string(c.loss)) + "," +
             (c.failed ? "failed" : "ok") + "," + std::to_string(c.best_epoch) + "," +
             (c.summary ? fmt(c.summary->cutoff) : std::string("nan")) + "," + std::to_string(c.truncated_samples) +
             "," + (c.failed ? "\"" + c.failure + "\"" : std::string()) + "\n";
  }
  write_text(dir / "cells.csv", cells);
  std::string warnings;
  for (const auto& w : report.warnings) warnings += w + "\n";
  write_text(dir / "warnings.txt", warnings);
  write_text(dir / "run_metadata.txt", run_metadata(report.config));
}

}  // namespace cseg
