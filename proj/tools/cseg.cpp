// Command-line front end: generate, train, evaluate, ablate, render.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "cseg/checkpoint.hpp"
#include "cseg/experiment.hpp"
#include "cseg/io.hpp"

namespace fs = std::filesystem;
using namespace cseg;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<unsigned> workers;
  bool full_arch = false;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool with_workers) {
  cmd->add_option("--config", o.config_path, "key = value configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "seed (replaces the configured seed list)");
  cmd->add_option("--out", o.out, "output directory");
  if (with_workers) cmd->add_option("--workers", o.workers, "parallel grid cells")->check(CLI::PositiveNumber);
  cmd->add_flag("--full-arch", o.full_arch, "use the full-size encoder/decoder filter counts");
}

ExperimentConfig resolve(const CommonOptions& o) {
  ExperimentConfig c = o.config_path.empty() ? ExperimentConfig{} : load_config(o.config_path);
  if (o.seed) c.seeds = {*o.seed};
  if (!o.out.empty()) c.output_dir = o.out;
  if (o.workers) c.workers = *o.workers;
  if (o.full_arch) c.arch = ArchKind::full;
  c.validate();
  return c;
}

void log_line(const std::string& msg) { std::cerr << msg << "\n"; }

nlohmann::json summary_json(const EvalSummary& s) {
  nlohmann::json j;
  j["sensitivity"] = s.sensitivity;
  j["specificity"] = s.specificity;
  j["precision"] = s.precision;
  j["AUC"] = s.auc;
  j["aPr"] = s.apr;
  j["Dice"] = s.dice;
  j["eDist"] = s.edist ? nlohmann::json(*s.edist) : nlohmann::json(nullptr);
  j["cutoff"] = std::isfinite(s.cutoff) ? nlohmann::json(s.cutoff) : nlohmann::json("inf");
  j["counts"] = {{"tp", s.counts.tp}, {"fp", s.counts.fp}, {"fn", s.counts.fn}, {"tn", s.counts.tn}};
  return j;
}

void print_summary(const EvalSummary& s) {
  std::printf("%s\n", kReportHeader + 8);  // skip "ir,loss,"
  std::printf("%s,%s,%s,%s,%s,%s,%s\n", io::format_metric(s.sensitivity).c_str(),
              io::format_metric(s.specificity).c_str(), io::format_metric(s.precision).c_str(),
              io::format_metric(s.auc).c_str(), io::format_metric(s.apr).c_str(), io::format_metric(s.dice).c_str(),
              io::format_metric(s.edist).c_str());
}

// Reads <dir>/{train,validation,test} when present, else generates the split.
Split load_or_make_split(const ExperimentConfig& c, const std::string& data_dir) {
  if (data_dir.empty()) return make_split(c, c.seeds.front());
  Split s;
  s.train = io::import_dataset(fs::path(data_dir) / "train");
  s.validation = io::import_dataset(fs::path(data_dir) / "validation");
  s.test = io::import_dataset(fs::path(data_dir) / "test");
  return s;
}

int cmd_generate(const CommonOptions& o) {
  ExperimentConfig c = resolve(o);
  const fs::path out = o.out.empty() ? fs::path("dataset") : fs::path(o.out);
  io::ensure_writable_dir(out);
  const Split s = make_split(c, c.seeds.front());
  io::export_dataset(out / "train", s.train);
  io::export_dataset(out / "validation", s.validation);
  io::export_dataset(out / "test", s.test);
  std::printf("wrote %zu/%zu/%zu samples to %s\n", s.train.size(), s.validation.size(), s.test.size(),
              out.string().c_str());
  return 0;
}

int cmd_train(const CommonOptions& o, std::size_t crop, const std::string& loss_name, const std::string& data_dir) {
  ExperimentConfig c = resolve(o);
  LossKind loss;
  try {
    loss = parse_loss_kind(loss_name);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (crop == 0) crop = c.band_extent();
  c.crops = {crop};
  c.losses = {loss};
  c.validate();
  const fs::path out = o.out.empty() ? fs::path("train_out") : fs::path(o.out);
  io::ensure_writable_dir(out);
  const Split split = load_or_make_split(c, data_dir);
  const CellResult cell = run_cell(c, split, c.seeds.front(), crop, loss, out, log_line);
  if (cell.failed) {
    std::fprintf(stderr, "training failed: %s\n", cell.failure.c_str());
    return kExitRuntime;
  }
  print_summary(*cell.summary);
  nlohmann::json j = summary_json(*cell.summary);
  j["best_epoch"] = cell.best_epoch;
  j["ir"] = crop;
  j["loss"] = std::string(to_string(loss));
  std::ofstream(out / "summary.json") << j.dump(2) << "\n";
  return 0;
}

int cmd_evaluate(const CommonOptions& o, const std::string& checkpoint, const std::string& data_dir,
                 bool largest) {
  ExperimentConfig c = resolve(o);
  const Model model = load_checkpoint(checkpoint);
  auto samples = io::import_dataset(data_dir);
  if (samples.empty()) throw std::runtime_error("dataset " + data_dir + " is empty");
  const UNetConfig& mc = model.config();
  const std::size_t model_extent = c.gen.band_axis == CropAxis::rows ? mc.input_rows : mc.input_cols;
  const std::size_t full = c.gen.band_axis == CropAxis::rows ? samples.front().rows() : samples.front().cols();
  c.gen.rows = samples.front().rows();
  c.gen.cols = samples.front().cols();
  const CropSpec crop = CropSpec::centered(full, model_extent, c.resolved_crop_center() * static_cast<double>(full),
                                           c.gen.band_axis);
  std::vector<SegSample> cropped;
  for (const auto& s : samples) cropped.push_back(crop_band(s, crop));

  const auto scores = predict_all(model, cropped);
  std::vector<Tensor> masks;
  for (const auto& s : cropped) masks.push_back(s.mask);
  const EvalOptions options{largest || c.largest_component};
  const EvalSummary summary = evaluate_predictions(scores, masks, options);
  print_summary(summary);

  const fs::path out = o.out.empty() ? fs::path("eval_out") : fs::path(o.out);
  io::ensure_writable_dir(out / "predictions");
  const auto binary = binarized_predictions(scores, summary.cutoff, options);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    // Full-size masks: pixels outside the crop are background.
    Tensor full_pred({1, samples[i].rows(), samples[i].cols()}, 0.0);
    const std::size_t w = binary[i].dim(2);
    for (std::size_t r = 0; r < binary[i].dim(1); ++r) {
      for (std::size_t col = 0; col < w; ++col) {
        const std::size_t fr = crop.axis == CropAxis::rows ? r + crop.offset : r;
        const std::size_t fc = crop.axis == CropAxis::cols ? col + crop.offset : col;
        full_pred[fr * samples[i].cols() + fc] = binary[i][r * w + col];
      }
    }
    io::write_pgm(out / "predictions" / (samples[i].sample_id + ".pgm"), full_pred);
  }
  nlohmann::json j = summary_json(summary);
  j["crop"] = {{"axis", std::string(to_string(crop.axis))}, {"offset", crop.offset}, {"extent", crop.extent}};
  std::ofstream(out / "summary.json") << j.dump(2) << "\n";
  return 0;
}

int cmd_ablate(const CommonOptions& o) {
  const ExperimentConfig c = resolve(o);
  const ExperimentReport report = run_ablation(c, log_line);
  std::fputs(medians_csv(report).c_str(), stdout);
  for (const auto& w : report.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  return 0;
}

int cmd_render(const CommonOptions& o, const std::string& data_dir, const std::string& pred_dir) {
  const fs::path out = o.out.empty() ? fs::path("overlays") : fs::path(o.out);
  io::ensure_writable_dir(out);
  std::vector<std::size_t> band_rows;
  const fs::path summary_path = fs::path(pred_dir).parent_path() / "summary.json";
  const auto samples = io::import_dataset(data_dir);
  if (fs::exists(summary_path)) {
    const auto j = nlohmann::json::parse(std::ifstream(summary_path));
    if (j.contains("crop") && j["crop"]["axis"] == "rows") {
      const std::size_t offset = j["crop"]["offset"], extent = j["crop"]["extent"];
      if (offset > 0) band_rows.push_back(offset - 1);
      if (!samples.empty() && offset + extent < samples.front().rows()) band_rows.push_back(offset + extent);
    }
  }
  std::size_t written = 0;
  for (const auto& s : samples) {
    const fs::path p = fs::path(pred_dir) / (s.sample_id + ".pgm");
    if (!fs::exists(p)) throw std::runtime_error("no prediction for " + s.sample_id + " in " + pred_dir);
    Tensor pred = io::read_pgm(p);
    for (auto& v : pred.values()) v = v >= 0.5 ? 1.0 : 0.0;
    io::write_ppm(out / (s.sample_id + ".ppm"), render_overlay(s.image, pred, s.mask, band_rows));
    ++written;
  }
  std::printf("wrote %zu overlays to %s\n", written, out.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic disc segmentation lab: U-Net training and cropping ablation"};
  app.require_subcommand(1);

  CommonOptions gen_o, train_o, eval_o, ablate_o, render_o;
  auto* gen = app.add_subcommand("generate", "write a synthetic train/validation/test corpus");
  add_common(gen, gen_o, false);

  auto* tr = app.add_subcommand("train", "train and evaluate one (crop, loss) cell");
  add_common(tr, train_o, false);
  std::size_t crop = 0;
  std::string loss = "bce", train_data;
  tr->add_option("--crop", crop, "kept extent along the band axis (default: full)");
  tr->add_option("--loss", loss, "bce or tversky");
  tr->add_option("--data", train_data, "dataset directory written by 'generate'")->check(CLI::ExistingDirectory);

  auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint on a dataset directory");
  add_common(ev, eval_o, false);
  std::string checkpoint, eval_data;
  bool largest = false;
  ev->add_option("--checkpoint", checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", eval_data, "dataset directory with manifest.tsv")->required()->check(CLI::ExistingDirectory);
  ev->add_flag("--largest-component", largest, "keep only the largest predicted component");

  auto* ab = app.add_subcommand("ablate", "run the crop x loss x seed grid and write the report");
  add_common(ab, ablate_o, true);

  auto* rd = app.add_subcommand("render", "draw overlays from saved binary predictions");
  add_common(rd, render_o, false);
  std::string render_data, pred_dir;
  rd->add_option("--data", render_data, "dataset directory with manifest.tsv")->required()->check(CLI::ExistingDirectory);
  rd->add_option("--predictions", pred_dir, "directory of <sample_id>.pgm masks")
      ->required()
      ->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) return cmd_generate(gen_o);
    if (*tr) return cmd_train(train_o, crop, loss, train_data);
    if (*ev) return cmd_evaluate(eval_o, checkpoint, eval_data, largest);
    if (*ab) return cmd_ablate(ablate_o);
    if (*rd) return cmd_render(render_o, render_data, pred_dir);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitConfig;
}
