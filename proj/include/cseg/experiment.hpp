#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cseg/eval.hpp"
#include "cseg/losses.hpp"
#include "cseg/optim.hpp"
#include "cseg/synthdata.hpp"
#include "cseg/unet.hpp"

namespace cseg {

enum class ArchKind { desk, full };

std::string_view to_string(ArchKind a);
ArchKind parse_arch_kind(std::string_view text);

// Thrown for malformed or inconsistent experiment configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ExperimentConfig {
  GenParams gen;
  CorpusSpec corpus{48, 0.4, 0.35, 3};
  // Sample-count targets of the patient-level split (train, validation, test).
  std::array<double, 3> split_fractions{10.0 / 12.0, 1.0 / 12.0, 1.0 / 12.0};
  // Kept extents along the band axis; one grid column each.
  std::vector<std::size_t> crops{64, 40, 24};
  // Centre of every crop as a fraction of the band axis; unset means the
  // middle of [gen.band_lo, gen.band_hi].
  std::optional<double> crop_center;
  std::vector<LossKind> losses{LossKind::bce, LossKind::tversky};
  double tversky_beta = 0.5;
  double tversky_epsilon = 1e-6;
  TrainConfig train{60, 1e-3, 4, {}, 1, SelectionMetric::validation_dice};
  ArchKind arch = ArchKind::desk;
  double dropout_rate = 0.2;
  bool largest_component = false;
  std::vector<std::uint64_t> seeds{1};
  std::filesystem::path output_dir = "ablation_out";
  unsigned workers = 1;
  // Per-sample overlay images for every cell.
  bool write_overlays = true;

  // Throws ConfigError on the first violated invariant.
  void validate() const;

  double resolved_crop_center() const;
  std::size_t band_extent() const;
  CropSpec crop_for(std::size_t extent) const;
  UNetConfig model_config(std::size_t extent) const;
  LossSpec loss_spec(LossKind kind) const;

  // Every field as "key -> value" in a fixed order; parse_config accepts the
  // same keys.
  std::vector<std::pair<std::string, std::string>> to_key_values() const;
};

// Flat "key = value" text. Blank lines and lines starting with '#' are
// ignored; unknown keys and malformed values raise ConfigError.
ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {});
ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = {});
void apply_setting(ExperimentConfig& config, const std::string& key, const std::string& value);

// Synthetic corpus and patient-level split for one seed.
Split make_split(const ExperimentConfig& config, std::uint64_t seed);

// Seed of a grid cell, derived only from (seed, crop extent, loss) so cells
// can run in any order.
std::uint64_t cell_seed(std::uint64_t seed, std::size_t extent, LossKind loss);

struct CellResult {
  std::uint64_t seed = 0;
  std::size_t extent = 0;
  LossKind loss = LossKind::bce;
  bool failed = false;
  std::string failure;
  int best_epoch = 0;
  double seconds = 0.0;
  // Samples whose disc was cut by the crop, summed over all splits.
  std::size_t truncated_samples = 0;
  std::optional<EvalSummary> summary;
};

struct MedianRow {
  std::size_t extent = 0;
  LossKind loss = LossKind::bce;
  double sensitivity = 0, specificity = 0, precision = 0, auc = 0, apr = 0, dice = 0;
  // +infinity when the median eDist is undefined.
  double edist = 0;
};

struct ExperimentReport {
  ExperimentConfig config;
  // Ordered by seed, then crop, then loss as listed in the config.
  std::vector<CellResult> cells;
  std::vector<MedianRow> medians;
  std::vector<std::string> warnings;
};

// Seed-wise medians per (crop, loss). Undefined eDist counts as +infinity;
// a failed cell counts as 0 for the bounded metrics and +infinity for eDist.
std::vector<MedianRow> median_rows(const ExperimentConfig& config, const std::vector<CellResult>& cells);

using LogSink = std::function<void(const std::string&)>;

// Trains and evaluates one cell, writing its artifacts under `cell_dir`
// (nothing is written when `cell_dir` is empty).
CellResult run_cell(const ExperimentConfig& config, const Split& split, std::uint64_t seed, std::size_t extent,
                    LossKind loss, const std::filesystem::path& cell_dir, const LogSink& log = {});

// Full grid. The output directory is checked for writability before any
// training; per-cell artifacts go to <out>/cells/<cell>/ and the summary
// files are written by emit_report.
ExperimentReport run_ablation(const ExperimentConfig& config, const LogSink& log = {});

std::string cell_name(std::uint64_t seed, std::size_t extent, LossKind loss);

// report.csv (one row per cell), medians.csv, cells.csv (status and
// bookkeeping) and run_metadata.txt.
void emit_report(const ExperimentReport& report, const std::filesystem::path& dir);

inline constexpr const char* kReportHeader = "ir,loss,sensitivity,specificity,precision,AUC,aPr,Dice,eDist";

std::string report_csv(const ExperimentReport& report);
std::string medians_csv(const ExperimentReport& report);
std::string run_metadata(const ExperimentConfig& config);

}  // namespace cseg
