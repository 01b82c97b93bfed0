#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cseg/eval.hpp"
#include "cseg/synthdata.hpp"
#include "cseg/tensor.hpp"

namespace cseg::io {

// 8-bit binary PGM (P5). Values in [0,1] are scaled to 0..255.
void write_pgm(const std::filesystem::path& path, const Tensor& image);
// Returns a [1,H,W] tensor with values v/maxval.
Tensor read_pgm(const std::filesystem::path& path);

// Binary PPM (P6).
void write_ppm(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_ppm(const std::filesystem::path& path);

// Dataset directory layout:
//   manifest.tsv            header line, then one record per sample
//   images/<sample_id>.pgm  8-bit grayscale image
//   masks/<sample_id>.pgm   mask, 0 background / 255 foreground
// Manifest columns (tab separated): sample_id, patient_id, eye_id,
// laterality (right|left), image path, mask path (relative to the directory).
inline constexpr const char* kManifestHeader = "sample_id\tpatient_id\teye_id\tlaterality\timage\tmask";

void export_dataset(const std::filesystem::path& dir, const std::vector<SegSample>& samples);
std::vector<SegSample> import_dataset(const std::filesystem::path& dir);

// Fixed 4-decimal formatting; nullopt and NaN print as "nan".
std::string format_metric(double value);
std::string format_metric(const std::optional<double>& value);

// threshold,precision,recall
void write_pr_csv(const std::filesystem::path& path, const PrCurve& curve);
// threshold,fpr,tpr
void write_roc_csv(const std::filesystem::path& path, const std::vector<RocPoint>& curve);

struct SvgSeries {
  std::string label;
  std::vector<std::pair<double, double>> points;  // (x, y) in [0,1]^2
};

// Standalone line plot on the unit square.
void write_svg_plot(const std::filesystem::path& path, const std::string& title, const std::string& x_label,
                    const std::string& y_label, const std::vector<SvgSeries>& series);

// Creates `dir` if needed and verifies a file can be written into it.
void ensure_writable_dir(const std::filesystem::path& dir);

}  // namespace cseg::io
