#include "cseg/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace cseg::io {

namespace fs = std::filesystem;

namespace {

std::ofstream open_out(const fs::path& path, bool binary) {
  std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

// Reads a netpbm header "<magic> <w> <h> <maxval>" followed by one whitespace byte.
void read_header(std::istream& in, const std::string& expected_magic, const fs::path& path, std::size_t& w,
                 std::size_t& h, int& maxval) {
  std::string magic;
  in >> magic;
  if (magic != expected_magic) throw std::runtime_error(path.string() + ": expected " + expected_magic + " file");
  auto next_number = [&]() {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string comment;
      std::getline(in, comment);
      in >> std::ws;
    }
    long v = -1;
    in >> v;
    if (!in || v <= 0) throw std::runtime_error(path.string() + ": malformed header");
    return v;
  };
  w = static_cast<std::size_t>(next_number());
  h = static_cast<std::size_t>(next_number());
  maxval = static_cast<int>(next_number());
  if (maxval > 255) throw std::runtime_error(path.string() + ": only 8-bit images are supported");
  in.get();
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

std::string csv_number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

void write_pgm(const fs::path& path, const Tensor& image) {
  if (image.rank() < 2) throw std::invalid_argument("write_pgm: expected an image");
  const std::size_t h = image.dim(image.rank() - 2), w = image.dim(image.rank() - 1);
  if (h * w != image.size()) throw std::invalid_argument("write_pgm: expected a single-channel image");
  auto out = open_out(path, true);
  out << "P5\n" << w << " " << h << "\n255\n";
  std::vector<char> bytes(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) bytes[i] = static_cast<char>(to_byte(image[i]));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Tensor read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::size_t w, h;
  int maxval;
  read_header(in, "P5", path, w, h, maxval);
  std::vector<unsigned char> bytes(w * h);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) throw std::runtime_error(path.string() + ": truncated");
  Tensor out({1, h, w});
  for (std::size_t i = 0; i < bytes.size(); ++i) out[i] = static_cast<double>(bytes[i]) / maxval;
  return out;
}

void write_ppm(const fs::path& path, const RgbImage& image) {
  auto out = open_out(path, true);
  out << "P6\n" << image.cols << " " << image.rows << "\n255\n";
  std::vector<char> bytes;
  bytes.reserve(image.pixels.size() * 3);
  for (const auto& p : image.pixels) {
    bytes.push_back(static_cast<char>(p.r));
    bytes.push_back(static_cast<char>(p.g));
    bytes.push_back(static_cast<char>(p.b));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

RgbImage read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::size_t w, h;
  int maxval;
  read_header(in, "P6", path, w, h, maxval);
  std::vector<unsigned char> bytes(w * h * 3);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) throw std::runtime_error(path.string() + ": truncated");
  RgbImage img{h, w, std::vector<Rgb>(w * h)};
  for (std::size_t i = 0; i < w * h; ++i) img.pixels[i] = {bytes[3 * i], bytes[3 * i + 1], bytes[3 * i + 2]};
  return img;
}

void export_dataset(const fs::path& dir, const std::vector<SegSample>& samples) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  auto manifest = open_out(dir / "manifest.tsv", false);
  manifest << kManifestHeader << "\n";
  for (const auto& s : samples) {
    if (s.sample_id.empty() || s.sample_id.find_first_of("\t\n/") != std::string::npos) {
      throw std::invalid_argument("export_dataset: unusable sample id '" + s.sample_id + "'");
    }
    const std::string image_rel = "images/" + s.sample_id + ".pgm";
    const std::string mask_rel = "masks/" + s.sample_id + ".pgm";
    write_pgm(dir / image_rel, s.image);
    write_pgm(dir / mask_rel, s.mask);
    manifest << s.sample_id << "\t" << s.patient_id << "\t" << s.eye_id << "\t" << to_string(s.laterality) << "\t"
             << image_rel << "\t" << mask_rel << "\n";
  }
  if (!manifest) throw std::runtime_error("write failed: " + (dir / "manifest.tsv").string());
}

std::vector<SegSample> import_dataset(const fs::path& dir) {
  std::ifstream in(dir / "manifest.tsv");
  if (!in) throw std::runtime_error("cannot read " + (dir / "manifest.tsv").string());
  std::string line;
  std::getline(in, line);
  if (line != kManifestHeader) throw std::runtime_error("manifest.tsv: unexpected header '" + line + "'");
  std::vector<SegSample> samples;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() != 6) {
      throw std::runtime_error("manifest.tsv line " + std::to_string(line_no) + ": expected 6 fields, got " +
                               std::to_string(fields.size()));
    }
    SegSample s;
    s.sample_id = fields[0];
    try {
      s.patient_id = std::stoi(fields[1]);
      s.eye_id = std::stoi(fields[2]);
    } catch (const std::exception&) {
      throw std::runtime_error("manifest.tsv line " + std::to_string(line_no) + ": bad patient or eye id");
    }
    s.laterality = parse_laterality(fields[3]);
    s.image = read_pgm(dir / fields[4]);
    Tensor mask = read_pgm(dir / fields[5]);
    for (auto& v : mask.values()) v = v >= 0.5 ? 1.0 : 0.0;
    s.mask = std::move(mask);
    if (s.image.shape() != s.mask.shape()) {
      throw std::runtime_error("manifest.tsv line " + std::to_string(line_no) + ": image and mask extents differ");
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

std::string format_metric(double value) {
  if (std::isnan(value)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", value);
  return buf;
}

std::string format_metric(const std::optional<double>& value) { return value ? format_metric(*value) : "nan"; }

void write_pr_csv(const fs::path& path, const PrCurve& curve) {
  auto out = open_out(path, false);
  out << "threshold,precision,recall\n";
  for (const auto& p : curve.points) {
    out << csv_number(p.threshold) << "," << csv_number(p.precision) << "," << csv_number(p.recall) << "\n";
  }
}

void write_roc_csv(const fs::path& path, const std::vector<RocPoint>& curve) {
  auto out = open_out(path, false);
  out << "threshold,fpr,tpr\n";
  for (const auto& p : curve) out << csv_number(p.threshold) << "," << csv_number(p.fpr) << "," << csv_number(p.tpr) << "\n";
}

void write_svg_plot(const fs::path& path, const std::string& title, const std::string& x_label,
                    const std::string& y_label, const std::vector<SvgSeries>& series) {
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  constexpr double kLeft = 60, kTop = 40, kSize = 320;
  auto out = open_out(path, false);
  char buf[128];
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"520\" height=\"420\" viewBox=\"0 0 520 420\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << kLeft + kSize / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
      << "font-size=\"14\">" << xml_escape(title) << "</text>\n";
  out << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << kSize << "\" height=\"" << kSize
      << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double f = i / 4.0;
    std::snprintf(buf, sizeof buf, "%.2f", f);
    out << "<text x=\"" << kLeft + f * kSize << "\" y=\"" << kTop + kSize + 16
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">" << buf << "</text>\n";
    out << "<text x=\"" << kLeft - 6 << "\" y=\"" << kTop + (1 - f) * kSize + 3
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" << buf << "</text>\n";
  }
  out << "<text x=\"" << kLeft + kSize / 2 << "\" y=\"" << kTop + kSize + 34
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << xml_escape(x_label) << "</text>\n";
  out << "<text transform=\"translate(18," << kTop + kSize / 2
      << ") rotate(-90)\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << xml_escape(y_label)
      << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kColors[s % 6];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : series[s].points) {
      std::snprintf(buf, sizeof buf, "%.2f,%.2f ", kLeft + std::clamp(x, 0.0, 1.0) * kSize,
                    kTop + (1 - std::clamp(y, 0.0, 1.0)) * kSize);
      out << buf;
    }
    out << "\"/>\n";
    const double ly = kTop + 12 + 16.0 * static_cast<double>(s);
    out << "<line x1=\"" << kLeft + kSize + 10 << "\" y1=\"" << ly << "\" x2=\"" << kLeft + kSize + 30 << "\" y2=\""
        << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << kLeft + kSize + 34 << "\" y=\"" << ly + 4
        << "\" font-family=\"sans-serif\" font-size=\"11\">" << xml_escape(series[s].label) << "</text>\n";
  }
  out << "</svg>\n";
}

void ensure_writable_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + dir.string() + ": " + ec.message());
  const fs::path probe = dir / ".write_probe";
  {
    std::ofstream out(probe);
    if (!out) throw std::runtime_error("output directory " + dir.string() + " is not writable");
  }
  fs::remove(probe, ec);
}

}  // namespace cseg::io
