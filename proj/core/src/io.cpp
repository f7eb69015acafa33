#include "dsd/io.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

#include "dsd/error.hpp"

namespace dsd {

double MetricsRecord::column(std::string_view name) const {
  if (name == "step") return static_cast<double>(step);
  if (name == "erank_z1") return erank_z1;
  if (name == "erank_z2") return erank_z2;
  if (name == "erank_pred") return erank_pred;
  if (name == "l_rec") return l_rec;
  if (name == "l_main") return l_main;
  if (name == "l_velo") return l_velo;
  if (name == "l_cls") return l_cls;
  if (name == "grad_norm") return grad_norm;
  if (name == "wall_ms") return wall_ms;
  throw DataError("metrics: unknown column " + std::string(name));
}

}  // namespace dsd

namespace dsd::io {

namespace {

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fixed(double v, int digits = 2) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string metrics_header() {
  std::string h;
  for (std::size_t i = 0; i < kMetricsColumns.size(); ++i) {
    if (i) h += ',';
    h += kMetricsColumns[i];
  }
  return h;
}

std::string format_metrics_row(const MetricsRecord& r) {
  std::string s = std::to_string(r.step);
  for (double v : {r.erank_z1, r.erank_z2, r.erank_pred, r.l_rec, r.l_main, r.l_velo, r.l_cls, r.grad_norm, r.wall_ms}) {
    s += ',';
    s += g17(v);
  }
  return s;
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path) : path_(path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  file_ = std::fopen(path.string().c_str(), "wb");
  if (!file_) throw IoError("cannot write " + path.string());
  const std::string h = metrics_header() + "\n";
  std::fwrite(h.data(), 1, h.size(), file_);
}

MetricsWriter::~MetricsWriter() {
  if (file_) std::fclose(file_);
}

void MetricsWriter::append(const MetricsRecord& record) {
  const std::string row = format_metrics_row(record) + "\n";
  if (std::fwrite(row.data(), 1, row.size(), file_) != row.size()) throw IoError("write failed for " + path_.string());
}

void MetricsWriter::flush() { std::fflush(file_); }

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRecord>& records) {
  MetricsWriter w(path);
  for (const auto& r : records) w.append(r);
}

std::vector<MetricsRecord> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError("metrics csv: empty file (missing header)");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != metrics_header()) throw DataError("metrics csv: header mismatch: got '" + line + "'");
  std::vector<MetricsRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fail = [&](const std::string& why) {
      throw DataError("metrics csv: line " + std::to_string(lineno) + ": " + why);
    };
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (line.back() == ',') fields.emplace_back();
    if (fields.size() != kMetricsColumns.size()) fail("expected 10 fields, got " + std::to_string(fields.size()));
    std::vector<double> v(fields.size());
    for (std::size_t i = 0; i < fields.size(); ++i) {
      const char* b = fields[i].c_str();
      char* e = nullptr;
      errno = 0;
      v[i] = std::strtod(b, &e);
      if (fields[i].empty() || e != b + fields[i].size() || errno == ERANGE)
        fail("field '" + std::string(kMetricsColumns[i]) + "' is not a number: '" + fields[i] + "'");
    }
    if (v[0] < 0 || v[0] != std::floor(v[0])) fail("step is not a non-negative integer");
    MetricsRecord r;
    r.step = static_cast<std::size_t>(v[0]);
    r.erank_z1 = v[1];
    r.erank_z2 = v[2];
    r.erank_pred = v[3];
    r.l_rec = v[4];
    r.l_main = v[5];
    r.l_velo = v[6];
    r.l_cls = v[7];
    r.grad_norm = v[8];
    r.wall_ms = v[9];
    out.push_back(r);
  }
  return out;
}

std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path) {
  try {
    return parse_metrics_csv(read_text_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// SVG

namespace {

constexpr double kPanelW = 560, kPanelH = 360;
constexpr double kLeft = 64, kRight = 64, kTop = 40, kBottom = 48;
constexpr const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};

struct Range {
  double lo = 0, hi = 1;
};

Range padded_range(const std::vector<const Series*>& series, bool use_x) {
  double lo = INFINITY, hi = -INFINITY;
  for (const auto* s : series)
    for (double v : use_x ? s->x : s->y)
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
  if (!std::isfinite(lo)) return {0.0, 1.0};
  if (use_x) {
    if (hi == lo) hi = lo + 1.0;
    return {lo, hi};
  }
  double pad = 0.05 * (hi - lo);
  if (pad == 0.0) pad = 0.05 * std::max(std::abs(lo), 1.0);
  return {lo - pad, hi + pad};
}

void render_panel(std::ostringstream& os, const Panel& panel, double ox, double oy) {
  std::vector<const Series*> all;
  for (const auto& s : panel.series) all.push_back(&s);
  const Range xr = padded_range(all, true);
  const Range yr = padded_range(all, false);
  const double pw = kPanelW - kLeft - kRight, ph = kPanelH - kTop - kBottom;
  auto px = [&](double x) { return ox + kLeft + (x - xr.lo) / (xr.hi - xr.lo) * pw; };
  auto py = [&](double y) { return oy + kTop + (yr.hi - y) / (yr.hi - yr.lo) * ph; };

  os << "<g class=\"panel\" data-ymin=\"" << g17(yr.lo) << "\" data-ymax=\"" << g17(yr.hi) << "\">\n";
  os << "<text x=\"" << fixed(ox + kPanelW / 2) << "\" y=\"" << fixed(oy + 24) << "\" text-anchor=\"middle\" font-size=\"15\">"
     << xml_escape(panel.title) << "</text>\n";
  os << "<rect x=\"" << fixed(ox + kLeft) << "\" y=\"" << fixed(oy + kTop) << "\" width=\"" << fixed(pw) << "\" height=\""
     << fixed(ph) << "\" fill=\"none\" stroke=\"#333\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = xr.lo + (xr.hi - xr.lo) * i / 4.0, fy = yr.lo + (yr.hi - yr.lo) * i / 4.0;
    os << "<text x=\"" << fixed(px(fx)) << "\" y=\"" << fixed(oy + kTop + ph + 18)
       << "\" text-anchor=\"middle\" font-size=\"11\">" << g17(std::round(fx * 1000) / 1000) << "</text>\n";
    os << "<text x=\"" << fixed(ox + kLeft - 6) << "\" y=\"" << fixed(py(fy) + 4)
       << "\" text-anchor=\"end\" font-size=\"11\">" << fixed(fy, 3) << "</text>\n";
  }
  for (std::size_t k = 0; k < panel.series.size(); ++k) {
    const auto& s = panel.series[k];
    const char* color = kPalette[k % std::size(kPalette)];
    os << "<polyline class=\"series\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      if (i) os << ' ';
      os << fixed(px(s.x[i])) << ',' << fixed(py(s.y[i]));
    }
    os << "\"/>\n";
    const double ly = oy + kTop + 12 + 16 * static_cast<double>(k);
    os << "<g class=\"legend\"><line x1=\"" << fixed(ox + kLeft + 8) << "\" y1=\"" << fixed(ly) << "\" x2=\""
       << fixed(ox + kLeft + 28) << "\" y2=\"" << fixed(ly) << "\" stroke=\"" << color
       << "\" stroke-width=\"2\"/><text x=\"" << fixed(ox + kLeft + 32) << "\" y=\"" << fixed(ly + 4)
       << "\" font-size=\"11\">" << xml_escape(s.name) << "</text></g>\n";
  }
  os << "</g>\n";
}

}  // namespace

std::string render_svg(const std::vector<Panel>& panels, std::size_t per_row) {
  const std::size_t n = std::max<std::size_t>(panels.size(), 1);
  const std::size_t cols = per_row == 0 ? n : std::min(per_row, n);
  const std::size_t rows = (n + cols - 1) / cols;
  const double width = kPanelW * static_cast<double>(cols), height = kPanelH * static_cast<double>(rows);
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fixed(width, 0) << "\" height=\"" << fixed(height, 0)
     << "\" viewBox=\"0 0 " << fixed(width, 0) << ' ' << fixed(height, 0) << "\" font-family=\"sans-serif\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t i = 0; i < panels.size(); ++i)
    render_panel(os, panels[i], kPanelW * static_cast<double>(i % cols), kPanelH * static_cast<double>(i / cols));
  os << "</svg>\n";
  return os.str();
}

std::string render_svg(const Panel& panel) { return render_svg(std::vector<Panel>{panel}, 1); }

Panel panel_from_records(const std::string& title, const std::vector<MetricsRecord>& records,
                         const std::vector<std::string>& columns) {
  Panel p;
  p.title = title;
  for (const auto& c : columns) {
    Series s;
    s.name = c;
    for (const auto& r : records) {
      s.x.push_back(static_cast<double>(r.step));
      s.y.push_back(r.column(c));
    }
    p.series.push_back(std::move(s));
  }
  return p;
}

void emit_plot_svg(const std::filesystem::path& csv_path, const std::vector<std::string>& columns,
                   const std::filesystem::path& out_path) {
  const auto records = read_metrics_csv(csv_path);
  if (records.empty()) throw DataError(csv_path.string() + ": no rows to plot");
  if (columns.empty()) throw DataError("plot: no columns requested");
  for (const auto& c : columns) {
    if (std::find(kMetricsColumns.begin(), kMetricsColumns.end(), c) == kMetricsColumns.end())
      throw DataError("plot: unknown column " + c);
  }
  write_text_file(out_path, render_svg(panel_from_records(csv_path.stem().string(), records, columns)));
}

// ---------------------------------------------------------------------------
// PGM

std::uint8_t quantize_pixel(double value, std::size_t* clamped) {
  double v = value;
  if (!(v >= 0.0 && v <= 1.0)) {
    if (clamped) ++*clamped;
    v = std::isnan(v) ? 0.0 : std::clamp(v, 0.0, 1.0);
  }
  return static_cast<std::uint8_t>(std::floor(v * 255.0 + 0.5));
}

std::string encode_pgm(const GrayImage& image) {
  if (image.pixels.size() != image.width * image.height) throw DataError("pgm: pixel count disagrees with size");
  std::string out = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(image.pixels.data()), image.pixels.size());
  return out;
}

GrayImage decode_pgm(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (!in || magic != "P5") throw DataError("pgm: expected a binary P5 header");
  if (maxval != 255) throw DataError("pgm: only 8-bit images are supported");
  in.get();  // single whitespace after maxval
  const auto start = static_cast<std::size_t>(in.tellg());
  if (bytes.size() < start + w * h) throw DataError("pgm: truncated pixel data");
  GrayImage img;
  img.width = w;
  img.height = h;
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                    bytes.begin() + static_cast<std::ptrdiff_t>(start + w * h));
  return img;
}

GrayImage read_pgm(const std::filesystem::path& path) {
  try {
    return decode_pgm(read_text_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

PgmReport write_pgm(const Tensor& images, const std::filesystem::path& dir, const std::string& prefix) {
  if (images.rank() != 4 || images.dim(1) != 1)
    throw ShapeError("write_pgm: expected [batch, 1, h, w], got " + to_string(images.shape()));
  const std::size_t b = images.dim(0), h = images.dim(2), w = images.dim(3);
  PgmReport report;
  std::filesystem::create_directories(dir);
  const std::size_t digits = std::max<std::size_t>(3, std::to_string(b).size());
  for (std::size_t i = 0; i < b; ++i) {
    GrayImage img;
    img.width = w;
    img.height = h;
    img.pixels.resize(w * h);
    for (std::size_t k = 0; k < w * h; ++k) img.pixels[k] = quantize_pixel(images[i * w * h + k], &report.clamped);
    std::string idx = std::to_string(i);
    idx.insert(0, digits - idx.size(), '0');
    const auto path = dir / (prefix + "_" + idx + ".pgm");
    write_text_file(path, encode_pgm(img));
    report.files.push_back(path);
  }
  return report;
}

void write_text_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace dsd::io
