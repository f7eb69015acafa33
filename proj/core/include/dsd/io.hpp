#pragma once

// Metrics CSV, SVG trajectory plots and PGM image files.

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "dsd/metrics.hpp"
#include "dsd/tensor.hpp"

namespace dsd::io {

// Header line, without the newline.
std::string metrics_header();
// Values at 17 significant digits.
std::string format_metrics_row(const MetricsRecord& record);

// Append-only writer: the header is written on open (truncating).
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path);
  ~MetricsWriter();
  MetricsWriter(const MetricsWriter&) = delete;
  MetricsWriter& operator=(const MetricsWriter&) = delete;
  void append(const MetricsRecord& record);
  void flush();

 private:
  std::filesystem::path path_;
  std::FILE* file_ = nullptr;
};

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRecord>& records);
// Throws DataError on a header mismatch or a malformed row (with its line number).
std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path);
std::vector<MetricsRecord> parse_metrics_csv(const std::string& text);

struct Series {
  std::string name;
  std::vector<double> x, y;
};

struct Panel {
  std::string title;
  std::vector<Series> series;
};

// One panel: axes, tick labels, a polyline and legend entry per series;
// the y range is the data range padded by 5% each side.
std::string render_svg(const Panel& panel);
// Equal-size panels in a grid, `per_row` to a row (0: a single row).
std::string render_svg(const std::vector<Panel>& panels, std::size_t per_row = 0);
Panel panel_from_records(const std::string& title, const std::vector<MetricsRecord>& records,
                         const std::vector<std::string>& columns);

// Throws DataError for an empty CSV or an unknown column.
void emit_plot_svg(const std::filesystem::path& csv_path, const std::vector<std::string>& columns,
                   const std::filesystem::path& out_path);

struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;
};

// round-half-up of 255 * clamp(x, 0, 1); `clamped` counts out-of-range inputs.
std::uint8_t quantize_pixel(double value, std::size_t* clamped = nullptr);
std::string encode_pgm(const GrayImage& image);
GrayImage decode_pgm(const std::string& bytes);
GrayImage read_pgm(const std::filesystem::path& path);

struct PgmReport {
  std::vector<std::filesystem::path> files;
  std::size_t clamped = 0;
};

// images [batch, 1, h, w] -> <dir>/<prefix>_<index>.pgm (index zero-padded).
PgmReport write_pgm(const Tensor& images, const std::filesystem::path& dir, const std::string& prefix = "sample");

// Writes `content` to `path`, creating parent directories; IoError on failure.
void write_text_file(const std::filesystem::path& path, const std::string& content);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace dsd::io
