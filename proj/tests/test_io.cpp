#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <regex>

#include "dsd/checkpoint.hpp"
#include "dsd/config.hpp"
#include "dsd/data.hpp"
#include "dsd/error.hpp"
#include "dsd/io.hpp"
#include "dsd/random.hpp"

using namespace dsd;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dsd_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

io::Checkpoint sample_checkpoint() {
  auto rng = keyed_rng({1});
  io::Checkpoint c;
  c.step = 1234;
  c.tensors.emplace_back("model/a", Tensor::randn({3, 4}, rng));
  c.tensors.emplace_back("ema/b", Tensor::randn({5}, rng));
  c.tensors.emplace_back("scalar", Tensor::scalar(-0.0));
  return c;
}

MetricsRecord record(std::size_t step, double seed) {
  MetricsRecord r;
  r.step = step;
  r.erank_z1 = seed + 1.0 / 3.0;
  r.erank_z2 = seed * 1e-300;
  r.erank_pred = std::nextafter(2.0, 3.0);
  r.l_rec = 0.1 + seed;
  r.l_main = 1e17 * seed;
  r.l_velo = -seed;
  r.l_cls = std::acos(-1.0);
  r.grad_norm = 3.0;
  r.wall_ms = 0.0;
  return r;
}

std::size_t count(const std::string& s, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = s.find(needle); p != std::string::npos; p = s.find(needle, p + 1)) ++n;
  return n;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto c = sample_checkpoint();
  const auto bytes = io::encode_checkpoint(c);
  const auto back = io::decode_checkpoint(bytes);
  EXPECT_EQ(back.step, 1234u);
  ASSERT_EQ(back.tensors.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.tensors[i].first, c.tensors[i].first);
    EXPECT_TRUE(bitwise_equal(back.tensors[i].second, c.tensors[i].second));
  }
  EXPECT_TRUE(std::signbit(back.find("scalar")->item()));
  EXPECT_EQ(io::encode_checkpoint(back), bytes);
  EXPECT_TRUE(back.has_prefix("ema/"));
  EXPECT_FALSE(back.has_prefix("adam"));
}

TEST(Checkpoint, HeaderLayout) {
  const auto bytes = io::encode_checkpoint(sample_checkpoint());
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "DSD1");
  EXPECT_EQ(bytes[4], 1);  // version, little-endian u32
  EXPECT_EQ(bytes[8], 1);  // little-endian flag
}

TEST(Checkpoint, CorruptionDiagnostics) {
  const auto good = io::encode_checkpoint(sample_checkpoint());
  auto expect_error = [](std::vector<unsigned char> b, const std::string& needle) {
    try {
      (void)io::decode_checkpoint(b);
      ADD_FAILURE() << "expected failure containing " << needle;
    } catch (const DataError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  auto b = good;
  b[0] = 'X';
  expect_error(b, "magic");
  b = good;
  b[4] = 9;
  expect_error(b, "version");
  b = good;
  b[b.size() - 10] ^= 0x01;
  expect_error(b, "checksum");
  b = good;
  b.resize(b.size() / 2);
  expect_error(b, "truncated");
}

TEST(Checkpoint, FilesAndLatents) {
  const fs::path d = scratch("ckpt");
  io::write_checkpoint(d / "a.dsd", sample_checkpoint());
  io::write_checkpoint(d / "b.dsd", io::read_checkpoint(d / "a.dsd"));
  EXPECT_EQ(io::read_text_file(d / "a.dsd"), io::read_text_file(d / "b.dsd"));
  auto rng = keyed_rng({2});
  const Tensor z = Tensor::randn({2, 4, 3}, rng);
  io::write_latents(d / "z.dsd", z);
  EXPECT_TRUE(bitwise_equal(io::read_latents(d / "z.dsd"), z));
  EXPECT_THROW(io::read_latents(d / "a.dsd"), DataError);
  EXPECT_THROW(io::read_checkpoint(d / "missing.dsd"), IoError);
}

TEST(MetricsCsv, RoundTripExact) {
  std::vector<MetricsRecord> recs{record(1, 0.25), record(10, 7.0), record(20, 1e-5)};
  const fs::path p = scratch("csv") / "m.csv";
  io::write_metrics_csv(p, recs);
  const auto back = io::read_metrics_csv(p);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i)
    for (auto name : kMetricsColumns) EXPECT_EQ(back[i].column(name), recs[i].column(name)) << name;
  EXPECT_EQ(io::metrics_header(), "step,erank_z1,erank_z2,erank_pred,l_rec,l_main,l_velo,l_cls,grad_norm,wall_ms");
}

TEST(MetricsCsv, Validation) {
  EXPECT_TRUE(io::parse_metrics_csv(io::metrics_header() + "\n").empty());
  EXPECT_THROW(io::parse_metrics_csv("step,foo\n"), DataError);
  EXPECT_THROW(io::parse_metrics_csv(""), DataError);
  try {
    (void)io::parse_metrics_csv(io::metrics_header() + "\n" + io::format_metrics_row(record(1, 1.0)) +
                                "\n1,2,x,4,5,6,7,8,9,10\n");
    ADD_FAILURE();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
  EXPECT_THROW(io::parse_metrics_csv(io::metrics_header() + "\n1,2,3\n"), DataError);
}

TEST(MetricsCsv, WriterAppends) {
  const fs::path p = scratch("writer") / "m.csv";
  {
    io::MetricsWriter w(p);
    w.append(record(1, 0.5));
    w.append(record(2, 0.5));
  }
  EXPECT_EQ(io::read_metrics_csv(p).size(), 2u);
}

TEST(Svg, PolylinesLegendAndDeterminism) {
  std::vector<MetricsRecord> recs;
  for (std::size_t i = 1; i <= 5; ++i) {
    auto r = record(i, 0.0);
    r.erank_z1 = static_cast<double>(i);
    r.l_rec = 1.0 / static_cast<double>(i);
    recs.push_back(r);
  }
  const fs::path d = scratch("svg");
  io::write_metrics_csv(d / "m.csv", recs);
  io::emit_plot_svg(d / "m.csv", {"erank_z1", "l_rec"}, d / "a.svg");
  io::emit_plot_svg(d / "m.csv", {"erank_z1", "l_rec"}, d / "b.svg");
  const std::string svg = io::read_text_file(d / "a.svg");
  EXPECT_EQ(svg, io::read_text_file(d / "b.svg"));
  EXPECT_EQ(count(svg, "<polyline"), 2u);
  EXPECT_NE(svg.find("erank_z1"), std::string::npos);
  EXPECT_NE(svg.find("l_rec"), std::string::npos);
  EXPECT_THROW(io::emit_plot_svg(d / "m.csv", {"bogus"}, d / "c.svg"), DataError);
  io::write_metrics_csv(d / "empty.csv", {});
  EXPECT_THROW(io::emit_plot_svg(d / "empty.csv", {"l_rec"}, d / "c.svg"), DataError);
}

TEST(Svg, MultiPanel) {
  io::Panel a{"a", {{"s", {0, 1}, {0, 1}}}}, b{"b", {{"s", {0, 1}, {1, 0}}}};
  const std::string svg = io::render_svg({a, b, a, b}, 3);
  EXPECT_EQ(count(svg, "<polyline"), 4u);
}

TEST(Pgm, QuantizeAndFormat) {
  EXPECT_EQ(io::quantize_pixel(0.5), 128);
  EXPECT_EQ(io::quantize_pixel(0.0), 0);
  EXPECT_EQ(io::quantize_pixel(1.0), 255);
  std::size_t clamped = 0;
  EXPECT_EQ(io::quantize_pixel(1.7, &clamped), 255);
  EXPECT_EQ(io::quantize_pixel(-0.2, &clamped), 0);
  EXPECT_EQ(clamped, 2u);
  const fs::path d = scratch("pgm");
  const auto rep = io::write_pgm(Tensor::full({2, 1, 32, 32}, 0.5), d, "img");
  ASSERT_EQ(rep.files.size(), 2u);
  const std::string bytes = io::read_text_file(rep.files[0]);
  const std::string header = "P5\n32 32\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 1024);
  EXPECT_EQ(bytes.substr(0, header.size()), header);
  for (std::size_t i = header.size(); i < bytes.size(); ++i) ASSERT_EQ(static_cast<unsigned char>(bytes[i]), 128);
}

TEST(Pgm, RoundTrip) {
  auto rng = keyed_rng({3});
  const Tensor img = Tensor::uniform({1, 1, 5, 7}, rng, 0.0, 1.0);
  const fs::path d = scratch("pgm_rt");
  const auto rep = io::write_pgm(img, d);
  const auto back = io::read_pgm(rep.files[0]);
  EXPECT_EQ(back.width, 7u);
  EXPECT_EQ(back.height, 5u);
  for (std::size_t i = 0; i < 35; ++i) EXPECT_EQ(back.pixels[i], io::quantize_pixel(img[i]));
  EXPECT_THROW(io::decode_pgm("P2\n1 1\n255\n0"), DataError);
}

TEST(Idx, RoundTripAndErrors) {
  const fs::path d = scratch("idx");
  const auto ds = data::synth_dataset(3, 4, 28, 5);
  data::write_idx(ds, d / "img.idx", d / "lab.idx");
  const auto back = data::load_idx(d / "img.idx", d / "lab.idx");
  EXPECT_EQ(back.size(), 12u);
  EXPECT_EQ(back.image_size(), 28u);
  EXPECT_EQ(back.labels, ds.labels);
  for (std::size_t i = 0; i < back.images.numel(); ++i)
    ASSERT_EQ(io::quantize_pixel(back.images[i]), io::quantize_pixel(ds.images[i]));
  const auto small = data::load_idx(d / "img.idx", d / "lab.idx", 16);
  EXPECT_EQ(small.image_size(), 16u);

  std::string img = io::read_text_file(d / "img.idx");
  std::string bad = img;
  bad[3] = 0x01;
  io::write_text_file(d / "bad.idx", bad);
  EXPECT_THROW(data::load_idx(d / "bad.idx", d / "lab.idx"), DataError);
  io::write_text_file(d / "short.idx", img.substr(0, img.size() - 5));
  EXPECT_THROW(data::load_idx(d / "short.idx", d / "lab.idx"), DataError);
  const auto fewer = data::synth_dataset(3, 3, 28, 5);
  data::write_idx(fewer, d / "img9.idx", d / "lab9.idx");
  try {
    (void)data::load_idx(d / "img.idx", d / "lab9.idx");
    ADD_FAILURE();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("mismatch"), std::string::npos);
  }
}

TEST(Config, RenderParseRoundTrip) {
  io::RunConfig c;
  c.experiment.variant = train::CaseVariant::kEmaTarget;
  c.experiment.model.hidden_dim = 48;
  c.experiment.learning_rate = 3.3e-4;
  c.experiment.augment.mask_ratio = 0.6;
  c.sample.guidance = 2.5;
  c.sample.label = 4;
  c.io.out_dir = "somewhere";
  const std::string text = io::render_config(c);
  EXPECT_EQ(io::render_config(io::parse_config(text)), text);
  const auto back = io::parse_config(text);
  EXPECT_EQ(back.experiment.model.hidden_dim, 48u);
  EXPECT_EQ(back.experiment.learning_rate, 3.3e-4);
  EXPECT_EQ(back.sample.label, std::optional<std::size_t>(4));
  EXPECT_EQ(back.experiment.variant, train::CaseVariant::kEmaTarget);
}

TEST(Config, EveryKeyHasADefault) {
  const auto keys = io::config_keys();
  const auto text = io::render_config({});
  for (const auto& k : keys) {
    const auto dot = k.find('.');
    EXPECT_NE(text.find("\n" + k.substr(dot + 1) + " = "), std::string::npos) << k;
  }
  EXPECT_GT(keys.size(), 30u);
}

TEST(Config, Errors) {
  try {
    (void)io::parse_config("[model]\nhidden = 3\n");
    ADD_FAILURE();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("hidden"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(io::parse_config("[nope]\n"), ConfigError);
  EXPECT_THROW(io::parse_config("[model]\nhidden_dim = -4\n"), ConfigError);
  EXPECT_THROW(io::parse_config("hidden_dim = 4\n"), ConfigError);
  EXPECT_THROW(io::parse_config("[train]\ncase = sideways\n"), ConfigError);
  EXPECT_NO_THROW(io::parse_config("# comment\n\n[model]\nhidden_dim = 16  # trailing\n"));
  io::RunConfig c;
  io::set_config_value(c, "train", "steps", "77");
  EXPECT_EQ(c.experiment.steps, 77u);
  EXPECT_THROW(io::set_config_value(c, "train", "stepz", "1"), ConfigError);
}
