// Acceptance battery: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//
//   acceptance [--out DIR] [criterion numbers...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dsd/checkpoint.hpp"
#include "dsd/data.hpp"
#include "dsd/error.hpp"
#include "dsd/flow.hpp"
#include "dsd/io.hpp"
#include "dsd/random.hpp"
#include "dsd/sampler.hpp"
#include "dsd/trainer.hpp"
#include "dsd/verify.hpp"

using namespace dsd;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Collapse thresholds at the desk budget.
constexpr double kVanillaMaxErank = 2.0;
constexpr double kTransformedMinErank = 4.0;
constexpr double kMinRecDrop = 0.30;
constexpr double kMinErankRatio = 2.0;
constexpr double kMinGapFraction = 0.9;
constexpr double kCollapseBudgetSeconds = 20 * 60;
constexpr double kGradientBudgetSeconds = 60;
constexpr double kMinAccuracy = 0.8;

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    pass = pass && ok;
    notes.push_back((ok ? "" : "!") + what);
  }
};

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void log(const std::string& s) {
  std::fprintf(stderr, "  %s\n", s.c_str());
  std::fflush(stderr);
}

const verify::Report& property_report() {
  static const verify::Report report = verify::run_property_suite();
  return report;
}

void require_checks(Outcome& o, const std::vector<std::string>& prefixes) {
  std::size_t seen = 0;
  for (const auto& c : property_report().checks) {
    const bool match = std::any_of(prefixes.begin(), prefixes.end(),
                                   [&](const std::string& p) { return c.name.rfind(p, 0) == 0; });
    if (!match) continue;
    ++seen;
    if (!c.passed) o.check(false, c.name + ": " + c.detail);
  }
  o.check(seen > 0, std::to_string(seen) + " checks");
}

Outcome gradients() {
  Outcome o;
  const auto t0 = Clock::now();
  require_checks(o, {"gradient."});
  for (const auto& c : property_report().checks)
    if (c.name == "gradient.full-model") o.notes.push_back("full model " + c.detail);
  // The whole property suite runs on first use, so this times all of it.
  const double s = seconds_since(t0);
  o.check(s < kGradientBudgetSeconds, "runtime " + fmt(s, 3) + " s");
  return o;
}

Outcome equivalence() {
  Outcome o;
  require_checks(o, {"flow.equivalence"});
  return o;
}

Outcome bias_variance() {
  Outcome o;
  require_checks(o, {"flow.bias-variance", "flow.two-point-mean"});
  return o;
}

Outcome effective_rank() {
  Outcome o;
  require_checks(o, {"rank."});
  return o;
}

Outcome isolation() {
  Outcome o;
  require_checks(o, {"isolation."});
  return o;
}

train::ExperimentConfig desk(train::CaseVariant v) {
  train::ExperimentConfig c;
  c.variant = v;
  c.steps = 2000;
  c.batch_size = 64;
  c.model.latent_dim = 8;
  c.seed = 0;
  return c;
}

Outcome collapse(const fs::path& out) {
  Outcome o;
  const auto t0 = Clock::now();
  std::map<train::CaseVariant, train::CaseSummary> runs;
  for (auto v : {train::CaseVariant::kVanillaJoint, train::CaseVariant::kDecoupled, train::CaseVariant::kTransformed,
                 train::CaseVariant::kEmaTarget, train::CaseVariant::kAugmented}) {
    const auto t1 = Clock::now();
    train::RunOptions opts;
    opts.out_dir = out / "collapse" / std::string(train::variant_name(v));
    fs::create_directories(opts.out_dir);
    runs[v] = train::run_case(desk(v), opts);
    const auto& r = runs[v].records;
    log(std::string(train::variant_name(v)) + ": erank_z1 " + fmt(runs[v].final_erank_z1) + " early_rec " +
        fmt(train::early_l_rec(r)) + " late_rec " + fmt(train::late_l_rec(r)) + " gap " +
        fmt(train::rank_gap_fraction(r)) + " rough " + fmt(train::loss_roughness(r)) + " (" +
        fmt(seconds_since(t1), 3) + " s)");
  }
  const auto& vanilla = runs[train::CaseVariant::kVanillaJoint];
  const auto& transformed = runs[train::CaseVariant::kTransformed];
  const auto& ema = runs[train::CaseVariant::kEmaTarget];
  const auto& augmented = runs[train::CaseVariant::kAugmented];

  o.check(vanilla.final_erank_z1 < kVanillaMaxErank, "(a) vanilla erank " + fmt(vanilla.final_erank_z1));
  const double early = train::early_l_rec(transformed.records), late = train::late_l_rec(transformed.records);
  const double drop = 1.0 - late / early;
  o.check(transformed.final_erank_z1 > kTransformedMinErank && drop >= kMinRecDrop,
          "(b) transformed erank " + fmt(transformed.final_erank_z1) + ", L_rec drop " + fmt(100 * drop, 3) + "%");
  const double ratio = transformed.final_erank_z1 / vanilla.final_erank_z1;
  o.check(ratio >= kMinErankRatio, "(c) erank ratio " + fmt(ratio));
  const double gap = train::rank_gap_fraction(augmented.records);
  o.check(gap >= kMinGapFraction, "(d) augmented rank-gap fraction " + fmt(gap));
  const double re = train::loss_roughness(ema.records), rt = train::loss_roughness(transformed.records);
  o.check(re < rt, "(e) roughness ema " + fmt(re) + " vs transformed " + fmt(rt));
  const double s = seconds_since(t0);
  o.check(s <= kCollapseBudgetSeconds, "runtime " + fmt(s / 60, 3) + " min");
  return o;
}

Tensor one_point_field(const Tensor& c, const Tensor& z, double t) {
  std::vector<double> v(z.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (c[i % c.numel()] - z[i]) / (1.0 - t);
  return Tensor(z.shape(), std::move(v));
}

Outcome sampler() {
  Outcome o;
  auto rng = keyed_rng({701});
  double worst = 0.0;
  for (std::size_t n = 1; n <= 300; n += (n < 20 ? 1 : 37)) {
    const Tensor c = Tensor::randn({4, 8}, rng), z0 = Tensor::randn({4, 8}, rng);
    const Tensor out = sample::euler_integrate(z0, n, [&](const Tensor& z, double t) { return one_point_field(c, z, t); });
    worst = std::max(worst, max_abs_diff(out, c));
  }
  o.check(worst < 1e-12, "one-point landing error " + fmt(worst));

  const sample::VelocityField v = [](const Tensor& z, double t) {
    std::vector<double> out(z.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::cos(2.0 * z[i] - t) + 0.3 * z[i] * t;
    return Tensor(z.shape(), std::move(out));
  };
  const sample::CleanField clean = [&](const Tensor& z, double t) { return flow::clean_from_velocity(v(z, t), z, t); };
  double tied = 0.0;
  for (std::size_t n : {1u, 10u, 100u}) {
    const Tensor z0 = Tensor::randn({8, 8}, rng);
    tied = std::max(tied, max_abs_diff(sample::euler_integrate(z0, n, v),
                                       sample::euler_integrate(z0, n, sample::recovered_velocity(clean))));
  }
  o.check(tied < 1e-10, "tied heads " + fmt(tied));

  net::ModelConfig mc;
  mc.image_size = 8;
  mc.trunk_layers = 1;
  mc.hidden_dim = 8;
  mc.heads = 2;
  mc.latent_dim = 4;
  mc.classes = 3;
  mc.align_layer = 0;
  net::UnifiedBackbone model(mc, 702);
  auto prng = keyed_rng({703});
  for (auto& p : model.params())
    if (p.name().find(".mod.") != std::string::npos) p.set_value(Tensor::randn(p.value().shape(), prng, 0.3));
  sample::SampleConfig sc;
  sc.steps = 16;
  sc.batch = 3;
  sc.label = 1;
  sc.guidance = 1.0;
  const auto guided = sample::euler_sample(model, sc);
  const sample::VelocityField cond = [&](const Tensor& z, double t) {
    const std::vector<double> ts(z.dim(0), t);
    const std::vector<std::size_t> ys(z.dim(0), 1);
    return model.predict_velocity(model.diffuse_forward(z, ts, ys)).detached();
  };
  o.check(bitwise_equal(guided.latents, sample::euler_integrate(guided.noise, sc.steps, cond)),
          "unit guidance bitwise conditional");
  return o;
}

train::ExperimentConfig determinism_config(train::CaseVariant v) {
  train::ExperimentConfig c = desk(v);
  c.steps = 60;
  c.batch_size = 16;
  c.data.train_per_class = 20;
  return c;
}

Outcome determinism(const fs::path& out) {
  Outcome o;
  for (auto v : {train::CaseVariant::kTransformed, train::CaseVariant::kFullDSD}) {
    const std::string name(train::variant_name(v));
    const fs::path root = out / "determinism" / name;
    fs::remove_all(root);
    const auto cfg = determinism_config(v);
    train::RunOptions a, b;
    a.out_dir = root / "a";
    b.out_dir = root / "b";
    train::run_case(cfg, a);
    train::run_case(cfg, b);
    const std::string csv = io::read_text_file(a.out_dir / "metrics.csv");
    o.check(csv == io::read_text_file(b.out_dir / "metrics.csv"), name + " csv identical");
    o.check(io::read_text_file(a.out_dir / "checkpoint.dsd") == io::read_text_file(b.out_dir / "checkpoint.dsd"),
            name + " checkpoint identical");

    auto half = cfg;
    half.steps = cfg.steps / 2;
    train::RunOptions r;
    r.out_dir = root / "resumed";
    train::run_case(half, r);
    r.resume = io::read_checkpoint(r.out_dir / "checkpoint.dsd");
    train::run_case(cfg, r);
    o.check(csv == io::read_text_file(r.out_dir / "metrics.csv"), name + " resume stream identical");
  }
  return o;
}

Outcome end_to_end(const fs::path& out) {
  Outcome o;
  auto cfg = desk(train::CaseVariant::kFullDSD);
  cfg.steps = 3000;
  const fs::path root = out / "end_to_end";
  fs::remove_all(root);
  train::Trainer trainer(cfg, train::load_training_data(cfg));
  bool finite = true;
  try {
    while (trainer.steps_done() < cfg.steps) {
      const auto rec = trainer.step();
      for (auto col : kMetricsColumns) finite = finite && std::isfinite(rec.column(col));
      if (rec.step % 500 == 0)
        log("step " + std::to_string(rec.step) + " erank_z1 " + fmt(rec.erank_z1) + " rec " + fmt(rec.l_rec) +
            " cls " + fmt(rec.l_cls));
    }
  } catch (const NumericError& e) {
    finite = false;
    o.notes.push_back(e.what());
  }
  o.check(finite, "finite through step " + std::to_string(trainer.steps_done()));
  if (!finite) return o;

  const auto test = train::load_test_data(cfg);
  const double acc = train::classification_accuracy(trainer.model(), test);
  o.check(acc > kMinAccuracy, "held-out accuracy " + fmt(acc, 3));

  const auto& train_data = trainer.dataset();
  const std::size_t classes = cfg.model.classes;
  std::vector<Tensor> data_means, sample_means;
  std::size_t files = 0;
  for (std::size_t k = 0; k < classes; ++k) {
    data_means.push_back(train_data.class_mean(k));
    sample::SampleConfig sc;
    sc.label = k;
    sc.batch = 16;
    sc.seed = 900 + k;
    const auto res = sample::euler_sample(trainer.model(), sc);
    files += io::write_pgm(res.images, root / "samples", "class" + std::to_string(k)).files.size();
    Tensor m = mean(res.images, 0);
    sample_means.push_back(reshape(m, data_means.back().shape()));
  }
  std::size_t matched = 0;
  std::ostringstream misses;
  for (std::size_t k = 0; k < classes; ++k) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t j = 0; j < classes; ++j) {
      const Tensor diff = sub(sample_means[k], data_means[j]);
      const double d = sum(mul(diff, diff)).item();
      if (d < best_d) best_d = d, best = j;
    }
    if (best == k) ++matched;
    else misses << " " << k << "->" << best;
  }
  o.check(matched == classes, std::to_string(matched) + "/" + std::to_string(classes) + " classes nearest own mean" +
                                  misses.str());
  o.check(files == classes * 16, std::to_string(files) + " PGM files in " + (root / "samples").string());
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  fs::path out = fs::temp_directory_path() / "dsd_acceptance";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--out" && i + 1 < argc) out = argv[++i];
    else only.insert(std::atoi(a.c_str()));
  }
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient correctness", gradients},
      {"loss transformation identity", equivalence},
      {"bias-variance decomposition", bias_variance},
      {"effective rank", effective_rank},
      {"stop-gradient and head isolation", isolation},
      {"collapse phenomenology", [&] { return collapse(out); }},
      {"sampler exactness", sampler},
      {"operational determinism", [&] { return determinism(out); }},
      {"end-to-end smoke", [&] { return end_to_end(out); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(n)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    std::string notes;
    for (const auto& s : o.notes) notes += (notes.empty() ? "" : "; ") + s;
    std::printf("%s %d %s (%.1f s): %s\n", o.pass ? "PASS" : "FAIL", n, criteria[i].first.c_str(), seconds_since(t0),
                notes.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failed;
  }
  return failed ? 1 : 0;
}
