#include "dsd/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "dsd/error.hpp"
#include "dsd/flow.hpp"
#include "dsd/gradcheck.hpp"
#include "dsd/random.hpp"
#include "dsd/rank.hpp"
#include "dsd/trainer.hpp"

namespace dsd::verify {

std::size_t Report::passed() const {
  return static_cast<std::size_t>(std::count_if(checks.begin(), checks.end(), [](const auto& c) { return c.passed; }));
}
std::size_t Report::failed() const { return checks.size() - passed(); }

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

Tensor random_tensor(Shape shape, std::mt19937_64& rng) { return Tensor::randn(std::move(shape), rng); }

// Operands and attributes exercising one op on small random inputs.
struct OpCase {
  std::vector<Tensor> inputs;
  OpAttributes attrs;
  // Reduces a non-scalar op output to a scalar with a fixed random weighting.
  bool weighted = true;
};

OpCase op_case(OpKind kind, std::mt19937_64& rng) {
  OpCase c;
  switch (kind) {
    case OpKind::kMatmul: c.inputs = {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)}; break;
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul: c.inputs = {random_tensor({3, 4}, rng), random_tensor({4}, rng)}; break;
    case OpKind::kScalarMul:
      c.inputs = {random_tensor({3, 4}, rng)};
      c.attrs.scalar = -1.7;
      break;
    case OpKind::kMean:
    case OpKind::kSum:
      c.inputs = {random_tensor({3, 4}, rng)};
      c.attrs.axis = 1;
      break;
    case OpKind::kReshape:
      c.inputs = {random_tensor({3, 4}, rng)};
      c.attrs.shape = {2, 6};
      break;
    case OpKind::kTranspose:
      c.inputs = {random_tensor({2, 3, 4}, rng)};
      c.attrs.perm = {2, 0, 1};
      break;
    case OpKind::kConcat:
      c.inputs = {random_tensor({3, 4}, rng), random_tensor({3, 2}, rng)};
      c.attrs.axis = 1;
      break;
    case OpKind::kSlice:
      c.inputs = {random_tensor({3, 4}, rng)};
      c.attrs.axis = 1;
      c.attrs.begin = 1;
      c.attrs.end = 3;
      break;
    case OpKind::kGelu:
    case OpKind::kLayerNorm:
    case OpKind::kSoftmax: c.inputs = {random_tensor({3, 4}, rng)}; break;
    case OpKind::kSquaredError:
      c.inputs = {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)};
      c.weighted = false;
      break;
    case OpKind::kCrossEntropyWithLogits:
      c.inputs = {random_tensor({3, 4}, rng)};
      c.attrs.indices = {0, 3, 1};
      c.weighted = false;
      break;
    case OpKind::kCosineSimilarity: c.inputs = {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)}; break;
    case OpKind::kEmbeddingLookup:
      c.inputs = {random_tensor({3, 4}, rng)};
      c.attrs.indices = {2, 0, 2, 1};
      break;
    case OpKind::kSinusoidalTimeEmbed:
      c.inputs = {Tensor::uniform({3}, rng, 0.0, 1.0)};
      c.attrs.dim = 4;
      break;
  }
  return c;
}

}  // namespace

double op_gradient_error(OpKind kind, std::uint64_t seed) {
  auto rng = keyed_rng({seed, static_cast<std::uint64_t>(kind)});
  OpCase c = op_case(kind, rng);
  const Tensor probe = apply(kind, c.inputs, c.attrs);
  const Tensor weights = Tensor::randn(probe.shape(), rng);
  auto f = [&](std::span<const Tensor> in) {
    const Tensor y = apply(kind, in, c.attrs);
    return c.weighted ? sum(mul(y, weights)) : sum(y);
  };
  return finite_diff_check(f, c.inputs).max_relative_error;
}

namespace {

void add(Report& r, const std::function<void(const CheckResult&)>& progress, std::string name, bool ok,
         std::string detail) {
  r.checks.push_back({std::move(name), ok, std::move(detail)});
  if (progress) progress(r.checks.back());
}

}  // namespace

Report run_property_suite(const std::function<void(const CheckResult&)>& progress) {
  Report report;

  // Op-level gradients.
  for (auto kind : all_op_kinds()) {
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 3; ++s) worst = std::max(worst, op_gradient_error(kind, s));
    add(report, progress, "gradient." + std::string(op_name(kind)), worst < 1e-6, "max relative error " + num(worst));
  }

  // Minimal full model.
  {
    train::ExperimentConfig cfg;
    cfg.variant = train::CaseVariant::kFullDSD;
    cfg.model.image_size = 8;
    cfg.model.patch_size = 4;
    cfg.model.trunk_layers = 1;
    cfg.model.hidden_dim = 8;
    cfg.model.heads = 2;
    cfg.model.latent_dim = 4;
    cfg.model.registers = 2;
    cfg.model.classes = 3;
    cfg.model.time_embed_dim = 4;
    cfg.model.mlp_ratio = 2;
    cfg.model.teacher_dim = 3;
    cfg.model.align_layer = 0;
    cfg.augment.mask_patch = 4;
    cfg.data.classes = 3;
    cfg.batch_size = 2;
    net::UnifiedBackbone model(cfg.model, 11);
    // Move the zero-initialised modulation weights off zero.
    auto prng = keyed_rng({12});
    for (auto& p : model.params())
      if (p.name().find(".mod.") != std::string::npos)
        p.set_value(Tensor::randn(p.value().shape(), prng, 0.3));
    net::TargetEncoder target(model, cfg.ema_decay);
    net::FrozenTeacher teacher(cfg.model, 13);
    const auto ds = data::synth_dataset(3, 1, 8, 5);
    const std::vector<std::size_t> idx{0, 2};
    const train::Batch batch{ds.gather(idx), ds.gather_labels(idx)};
    auto f = [&]() {
      auto rng = keyed_rng({99});
      return train::assemble_loss(cfg, batch, model, target, teacher, rng).total;
    };
    std::vector<Parameter*> params;
    for (auto& p : model.params()) params.push_back(&p);
    const auto res = finite_diff_check(f, params);
    add(report, progress, "gradient.full-model", res.max_relative_error < 1e-4,
        "max relative error " + num(res.max_relative_error) + " at " + params[res.worst_index]->name());
  }

  // Loss transformation identity.
  {
    auto rng = keyed_rng({21});
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
      const Tensor z = Tensor::randn({8}, rng), eps = Tensor::randn({8}, rng), vhat = Tensor::randn({8}, rng);
      worst = std::max(worst, flow::equivalence_check(vhat, z, eps, flow::sample_time(rng)));
    }
    add(report, progress, "flow.equivalence", worst < 1e-10, "max discrepancy " + num(worst));
  }

  // Bias-variance decomposition.
  {
    auto rng = keyed_rng({31});
    double worst = 0.0;
    bool minimizer = true;
    for (int i = 0; i < 100; ++i) {
      std::uniform_int_distribution<std::size_t> npts(1, 32), ndim(1, 8);
      const std::size_t n = npts(rng), d = ndim(rng);
      const Tensor data = Tensor::randn({n, d}, rng);
      const double t = flow::sample_time(rng);
      const Tensor zt = Tensor::randn({d}, rng), f = Tensor::randn({d}, rng);
      const auto bv = flow::bias_variance_check(f.data(), data, zt.data(), t);
      worst = std::max(worst, bv.discrepancy);
      const auto pm = flow::posterior_moments(data, zt.data(), t);
      minimizer = minimizer && flow::bias_variance_check(pm.mean, data, zt.data(), t).minimizer_is_mean;
    }
    add(report, progress, "flow.bias-variance", worst < 1e-10 && minimizer,
        "max discrepancy " + num(worst) + (minimizer ? "" : "; posterior mean not the minimizer"));
    const Tensor two({2, 1}, {1.0, -1.0});
    const double zt = 0.5, t = 0.5;
    const double m = flow::posterior_moments(two, std::vector<double>{zt}, t).mean[0];
    add(report, progress, "flow.two-point-mean", std::abs(m - std::tanh(1.0)) < 1e-9, "mean " + num(m));
  }

  // Effective rank battery.
  {
    const auto eye = [](std::size_t n) {
      std::vector<double> v(n * n, 0.0);
      for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
      return Tensor({n, n}, v);
    };
    const double e5 = rank::effective_rank(eye(5));
    add(report, progress, "rank.identity", std::abs(e5 - 5.0) < 1e-9, "erank " + num(e5));
    const double e1 = rank::effective_rank(Tensor({3, 2}, {1, 2, 2, 4, 3, 6}));
    add(report, progress, "rank.rank-one", std::abs(e1 - 1.0) < 1e-9, "erank " + num(e1));
    const std::vector<double> s31{3.0, 1.0};
    const double e31 = rank::effective_rank_of_spectrum(s31);
    add(report, progress, "rank.spectrum-3-1", std::abs(e31 - 1.754765) < 1e-6, "erank " + num(e31));
    auto rng = keyed_rng({41});
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
      const Tensor m = Tensor::randn({6, 4}, rng);
      const double base = rank::effective_rank(m);
      worst = std::max(worst, std::abs(rank::effective_rank(scalar_mul(m, 3.7)) - base));
      worst = std::max(worst, std::abs(rank::effective_rank(transpose(m, {1, 0})) - base));
      std::vector<std::size_t> rows(6), cols(4);
      std::iota(rows.begin(), rows.end(), 0);
      std::iota(cols.begin(), cols.end(), 0);
      std::shuffle(rows.begin(), rows.end(), rng);
      std::shuffle(cols.begin(), cols.end(), rng);
      std::vector<double> permuted(24);
      for (std::size_t r = 0; r < 6; ++r)
        for (std::size_t c = 0; c < 4; ++c) permuted[r * 4 + c] = m[rows[r] * 4 + cols[c]];
      worst = std::max(worst, std::abs(rank::effective_rank(Tensor({6, 4}, permuted)) - base));
    }
    add(report, progress, "rank.invariance", worst < 1e-9, "max deviation " + num(worst));
  }

  // Stop-gradient and head isolation.
  {
    auto rng = keyed_rng({51});
    const Tensor vhat0 = Tensor::randn({2, 4}, rng), z0 = Tensor::randn({2, 4}, rng), e0 = Tensor::randn({2, 4}, rng);
    Tape tape;
    TapeScope scope(tape);
    const Tensor vhat = tape.watch(vhat0), z = tape.watch(z0);
    const auto g = tape.backward(flow::loss_velocity_decoupled(vhat, z, e0));
    const Tensor gz = g.wrt(z);
    const bool zero = std::all_of(gz.data().begin(), gz.data().end(), [](double v) { return v == 0.0; });
    add(report, progress, "isolation.decoupled-target", zero, zero ? "exact zero" : "nonzero gradient");
  }
  {
    train::ExperimentConfig cfg;
    cfg.variant = train::CaseVariant::kFullDSD;
    cfg.model.image_size = 8;
    cfg.model.trunk_layers = 1;
    cfg.model.hidden_dim = 8;
    cfg.model.heads = 2;
    cfg.model.latent_dim = 4;
    cfg.model.align_layer = 0;
    cfg.model.classes = 3;
    cfg.data.classes = 3;
    net::UnifiedBackbone model(cfg.model, 3);
    net::TargetEncoder target(model, 0.99);
    net::FrozenTeacher teacher(cfg.model, 4);
    const auto ds = data::synth_dataset(3, 2, 8, 5);
    const std::vector<std::size_t> idx{0, 3, 5};
    const auto rep = train::check_wiring(cfg, model, target, teacher, {ds.gather(idx), ds.gather_labels(idx)});
    add(report, progress, "isolation.velocity-head", rep.velocity_isolated && rep.ok(),
        rep.ok() ? "exact zero outside velocity.*" : rep.violations.front());
  }
  return report;
}

}  // namespace dsd::verify
