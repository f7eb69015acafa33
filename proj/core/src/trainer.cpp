#include "dsd/trainer.hpp"


#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>

#include "dsd/error.hpp"
#include "dsd/flow.hpp"
#include "dsd/io.hpp"
#include "dsd/random.hpp"
#include "dsd/rank.hpp"

namespace dsd::train {

namespace {

struct VariantInfo {
  CaseVariant variant;
  std::string_view name;
};

constexpr VariantInfo kVariants[] = {
    {CaseVariant::kVanillaJoint, "vanilla"}, {CaseVariant::kDecoupled, "decoupled"},
    {CaseVariant::kTransformed, "transformed"}, {CaseVariant::kEmaTarget, "ema"},
    {CaseVariant::kAugmented, "augmented"}, {CaseVariant::kFullDSD, "full"},
};

// Salt separating the per-step stream from other uses of the run seed.
constexpr std::uint64_t kStepSalt = 0x53544550;  // "STEP"

}  // namespace

std::string_view variant_name(CaseVariant variant) {
  for (const auto& v : kVariants)
    if (v.variant == variant) return v.name;
  return "unknown";
}

CaseVariant parse_variant(std::string_view name) {
  for (const auto& v : kVariants)
    if (v.name == name) return v.variant;
  throw ConfigError("unknown case '" + std::string(name) +
                    "' (expected vanilla, decoupled, transformed, ema, augmented or full)");
}

const std::vector<CaseVariant>& all_variants() {
  static const std::vector<CaseVariant> all = [] {
    std::vector<CaseVariant> v;
    for (const auto& info : kVariants) v.push_back(info.variant);
    return v;
  }();
  return all;
}

Wiring wiring_of(CaseVariant variant) {
  Wiring w;
  switch (variant) {
    case CaseVariant::kVanillaJoint:
      w.velocity_objective = true;
      w.decoupled_target = false;
      break;
    case CaseVariant::kDecoupled:
      w.velocity_objective = true;
      break;
    case CaseVariant::kTransformed:
      break;
    case CaseVariant::kEmaTarget:
      w.ema_target = true;
      break;
    case CaseVariant::kAugmented:
      w.ema_target = true;
      w.augmented = true;
      break;
    case CaseVariant::kFullDSD:
      w.ema_target = true;
      w.augmented = true;
      w.full = true;
      w.noisy_reconstruction = true;
      break;
  }
  return w;
}

void ExperimentConfig::validate() const {
  model.validate();
  augment.validate();
  if (steps < 1) throw ConfigError("train: steps must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
  if (!(grad_clip_norm > 0.0)) throw ConfigError("train: grad_clip_norm must be > 0");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("train: ema_decay must lie in [0, 1)");
  if (!(label_dropout >= 0.0 && label_dropout <= 1.0)) throw ConfigError("train: label_dropout must lie in [0, 1]");
  if (metrics_every < 1) throw ConfigError("train: metrics_every must be >= 1");
  for (double l : {weights.dsd, weights.velo, weights.rec, weights.cls, weights.repsd, weights.align})
    if (!(l >= 0.0)) throw ConfigError("train: loss weights must be >= 0");
  if (data.source != "synthetic" && data.source != "idx")
    throw ConfigError("data: source must be synthetic or idx, got " + data.source);
  if (data.source == "synthetic" && data.classes != model.classes)
    throw ConfigError("data: classes must equal model classes");
  if (augment.mask_patch != model.patch_size) throw ConfigError("augment: mask_patch must equal model patch_size");
}

data::Dataset load_training_data(const ExperimentConfig& config) {
  const auto& d = config.data;
  if (d.source == "idx") return data::load_idx(d.train_images, d.train_labels, config.model.image_size);
  return data::synth_dataset(d.classes, d.train_per_class, config.model.image_size, d.seed, config.model.channels);
}

data::Dataset load_test_data(const ExperimentConfig& config) {
  const auto& d = config.data;
  if (d.source == "idx") return data::load_idx(d.test_images, d.test_labels, config.model.image_size);
  // A disjoint stream of the same generator.
  return data::synth_dataset(d.classes, d.test_per_class, config.model.image_size, d.seed ^ 0x7E57DA7AULL,
                             config.model.channels);
}

// ---------------------------------------------------------------------------

namespace {

Tensor tokens_only(const Tensor& layer, std::size_t tokens) { return slice(layer, 1, 0, tokens); }

}  // namespace

AssembledLoss assemble_loss(const ExperimentConfig& config, const Batch& batch, const net::UnifiedBackbone& model,
                            const net::TargetEncoder& target, const net::FrozenTeacher& teacher,
                            std::mt19937_64& rng) {
  const std::size_t b = batch.labels.size();
  if (b == 0 || batch.images.rank() != 4 || batch.images.dim(0) != b)
    throw Error(ErrorKind::kInvalidArgument, "assemble_loss: batch must be nonempty with one label per image");
  const Wiring w = wiring_of(config.variant);
  const auto& mc = model.config();
  const auto& lw = config.weights;

  const std::uint64_t augment_seed = rng();
  std::vector<double> t(b);
  for (auto& ti : t) ti = flow::sample_time(rng);
  Tensor eps = Tensor::randn({b, mc.tokens(), mc.latent_dim}, rng);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::size_t> cond_labels(batch.labels);
  for (auto& l : cond_labels)
    if (unit(rng) < config.label_dropout) l = mc.null_label();

  const Tensor& x = batch.images;
  const Tensor x_view = w.augmented ? aug::augment_batch(x, config.augment, augment_seed) : x;

  AssembledLoss out;
  net::TrunkTrace online_trace, target_trace;
  out.z1 = model.encode(x_view, &online_trace);
  if (w.ema_target) {
    out.z2 = target.encode(model, x, &target_trace);
  } else if (w.decoupled_target) {
    out.z2 = stop_gradient(out.z1);
  } else {
    out.z2 = out.z1;
  }
  out.t = t;
  out.eps = eps;
  out.z_t = flow::interpolate(out.z1, eps, t);

  const net::DiffusionFeatures f = model.diffuse_forward(out.z_t, t, cond_labels);
  const Tensor head = model.predict_clean(f);
  if (w.velocity_objective) {
    out.l_main = w.decoupled_target ? flow::loss_velocity_decoupled(head, out.z2, eps)
                                    : flow::loss_velocity(head, out.z2, eps);
    out.pred = add(head.detached(), eps);
  } else {
    out.l_main = flow::loss_clean(head, out.z2, t, /*weighted=*/false);
    out.pred = head.detached();
  }
  // Before the final method the decoder is a plain autoencoder over clean z1;
  // the full variant decodes from the shared z_t pass instead.
  const Tensor patches = net::patchify(x, mc.patch_size);
  if (w.noisy_reconstruction) {
    out.l_rec = squared_error(model.decode_patches(f), patches);
  } else {
    const std::vector<double> clean_t(b, 1.0);
    out.l_rec = squared_error(model.decode_patches(model.diffuse_forward(out.z1, clean_t, cond_labels)), patches);
  }
  out.total = add(scalar_mul(out.l_main, lw.dsd), scalar_mul(out.l_rec, lw.rec));

  const Tensor zero = Tensor::scalar(0.0);
  out.l_velo = out.l_cls = out.l_repsd = out.l_align = zero;
  if (w.full) {
    out.l_velo = flow::loss_detached_velocity(model.predict_velocity(f), out.z2, eps);
    const Tensor& cls_in = config.classifier_reads_target ? out.z2 : out.z1;
    out.l_cls = cross_entropy_with_logits(model.classify(cls_in), batch.labels);
    const std::size_t mid = mc.mid_layer();
    out.l_repsd = squared_error(mean(tokens_only(f.trace.layers[mid], mc.tokens()), 1),
                                stop_gradient(mean(tokens_only(target_trace.layers[mid], mc.tokens()), 1)));
    out.l_align = model.align_features(mc.align_layer, online_trace, teacher.features(x));
    out.total = add(out.total, scalar_mul(out.l_velo, lw.velo));
    out.total = add(out.total, scalar_mul(out.l_cls, lw.cls));
    out.total = add(out.total, scalar_mul(out.l_repsd, lw.repsd));
    out.total = add(out.total, scalar_mul(out.l_align, lw.align));
  }
  return out;
}

WiringReport check_wiring(const ExperimentConfig& config, const net::UnifiedBackbone& model,
                          const net::TargetEncoder& target, const net::FrozenTeacher& teacher, const Batch& probe) {
  WiringReport r;
  const Wiring w = wiring_of(config.variant);
  auto rng = keyed_rng({config.seed, 0, 0x57495245});  // "WIRE"
  {
    Tape tape;
    TapeScope scope(tape);
    const AssembledLoss l = assemble_loss(config, probe, model, target, teacher, rng);
    r.z1_requires_grad = l.z1.requires_grad();
    r.z2_requires_grad = l.z2.requires_grad();
    r.target_untracked = std::none_of(target.params().begin(), target.params().end(),
                                      [](const Parameter& p) { return p.trainable(); }) &&
                         !(w.ema_target && l.z2.requires_grad());
    if (w.full) {
      const Gradients g = tape.backward(l.l_velo);
      for (const auto& p : model.params()) {
        if (p.name().starts_with("velocity.")) continue;
        const Tensor gp = g.of(p);
        if (std::any_of(gp.data().begin(), gp.data().end(), [](double v) { return v != 0.0; })) {
          r.velocity_isolated = false;
          r.violations.push_back("velocity loss reaches " + p.name());
          break;
        }
      }
    }
  }
  if (!r.z1_requires_grad) r.violations.push_back("online latents carry no gradient");
  if (r.z2_requires_grad == w.decoupled_target)
    r.violations.push_back(w.decoupled_target ? "target latents carry gradient" : "joint target latents are detached");
  if (!r.target_untracked) r.violations.push_back("shadow encoder parameters are tracked");
  return r;
}

// ---------------------------------------------------------------------------

Trainer::Trainer(ExperimentConfig config, data::Dataset train)
    : config_(std::move(config)),
      train_(std::move(train)),
      model_((config_.validate(), config_.model), config_.seed),
      target_(model_, config_.ema_decay),
      teacher_(config_.model, config_.seed ^ 0x7EAC4E5ULL),
      optimizer_(model_.params(), optim::AdamWConfig{config_.learning_rate, 0.9, 0.95, 1e-8, config_.weight_decay}) {
  if (train_.size() == 0) throw DataError("training set is empty");
  if (train_.image_size() != config_.model.image_size || train_.channels() != config_.model.channels) {
    throw DataError("training images are " + to_string(train_.images.shape()) + " but the model expects " +
                    std::to_string(config_.model.channels) + " x " + std::to_string(config_.model.image_size) + "^2");
  }
  for (auto l : train_.labels)
    if (l >= config_.model.classes) throw DataError("label " + std::to_string(l) + " exceeds model classes");

  const std::size_t n = std::min<std::size_t>(2, train_.size());
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  const Batch probe{train_.gather(idx), train_.gather_labels(idx)};
  const WiringReport report = check_wiring(config_, model_, target_, teacher_, probe);
  if (!report.ok()) {
    std::string msg = "wiring check failed for " + std::string(variant_name(config_.variant)) + ":";
    for (const auto& v : report.violations) msg += " " + v + ";";
    throw VerificationError(msg);
  }
}

bool Trainer::is_logged(std::size_t step) const noexcept {
  return step == 1 || step % config_.metrics_every == 0 || step == config_.steps;
}

MetricsRecord Trainer::step() {
  const auto start = std::chrono::steady_clock::now();
  const std::size_t step = step_ + 1;
  auto rng = keyed_rng({config_.seed, step, kStepSalt});
  std::uniform_int_distribution<std::size_t> pick(0, train_.size() - 1);
  std::vector<std::size_t> idx(config_.batch_size);
  for (auto& i : idx) i = pick(rng);
  const Batch batch{train_.gather(idx), train_.gather_labels(idx)};

  MetricsRecord rec;
  rec.step = step;
  double scale = 1.0;
  {
    Tape tape;
    TapeScope scope(tape);
    const AssembledLoss l = assemble_loss(config_, batch, model_, target_, teacher_, rng);
    const double total = l.total.item();
    if (!std::isfinite(total)) {
      throw NumericError("non-finite loss at step " + std::to_string(step) + " (main " +
                         std::to_string(l.l_main.item()) + ", rec " + std::to_string(l.l_rec.item()) + ")");
    }
    const Gradients grads = tape.backward(l.total);
    const double norm = optim::global_grad_norm(model_.params(), grads);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm at step " + std::to_string(step));
    scale = optim::clip_factor(norm, config_.grad_clip_norm);
    rec.grad_norm = norm * scale;
    optimizer_.step(model_.params(), grads, scale);

    rec.l_main = l.l_main.item();
    rec.l_rec = l.l_rec.item();
    rec.l_velo = l.l_velo.item();
    rec.l_cls = l.l_cls.item();
    rec.erank_z1 = rank::effective_rank(rank::batch_latent_matrix(l.z1.detached()));
    rec.erank_z2 = rank::effective_rank(rank::batch_latent_matrix(l.z2.detached()));
    rec.erank_pred = rank::effective_rank(rank::batch_latent_matrix(l.pred));
  }
  if (wiring_of(config_.variant).ema_target) net::ema_update(model_, target_, config_.ema_decay);
  step_ = step;
  if (config_.record_wall_time)
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

io::Checkpoint Trainer::snapshot() const {
  io::Checkpoint c;
  c.step = step_;
  for (const auto& p : model_.params()) c.tensors.emplace_back("model/" + p.name(), p.value());
  if (wiring_of(config_.variant).ema_target)
    for (const auto& p : target_.params()) c.tensors.emplace_back("ema/" + p.name(), p.value());
  for (const auto& [name, m] : optimizer_.first_moments())
    c.tensors.emplace_back("adam_m/" + name, Tensor(model_.params().at(name).value().shape(), m));
  for (const auto& [name, v] : optimizer_.second_moments())
    c.tensors.emplace_back("adam_v/" + name, Tensor(model_.params().at(name).value().shape(), v));
  return c;
}

void Trainer::restore(const io::Checkpoint& c) {
  auto fetch = [&](const std::string& name, const Shape& shape) -> const Tensor& {
    const Tensor* t = c.find(name);
    if (!t) throw DataError("checkpoint: missing tensor " + name);
    if (t->shape() != shape)
      throw DataError("checkpoint: " + name + " has shape " + to_string(t->shape()) + ", expected " + to_string(shape));
    return *t;
  };
  if (wiring_of(config_.variant).ema_target && !c.has_prefix("ema/"))
    throw DataError("checkpoint: missing EMA section for variant " + std::string(variant_name(config_.variant)));
  // Validate everything before mutating.
  for (const auto& p : model_.params()) fetch("model/" + p.name(), p.value().shape());
  for (auto& p : model_.params()) p.set_value(fetch("model/" + p.name(), p.value().shape()));
  if (wiring_of(config_.variant).ema_target)
    for (auto& p : target_.params()) p.set_value(fetch("ema/" + p.name(), p.value().shape()));
  for (auto& [name, m] : optimizer_.first_moments()) {
    const auto& t = fetch("adam_m/" + name, model_.params().at(name).value().shape());
    m.assign(t.data().begin(), t.data().end());
  }
  for (auto& [name, v] : optimizer_.second_moments()) {
    const auto& t = fetch("adam_v/" + name, model_.params().at(name).value().shape());
    v.assign(t.data().begin(), t.data().end());
  }
  optimizer_.set_steps(c.step);
  step_ = c.step;
}

double classification_accuracy(const net::UnifiedBackbone& model, const data::Dataset& dataset,
                               std::size_t batch_size) {
  if (dataset.size() == 0) throw DataError("classification_accuracy: empty dataset");
  std::size_t correct = 0;
  for (std::size_t start = 0; start < dataset.size(); start += batch_size) {
    const std::size_t end = std::min(dataset.size(), start + batch_size);
    std::vector<std::size_t> idx(end - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    const Tensor logits = model.classify(model.encode(dataset.gather(idx)));
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j)
        if (logits[i * k + j] > logits[i * k + best]) best = j;
      if (best == dataset.labels[idx[i]]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

// ---------------------------------------------------------------------------

double early_l_rec(const std::vector<MetricsRecord>& records, std::size_t upto_step) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& r : records)
    if (r.step <= upto_step) {
      s += r.l_rec;
      ++n;
    }
  if (n == 0) throw Error(ErrorKind::kInvalidArgument, "early_l_rec: no logged steps in range");
  return s / static_cast<double>(n);
}

double late_l_rec(const std::vector<MetricsRecord>& records, std::size_t window) {
  if (records.empty()) throw Error(ErrorKind::kInvalidArgument, "late_l_rec: no records");
  const std::size_t last = records.back().step;
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& r : records)
    if (r.step + window > last) {
      s += r.l_rec;
      ++n;
    }
  return s / static_cast<double>(n);
}

double rank_gap_fraction(const std::vector<MetricsRecord>& records) {
  if (records.empty()) return 0.0;
  const auto n = std::count_if(records.begin(), records.end(), [](const auto& r) { return r.rank_gap() > 0.0; });
  return static_cast<double>(n) / static_cast<double>(records.size());
}

double loss_roughness(const std::vector<MetricsRecord>& records) {
  if (records.size() < 2) return 0.0;
  double s = 0.0;
  for (std::size_t i = 1; i < records.size(); ++i) s += std::abs(records[i].l_main - records[i - 1].l_main);
  return s / static_cast<double>(records.size() - 1);
}

CaseSummary summarize(const ExperimentConfig& config, std::vector<MetricsRecord> records) {
  CaseSummary s;
  s.variant = config.variant;
  s.steps = config.steps;
  s.batch_size = config.batch_size;
  s.records = std::move(records);
  if (!s.records.empty()) {
    const auto& last = s.records.back();
    s.final_erank_z1 = last.erank_z1;
    s.final_erank_z2 = last.erank_z2;
    s.final_erank_pred = last.erank_pred;
    s.min_l_main = s.max_l_main = last.l_main;
    s.min_l_rec = s.max_l_rec = last.l_rec;
    for (const auto& r : s.records) {
      s.min_l_main = std::min(s.min_l_main, r.l_main);
      s.max_l_main = std::max(s.max_l_main, r.l_main);
      s.min_l_rec = std::min(s.min_l_rec, r.l_rec);
      s.max_l_rec = std::max(s.max_l_rec, r.l_rec);
    }
  }
  return s;
}

CaseSummary run_case(const ExperimentConfig& config, const RunOptions& options) {
  Trainer trainer(config, load_training_data(config));
  std::vector<MetricsRecord> records;
  if (options.resume) {
    trainer.restore(*options.resume);
    if (!options.out_dir.empty()) {
      // Continue the stream written before the checkpoint.
      const auto csv = options.out_dir / "metrics.csv";
      if (std::filesystem::exists(csv))
        for (const auto& r : io::read_metrics_csv(csv))
          if (r.step <= trainer.steps_done()) records.push_back(r);
    }
  }
  std::optional<io::MetricsWriter> writer;
  if (!options.out_dir.empty()) {
    writer.emplace(options.out_dir / "metrics.csv");
    for (const auto& r : records) writer->append(r);
  }
  io::Checkpoint last_good = trainer.snapshot();
  while (trainer.steps_done() < config.steps) {
    MetricsRecord rec;
    try {
      rec = trainer.step();
    } catch (const NumericError& e) {
      std::string where = "in memory";
      if (!options.out_dir.empty()) {
        const auto path = options.out_dir / "last_good.dsd";
        io::write_checkpoint(path, last_good);
        where = path.string();
      }
      throw NumericError(std::string(e.what()) + "; last good checkpoint (step " + std::to_string(last_good.step) +
                         "): " + where);
    }
    if (trainer.is_logged(rec.step)) {
      records.push_back(rec);
      if (writer) writer->append(rec);
      if (options.on_log) options.on_log(rec);
      last_good = trainer.snapshot();
    }
    if (options.checkpoint_every && rec.step % options.checkpoint_every == 0 && !options.out_dir.empty()) {
      if (writer) writer->flush();
      io::write_checkpoint(options.out_dir / ("checkpoint_" + std::to_string(rec.step) + ".dsd"), trainer.snapshot());
    }
  }
  CaseSummary summary = summarize(config, std::move(records));
  if (!options.out_dir.empty()) {
    writer.reset();
    summary.metrics_path = options.out_dir / "metrics.csv";
    summary.checkpoint_path = options.out_dir / "checkpoint.dsd";
    io::write_checkpoint(summary.checkpoint_path, trainer.snapshot());
  }
  return summary;
}

std::vector<CompareRow> compare_cases(const std::vector<CaseSummary>& runs) {
  if (runs.size() < 2) throw ConfigError("compare_cases: need at least two runs");
  for (const auto& r : runs) {
    if (r.steps != runs.front().steps || r.batch_size != runs.front().batch_size)
      throw ConfigError("compare_cases: budget mismatch between " + std::string(variant_name(runs.front().variant)) +
                        " and " + std::string(variant_name(r.variant)));
    if (r.records.empty()) throw ConfigError("compare_cases: run without logged steps");
  }
  std::vector<CompareRow> rows;
  for (const auto& r : runs) {
    CompareRow row{};
    row.variant = r.variant;
    row.final_erank_z1 = r.final_erank_z1;
    row.final_erank_pred = r.final_erank_pred;
    row.min_erank_z1 = row.max_erank_z1 = r.records.front().erank_z1;
    for (const auto& m : r.records) {
      row.min_erank_z1 = std::min(row.min_erank_z1, m.erank_z1);
      row.max_erank_z1 = std::max(row.max_erank_z1, m.erank_z1);
    }
    row.l_rec_start = early_l_rec(r.records);
    row.l_rec_end = late_l_rec(r.records);
    row.l_rec_drop = row.l_rec_start > 0.0 ? (row.l_rec_start - row.l_rec_end) / row.l_rec_start : 0.0;
    row.l_main_delta = r.records.back().l_main - r.records.front().l_main;
    row.rank_gap_fraction = rank_gap_fraction(r.records);
    row.roughness = loss_roughness(r.records);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace dsd::train
