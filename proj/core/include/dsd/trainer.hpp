#pragma once

// Collapse experiments: per-variant loss wiring, the training loop and run
// summaries.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "dsd/augment.hpp"
#include "dsd/checkpoint.hpp"
#include "dsd/data.hpp"
#include "dsd/metrics.hpp"
#include "dsd/network.hpp"
#include "dsd/optim.hpp"

namespace dsd::train {

enum class CaseVariant { kVanillaJoint, kDecoupled, kTransformed, kEmaTarget, kAugmented, kFullDSD };

// Short names: vanilla, decoupled, transformed, ema, augmented, full.
std::string_view variant_name(CaseVariant variant);
// Throws ConfigError for unknown names.
CaseVariant parse_variant(std::string_view name);
const std::vector<CaseVariant>& all_variants();

struct Wiring {
  bool velocity_objective = false;  // main loss regresses z - eps
  bool decoupled_target = true;     // z2 carries no gradient
  bool ema_target = false;          // z2 from the shadow encoder
  bool augmented = false;           // z1 from an augmented view
  bool full = false;                // velocity head, classifier, rep-SD, alignment terms
  bool noisy_reconstruction = false;  // decoder reads the z_t pass rather than clean z1
};
Wiring wiring_of(CaseVariant variant);

struct LossWeights {
  double dsd = 1.0;
  double velo = 1.0;
  double rec = 1.0;
  double cls = 0.1;
  double repsd = 0.5;
  double align = 0.5;
};

struct DataSpec {
  std::string source = "synthetic";  // synthetic | idx
  std::size_t classes = 10;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 20;
  std::uint64_t seed = 7;
  std::string train_images, train_labels, test_images, test_labels;
};

struct ExperimentConfig {
  CaseVariant variant = CaseVariant::kTransformed;
  net::ModelConfig model;
  aug::AugmentConfig augment;
  std::size_t steps = 2000;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  double grad_clip_norm = 3.0;
  double ema_decay = 0.99;
  double label_dropout = 0.1;
  LossWeights weights;
  DataSpec data;
  std::uint64_t seed = 0;
  std::size_t metrics_every = 10;
  bool classifier_reads_target = false;
  // Wall-clock timings make the metrics stream machine-dependent.
  bool record_wall_time = false;

  // Throws ConfigError.
  void validate() const;
};

// Synthetic or IDX data per the data section of the config.
data::Dataset load_training_data(const ExperimentConfig& config);
data::Dataset load_test_data(const ExperimentConfig& config);

struct Batch {
  Tensor images;                    // [batch, channels, size, size]
  std::vector<std::size_t> labels;  // true labels
};

struct AssembledLoss {
  Tensor total;
  // Unweighted terms; scalars of value 0 when a term is not part of the variant.
  Tensor l_main, l_rec, l_velo, l_cls, l_repsd, l_align;
  Tensor z1;    // online latents (carry gradient)
  Tensor z2;    // target latents (gradient only for the joint variant)
  Tensor pred;  // clean-latent estimate of the main head
  Tensor z_t;
  std::vector<double> t;
  Tensor eps;
};

// Must run under an active tape for gradients to flow. Draws, in order from
// `rng`: augmentation stream seed, per-sample times, noise, label dropout.
AssembledLoss assemble_loss(const ExperimentConfig& config, const Batch& batch, const net::UnifiedBackbone& model,
                            const net::TargetEncoder& target, const net::FrozenTeacher& teacher, std::mt19937_64& rng);

struct WiringReport {
  bool z1_requires_grad = false;
  bool z2_requires_grad = false;
  bool target_untracked = false;   // no shadow tensor is a tape leaf
  bool velocity_isolated = true;   // L_velo leaves every non-velocity parameter at exactly zero
  std::vector<std::string> violations;
  bool ok() const noexcept { return violations.empty(); }
};

WiringReport check_wiring(const ExperimentConfig& config, const net::UnifiedBackbone& model,
                          const net::TargetEncoder& target, const net::FrozenTeacher& teacher, const Batch& probe);

class Trainer {
 public:
  // Throws VerificationError when the structural wiring check fails.
  Trainer(ExperimentConfig config, data::Dataset train);

  // One optimisation step; throws NumericError on non-finite loss or gradient.
  MetricsRecord step();
  bool is_logged(std::size_t step) const noexcept;

  const ExperimentConfig& config() const noexcept { return config_; }
  const net::UnifiedBackbone& model() const noexcept { return model_; }
  net::UnifiedBackbone& model() noexcept { return model_; }
  const net::TargetEncoder& target() const noexcept { return target_; }
  const net::FrozenTeacher& teacher() const noexcept { return teacher_; }
  const optim::AdamW& optimizer() const noexcept { return optimizer_; }
  const data::Dataset& dataset() const noexcept { return train_; }
  std::size_t steps_done() const noexcept { return step_; }

  io::Checkpoint snapshot() const;
  // Throws DataError for missing or mis-shaped tensors, including an absent
  // EMA section on variants that use one.
  void restore(const io::Checkpoint& checkpoint);

 private:
  ExperimentConfig config_;
  data::Dataset train_;
  net::UnifiedBackbone model_;
  net::TargetEncoder target_;
  net::FrozenTeacher teacher_;
  optim::AdamW optimizer_;
  std::size_t step_ = 0;
};

// argmax classify(encode(x)) accuracy.
double classification_accuracy(const net::UnifiedBackbone& model, const data::Dataset& dataset,
                               std::size_t batch_size = 64);

struct CaseSummary {
  CaseVariant variant = CaseVariant::kTransformed;
  std::size_t steps = 0;
  std::size_t batch_size = 0;
  std::vector<MetricsRecord> records;  // logged steps only
  double final_erank_z1 = 0.0, final_erank_z2 = 0.0, final_erank_pred = 0.0;
  double min_l_main = 0.0, max_l_main = 0.0, min_l_rec = 0.0, max_l_rec = 0.0;
  std::filesystem::path metrics_path, checkpoint_path;
};

// Derived statistics over a logged metrics stream.
double early_l_rec(const std::vector<MetricsRecord>& records, std::size_t upto_step = 50);
double late_l_rec(const std::vector<MetricsRecord>& records, std::size_t window = 50);
// Share of logged steps with erank_z2 > erank_pred.
double rank_gap_fraction(const std::vector<MetricsRecord>& records);
// Mean |delta L_main| between consecutive logged steps.
double loss_roughness(const std::vector<MetricsRecord>& records);

struct RunOptions {
  std::filesystem::path out_dir;  // empty: nothing written
  std::size_t checkpoint_every = 0;
  std::function<void(const MetricsRecord&)> on_log;
  // Optional checkpoint to resume from.
  std::optional<io::Checkpoint> resume;
};

// Runs config.steps steps (continuing from a resume checkpoint if given),
// streaming logged records to <out>/metrics.csv and writing
// <out>/checkpoint.dsd at the end.
CaseSummary run_case(const ExperimentConfig& config, const RunOptions& options = {});
CaseSummary summarize(const ExperimentConfig& config, std::vector<MetricsRecord> records);

struct CompareRow {
  CaseVariant variant;
  double final_erank_z1, min_erank_z1, max_erank_z1;
  double final_erank_pred;
  double l_rec_start, l_rec_end, l_rec_drop;  // drop as a fraction of start
  double l_main_delta;
  double rank_gap_fraction;
  double roughness;
};

// Throws ConfigError when fewer than two runs are given or their budgets
// (steps, batch size) differ.
std::vector<CompareRow> compare_cases(const std::vector<CaseSummary>& runs);

}  // namespace dsd::train
