#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dsd/checkpoint.hpp"
#include "dsd/config.hpp"
#include "dsd/error.hpp"
#include "dsd/io.hpp"
#include "dsd/rank.hpp"
#include "dsd/sampler.hpp"
#include "dsd/trainer.hpp"
#include "dsd/verify.hpp"

namespace fs = std::filesystem;
using namespace dsd;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;
constexpr int kExitVerification = 5;

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return kExitConfig;
    case ErrorKind::kData: return kExitData;
    case ErrorKind::kNumeric: return kExitNumeric;
    case ErrorKind::kVerification: return kExitVerification;
    case ErrorKind::kIo:
    case ErrorKind::kInvalidArgument: break;
  }
  return 1;
}

// Flags shared by the subcommands that read a run configuration.
struct RunFlags {
  std::string config;
  std::string out;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  std::string variant;
  std::size_t steps = 0;
};

void add_run_flags(CLI::App* cmd, RunFlags& f, bool training) {
  cmd->add_option("--config", f.config, "run configuration file");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--set", f.sets, "override, section.key=value (repeatable)");
  cmd->add_option("--seed", f.seed, "seed override");
  if (training) {
    cmd->add_option("--case", f.variant, "vanilla|decoupled|transformed|ema|augmented|full");
    cmd->add_option("--steps", f.steps, "step budget override");
  }
}

io::RunConfig resolve(const RunFlags& f, const CLI::App* cmd) {
  io::RunConfig rc = f.config.empty() ? io::RunConfig{} : io::load_config(f.config);
  for (const auto& s : f.sets) {
    const auto eq = s.find('='), dot = s.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq)
      throw ConfigError("--set expects section.key=value, got '" + s + "'");
    io::set_config_value(rc, s.substr(0, dot), s.substr(dot + 1, eq - dot - 1), s.substr(eq + 1));
  }
  if (cmd->count("--seed")) {
    rc.experiment.seed = f.seed;
    rc.sample.seed = f.seed;
  }
  if (cmd->get_option_no_throw("--case") && cmd->count("--case")) rc.experiment.variant = train::parse_variant(f.variant);
  if (cmd->get_option_no_throw("--steps") && cmd->count("--steps")) rc.experiment.steps = f.steps;
  rc.experiment.validate();
  rc.sample.validate();
  return rc;
}

fs::path output_root(const io::RunConfig& rc, const std::string& flag) {
  if (!flag.empty()) return flag;
  if (!rc.io.out_dir.empty()) return rc.io.out_dir;
  if (const char* env = std::getenv("DSD_OUT_DIR"); env && *env) return env;
  return "runs";
}

net::UnifiedBackbone model_from_checkpoint(const net::ModelConfig& config, const io::Checkpoint& ck) {
  net::UnifiedBackbone model(config, 0);
  for (auto& p : model.params()) {
    const Tensor* t = ck.find("model/" + p.name());
    if (!t) throw DataError("checkpoint has no tensor model/" + p.name());
    if (t->shape() != p.value().shape())
      throw DataError("checkpoint tensor model/" + p.name() + " has shape " + to_string(t->shape()) +
                      ", model expects " + to_string(p.value().shape()));
    p.set_value(*t);
  }
  return model;
}

// A run directory holds config.ini, metrics.csv and checkpoint.dsd.
io::RunConfig run_dir_config(const fs::path& dir) {
  const fs::path cfg = dir / "config.ini";
  if (!fs::exists(cfg)) throw DataError("no config.ini in " + dir.string());
  return io::load_config(cfg);
}

std::vector<std::string> split_columns(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const auto piece = s.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (!piece.empty()) out.push_back(piece);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

int cmd_train(const RunFlags& f, const CLI::App* cmd, const std::string& resume) {
  const io::RunConfig rc = resolve(f, cmd);
  const auto& ex = rc.experiment;
  const fs::path out = f.out.empty() && rc.io.out_dir.empty()
                           ? output_root(rc, "") / std::string(train::variant_name(ex.variant))
                           : output_root(rc, f.out);
  fs::create_directories(out);
  io::write_text_file(out / "config.ini", io::render_config(rc));

  train::RunOptions opts;
  opts.out_dir = out;
  opts.checkpoint_every = rc.io.checkpoint_every;
  if (!resume.empty()) opts.resume = io::read_checkpoint(resume);
  opts.on_log = [&](const MetricsRecord& r) {
    if (r.step == 1 || r.step % (ex.metrics_every * 20) == 0 || r.step == ex.steps) {
      std::printf("step %6zu  erank z1 %.3f z2 %.3f pred %.3f  L_main %.5f  L_rec %.5f  |g| %.3f\n", r.step,
                  r.erank_z1, r.erank_z2, r.erank_pred, r.l_main, r.l_rec, r.grad_norm);
      std::fflush(stdout);
    }
  };
  const auto t0 = std::chrono::steady_clock::now();
  const train::CaseSummary s = train::run_case(ex, opts);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("case %s: %zu steps in %.1f s\n", std::string(train::variant_name(ex.variant)).c_str(), s.steps, secs);
  std::printf("final erank z1 %.4f z2 %.4f pred %.4f\n", s.final_erank_z1, s.final_erank_z2, s.final_erank_pred);
  std::printf("L_rec %.5f -> %.5f (early/late mean)\n", train::early_l_rec(s.records), train::late_l_rec(s.records));
  if (ex.variant == train::CaseVariant::kFullDSD) {
    const auto model = model_from_checkpoint(ex.model, io::read_checkpoint(s.checkpoint_path));
    std::printf("held-out accuracy %.4f\n", train::classification_accuracy(model, train::load_test_data(ex)));
  }
  std::printf("metrics %s\ncheckpoint %s\n", s.metrics_path.string().c_str(), s.checkpoint_path.string().c_str());
  return 0;
}

int cmd_sample(const RunFlags& f, const CLI::App* cmd, const std::string& run, const std::string& checkpoint) {
  RunFlags flags = f;
  if (flags.config.empty() && !run.empty()) flags.config = (fs::path(run) / "config.ini").string();
  const io::RunConfig rc = resolve(flags, cmd);
  const fs::path ck_path = !checkpoint.empty() ? fs::path(checkpoint) : fs::path(run) / "checkpoint.dsd";
  if (checkpoint.empty() && run.empty()) throw ConfigError("sample needs --run DIR or --checkpoint PATH");
  const auto model = model_from_checkpoint(rc.experiment.model, io::read_checkpoint(ck_path));
  const auto result = sample::euler_sample(model, rc.sample);
  const fs::path out = f.out.empty() ? (run.empty() ? output_root(rc, "") / "samples" : fs::path(run) / "samples")
                                     : fs::path(f.out);
  fs::create_directories(out);
  const std::string prefix =
      rc.sample.label ? "class" + std::to_string(*rc.sample.label) : std::string("uncond");
  const auto report = io::write_pgm(result.images, out, prefix);
  io::write_latents(out / (prefix + "_latents.dsd"), result.latents);
  std::printf("wrote %zu images to %s\n", report.files.size(), out.string().c_str());
  if (report.clamped) std::fprintf(stderr, "warning: %zu pixel values clamped to [0, 1]\n", report.clamped);
  return 0;
}

int cmd_verify() {
  const auto report = verify::run_property_suite([](const verify::CheckResult& c) {
    std::printf("%-4s %-34s %s\n", c.passed ? "ok" : "FAIL", c.name.c_str(), c.detail.c_str());
    std::fflush(stdout);
  });
  std::printf("%zu/%zu checks passed\n", report.passed(), report.checks.size());
  return report.failed() == 0 ? 0 : kExitVerification;
}

void print_spectrum(const Tensor& m) {
  const auto s = rank::spectrum(m);
  std::printf("matrix %zu x %zu  erank %.6f\nsingular values:", s.rows, s.cols, s.erank);
  for (double v : s.singular_values) std::printf(" %.6g", v);
  std::printf("\n");
}

int cmd_diagnose(const RunFlags& f, const CLI::App* cmd, const std::string& latents, const std::string& run,
                 const std::string& dump) {
  if (!latents.empty()) {
    const Tensor z = io::read_latents(latents);
    print_spectrum(z.rank() == 2 ? z : rank::batch_latent_matrix(z));
    return 0;
  }
  if (run.empty()) throw ConfigError("diagnose needs --latents FILE or --run DIR");
  RunFlags flags = f;
  if (flags.config.empty()) flags.config = (fs::path(run) / "config.ini").string();
  const io::RunConfig rc = resolve(flags, cmd);
  const auto model = model_from_checkpoint(rc.experiment.model, io::read_checkpoint(fs::path(run) / "checkpoint.dsd"));
  const auto test = train::load_test_data(rc.experiment);
  std::vector<std::size_t> idx(std::min<std::size_t>(test.size(), 256));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i * test.size() / idx.size();
  const Tensor z = model.encode(test.gather(idx)).detached();
  print_spectrum(rank::batch_latent_matrix(z));
  std::printf("held-out accuracy %.4f\n", train::classification_accuracy(model, test));
  if (!dump.empty()) {
    io::write_latents(dump, z);
    std::printf("latents written to %s\n", dump.c_str());
  }
  return 0;
}

int cmd_plot(const std::string& csv, const std::string& columns, const std::string& out) {
  const fs::path target = out.empty() ? fs::path(csv).replace_extension(".svg") : fs::path(out);
  io::emit_plot_svg(csv, split_columns(columns), target);
  std::printf("wrote %s\n", target.string().c_str());
  return 0;
}

int cmd_compare(const std::vector<std::string>& runs, const std::string& columns, const std::string& out) {
  std::vector<train::CaseSummary> summaries;
  std::vector<io::Panel> panels;
  const auto cols = split_columns(columns);
  for (const auto& dir : runs) {
    const auto rc = run_dir_config(dir);
    auto records = io::read_metrics_csv(fs::path(dir) / "metrics.csv");
    panels.push_back(io::panel_from_records(std::string(train::variant_name(rc.experiment.variant)), records, cols));
    summaries.push_back(train::summarize(rc.experiment, std::move(records)));
  }
  const auto rows = train::compare_cases(summaries);
  std::printf("%-12s %9s %9s %9s %10s %9s %9s %9s %9s %10s\n", "case", "erank_z1", "min", "max", "erank_pred",
              "rec_start", "rec_end", "rec_drop", "gap_frac", "roughness");
  for (const auto& r : rows) {
    std::printf("%-12s %9.4f %9.4f %9.4f %10.4f %9.5f %9.5f %9.3f %9.3f %10.6f\n",
                std::string(train::variant_name(r.variant)).c_str(), r.final_erank_z1, r.min_erank_z1, r.max_erank_z1,
                r.final_erank_pred, r.l_rec_start, r.l_rec_end, r.l_rec_drop, r.rank_gap_fraction, r.roughness);
  }
  if (!out.empty()) {
    io::write_text_file(out, io::render_svg(panels, 3));
    std::printf("wrote %s\n", out.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dsd: unified encoder/decoder/diffusion transformer and collapse laboratory"};
  app.require_subcommand(1);

  RunFlags train_flags, sample_flags, diag_flags;
  std::string resume, run, checkpoint, latents, diag_run, dump;
  std::string csv, plot_columns = "erank_z1,l_rec", plot_out;
  std::vector<std::string> compare_runs;
  std::string compare_columns = "erank_z1,erank_z2,erank_pred,l_rec", compare_out;

  auto* train = app.add_subcommand("train", "run one experiment case");
  add_run_flags(train, train_flags, true);
  train->add_option("--resume", resume, "checkpoint to continue from");

  auto* samp = app.add_subcommand("sample", "Euler-sample images from a trained model");
  add_run_flags(samp, sample_flags, false);
  samp->add_option("--run", run, "run directory (config.ini + checkpoint.dsd)");
  samp->add_option("--checkpoint", checkpoint, "checkpoint path");

  auto* ver = app.add_subcommand("verify", "run the gradient, identity and rank property suite");

  auto* diag = app.add_subcommand("diagnose", "effective rank of a latent dump or a trained run");
  add_run_flags(diag, diag_flags, false);
  diag->add_option("--latents", latents, "latent dump written by sample or --dump");
  diag->add_option("--run", diag_run, "run directory");
  diag->add_option("--dump", dump, "write the held-out latents here");

  auto* plot = app.add_subcommand("plot", "SVG of metrics columns");
  plot->add_option("--csv", csv, "metrics CSV")->required();
  plot->add_option("--columns", plot_columns, "comma-separated columns");
  plot->add_option("--out", plot_out, "SVG path (default: next to the CSV)");

  auto* cmp = app.add_subcommand("compare", "tabulate several runs and draw one panel per run");
  cmp->add_option("runs", compare_runs, "run directories")->required();
  cmp->add_option("--columns", compare_columns, "columns per panel");
  cmp->add_option("--out", compare_out, "multi-panel SVG path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (train->parsed()) return cmd_train(train_flags, train, resume);
    if (samp->parsed()) return cmd_sample(sample_flags, samp, run, checkpoint);
    if (ver->parsed()) return cmd_verify();
    if (diag->parsed()) return cmd_diagnose(diag_flags, diag, latents, diag_run, dump);
    if (plot->parsed()) return cmd_plot(csv, plot_columns, plot_out);
    if (cmp->parsed()) return cmd_compare(compare_runs, compare_columns, compare_out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
