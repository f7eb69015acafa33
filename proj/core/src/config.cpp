#include "dsd/config.hpp"

#include <cerrno>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <set>
#include <sstream>

#include "dsd/error.hpp"
#include "dsd/io.hpp"

namespace dsd::io {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::size_t to_size(std::string_view v) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("expected a non-negative integer, got '" + std::string(v) + "'");
  return out;
}

std::uint64_t to_u64(std::string_view v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("expected an unsigned integer, got '" + std::string(v) + "'");
  return out;
}

double to_double(std::string_view v) {
  const std::string s(v);
  char* end = nullptr;
  errno = 0;
  const double d = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || errno == ERANGE) throw ConfigError("expected a number, got '" + s + "'");
  return d;
}

bool to_bool(std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("expected true or false, got '" + std::string(v) + "'");
}

std::string from_double(double d) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", d);
  return buf;
}

struct Key {
  std::string section, name;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define DSD_SIZE(sec, key, field)                                                       \
  Key { sec, key, [](RunConfig& c, std::string_view v) { c.field = to_size(v); },      \
        [](const RunConfig& c) { return std::to_string(c.field); } }
#define DSD_U64(sec, key, field)                                                        \
  Key { sec, key, [](RunConfig& c, std::string_view v) { c.field = to_u64(v); },       \
        [](const RunConfig& c) { return std::to_string(c.field); } }
#define DSD_DOUBLE(sec, key, field)                                                     \
  Key { sec, key, [](RunConfig& c, std::string_view v) { c.field = to_double(v); },    \
        [](const RunConfig& c) { return from_double(c.field); } }
#define DSD_BOOL(sec, key, field)                                                       \
  Key { sec, key, [](RunConfig& c, std::string_view v) { c.field = to_bool(v); },      \
        [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); } }
#define DSD_STRING(sec, key, field)                                                     \
  Key { sec, key, [](RunConfig& c, std::string_view v) { c.field = std::string(v); },  \
        [](const RunConfig& c) { return c.field; } }

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      DSD_SIZE("model", "image_size", experiment.model.image_size),
      DSD_SIZE("model", "channels", experiment.model.channels),
      DSD_SIZE("model", "patch_size", experiment.model.patch_size),
      DSD_SIZE("model", "trunk_layers", experiment.model.trunk_layers),
      DSD_SIZE("model", "hidden_dim", experiment.model.hidden_dim),
      DSD_SIZE("model", "heads", experiment.model.heads),
      DSD_SIZE("model", "latent_dim", experiment.model.latent_dim),
      DSD_SIZE("model", "registers", experiment.model.registers),
      DSD_SIZE("model", "classes", experiment.model.classes),
      DSD_SIZE("model", "time_embed_dim", experiment.model.time_embed_dim),
      DSD_SIZE("model", "mlp_ratio", experiment.model.mlp_ratio),
      DSD_SIZE("model", "teacher_dim", experiment.model.teacher_dim),
      DSD_SIZE("model", "align_layer", experiment.model.align_layer),
      DSD_DOUBLE("model", "init_std", experiment.model.init_std),
      DSD_BOOL("model", "normalize_latents", experiment.model.normalize_latents),
      DSD_BOOL("model", "fan_in_init", experiment.model.fan_in_init),

      Key{"train", "case",
          [](RunConfig& c, std::string_view v) { c.experiment.variant = train::parse_variant(v); },
          [](const RunConfig& c) { return std::string(train::variant_name(c.experiment.variant)); }},
      DSD_SIZE("train", "steps", experiment.steps),
      DSD_SIZE("train", "batch_size", experiment.batch_size),
      DSD_DOUBLE("train", "learning_rate", experiment.learning_rate),
      DSD_DOUBLE("train", "weight_decay", experiment.weight_decay),
      DSD_DOUBLE("train", "grad_clip_norm", experiment.grad_clip_norm),
      DSD_DOUBLE("train", "ema_decay", experiment.ema_decay),
      DSD_DOUBLE("train", "label_dropout", experiment.label_dropout),
      DSD_U64("train", "seed", experiment.seed),
      DSD_SIZE("train", "metrics_every", experiment.metrics_every),
      DSD_BOOL("train", "classifier_reads_target", experiment.classifier_reads_target),
      DSD_BOOL("train", "record_wall_time", experiment.record_wall_time),
      DSD_DOUBLE("train", "lambda_dsd", experiment.weights.dsd),
      DSD_DOUBLE("train", "lambda_velo", experiment.weights.velo),
      DSD_DOUBLE("train", "lambda_rec", experiment.weights.rec),
      DSD_DOUBLE("train", "lambda_cls", experiment.weights.cls),
      DSD_DOUBLE("train", "lambda_repsd", experiment.weights.repsd),
      DSD_DOUBLE("train", "lambda_align", experiment.weights.align),

      DSD_DOUBLE("augment", "mask_ratio", experiment.augment.mask_ratio),
      DSD_DOUBLE("augment", "mask_fill", experiment.augment.mask_fill),
      DSD_DOUBLE("augment", "blur_sigma_min", experiment.augment.blur_sigma_min),
      DSD_DOUBLE("augment", "blur_sigma_max", experiment.augment.blur_sigma_max),
      DSD_DOUBLE("augment", "brightness_min", experiment.augment.brightness_min),
      DSD_DOUBLE("augment", "brightness_max", experiment.augment.brightness_max),
      DSD_DOUBLE("augment", "contrast_min", experiment.augment.contrast_min),
      DSD_DOUBLE("augment", "contrast_max", experiment.augment.contrast_max),
      DSD_DOUBLE("augment", "solarize_threshold", experiment.augment.solarize_threshold),
      DSD_DOUBLE("augment", "p_jitter", experiment.augment.p_jitter),
      DSD_DOUBLE("augment", "p_blur", experiment.augment.p_blur),
      DSD_DOUBLE("augment", "p_solarize", experiment.augment.p_solarize),
      DSD_DOUBLE("augment", "p_mask", experiment.augment.p_mask),
      DSD_U64("augment", "seed", experiment.augment.seed),

      DSD_SIZE("sample", "steps", sample.steps),
      DSD_DOUBLE("sample", "guidance", sample.guidance),
      Key{"sample", "label",
          [](RunConfig& c, std::string_view v) {
            if (v == "none") c.sample.label.reset();
            else c.sample.label = to_size(v);
          },
          [](const RunConfig& c) { return c.sample.label ? std::to_string(*c.sample.label) : std::string("none"); }},
      DSD_SIZE("sample", "batch", sample.batch),
      DSD_U64("sample", "seed", sample.seed),
      Key{"sample", "source",
          [](RunConfig& c, std::string_view v) {
            if (v == "velocity") c.sample.source = sample::VelocitySource::kVelocityHead;
            else if (v == "recovered") c.sample.source = sample::VelocitySource::kRecoveredFromClean;
            else throw ConfigError("expected velocity or recovered, got '" + std::string(v) + "'");
          },
          [](const RunConfig& c) {
            return std::string(c.sample.source == sample::VelocitySource::kVelocityHead ? "velocity" : "recovered");
          }},

      DSD_STRING("data", "source", experiment.data.source),
      DSD_SIZE("data", "train_per_class", experiment.data.train_per_class),
      DSD_SIZE("data", "test_per_class", experiment.data.test_per_class),
      DSD_U64("data", "seed", experiment.data.seed),
      DSD_STRING("data", "train_images", experiment.data.train_images),
      DSD_STRING("data", "train_labels", experiment.data.train_labels),
      DSD_STRING("data", "test_images", experiment.data.test_images),
      DSD_STRING("data", "test_labels", experiment.data.test_labels),

      DSD_STRING("io", "out_dir", io.out_dir),
      DSD_SIZE("io", "checkpoint_every", io.checkpoint_every),
  };
  return table;
}

#undef DSD_SIZE
#undef DSD_U64
#undef DSD_DOUBLE
#undef DSD_BOOL
#undef DSD_STRING

const Key* find_key(std::string_view section, std::string_view name) {
  for (const auto& k : keys())
    if (k.section == section && k.name == name) return &k;
  return nullptr;
}

bool known_section(std::string_view s) {
  return s == "model" || s == "train" || s == "augment" || s == "sample" || s == "data" || s == "io";
}

// Fields mirrored from the model section.
void tie(RunConfig& c) {
  c.experiment.augment.mask_patch = c.experiment.model.patch_size;
  c.experiment.data.classes = c.experiment.model.classes;
}

}  // namespace

void set_config_value(RunConfig& config, std::string_view section, std::string_view key, std::string_view value) {
  if (!known_section(section)) throw ConfigError("unknown config section [" + std::string(section) + "]");
  const Key* k = find_key(section, key);
  if (!k) throw ConfigError("unknown config key " + std::string(section) + "." + std::string(key));
  try {
    k->set(config, value);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(section) + "." + std::string(key) + ": " + e.what());
  }
  tie(config);
}

RunConfig parse_config(std::string_view text) {
  RunConfig c;
  tie(c);
  std::string section;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const auto hash = raw.find_first_of("#;");
    const std::string line = trim(hash == std::string::npos ? raw : std::string_view(raw).substr(0, hash));
    if (line.empty()) continue;
    auto fail = [&](const std::string& why) { throw ConfigError("config line " + std::to_string(lineno) + ": " + why); };
    if (line.front() == '[') {
      if (line.back() != ']') fail("malformed section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (!known_section(section)) fail("unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected key = value");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (section.empty()) fail("key '" + key + "' appears before any section");
    if (!find_key(section, key)) fail("unknown key " + section + "." + key);
    if (!seen.insert(section + "." + key).second) fail("duplicate key " + section + "." + key);
    try {
      set_config_value(c, section, key, value);
    } catch (const ConfigError& e) {
      fail(e.what());
    }
  }
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  try {
    return parse_config(text);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string render_config(const RunConfig& config) {
  std::string out;
  std::string section;
  for (const auto& k : keys()) {
    if (k.section != section) {
      if (!section.empty()) out += "\n";
      section = k.section;
      out += "[" + section + "]\n";
    }
    out += k.name + " = " + k.get(config) + "\n";
  }
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& k : keys()) out.push_back(k.section + "." + k.name);
  return out;
}

}  // namespace dsd::io
