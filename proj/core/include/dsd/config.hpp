#pragma once

// Sectioned run configuration:
//
//   # comment
//   [model]
//   hidden_dim = 32
//
// Sections: model, train, augment, sample, data, io. Unknown sections and
// keys are rejected; every key has a default.

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "dsd/sampler.hpp"
#include "dsd/trainer.hpp"

namespace dsd::io {

struct IoConfig {
  std::string out_dir;  // empty: DSD_OUT_DIR or ./runs
  std::size_t checkpoint_every = 0;
};

struct RunConfig {
  train::ExperimentConfig experiment;
  sample::SampleConfig sample;
  IoConfig io;
};

// Throws ConfigError naming the line and key.
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::filesystem::path& path);
// Every key with its current value; parse_config(render_config(c)) == c.
std::string render_config(const RunConfig& config);
// "section.key" for every accepted key.
std::vector<std::string> config_keys();

// Applies one "section.key=value" style override.
void set_config_value(RunConfig& config, std::string_view section, std::string_view key, std::string_view value);

}  // namespace dsd::io
