#pragma once

// Run configuration: a flat `key = value` text format with `#` comments.

#include <iosfwd>
#include <string>
#include <vector>

#include "lvctc/data.hpp"
#include "lvctc/model.hpp"
#include "lvctc/optim.hpp"

namespace lvctc {

struct OptimConfig {
  double peak_lr = 2e-3;
  std::size_t warmup = 400;
  AdamConfig adam;
};

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t steps = 3000;
  std::size_t log_interval = 1;
  std::size_t valid_interval = 500;
  std::size_t valid_size = 100;
  std::uint64_t valid_seed = 7001;
  std::size_t iterations = 3;  // refinement passes for validation decoding
  std::uint64_t seed = 1;
  std::size_t threads = 0;     // validation decoding threads; 0 = hardware
};

struct EvalConfig {
  std::uint64_t seed = 9001;
  std::size_t size = 200;
};

struct RunConfig {
  ModelConfig model;
  LossWeights loss;
  OptimConfig optim;
  SyntheticTaskSpec data;
  TrainConfig train;
  EvalConfig eval;
  std::string out_dir = "runs/default";

  // Copies the data-side sizes into the model config and validates all.
  void finalize();
  ModelConfig model_config() const;
};

struct ConfigKey {
  std::string name;
  std::string doc;
};

// Every accepted key with a one-line description, in file order.
const std::vector<ConfigKey> &config_keys();

RunConfig parse_config(std::istream &is, const std::string &source = "<config>");
RunConfig load_config(const std::string &path);
// Applies one `key = value` assignment; unknown keys raise ConfigError.
void set_config_value(RunConfig &config, const std::string &key, const std::string &value);
std::string get_config_value(const RunConfig &config, const std::string &key);
std::string config_to_text(const RunConfig &config);

}  // namespace lvctc
