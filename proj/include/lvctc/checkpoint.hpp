#pragma once

// Checkpoint file: "LVCTC1\n", a manifest of `name f32 shape...` lines ended
// by a blank line, little-endian f32 payloads in manifest order, then the
// run configuration as `key = value` lines.

#include <map>
#include <string>

#include "lvctc/config.hpp"
#include "lvctc/optim.hpp"

namespace lvctc {

struct StoredTensor {
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  RunConfig config;
  std::uint64_t step = 0;
  std::map<std::string, StoredTensor> tensors;  // manifest order is name order
};

// Optimizer moments are stored as `optim.m.<name>` / `optim.v.<name>`.
void save_checkpoint(const std::string &path, const ParameterSet &params,
                     const OptimizerState *optimizer, const RunConfig &config, std::uint64_t step);
Checkpoint read_checkpoint(const std::string &path);

// Copies stored values into every unique leaf; names and shapes must match.
void load_parameters(const Checkpoint &ckpt, ParameterSet &params);
// Restores moments and the step counter when present.
void load_optimizer(const Checkpoint &ckpt, OptimizerState &state);

// Rounds every unique leaf to f32 in place, making it exactly representable
// in a checkpoint.
void round_parameters_to_f32(ParameterSet &params);

}  // namespace lvctc
