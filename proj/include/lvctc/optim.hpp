#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "lvctc/tensor.hpp"

namespace lvctc {

// Named parameter leaves, iterated in name order. Two names may alias one
// leaf; `unique()` lists each leaf once under its first (smallest) name.
class ParameterSet {
 public:
  void add(const std::string &name, Tensor leaf);
  void alias(const std::string &name, const std::string &existing);

  const Tensor &get(const std::string &name) const;
  bool contains(const std::string &name) const { return slots_.count(name) != 0; }
  const std::map<std::string, Tensor> &slots() const { return slots_; }
  std::vector<std::pair<std::string, Tensor>> unique() const;
  // Canonical name of the leaf behind `name`.
  std::string canonical(const std::string &name) const;

  void zero_grad();
  std::size_t total_elements() const;

 private:
  std::map<std::string, Tensor> slots_;
  std::set<std::string> aliases_;
};

struct AdamConfig {
  double beta1 = 0.90;
  double beta2 = 0.98;
  double eps = 1e-9;
  double weight_decay = 1e-5;
};

struct OptimizerState {
  std::map<std::string, std::vector<double>> first_moment;
  std::map<std::string, std::vector<double>> second_moment;
  std::uint64_t step = 0;
};

// Bias-corrected Adam with decoupled weight decay. Every unique leaf must
// carry a gradient.
void adam_step(ParameterSet &params, OptimizerState &state, double lr,
               const AdamConfig &config = {});

// peak * min(step / warmup, sqrt(warmup / step)).
double noam_lr(std::uint64_t step, std::uint64_t warmup, double peak);

}  // namespace lvctc
