#include "lvctc/optim.hpp"

#include <cmath>
#include <set>

namespace lvctc {

void ParameterSet::add(const std::string &name, Tensor leaf) {
  if (!leaf.defined()) throw ContractError("parameter '" + name + "' is undefined");
  if (!slots_.emplace(name, std::move(leaf)).second) {
    throw ContractError("duplicate parameter name '" + name + "'");
  }
}

void ParameterSet::alias(const std::string &name, const std::string &existing) {
  add(name, get(existing));
  aliases_.insert(name);
}

const Tensor &ParameterSet::get(const std::string &name) const {
  auto it = slots_.find(name);
  if (it == slots_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

std::vector<std::pair<std::string, Tensor>> ParameterSet::unique() const {
  std::vector<std::pair<std::string, Tensor>> out;
  std::set<const Tensor::Node *> seen;
  for (const auto &[name, t] : slots_) {
    if (aliases_.count(name) == 0 && seen.insert(t.node_id()).second) out.emplace_back(name, t);
  }
  return out;
}

std::string ParameterSet::canonical(const std::string &name) const {
  const Tensor &t = get(name);
  for (const auto &[n, other] : slots_) {
    if (aliases_.count(n) == 0 && other.same_node(t)) return n;
  }
  return name;
}

void ParameterSet::zero_grad() {
  for (auto &[name, t] : unique()) t.zero_grad();
}

std::size_t ParameterSet::total_elements() const {
  std::size_t n = 0;
  for (const auto &[name, t] : unique()) n += t.numel();
  return n;
}

void adam_step(ParameterSet &params, OptimizerState &state, double lr,
               const AdamConfig &config) {
  const auto leaves = params.unique();
  for (const auto &[name, t] : leaves) {
    if (!t.has_grad()) throw ContractError("adam_step: parameter '" + name + "' has no gradient");
  }
  state.step += 1;
  const double step = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, step);
  const double c2 = 1.0 - std::pow(config.beta2, step);
  for (auto [name, t] : leaves) {
    auto &m = state.first_moment[name];
    auto &v = state.second_moment[name];
    if (m.size() != t.numel()) m.assign(t.numel(), 0.0);
    if (v.size() != t.numel()) v.assign(t.numel(), 0.0);
    auto w = t.mutable_data();
    auto g = t.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= lr * (mhat / (std::sqrt(vhat) + config.eps) + config.weight_decay * w[i]);
    }
  }
}

double noam_lr(std::uint64_t step, std::uint64_t warmup, double peak) {
  if (step == 0) throw ContractError("noam_lr: step must be >= 1");
  if (warmup == 0) throw ContractError("noam_lr: warmup must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return peak * std::min(s / w, std::sqrt(w / s));
}

}  // namespace lvctc
