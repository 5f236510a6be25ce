#include "lvctc/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace lvctc {

RunConfig gradcheck_config() {
  RunConfig c;
  c.model.L_enc = 2;
  c.model.L_dec = 2;
  c.model.L_pst = 1;
  c.model.l = 1;
  c.model.m = 1;
  c.model.d_lat = 4;
  c.model.block.d_att = 8;
  c.model.block.n_heads = 2;
  c.model.block.d_ff = 8;
  c.model.block.conv_kernel = 3;
  c.model.block.dropout_rate = 0.1;
  c.model.token_mask_fraction = 0.10;
  c.data.vocab_size = 3;
  c.data.d_feat = 4;
  c.data.n_min = 2;
  c.data.n_max = 3;
  c.data.r_min = 2;
  c.data.r_max = 3;
  c.data.frame_repeat = 4;
  c.loss.free_bits = 0.0;
  c.train.seed = 5;
  c.finalize();
  return c;
}

Batch gradcheck_batch(const RunConfig &config) {
  SyntheticTask task(config.data);
  auto utts = task.generate_set(2, config.train.seed, "gc");
  return make_batch(std::span<const Utterance>(utts));
}

GradcheckReport run_gradcheck(LvCtcModel &model, const Batch &batch, const LossWeights &weights,
                              const ForwardContext &ctx, const GradcheckOptions &options) {
  ParameterSet &params = model.parameters();
  params.zero_grad();
  LossResult base = model.compute_losses(batch, weights, ctx);
  base.objective.backward();
  if (options.tamper) options.tamper(params);

  GradcheckReport report;
  report.losses = base.breakdown;
  const double floor = 1e-6 * std::max(1.0, std::abs(base.objective.item()));
  LossOptions frozen;
  frozen.frozen_teacher = base.teacher;
  auto objective = [&] { return model.compute_losses(batch, weights, ctx, frozen).objective.item(); };

  NoGradGuard no_grad;
  Rng rng(options.seed);
  for (auto &[name, leaf] : params.unique()) {
    GradcheckGroup g;
    g.name = name;
    g.size = leaf.numel();
    std::vector<std::size_t> idx(leaf.numel());
    std::iota(idx.begin(), idx.end(), 0);
    if (idx.size() > options.max_elements) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(options.max_elements);
      std::sort(idx.begin(), idx.end());
    }
    std::vector<double> analytic(leaf.numel(), 0.0);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
    auto data = leaf.mutable_data();
    for (std::size_t i : idx) {
      const double orig = data[i];
      auto at = [&](double offset) {
        data[i] = orig + offset;
        return objective();
      };
      const double h = options.h;
      const double numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
      data[i] = orig;
      const double err = std::abs(analytic[i] - numeric) /
                         std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      g.max_error = std::max(g.max_error, err);
      ++g.checked;
    }
    g.passed = g.max_error < options.tolerance;
    report.passed = report.passed && g.passed;
    report.max_error = std::max(report.max_error, g.max_error);
    report.groups.push_back(g);
  }
  return report;
}

}  // namespace lvctc
