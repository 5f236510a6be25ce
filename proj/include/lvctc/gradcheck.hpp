#pragma once

// Finite-difference check of every parameter leaf through compute_losses.

#include <functional>
#include <string>
#include <vector>

#include "lvctc/config.hpp"
#include "lvctc/model.hpp"

namespace lvctc {

struct GradcheckOptions {
  double h = 1e-5;
  double tolerance = 1e-4;
  std::size_t max_elements = 32;  // sampled per leaf when it has more
  std::uint64_t seed = 1;
  // Runs after backward; lets tests corrupt the analytic gradients.
  std::function<void(ParameterSet &)> tamper;
};

struct GradcheckGroup {
  std::string name;
  std::size_t checked = 0;
  std::size_t size = 0;
  double max_error = 0.0;
  bool passed = true;
};

struct GradcheckReport {
  std::vector<GradcheckGroup> groups;
  LossBreakdown losses;
  bool passed = true;
  double max_error = 0.0;
};

// Miniature model (d_att=8, 2 heads, L_enc=2, L_dec=2, L_pst=1, d_lat=4) with
// b=0 so the KL term stays on the graph.
RunConfig gradcheck_config();
// Two short utterances from the config's synthetic task.
Batch gradcheck_batch(const RunConfig &config);

GradcheckReport run_gradcheck(LvCtcModel &model, const Batch &batch, const LossWeights &weights,
                              const ForwardContext &ctx, const GradcheckOptions &options = {});

}  // namespace lvctc
