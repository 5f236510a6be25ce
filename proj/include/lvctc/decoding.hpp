#pragma once

// Inference: single-step greedy decoding through the prior mean, iterative
// refinement through the posterior mean, and error-rate scoring.

#include <vector>

#include "lvctc/model.hpp"

namespace lvctc {

struct DecodeTrace {
  std::vector<TokenSequence> hypotheses;  // [0] is the single-step result
  std::vector<Tensor> log_probs;          // [U, |V|+1] per entry
  bool converged = false;
  std::size_t iterations = 0;             // refinement passes executed

  const TokenSequence &final_hypothesis() const { return hypotheses.back(); }
};

// features: [T, d_feat]
TokenSequence decode_single_step(const LvCtcModel &model, const Tensor &features);
DecodeTrace decode_iterative(const LvCtcModel &model, const Tensor &features, std::size_t iterations);

std::size_t edit_distance(const TokenSequence &a, const TokenSequence &b);
double error_rate(const std::vector<TokenSequence> &refs, const std::vector<TokenSequence> &hyps);

}  // namespace lvctc
