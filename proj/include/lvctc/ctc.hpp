#pragma once

// CTC machinery: the collapse map, the log-space forward recursion, greedy
// decoding and an exhaustive reference used to check the recursion.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "lvctc/tensor.hpp"

namespace lvctc {

using TokenId = std::size_t;
using TokenSequence = std::vector<TokenId>;
// Frame-level symbols over {blank} ∪ V.
using Alignment = std::vector<TokenId>;

inline constexpr TokenId kBlank = 0;

// Merges runs of identical symbols, then drops blanks.
TokenSequence collapse(const Alignment &alignment);

// Blank-interleaved target of length 2N+1 with the allowed skip transitions.
struct ExpandedTarget {
  std::vector<TokenId> states;
  std::vector<bool> can_skip;  // transition s-2 -> s allowed

  explicit ExpandedTarget(const TokenSequence &target);
  std::size_t size() const { return states.size(); }
};

// Frames needed to emit `target`: N plus one blank between each repeated pair.
std::size_t ctc_min_frames(const TokenSequence &target);
bool ctc_feasible(std::size_t frames, const TokenSequence &target);

// log Σ_{A ∈ F⁻¹(target)} Π_t p(a_t). log_probs is [T', |V|+1]. Returns -inf
// for an infeasible target. Differentiable through the recursion.
Tensor ctc_log_likelihood(const Tensor &log_probs, const TokenSequence &target);

// Same value and gradient via a fused alpha/beta pass; used on the training
// hot path.
Tensor ctc_log_likelihood_fused(const Tensor &log_probs, const TokenSequence &target);

// Enumerates all (|V|+1)^T' alignments. Refuses search spaces above 1e7.
double ctc_brute_force(const Tensor &log_probs, const TokenSequence &target);

// Per-frame argmax (lowest id on ties), then collapse.
TokenSequence greedy_decode(const Tensor &log_probs);
Alignment best_path(const Tensor &log_probs);

}  // namespace lvctc

namespace lvctc {

struct OracleReport {
  std::size_t trials = 0;
  std::size_t failures = 0;
  std::size_t first_failure = 0;  // trial index, valid when failures > 0
  double max_error = 0.0;
};

// Random (T', |V|, target) instances, recursion vs enumeration. Trial i draws
// from a stream seeded by (seed, i), so any failure replays from its index.
OracleReport ctc_oracle(std::size_t trials, std::size_t max_frames, std::size_t max_vocab,
                        std::size_t max_target, std::uint64_t seed, double tolerance = 1e-9);

}  // namespace lvctc
