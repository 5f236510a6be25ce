#include "lvctc/decoding.hpp"

#include <algorithm>
#include <numeric>

namespace lvctc {

namespace {

Tensor first_utterance(const Tensor &log_probs, std::size_t frames) {
  return narrow(select(log_probs, 0), 0, 0, frames);
}

struct PriorPass {
  PriorOutputs prior;
  Tensor log_probs;
};

PriorPass run_prior(const LvCtcModel &model, const Tensor &features) {
  Batch batch = single_utterance_batch(features);
  const ForwardContext ctx{};
  PriorPass p;
  p.prior = model.prior_estimate(batch.features, batch.frames, ctx);
  auto out = model.compat_alignment_logposterior(p.prior.latent.mu, p.prior.frames, ctx);
  p.log_probs = first_utterance(out.log_probs, p.prior.frames.lengths[0]);
  return p;
}

}  // namespace

TokenSequence decode_single_step(const LvCtcModel &model, const Tensor &features) {
  NoGradGuard no_grad;
  return greedy_decode(run_prior(model, features).log_probs);
}

DecodeTrace decode_iterative(const LvCtcModel &model, const Tensor &features,
                             std::size_t iterations) {
  NoGradGuard no_grad;
  PriorPass p = run_prior(model, features);
  DecodeTrace trace;
  trace.hypotheses.push_back(greedy_decode(p.log_probs));
  trace.log_probs.push_back(p.log_probs);
  const ForwardContext ctx{};
  for (std::size_t k = 1; k <= iterations; ++k) {
    const TokenSequence &prev = trace.hypotheses.back();
    if (prev.empty()) {
      trace.converged = true;
      break;
    }
    if (prev.size() > model.config().max_tokens) break;
    LatentGaussian post = model.posterior_estimate({prev}, p.prior.shared, p.prior.frames, ctx);
    auto out = model.decode_alignment_logposterior(post.mu, p.prior.frames, ctx);
    Tensor lp = first_utterance(out.log_probs, p.prior.frames.lengths[0]);
    TokenSequence hyp = greedy_decode(lp);
    ++trace.iterations;
    const bool same = hyp == prev;
    trace.hypotheses.push_back(std::move(hyp));
    trace.log_probs.push_back(lp);
    if (same) {
      trace.converged = true;
      break;
    }
  }
  return trace;
}

std::size_t edit_distance(const TokenSequence &a, const TokenSequence &b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1])});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double error_rate(const std::vector<TokenSequence> &refs, const std::vector<TokenSequence> &hyps) {
  if (refs.size() != hyps.size()) {
    throw ContractError("error_rate: " + std::to_string(refs.size()) + " references but " +
                        std::to_string(hyps.size()) + " hypotheses");
  }
  std::size_t errors = 0, length = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    errors += edit_distance(refs[i], hyps[i]);
    length += refs[i].size();
  }
  if (length == 0) throw ContractError("error_rate: total reference length is zero");
  return static_cast<double>(errors) / static_cast<double>(length);
}

}  // namespace lvctc
