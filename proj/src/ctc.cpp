#include "lvctc/ctc.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>

#include "lvctc/ops.hpp"
#include "lvctc/random.hpp"

namespace lvctc {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

void check_log_probs(const Tensor &log_probs, const TokenSequence &target) {
  if (log_probs.rank() != 2) {
    throw DimensionError("CTC log-probs must be [T, V+1], got " +
                         shape_string(log_probs.shape()));
  }
  const std::size_t width = log_probs.dim(1);
  for (TokenId c : target) {
    if (c == kBlank || c >= width) {
      throw IndexError("CTC target id " + std::to_string(c) + " outside [1, " +
                       std::to_string(width - 1) + "]");
    }
  }
}

}  // namespace

TokenSequence collapse(const Alignment &alignment) {
  TokenSequence out;
  TokenId prev = kBlank;
  bool first = true;
  for (TokenId a : alignment) {
    if ((first || a != prev) && a != kBlank) out.push_back(a);
    prev = a;
    first = false;
  }
  return out;
}

ExpandedTarget::ExpandedTarget(const TokenSequence &target) {
  states.assign(2 * target.size() + 1, kBlank);
  can_skip.assign(states.size(), false);
  for (std::size_t i = 0; i < target.size(); ++i) states[2 * i + 1] = target[i];
  for (std::size_t s = 2; s < states.size(); ++s) {
    can_skip[s] = states[s] != kBlank && states[s] != states[s - 2];
  }
}

std::size_t ctc_min_frames(const TokenSequence &target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i) {
    if (target[i] == target[i - 1]) ++n;
  }
  return n;
}

bool ctc_feasible(std::size_t frames, const TokenSequence &target) {
  return ctc_min_frames(target) <= frames;
}

Tensor ctc_log_likelihood(const Tensor &log_probs, const TokenSequence &target) {
  check_log_probs(log_probs, target);
  const std::size_t frames = log_probs.dim(0);
  if (frames == 0 || !ctc_feasible(frames, target)) return Tensor::scalar(kNegInf);

  const ExpandedTarget ext(target);
  const std::size_t s_len = ext.size();
  std::vector<std::uint8_t> not_start(s_len, 0), no_skip(s_len, 0);
  for (std::size_t s = 0; s < s_len; ++s) {
    not_start[s] = s >= 2;
    no_skip[s] = !ext.can_skip[s];
  }

  Tensor alpha = masked_fill(index_select_last(select(log_probs, 0), ext.states),
                             not_start, kNegInf);
  for (std::size_t t = 1; t < frames; ++t) {
    const Tensor stay = alpha;
    const Tensor advance = shift_right(alpha, 1, kNegInf);
    const Tensor skip = masked_fill(shift_right(alpha, 2, kNegInf), no_skip, kNegInf);
    const Tensor emit = index_select_last(select(log_probs, t), ext.states);
    alpha = add(logsumexp(stack({stay, advance, skip}), 0), emit);
  }
  if (s_len == 1) return reshape(alpha, {});
  const std::vector<std::size_t> ends{s_len - 1, s_len - 2};
  return logsumexp(index_select_last(alpha, ends), 0);
}

Tensor ctc_log_likelihood_fused(const Tensor &log_probs, const TokenSequence &target) {
  check_log_probs(log_probs, target);
  const std::size_t frames = log_probs.dim(0);
  if (frames == 0 || !ctc_feasible(frames, target)) return Tensor::scalar(kNegInf);

  const ExpandedTarget ext(target);
  const std::size_t s_len = ext.size();
  const std::size_t width = log_probs.dim(1);
  const auto lp = log_probs.data();
  auto emit = [&](std::size_t t, std::size_t s) { return lp[t * width + ext.states[s]]; };

  std::vector<double> alpha(frames * s_len, kNegInf);
  alpha[0] = emit(0, 0);
  if (s_len > 1) alpha[1] = emit(0, 1);
  for (std::size_t t = 1; t < frames; ++t) {
    for (std::size_t s = 0; s < s_len; ++s) {
      double a = alpha[(t - 1) * s_len + s];
      if (s >= 1) a = log_add(a, alpha[(t - 1) * s_len + s - 1]);
      if (ext.can_skip[s]) a = log_add(a, alpha[(t - 1) * s_len + s - 2]);
      alpha[t * s_len + s] = a == kNegInf ? kNegInf : a + emit(t, s);
    }
  }
  const std::size_t last = (frames - 1) * s_len;
  const double ll = s_len == 1 ? alpha[last] : log_add(alpha[last + s_len - 1], alpha[last + s_len - 2]);

  return Tensor::make_result(
      {}, {ll}, {log_probs},
      [alpha = std::move(alpha), ext, frames, width, ll](Tensor::Node &self) {
        const std::size_t s_len = ext.size();
        const auto &lp = self.parents[0]->value;
        auto emit = [&](std::size_t t, std::size_t s) { return lp[t * width + ext.states[s]]; };
        std::vector<double> beta(frames * s_len, kNegInf);
        const std::size_t last = (frames - 1) * s_len;
        beta[last + s_len - 1] = emit(frames - 1, s_len - 1);
        if (s_len > 1) beta[last + s_len - 2] = emit(frames - 1, s_len - 2);
        for (std::size_t t = frames - 1; t-- > 0;) {
          for (std::size_t s = 0; s < s_len; ++s) {
            double b = beta[(t + 1) * s_len + s];
            if (s + 1 < s_len) b = log_add(b, beta[(t + 1) * s_len + s + 1]);
            if (s + 2 < s_len && ext.can_skip[s + 2]) b = log_add(b, beta[(t + 1) * s_len + s + 2]);
            beta[t * s_len + s] = b == kNegInf ? kNegInf : b + emit(t, s);
          }
        }
        auto &g = self.parents[0]->grad_buffer();
        const double gy = self.grad[0];
        for (std::size_t t = 0; t < frames; ++t) {
          for (std::size_t s = 0; s < s_len; ++s) {
            const double a = alpha[t * s_len + s];
            const double b = beta[t * s_len + s];
            if (a == kNegInf || b == kNegInf) continue;
            g[t * width + ext.states[s]] += gy * std::exp(a + b - emit(t, s) - ll);
          }
        }
      });
}

double ctc_brute_force(const Tensor &log_probs, const TokenSequence &target) {
  check_log_probs(log_probs, target);
  const std::size_t frames = log_probs.dim(0);
  const std::size_t width = log_probs.dim(1);
  double space = 1.0;
  for (std::size_t t = 0; t < frames; ++t) space *= static_cast<double>(width);
  if (space > 1e7) {
    throw ContractError("ctc_brute_force: " + std::to_string(width) + "^" +
                        std::to_string(frames) + " alignments exceeds the 1e7 limit");
  }
  const auto lp = log_probs.data();
  Alignment a(frames, 0);
  double total = kNegInf;
  while (true) {
    if (collapse(a) == target) {
      double score = 0.0;
      for (std::size_t t = 0; t < frames; ++t) score += lp[t * width + a[t]];
      total = log_add(total, score);
    }
    std::size_t t = 0;
    while (t < frames && ++a[t] == width) a[t++] = 0;
    if (t == frames) break;
  }
  return total;
}

Alignment best_path(const Tensor &log_probs) {
  if (log_probs.rank() != 2) {
    throw DimensionError("greedy decoding needs [T, V+1] log-probs, got " +
                         shape_string(log_probs.shape()));
  }
  const std::size_t frames = log_probs.dim(0), width = log_probs.dim(1);
  const auto lp = log_probs.data();
  Alignment path(frames, kBlank);
  for (std::size_t t = 0; t < frames; ++t) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < width; ++k) {
      if (lp[t * width + k] > lp[t * width + best]) best = k;
    }
    path[t] = best;
  }
  return path;
}

TokenSequence greedy_decode(const Tensor &log_probs) { return collapse(best_path(log_probs)); }

OracleReport ctc_oracle(std::size_t trials, std::size_t max_frames, std::size_t max_vocab,
                        std::size_t max_target, std::uint64_t seed, double tolerance) {
  if (max_frames < 1 || max_vocab < 1) throw ContractError("ctc_oracle: max_frames and max_vocab must be >= 1");
  OracleReport report;
  for (std::size_t i = 0; i < trials; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    const std::size_t frames = std::uniform_int_distribution<std::size_t>(1, max_frames)(rng);
    const std::size_t vocab = std::uniform_int_distribution<std::size_t>(1, max_vocab)(rng);
    const std::size_t len = std::uniform_int_distribution<std::size_t>(0, max_target)(rng);
    TokenSequence target(len);
    for (auto &c : target) c = std::uniform_int_distribution<TokenId>(1, vocab)(rng);
    std::normal_distribution<double> normal(0.0, 1.5);
    std::vector<double> logits(frames * (vocab + 1));
    for (double &v : logits) v = normal(rng);
    Tensor lp = log_softmax(Tensor::from({frames, vocab + 1}, std::move(logits)));

    const double oracle = ctc_brute_force(lp, target);
    const double dp = ctc_log_likelihood(lp, target).item();
    double err = 0.0;
    if (oracle == kNegInf || dp == kNegInf) {
      err = oracle == dp ? 0.0 : std::numeric_limits<double>::infinity();
    } else {
      err = std::abs(dp - oracle);
    }
    ++report.trials;
    report.max_error = std::max(report.max_error, err);
    if (!(err < tolerance)) {
      if (report.failures == 0) report.first_failure = i;
      ++report.failures;
    }
  }
  return report;
}

}  // namespace lvctc
