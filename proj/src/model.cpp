#include "lvctc/model.hpp"

#include <cmath>
#include <random>

namespace lvctc {

namespace {

std::string layer_site(const std::string &prefix, std::size_t i) {
  return prefix + ".layer" + std::to_string(i);
}

LatentGaussian gaussian_from_head(const Tensor &h, const GaussianHeadParams &head, Activation act) {
  Tensor mu = head.mean.out(activate(head.mean.in(h), act));
  Tensor logvar = head.logvar.out(activate(head.logvar.in(h), act));
  return {mu, exp(scale(logvar, 0.5))};
}

// Frame mean of a [B, U] tensor per utterance -> [B].
Tensor frame_mean(const Tensor &per_frame, const SequenceMask &mask) {
  if (per_frame.rank() != 2 || per_frame.dim(0) != mask.batch() ||
      per_frame.dim(1) != mask.max_len) {
    throw DimensionError("per-frame values " + shape_string(per_frame.shape()) +
                         " do not match the frame mask");
  }
  std::vector<double> factors(mask.batch() * mask.max_len, 0.0);
  for (std::size_t b = 0; b < mask.batch(); ++b) {
    if (mask.lengths[b] == 0) continue;
    for (std::size_t t = 0; t < mask.lengths[b]; ++t)
      factors[b * mask.max_len + t] = 1.0 / static_cast<double>(mask.lengths[b]);
  }
  return sum_last(mul_constant(per_frame, factors));
}

// Mean over the selected entries of a [B] tensor.
Tensor masked_batch_mean(const Tensor &values, const std::vector<bool> &included) {
  std::size_t n = 0;
  for (bool inc : included) n += inc;
  std::vector<double> w(included.size(), 0.0);
  for (std::size_t b = 0; b < included.size(); ++b)
    if (included[b]) w[b] = 1.0 / static_cast<double>(n);
  return sum(mul_constant(values, w));
}

Tensor batch_mean(const std::vector<Tensor> &scalars) {
  return scale(sum(stack(scalars)), 1.0 / static_cast<double>(scalars.size()));
}

Tensor utterance_rows(const Tensor &log_probs, std::size_t b, std::size_t len) {
  return narrow(select(log_probs, b), 0, 0, len);
}

void check_positive(const Tensor &sigma, const char *what) {
  for (double s : sigma.data()) {
    if (!(s > 0.0)) throw ContractError(std::string(what) + " has a non-positive sigma");
  }
}

void check_batch(const Batch &batch, const ModelConfig &cfg) {
  if (batch.size() == 0) throw ContractError("empty batch");
  if (batch.features.rank() != 3 || batch.features.dim(2) != cfg.d_feat) {
    throw DimensionError("batch features " + shape_string(batch.features.shape()) +
                         " do not match d_feat " + std::to_string(cfg.d_feat));
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (L_enc < 1) throw ConfigError("model.L_enc", "L_enc must be >= 1");
  if (L_dec < 1) throw ConfigError("model.L_dec", "L_dec must be >= 1");
  if (L_pst < 1) throw ConfigError("model.L_pst", "L_pst must be >= 1");
  if (l < 1 || l > L_enc) throw ConfigError("model.l", "l must lie in [1, L_enc]");
  if (m < 1 || m >= L_dec) throw ConfigError("model.m", "m must lie in [1, L_dec)");
  if (d_lat < 1) throw ConfigError("model.d_lat", "d_lat must be >= 1");
  if (vocab_size < 1) throw ConfigError("data.vocab_size", "vocab_size must be >= 1");
  if (d_feat < 1) throw ConfigError("data.d_feat", "d_feat must be >= 1");
  if (max_tokens < 1) throw ConfigError("model.max_tokens", "max_tokens must be >= 1");
  if (token_mask_fraction < 0.0 || token_mask_fraction > 1.0) {
    throw ConfigError("model.token_mask_fraction", "token_mask_fraction must lie in [0, 1]");
  }
  try {
    block.validate();
  } catch (const ContractError &e) {
    throw ConfigError("model.block", e.what());
  }
}

void LossWeights::validate() const {
  const std::pair<const char *, double> fields[] = {
      {"loss.dec", dec}, {"loss.kl", kl},   {"loss.cp", cp},
      {"loss.ic1", ic1}, {"loss.ic2", ic2}, {"loss.sd", sd},
      {"loss.free_bits", free_bits}};
  for (auto [name, v] : fields) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(name, "loss weights must be finite and >= 0");
  }
}

double LossBreakdown::recompose(const LossWeights &w) const {
  double t = w.dec * elbo_dec + w.cp * ctc_cp + w.ic1 * ictc_prior + w.ic2 * ictc_pst + w.sd * sd;
  if (!kl_gated) t -= w.kl * kl;
  return t;
}

// ---- free functions -----------------------------------------------------------

Tensor gaussian_kl_per_utterance(const LatentGaussian &q, const LatentGaussian &p,
                                 const SequenceMask &mask) {
  if (q.mu.shape() != p.mu.shape() || q.sigma.shape() != q.mu.shape() ||
      p.sigma.shape() != p.mu.shape()) {
    throw DimensionError("gaussian_kl: shapes " + shape_string(q.mu.shape()) + " and " +
                         shape_string(p.mu.shape()) + " differ");
  }
  if (q.mu.rank() != 3) throw DimensionError("gaussian_kl expects [B, U, d_lat]");
  check_positive(q.sigma, "gaussian_kl: q");
  check_positive(p.sigma, "gaussian_kl: p");
  Tensor log_ratio = sub(log(p.sigma), log(q.sigma));
  Tensor quad = div(add(square(q.sigma), square(sub(q.mu, p.mu))), scale(square(p.sigma), 2.0));
  Tensor per_frame = sum_last(add_scalar(add(log_ratio, quad), -0.5));
  return frame_mean(per_frame, mask);
}

Tensor gaussian_kl(const LatentGaussian &q, const LatentGaussian &p, const SequenceMask &mask) {
  Tensor per = gaussian_kl_per_utterance(q, p, mask);
  return scale(sum(per), 1.0 / static_cast<double>(per.numel()));
}

Tensor self_distillation_per_utterance(const Tensor &student_logp, const Tensor &teacher_logp,
                                       const SequenceMask &mask) {
  if (student_logp.shape() != teacher_logp.shape() || student_logp.rank() != 3) {
    throw DimensionError("self_distillation: shapes " + shape_string(student_logp.shape()) +
                         " and " + shape_string(teacher_logp.shape()));
  }
  Tensor teacher = teacher_logp.detach();
  Tensor per_frame = sum_last(mul(exp(student_logp), sub(student_logp, teacher)));
  return scale(frame_mean(per_frame, mask), -1.0);
}

Tensor self_distillation_loss(const Tensor &student_logp, const Tensor &teacher_logp,
                              const SequenceMask &mask) {
  Tensor per = self_distillation_per_utterance(student_logp, teacher_logp, mask);
  return scale(sum(per), 1.0 / static_cast<double>(per.numel()));
}

Tensor sample_latent(const LatentGaussian &g, Rng &rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> eps(g.mu.numel());
  for (double &e : eps) e = normal(rng);
  return add(g.mu, mul(g.sigma, Tensor::from(g.mu.shape(), std::move(eps))));
}

Batch single_utterance_batch(const Tensor &features, const TokenSequence &tokens) {
  if (features.rank() != 2) throw DimensionError("expected features [T, d_feat]");
  Utterance u{"utt", features, tokens};
  return make_batch(std::span<const Utterance>(&u, 1));
}

// ---- LvCtcModel -----------------------------------------------------------------

LvCtcModel::LvCtcModel(const ModelConfig &config, std::uint64_t seed) : config_(config) {
  config_.validate();
  ParamBuilder pb(params_, seed);
  const auto &blk = config_.block;
  frontend_ = make_frontend(pb, "frontend", config_.d_feat, blk);
  for (std::size_t i = 0; i < config_.L_enc; ++i)
    prior_layers_.push_back(make_conformer_layer(pb, layer_site("prior", i), blk));
  prior_head_ = make_gaussian_head(pb, "prior.head", blk, config_.d_lat);

  token_table_ = pb.make("posterior.embed", {config_.output_size(), blk.d_att}, Init::normal, 1.0);
  token_positions_ = pb.make("posterior.positions", {config_.max_tokens, blk.d_att}, Init::normal, 0.1);
  for (std::size_t i = 0; i < config_.L_pst; ++i)
    posterior_layers_.push_back(make_cross_attention_layer(pb, layer_site("posterior", i), blk));
  posterior_head_ = make_gaussian_head(pb, "posterior.head", blk, config_.d_lat);

  lift_ = make_linear(pb, "decoder.lift", config_.d_lat, blk.d_att);
  for (std::size_t i = 0; i < config_.L_dec; ++i)
    decoder_layers_.push_back(make_conformer_layer(pb, layer_site("decoder", i), blk));
  out_ = make_linear(pb, "decoder.out", blk.d_att, config_.output_size());
  params_.alias("decoder.intermediate_out.weight", "decoder.out.weight");
  params_.alias("decoder.intermediate_out.bias", "decoder.out.bias");
  intermediate_out_ = {params_.get("decoder.intermediate_out.weight"),
                       params_.get("decoder.intermediate_out.bias")};
}

PriorOutputs LvCtcModel::prior_estimate(const Tensor &features, const SequenceMask &frames,
                                        const ForwardContext &ctx) const {
  PriorOutputs out;
  Tensor h = subsample_frontend(features, frames, frontend_, out.frames);
  for (std::size_t i = 0; i < prior_layers_.size(); ++i) {
    h = conformer_layer(h, out.frames, prior_layers_[i], config_.block, ctx, layer_site("prior", i));
    out.layers.push_back(h);
  }
  out.shared = out.layers[config_.l - 1];
  out.latent = gaussian_from_head(h, prior_head_, config_.block.head_activation);
  return out;
}

LatentGaussian LvCtcModel::posterior_estimate(const std::vector<TokenSequence> &tokens,
                                              const Tensor &shared, const SequenceMask &frames,
                                              const ForwardContext &ctx,
                                              std::span<const std::string> ids) const {
  if (tokens.size() != frames.batch()) {
    throw DimensionError("posterior: " + std::to_string(tokens.size()) + " token sequences for " +
                         std::to_string(frames.batch()) + " utterances");
  }
  std::vector<std::size_t> lengths;
  for (const auto &c : tokens) {
    if (c.empty()) throw ContractError("posterior needs at least one token per utterance");
    lengths.push_back(c.size());
  }
  const SequenceMask token_mask(lengths);
  const std::size_t n_max = token_mask.max_len;
  if (n_max > config_.max_tokens) {
    throw ContractError("token sequence of length " + std::to_string(n_max) +
                        " exceeds max_tokens " + std::to_string(config_.max_tokens));
  }
  std::vector<std::size_t> padded(tokens.size() * n_max, 0);
  for (std::size_t b = 0; b < tokens.size(); ++b)
    for (std::size_t i = 0; i < tokens[b].size(); ++i) padded[b * n_max + i] = tokens[b][i];

  Tensor emb = embedding(token_table_, padded, {tokens.size(), n_max});
  if (ctx.training && config_.token_mask_fraction > 0.0) {
    std::vector<Rng> rngs;
    for (std::size_t b = 0; b < tokens.size(); ++b) {
      const std::string key = ids.empty() ? std::to_string(b) : ids[b];
      rngs.emplace_back(derive_seed(ctx.seed, "token_mask/" + key));
    }
    emb = token_time_mask(emb, token_mask, rngs, config_.token_mask_fraction);
  }
  emb = add_bias(emb, narrow(token_positions_, 0, 0, n_max));

  Tensor h = shared;
  for (std::size_t i = 0; i < posterior_layers_.size(); ++i) {
    h = transformer_ca_layer(h, frames, emb, token_mask, posterior_layers_[i], config_.block, ctx,
                             layer_site("posterior", i));
  }
  return gaussian_from_head(h, posterior_head_, config_.block.head_activation);
}

DecoderOutputs LvCtcModel::decode_alignment_logposterior(const Tensor &z, const SequenceMask &frames,
                                                         const ForwardContext &ctx,
                                                         const std::string &site) const {
  if (z.rank() != 3 || z.dim(2) != config_.d_lat) {
    throw DimensionError("decoder input " + shape_string(z.shape()) + " needs d_lat " +
                         std::to_string(config_.d_lat));
  }
  DecoderOutputs out;
  Tensor h = lift_(z);
  for (std::size_t i = 0; i < decoder_layers_.size(); ++i) {
    h = conformer_layer(h, frames, decoder_layers_[i], config_.block, ctx, layer_site(site, i));
    if (i + 1 == config_.m) out.intermediate = h;
  }
  out.log_probs = log_softmax(out_(h));
  out.intermediate_log_probs = log_softmax(intermediate_out_(out.intermediate));
  return out;
}

DecoderOutputs LvCtcModel::compat_alignment_logposterior(const Tensor &mu_prior,
                                                         const SequenceMask &frames,
                                                         const ForwardContext &ctx) const {
  return decode_alignment_logposterior(mu_prior, frames, ctx, "decoder.compat");
}

LossResult LvCtcModel::compute_losses(const Batch &batch, const LossWeights &weights,
                                      const ForwardContext &ctx, const LossOptions &options) {
  check_batch(batch, config_);
  LossResult result;
  PriorOutputs prior = prior_estimate(batch.features, batch.frames, ctx);
  const SequenceMask &frames = prior.frames;
  const std::size_t B = batch.size();

  std::vector<bool> included(B);
  std::size_t n_included = 0;
  for (std::size_t b = 0; b < B; ++b) {
    included[b] = !batch.tokens[b].empty() && ctc_feasible(frames.lengths[b], batch.tokens[b]);
    if (included[b]) ++n_included;
    else result.skipped.push_back(batch.ids[b]);
  }
  if (n_included == 0) {
    result.objective = Tensor::scalar(0.0);
    return result;
  }

  // Empty token sequences cannot be attended to; give them a placeholder
  // token, their terms are excluded anyway.
  std::vector<TokenSequence> tokens = batch.tokens;
  for (auto &c : tokens)
    if (c.empty()) c = {1};
  LatentGaussian posterior = posterior_estimate(tokens, prior.shared, frames, ctx, batch.ids);

  LatentGaussian to_sample = posterior;
  if (options.posterior_override) options.posterior_override(to_sample, prior.latent);
  std::vector<double> eps(to_sample.mu.numel(), 0.0);
  const std::size_t d_lat = config_.d_lat;
  for (std::size_t b = 0; b < B; ++b) {
    Rng rng(derive_seed(ctx.seed, "latent/" + batch.ids[b]));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i < frames.lengths[b] * d_lat; ++i)
      eps[b * frames.max_len * d_lat + i] = normal(rng);
  }
  Tensor z = add(to_sample.mu, mul(to_sample.sigma, Tensor::from(to_sample.mu.shape(), std::move(eps))));

  DecoderOutputs dec = decode_alignment_logposterior(z, frames, ctx, "decoder.sampled");
  DecoderOutputs cmp = compat_alignment_logposterior(prior.latent.mu, frames, ctx);

  std::vector<Tensor> elbo, cp, ic1, ic2;
  for (std::size_t b = 0; b < B; ++b) {
    if (!included[b]) continue;
    const std::size_t len = frames.lengths[b];
    const auto &target = batch.tokens[b];
    elbo.push_back(ctc_log_likelihood_fused(utterance_rows(dec.log_probs, b, len), target));
    cp.push_back(ctc_log_likelihood_fused(utterance_rows(cmp.log_probs, b, len), target));
    ic1.push_back(ctc_log_likelihood_fused(utterance_rows(cmp.intermediate_log_probs, b, len), target));
    ic2.push_back(ctc_log_likelihood_fused(utterance_rows(dec.intermediate_log_probs, b, len), target));
  }
  Tensor kl_u = gaussian_kl_per_utterance(posterior, prior.latent, frames);
  result.teacher = options.frozen_teacher.defined() ? options.frozen_teacher : dec.log_probs.detach();
  Tensor sd_u = self_distillation_per_utterance(cmp.log_probs, result.teacher, frames);

  Tensor elbo_m = batch_mean(elbo), cp_m = batch_mean(cp), ic1_m = batch_mean(ic1),
         ic2_m = batch_mean(ic2);
  Tensor kl_m = masked_batch_mean(kl_u, included);
  Tensor sd_m = masked_batch_mean(sd_u, included);

  LossBreakdown &bd = result.breakdown;
  bd.elbo_dec = elbo_m.item();
  bd.kl = kl_m.item();
  bd.ctc_cp = cp_m.item();
  bd.ictc_prior = ic1_m.item();
  bd.ictc_pst = ic2_m.item();
  bd.sd = sd_m.item();
  bd.kl_gated = bd.kl < weights.free_bits;
  bd.total = bd.recompose(weights);

  Tensor objective;
  auto accumulate = [&](double w, const Tensor &term) {
    if (w == 0.0) return;
    Tensor t = scale(term, w);
    objective = objective.defined() ? add(objective, t) : t;
  };
  accumulate(weights.dec, elbo_m);
  if (!bd.kl_gated) accumulate(-weights.kl, kl_m);
  accumulate(weights.cp, cp_m);
  accumulate(weights.ic1, ic1_m);
  accumulate(weights.ic2, ic2_m);
  accumulate(weights.sd, sd_m);
  result.objective = objective.defined() ? objective : Tensor::scalar(0.0);

  std::size_t k = 0;
  for (std::size_t b = 0; b < B; ++b) {
    if (!included[b]) continue;
    UtteranceTerms u;
    u.id = batch.ids[b];
    u.elbo_dec = elbo[k].item();
    u.ctc_cp = cp[k].item();
    u.ictc_prior = ic1[k].item();
    u.ictc_pst = ic2[k].item();
    u.kl = kl_u.data()[b];
    u.sd = sd_u.data()[b];
    result.utterances.push_back(u);
    ++k;
  }
  return result;
}

// ---- CtcModel -------------------------------------------------------------------

CtcModel::CtcModel(const ModelConfig &config, std::uint64_t seed) : config_(config) {
  config_.validate();
  ParamBuilder pb(params_, seed);
  const auto &blk = config_.block;
  frontend_ = make_frontend(pb, "frontend", config_.d_feat, blk);
  for (std::size_t i = 0; i < config_.L_enc; ++i)
    prior_layers_.push_back(make_conformer_layer(pb, layer_site("prior", i), blk));
  prior_mean_ = make_feed_forward(pb, "prior.head.mean", blk.d_att, blk.d_ff, config_.d_lat);
  lift_ = make_linear(pb, "decoder.lift", config_.d_lat, blk.d_att);
  for (std::size_t i = 0; i < config_.L_dec; ++i)
    decoder_layers_.push_back(make_conformer_layer(pb, layer_site("decoder", i), blk));
  out_ = make_linear(pb, "decoder.out", blk.d_att, config_.output_size());
}

Tensor CtcModel::log_probs(const Tensor &features, const SequenceMask &frames,
                           const ForwardContext &ctx, SequenceMask &out_frames) const {
  Tensor h = subsample_frontend(features, frames, frontend_, out_frames);
  for (std::size_t i = 0; i < prior_layers_.size(); ++i)
    h = conformer_layer(h, out_frames, prior_layers_[i], config_.block, ctx, layer_site("prior", i));
  const Activation act = config_.block.head_activation;
  h = lift_(prior_mean_.out(activate(prior_mean_.in(h), act)));
  for (std::size_t i = 0; i < decoder_layers_.size(); ++i)
    h = conformer_layer(h, out_frames, decoder_layers_[i], config_.block, ctx,
                        layer_site("decoder.compat", i));
  return log_softmax(out_(h));
}

LossResult CtcModel::compute_losses(const Batch &batch, const LossWeights &,
                                    const ForwardContext &ctx, const LossOptions &) {
  check_batch(batch, config_);
  LossResult result;
  SequenceMask frames;
  Tensor lp = log_probs(batch.features, batch.frames, ctx, frames);
  std::vector<Tensor> cp;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch.tokens[b].empty() || !ctc_feasible(frames.lengths[b], batch.tokens[b])) {
      result.skipped.push_back(batch.ids[b]);
      continue;
    }
    cp.push_back(ctc_log_likelihood_fused(utterance_rows(lp, b, frames.lengths[b]), batch.tokens[b]));
    UtteranceTerms u;
    u.id = batch.ids[b];
    u.ctc_cp = cp.back().item();
    result.utterances.push_back(u);
  }
  if (cp.empty()) {
    result.objective = Tensor::scalar(0.0);
    return result;
  }
  Tensor cp_m = batch_mean(cp);
  result.breakdown.ctc_cp = cp_m.item();
  result.breakdown.total = result.breakdown.ctc_cp;
  result.objective = cp_m;
  return result;
}

}  // namespace lvctc
