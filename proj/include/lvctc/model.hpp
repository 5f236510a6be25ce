#pragma once

// The latent-variable CTC model: prior estimator, posterior estimator sharing
// the prior's l-th layer, a CTC decoder over latents, and the training
// objective built from their outputs.

#include <functional>
#include <string>
#include <vector>

#include "lvctc/blocks.hpp"
#include "lvctc/ctc.hpp"
#include "lvctc/data.hpp"
#include "lvctc/optim.hpp"

namespace lvctc {

struct ModelConfig {
  std::size_t L_enc = 3;
  std::size_t L_dec = 4;
  std::size_t L_pst = 2;
  std::size_t l = 2;  // prior layer shared with the posterior (1-based)
  std::size_t m = 2;  // decoder layer feeding the intermediate CTC (1-based)
  std::size_t d_lat = 8;
  std::size_t vocab_size = 8;
  std::size_t d_feat = 16;
  std::size_t max_tokens = 64;
  double token_mask_fraction = 0.10;
  BlockConfig block;

  void validate() const;
  std::size_t output_size() const { return vocab_size + 1; }
};

struct LatentGaussian {
  Tensor mu;     // [B, U, d_lat]
  Tensor sigma;  // [B, U, d_lat], > 0
};

struct LossWeights {
  double dec = 0.073;
  double kl = 0.1;
  double cp = 0.656;
  double ic1 = 0.008;
  double ic2 = 0.073;
  double sd = 0.090;
  double free_bits = 0.5;

  void validate() const;
};

// Batch means of the six terms, and their weighted total (to be maximized).
struct LossBreakdown {
  double elbo_dec = 0.0;
  double kl = 0.0;
  double ctc_cp = 0.0;
  double ictc_prior = 0.0;
  double ictc_pst = 0.0;
  double sd = 0.0;
  double total = 0.0;
  bool kl_gated = false;  // true when kl < b removed the KL term

  double recompose(const LossWeights &w) const;
};

struct UtteranceTerms {
  std::string id;
  double elbo_dec = 0.0, kl = 0.0, ctc_cp = 0.0, ictc_prior = 0.0, ictc_pst = 0.0, sd = 0.0;
};

struct LossResult {
  LossBreakdown breakdown;
  Tensor objective;  // scalar; only terms with nonzero weight are on the graph
  std::vector<UtteranceTerms> utterances;
  std::vector<std::string> skipped;  // ids with infeasible CTC targets
  Tensor teacher;                    // detached self-distillation teacher
};

struct PriorOutputs {
  LatentGaussian latent;
  std::vector<Tensor> layers;  // output of every prior layer
  Tensor shared;               // layers[l-1]
  SequenceMask frames;         // subsampled lengths
};

struct DecoderOutputs {
  Tensor log_probs;               // [B, U, |V|+1]
  Tensor intermediate;            // decoder layer m output
  Tensor intermediate_log_probs;  // shared output head over `intermediate`
};

// Replaces the posterior before sampling; a white-box hook for tests.
using PosteriorOverride = std::function<void(LatentGaussian &posterior, const LatentGaussian &prior)>;

struct LossOptions {
  PosteriorOverride posterior_override;
  // Fixed self-distillation teacher [B, U, |V|+1]. Finite-difference checks
  // need it: the teacher is a stop-gradient, so it must not move under
  // parameter perturbations either.
  Tensor frozen_teacher;
};

// Frame-averaged closed-form KL(q || p), summed over d_lat, then averaged
// over the batch.
Tensor gaussian_kl(const LatentGaussian &q, const LatentGaussian &p, const SequenceMask &mask);
// Per-utterance values [B] of the same quantity.
Tensor gaussian_kl_per_utterance(const LatentGaussian &q, const LatentGaussian &p,
                                 const SequenceMask &mask);

// -KL(student || teacher) per frame, averaged over frames and batch. The
// teacher is detached.
Tensor self_distillation_loss(const Tensor &student_logp, const Tensor &teacher_logp,
                              const SequenceMask &mask);
Tensor self_distillation_per_utterance(const Tensor &student_logp, const Tensor &teacher_logp,
                                       const SequenceMask &mask);

// mu + sigma ⊙ eps, eps ~ N(0, I) from `rng`.
Tensor sample_latent(const LatentGaussian &g, Rng &rng);

// Anything the trainer can optimize.
class TrainableModel {
 public:
  virtual ~TrainableModel() = default;
  virtual ParameterSet &parameters() = 0;
  virtual const ModelConfig &config() const = 0;
  virtual LossResult compute_losses(const Batch &batch, const LossWeights &weights,
                                    const ForwardContext &ctx, const LossOptions &options = {}) = 0;
};

class LvCtcModel : public TrainableModel {
 public:
  LvCtcModel(const ModelConfig &config, std::uint64_t seed);

  ParameterSet &parameters() override { return params_; }
  const ParameterSet &parameters() const { return params_; }
  const ModelConfig &config() const override { return config_; }

  PriorOutputs prior_estimate(const Tensor &features, const SequenceMask &frames,
                              const ForwardContext &ctx) const;
  LatentGaussian posterior_estimate(const std::vector<TokenSequence> &tokens,
                                    const Tensor &shared, const SequenceMask &frames,
                                    const ForwardContext &ctx,
                                    std::span<const std::string> ids = {}) const;
  DecoderOutputs decode_alignment_logposterior(const Tensor &z, const SequenceMask &frames,
                                               const ForwardContext &ctx,
                                               const std::string &site = "decoder.sampled") const;
  DecoderOutputs compat_alignment_logposterior(const Tensor &mu_prior, const SequenceMask &frames,
                                               const ForwardContext &ctx) const;

  LossResult compute_losses(const Batch &batch, const LossWeights &weights,
                            const ForwardContext &ctx, const LossOptions &options = {}) override;

 private:
  ModelConfig config_;
  ParameterSet params_;
  FrontendParams frontend_;
  std::vector<ConformerLayerParams> prior_layers_;
  GaussianHeadParams prior_head_;
  Tensor token_table_;
  Tensor token_positions_;
  std::vector<CrossAttentionLayerParams> posterior_layers_;
  GaussianHeadParams posterior_head_;
  Linear lift_;
  std::vector<ConformerLayerParams> decoder_layers_;
  Linear out_;
  Linear intermediate_out_;  // same leaves as out_
};

// Frontend, prior layers, prior mean head and decoder without the latent
// machinery: a plain CTC model. Parameter names match LvCtcModel, so both
// start from identical values for a given seed.
class CtcModel : public TrainableModel {
 public:
  CtcModel(const ModelConfig &config, std::uint64_t seed);

  ParameterSet &parameters() override { return params_; }
  const ModelConfig &config() const override { return config_; }

  Tensor log_probs(const Tensor &features, const SequenceMask &frames, const ForwardContext &ctx,
                   SequenceMask &out_frames) const;
  // Only ctc_cp and total are filled.
  LossResult compute_losses(const Batch &batch, const LossWeights &weights,
                            const ForwardContext &ctx, const LossOptions &options = {}) override;

 private:
  ModelConfig config_;
  ParameterSet params_;
  FrontendParams frontend_;
  std::vector<ConformerLayerParams> prior_layers_;
  FeedForward prior_mean_;
  Linear lift_;
  std::vector<ConformerLayerParams> decoder_layers_;
  Linear out_;
};

// Unbatched helper: [T, d_feat] -> [1, T, d_feat] with its mask.
Batch single_utterance_batch(const Tensor &features, const TokenSequence &tokens = {});

}  // namespace lvctc
