#pragma once

// Attention encoder building blocks over padded batches [B, T, d].

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "lvctc/ops.hpp"
#include "lvctc/optim.hpp"
#include "lvctc/random.hpp"

namespace lvctc {

struct BlockConfig {
  std::size_t d_att = 32;
  std::size_t n_heads = 2;
  std::size_t d_ff = 64;
  std::size_t conv_kernel = 7;
  double dropout_rate = 0.1;
  Activation ff_activation = Activation::swish;
  Activation head_activation = Activation::tanh;

  void validate() const;
};

// Valid lengths of a padded batch of sequences.
struct SequenceMask {
  std::vector<std::size_t> lengths;
  std::size_t max_len = 0;

  SequenceMask() = default;
  explicit SequenceMask(std::vector<std::size_t> lens);

  std::size_t batch() const { return lengths.size(); }
  bool valid(std::size_t b, std::size_t t) const { return t < lengths[b]; }
  // One factor per (b, t): 1 for real frames, 0 for padding.
  std::vector<double> row_factors() const;
  // Mask over [B, heads, queries, max_len] scores; 1 marks padded keys.
  std::vector<std::uint8_t> key_padding(std::size_t heads, std::size_t queries) const;
};

// Per-call dropout streams keyed by call site, so masks do not depend on how
// many other sites ran before.
struct ForwardContext {
  bool training = false;
  std::uint64_t seed = 0;

  Rng rng(std::string_view site) const { return Rng(derive_seed(seed, site)); }
};

Tensor apply_dropout(const Tensor &x, double rate, const ForwardContext &ctx,
                     std::string_view site);

// ---- parameters -------------------------------------------------------------

enum class Init { zeros, ones, xavier, fan_in, normal };

// Creates named leaves in a ParameterSet. Each leaf draws from its own stream
// seeded by (seed, name), so initial values do not depend on creation order.
class ParamBuilder {
 public:
  ParamBuilder(ParameterSet &set, std::uint64_t seed) : set_(set), seed_(seed) {}
  // fan_in: uniform ±1/sqrt(fan); normal: N(0, scale²).
  Tensor make(const std::string &name, const Shape &shape, Init init,
              double fan_or_scale = 1.0);

 private:
  ParameterSet &set_;
  std::uint64_t seed_;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out], may be undefined
  Tensor operator()(const Tensor &x) const { return linear(x, weight, bias); }
};

struct LayerNormParams {
  Tensor gain, bias;
  Tensor operator()(const Tensor &x) const { return layer_norm(x, gain, bias); }
};

struct FeedForward {
  Linear in, out;
};

struct AttentionParams {
  std::size_t heads = 1;
  Linear query, key, value, out;
  bool relative = false;
  Linear pos;              // relative-position projection (no bias)
  Tensor pos_bias_u;       // [d_att] content bias
  Tensor pos_bias_v;       // [d_att] position bias
};

struct ConvModuleParams {
  Linear pointwise_in;     // d -> 2d, followed by GLU
  Tensor depthwise_weight; // [d, K]
  Tensor depthwise_bias;   // [d]
  LayerNormParams depthwise_norm;
  Linear pointwise_out;    // d -> d
};

struct ConformerLayerParams {
  LayerNormParams ff1_norm;
  FeedForward ff1;
  LayerNormParams att_norm;
  AttentionParams att;
  LayerNormParams conv_norm;
  ConvModuleParams conv;
  LayerNormParams ff2_norm;
  FeedForward ff2;
  LayerNormParams final_norm;
};

struct CrossAttentionLayerParams {
  LayerNormParams self_norm;
  AttentionParams self_att;
  LayerNormParams cross_norm;
  AttentionParams cross_att;
  LayerNormParams ff_norm;
  FeedForward ff;
  LayerNormParams final_norm;
};

struct FrontendParams {
  Tensor conv1_weight, conv1_bias;  // [C, d_feat, 3]
  Tensor conv2_weight, conv2_bias;  // [C, C, 3]
  Linear out;                       // C -> d_att
};

// Two independent one-hidden-layer networks: mean and log-variance.
struct GaussianHeadParams {
  FeedForward mean, logvar;
};

Linear make_linear(ParamBuilder &pb, const std::string &name, std::size_t in,
                   std::size_t out, bool bias = true);
LayerNormParams make_layer_norm(ParamBuilder &pb, const std::string &name, std::size_t d);
FeedForward make_feed_forward(ParamBuilder &pb, const std::string &name, std::size_t d,
                              std::size_t hidden, std::size_t out);
AttentionParams make_attention(ParamBuilder &pb, const std::string &name,
                               const BlockConfig &cfg, bool relative);
ConformerLayerParams make_conformer_layer(ParamBuilder &pb, const std::string &name,
                                          const BlockConfig &cfg);
CrossAttentionLayerParams make_cross_attention_layer(ParamBuilder &pb, const std::string &name,
                                                     const BlockConfig &cfg);
FrontendParams make_frontend(ParamBuilder &pb, const std::string &name, std::size_t d_feat,
                             const BlockConfig &cfg);
GaussianHeadParams make_gaussian_head(ParamBuilder &pb, const std::string &name,
                                      const BlockConfig &cfg, std::size_t d_lat);

// ---- blocks -------------------------------------------------------------------

// Multi-head scaled dot-product attention without residual. `weights`, when
// non-null, receives the [B, H, Tq, Tk] attention probabilities.
Tensor multi_head_attention(const Tensor &query_src, const Tensor &kv_src,
                            const SequenceMask &kv_mask, const AttentionParams &p,
                            Tensor *weights = nullptr);

// Sinusoidal encodings for offsets T-1 down to -(T-1): [2T-1, d].
Tensor relative_positions(std::size_t length, std::size_t d);

// x + dropout(MHSA_rel(LN(x)))
Tensor self_attention_rel(const Tensor &x, const SequenceMask &mask,
                          const LayerNormParams &norm, const AttentionParams &p,
                          double dropout_rate, const ForwardContext &ctx,
                          const std::string &site, Tensor *weights = nullptr);

// q + dropout(MHA(LN(q), kv)); output keeps the query length.
Tensor cross_attention(const Tensor &q_src, const Tensor &kv_src,
                       const SequenceMask &kv_mask, const LayerNormParams &norm,
                       const AttentionParams &p, double dropout_rate,
                       const ForwardContext &ctx, const std::string &site,
                       Tensor *weights = nullptr);

Tensor feed_forward(const Tensor &x, const FeedForward &ff, Activation act,
                    double dropout_rate, const ForwardContext &ctx, const std::string &site);

Tensor conformer_layer(const Tensor &x, const SequenceMask &mask,
                       const ConformerLayerParams &p, const BlockConfig &cfg,
                       const ForwardContext &ctx, const std::string &site);

Tensor transformer_ca_layer(const Tensor &q_src, const SequenceMask &q_mask,
                            const Tensor &kv_src, const SequenceMask &kv_mask,
                            const CrossAttentionLayerParams &p, const BlockConfig &cfg,
                            const ForwardContext &ctx, const std::string &site);

// Two stride-2, kernel-3, pad-1 convolutions with ReLU, then a linear map to
// d_att. Input [B, T, d_feat]; returns [B, T', d_att] and fills `out_mask`.
std::size_t subsampled_length(std::size_t frames);
Tensor subsample_frontend(const Tensor &x, const SequenceMask &mask,
                          const FrontendParams &p, SequenceMask &out_mask);

// [..., d_att] -> [..., 2·d_lat] holding mean then log-variance.
Tensor ff_head(const Tensor &h, const GaussianHeadParams &p, Activation act);

}  // namespace lvctc
