#include "lvctc/blocks.hpp"

#include <cmath>
#include <limits>
#include <random>

namespace lvctc {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}  // namespace

void BlockConfig::validate() const {
  if (d_att == 0 || n_heads == 0 || d_att % n_heads != 0) {
    throw ContractError("d_att (" + std::to_string(d_att) + ") must be divisible by n_heads (" +
                        std::to_string(n_heads) + ")");
  }
  if (conv_kernel % 2 == 0) {
    throw ContractError("conv_kernel must be odd, got " + std::to_string(conv_kernel));
  }
  if (d_ff == 0) throw ContractError("d_ff must be positive");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw ContractError("dropout_rate must lie in [0, 1)");
  }
}

SequenceMask::SequenceMask(std::vector<std::size_t> lens) : lengths(std::move(lens)) {
  for (std::size_t l : lengths) max_len = std::max(max_len, l);
}

std::vector<double> SequenceMask::row_factors() const {
  std::vector<double> f(batch() * max_len, 0.0);
  for (std::size_t b = 0; b < batch(); ++b)
    for (std::size_t t = 0; t < lengths[b]; ++t) f[b * max_len + t] = 1.0;
  return f;
}

std::vector<std::uint8_t> SequenceMask::key_padding(std::size_t heads, std::size_t queries) const {
  std::vector<std::uint8_t> m(batch() * heads * queries * max_len, 0);
  std::size_t i = 0;
  for (std::size_t b = 0; b < batch(); ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t q = 0; q < queries; ++q)
        for (std::size_t k = 0; k < max_len; ++k) m[i++] = k >= lengths[b];
  return m;
}

Tensor apply_dropout(const Tensor &x, double rate, const ForwardContext &ctx,
                     std::string_view site) {
  if (!ctx.training || rate == 0.0) return x;
  Rng rng = ctx.rng(site);
  return dropout(x, rate, rng, true);
}

// ---- parameters -------------------------------------------------------------

Tensor ParamBuilder::make(const std::string &name, const Shape &shape, Init init,
                          double fan_or_scale) {
  std::vector<double> v(shape_numel(shape), 0.0);
  Rng rng(derive_seed(seed_, name));
  switch (init) {
    case Init::zeros:
      break;
    case Init::ones:
      std::fill(v.begin(), v.end(), 1.0);
      break;
    case Init::xavier: {
      if (shape.size() != 2) throw ContractError("xavier init needs a 2-D shape for " + name);
      const double a = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
      std::uniform_real_distribution<double> u(-a, a);
      for (double &x : v) x = u(rng);
      break;
    }
    case Init::fan_in: {
      const double a = 1.0 / std::sqrt(fan_or_scale);
      std::uniform_real_distribution<double> u(-a, a);
      for (double &x : v) x = u(rng);
      break;
    }
    case Init::normal: {
      std::normal_distribution<double> n(0.0, fan_or_scale);
      for (double &x : v) x = n(rng);
      break;
    }
  }
  Tensor t = Tensor::from(shape, std::move(v), true);
  set_.add(name, t);
  return t;
}

Linear make_linear(ParamBuilder &pb, const std::string &name, std::size_t in,
                   std::size_t out, bool bias) {
  Linear l;
  l.weight = pb.make(name + ".weight", {in, out}, Init::xavier);
  if (bias) l.bias = pb.make(name + ".bias", {out}, Init::zeros);
  return l;
}

LayerNormParams make_layer_norm(ParamBuilder &pb, const std::string &name, std::size_t d) {
  return {pb.make(name + ".gain", {d}, Init::ones), pb.make(name + ".bias", {d}, Init::zeros)};
}

FeedForward make_feed_forward(ParamBuilder &pb, const std::string &name, std::size_t d,
                              std::size_t hidden, std::size_t out) {
  return {make_linear(pb, name + ".in", d, hidden), make_linear(pb, name + ".out", hidden, out)};
}

AttentionParams make_attention(ParamBuilder &pb, const std::string &name,
                               const BlockConfig &cfg, bool relative) {
  AttentionParams p;
  const std::size_t d = cfg.d_att;
  p.heads = cfg.n_heads;
  p.query = make_linear(pb, name + ".query", d, d);
  p.key = make_linear(pb, name + ".key", d, d);
  p.value = make_linear(pb, name + ".value", d, d);
  p.out = make_linear(pb, name + ".out", d, d);
  p.relative = relative;
  if (relative) {
    p.pos = make_linear(pb, name + ".pos", d, d, false);
    p.pos_bias_u = pb.make(name + ".pos_bias_u", {d}, Init::normal, 0.1);
    p.pos_bias_v = pb.make(name + ".pos_bias_v", {d}, Init::normal, 0.1);
  }
  return p;
}

ConformerLayerParams make_conformer_layer(ParamBuilder &pb, const std::string &name,
                                          const BlockConfig &cfg) {
  const std::size_t d = cfg.d_att;
  ConformerLayerParams p;
  p.ff1_norm = make_layer_norm(pb, name + ".ff1_norm", d);
  p.ff1 = make_feed_forward(pb, name + ".ff1", d, cfg.d_ff, d);
  p.att_norm = make_layer_norm(pb, name + ".att_norm", d);
  p.att = make_attention(pb, name + ".att", cfg, true);
  p.conv_norm = make_layer_norm(pb, name + ".conv_norm", d);
  p.conv.pointwise_in = make_linear(pb, name + ".conv.pointwise_in", d, 2 * d);
  p.conv.depthwise_weight = pb.make(name + ".conv.depthwise.weight", {d, cfg.conv_kernel},
                                    Init::fan_in, static_cast<double>(cfg.conv_kernel));
  p.conv.depthwise_bias = pb.make(name + ".conv.depthwise.bias", {d}, Init::zeros);
  p.conv.depthwise_norm = make_layer_norm(pb, name + ".conv.depthwise_norm", d);
  p.conv.pointwise_out = make_linear(pb, name + ".conv.pointwise_out", d, d);
  p.ff2_norm = make_layer_norm(pb, name + ".ff2_norm", d);
  p.ff2 = make_feed_forward(pb, name + ".ff2", d, cfg.d_ff, d);
  p.final_norm = make_layer_norm(pb, name + ".final_norm", d);
  return p;
}

CrossAttentionLayerParams make_cross_attention_layer(ParamBuilder &pb, const std::string &name,
                                                     const BlockConfig &cfg) {
  const std::size_t d = cfg.d_att;
  CrossAttentionLayerParams p;
  p.self_norm = make_layer_norm(pb, name + ".self_norm", d);
  p.self_att = make_attention(pb, name + ".self_att", cfg, true);
  p.cross_norm = make_layer_norm(pb, name + ".cross_norm", d);
  p.cross_att = make_attention(pb, name + ".cross_att", cfg, false);
  p.ff_norm = make_layer_norm(pb, name + ".ff_norm", d);
  p.ff = make_feed_forward(pb, name + ".ff", d, cfg.d_ff, d);
  p.final_norm = make_layer_norm(pb, name + ".final_norm", d);
  return p;
}

FrontendParams make_frontend(ParamBuilder &pb, const std::string &name, std::size_t d_feat,
                             const BlockConfig &cfg) {
  const std::size_t c = cfg.d_att;
  FrontendParams p;
  p.conv1_weight = pb.make(name + ".conv1.weight", {c, d_feat, 3}, Init::fan_in,
                           static_cast<double>(d_feat * 3));
  p.conv1_bias = pb.make(name + ".conv1.bias", {c}, Init::zeros);
  p.conv2_weight = pb.make(name + ".conv2.weight", {c, c, 3}, Init::fan_in,
                           static_cast<double>(c * 3));
  p.conv2_bias = pb.make(name + ".conv2.bias", {c}, Init::zeros);
  p.out = make_linear(pb, name + ".out", c, cfg.d_att);
  return p;
}

GaussianHeadParams make_gaussian_head(ParamBuilder &pb, const std::string &name,
                                      const BlockConfig &cfg, std::size_t d_lat) {
  return {make_feed_forward(pb, name + ".mean", cfg.d_att, cfg.d_ff, d_lat),
          make_feed_forward(pb, name + ".logvar", cfg.d_att, cfg.d_ff, d_lat)};
}

// ---- blocks -------------------------------------------------------------------

Tensor relative_positions(std::size_t length, std::size_t d) {
  const std::size_t rows = 2 * length - 1;
  std::vector<double> pe(rows * d);
  for (std::size_t r = 0; r < rows; ++r) {
    const double pos = static_cast<double>(length) - 1.0 - static_cast<double>(r);
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::exp(-static_cast<double>(i) * std::log(10000.0) / static_cast<double>(d));
      pe[r * d + i] = std::sin(pos * freq);
      if (i + 1 < d) pe[r * d + i + 1] = std::cos(pos * freq);
    }
  }
  return Tensor::from({rows, d}, std::move(pe));
}

Tensor multi_head_attention(const Tensor &query_src, const Tensor &kv_src,
                            const SequenceMask &kv_mask, const AttentionParams &p,
                            Tensor *weights) {
  if (query_src.rank() != 3 || kv_src.rank() != 3 || query_src.dim(0) != kv_src.dim(0)) {
    throw DimensionError("attention expects [B, T, d] inputs, got " +
                         shape_string(query_src.shape()) + " and " + shape_string(kv_src.shape()));
  }
  const std::size_t batch = query_src.dim(0), tq = query_src.dim(1), tk = kv_src.dim(1);
  if (kv_mask.batch() != batch || kv_mask.max_len != tk) {
    throw DimensionError("attention mask for " + std::to_string(kv_mask.batch()) + " x " +
                         std::to_string(kv_mask.max_len) + " does not match keys " +
                         shape_string(kv_src.shape()));
  }
  if (tk == 0) throw ContractError("attention over an empty key sequence");
  const std::size_t d = query_src.dim(2);
  const std::size_t heads = p.heads;
  const std::size_t dk = d / heads;

  Tensor q = p.query(query_src);
  Tensor k = split_heads(p.key(kv_src), heads);
  Tensor v = split_heads(p.value(kv_src), heads);
  Tensor scores;
  if (p.relative) {
    if (tq != tk) throw DimensionError("relative self-attention needs equal query/key lengths");
    Tensor content = matmul(split_heads(add_bias(q, p.pos_bias_u), heads), k, true);
    Tensor pos = split_heads(p.pos(relative_positions(tq, d)), heads);  // [H, 2T-1, dk]
    Tensor position = rel_shift(matmul(split_heads(add_bias(q, p.pos_bias_v), heads), pos, true));
    scores = add(content, position);
  } else {
    scores = matmul(split_heads(q, heads), k, true);
  }
  scores = scale(scores, 1.0 / std::sqrt(static_cast<double>(dk)));
  scores = masked_fill(scores, kv_mask.key_padding(heads, tq), kNegInf);
  Tensor attn = softmax(scores);
  if (weights) *weights = attn;
  (void)batch;
  return p.out(merge_heads(matmul(attn, v)));
}

Tensor self_attention_rel(const Tensor &x, const SequenceMask &mask,
                          const LayerNormParams &norm, const AttentionParams &p,
                          double dropout_rate, const ForwardContext &ctx,
                          const std::string &site, Tensor *weights) {
  Tensor h = norm(x);
  Tensor a = multi_head_attention(h, h, mask, p, weights);
  return add(x, apply_dropout(a, dropout_rate, ctx, site));
}

Tensor cross_attention(const Tensor &q_src, const Tensor &kv_src,
                       const SequenceMask &kv_mask, const LayerNormParams &norm,
                       const AttentionParams &p, double dropout_rate,
                       const ForwardContext &ctx, const std::string &site,
                       Tensor *weights) {
  if (kv_src.rank() != 3 || kv_src.dim(1) == 0) {
    throw ContractError("cross_attention needs at least one key/value position");
  }
  Tensor a = multi_head_attention(norm(q_src), kv_src, kv_mask, p, weights);
  return add(q_src, apply_dropout(a, dropout_rate, ctx, site));
}

Tensor feed_forward(const Tensor &x, const FeedForward &ff, Activation act,
                    double dropout_rate, const ForwardContext &ctx, const std::string &site) {
  Tensor h = activate(ff.in(x), act);
  return ff.out(apply_dropout(h, dropout_rate, ctx, site));
}

Tensor conformer_layer(const Tensor &x, const SequenceMask &mask,
                       const ConformerLayerParams &p, const BlockConfig &cfg,
                       const ForwardContext &ctx, const std::string &site) {
  const double rate = cfg.dropout_rate;
  Tensor h = feed_forward(p.ff1_norm(x), p.ff1, cfg.ff_activation, rate, ctx, site + ".ff1.inner");
  Tensor y = add(x, scale(apply_dropout(h, rate, ctx, site + ".ff1"), 0.5));

  y = self_attention_rel(y, mask, p.att_norm, p.att, rate, ctx, site + ".att");

  Tensor c = glu(p.conv.pointwise_in(p.conv_norm(y)));
  c = scale_rows(c, mask.row_factors());  // padding must not leak through the kernel
  c = conv1d(c, p.conv.depthwise_weight, p.conv.depthwise_bias, 1, (cfg.conv_kernel - 1) / 2,
             ConvVariant::depthwise);
  c = p.conv.pointwise_out(swish(p.conv.depthwise_norm(c)));
  y = add(y, apply_dropout(c, rate, ctx, site + ".conv"));

  h = feed_forward(p.ff2_norm(y), p.ff2, cfg.ff_activation, rate, ctx, site + ".ff2.inner");
  y = add(y, scale(apply_dropout(h, rate, ctx, site + ".ff2"), 0.5));
  return p.final_norm(y);
}

Tensor transformer_ca_layer(const Tensor &q_src, const SequenceMask &q_mask,
                            const Tensor &kv_src, const SequenceMask &kv_mask,
                            const CrossAttentionLayerParams &p, const BlockConfig &cfg,
                            const ForwardContext &ctx, const std::string &site) {
  const double rate = cfg.dropout_rate;
  Tensor y = self_attention_rel(q_src, q_mask, p.self_norm, p.self_att, rate, ctx, site + ".self_att");
  y = cross_attention(y, kv_src, kv_mask, p.cross_norm, p.cross_att, rate, ctx, site + ".cross_att");
  Tensor h = feed_forward(p.ff_norm(y), p.ff, cfg.ff_activation, rate, ctx, site + ".ff.inner");
  y = add(y, apply_dropout(h, rate, ctx, site + ".ff"));
  return p.final_norm(y);
}

std::size_t subsampled_length(std::size_t frames) {
  if (frames < 4) {
    throw ContractError("subsampling frontend needs at least 4 frames, got " +
                        std::to_string(frames));
  }
  return conv_output_length(conv_output_length(frames, 3, 2, 1), 3, 2, 1);
}

Tensor subsample_frontend(const Tensor &x, const SequenceMask &mask,
                          const FrontendParams &p, SequenceMask &out_mask) {
  if (x.rank() != 3 || mask.batch() != x.dim(0) || mask.max_len != x.dim(1)) {
    throw DimensionError("frontend input " + shape_string(x.shape()) +
                         " does not match its frame mask");
  }
  std::vector<std::size_t> mid_lengths, out_lengths;
  for (std::size_t len : mask.lengths) {
    out_lengths.push_back(subsampled_length(len));
    mid_lengths.push_back(conv_output_length(len, 3, 2, 1));
  }
  const SequenceMask mid(mid_lengths);
  out_mask = SequenceMask(out_lengths);

  Tensor h = scale_rows(x, mask.row_factors());
  h = relu(conv1d(h, p.conv1_weight, p.conv1_bias, 2, 1));
  h = scale_rows(h, mid.row_factors());
  h = relu(conv1d(h, p.conv2_weight, p.conv2_bias, 2, 1));
  h = scale_rows(h, out_mask.row_factors());
  return p.out(h);
}

Tensor ff_head(const Tensor &h, const GaussianHeadParams &p, Activation act) {
  Tensor mu = p.mean.out(activate(p.mean.in(h), act));
  Tensor logvar = p.logvar.out(activate(p.logvar.in(h), act));
  return concat_last({mu, logvar});
}

}  // namespace lvctc
