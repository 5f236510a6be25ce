#include <doctest.h>

#include <cmath>
#include <random>

#include "lvctc/blocks.hpp"
#include "test_support.hpp"

using namespace lvctc;
using lvctc::testing::gradcheck_max_error;
using lvctc::testing::random_tensor;

namespace {
BlockConfig tiny_config() {
  BlockConfig cfg;
  cfg.d_att = 8;
  cfg.n_heads = 2;
  cfg.d_ff = 12;
  cfg.conv_kernel = 3;
  cfg.dropout_rate = 0.1;
  return cfg;
}

// Copies row t of sequence b from [B, T, d].
std::vector<double> row(const Tensor &x, std::size_t b, std::size_t t) {
  const std::size_t tt = x.dim(1), d = x.dim(2);
  auto v = x.data().subspan((b * tt + t) * d, d);
  return {v.begin(), v.end()};
}

void zero_positional_weights(AttentionParams &p) {
  for (Tensor *t : {&p.pos_bias_u, &p.pos_bias_v, &p.pos.weight})
    for (double &v : t->mutable_data()) v = 0.0;
}
}  // namespace

TEST_SUITE("blocks") {
  TEST_CASE("config validation") {
    BlockConfig cfg = tiny_config();
    cfg.n_heads = 3;
    CHECK_THROWS_AS(cfg.validate(), ContractError);
    cfg = tiny_config();
    cfg.conv_kernel = 4;
    CHECK_THROWS_AS(cfg.validate(), ContractError);
    CHECK_NOTHROW(tiny_config().validate());
  }

  TEST_CASE("parameter init depends only on seed and name") {
    ParameterSet a, b;
    ParamBuilder pa(a, 11), pb(b, 11);
    pa.make("x", {3, 4}, Init::xavier);
    Tensor ya = pa.make("y", {5}, Init::normal, 0.3);
    Tensor yb = pb.make("y", {5}, Init::normal, 0.3);
    CHECK(std::equal(ya.data().begin(), ya.data().end(), yb.data().begin()));
    ParameterSet c;
    ParamBuilder pc(c, 12);
    Tensor yc = pc.make("y", {5}, Init::normal, 0.3);
    CHECK_FALSE(std::equal(ya.data().begin(), ya.data().end(), yc.data().begin()));
  }

  TEST_CASE("single frame attends to itself") {
    ParameterSet ps;
    ParamBuilder pb(ps, 3);
    auto cfg = tiny_config();
    auto att = make_attention(pb, "att", cfg, true);
    std::mt19937_64 rng(1);
    Tensor x = random_tensor({1, 1, 8}, rng, false);
    Tensor w;
    Tensor y = multi_head_attention(x, x, SequenceMask({1}), att, &w);
    for (double v : w.data()) CHECK(v == 1.0);
    Tensor expected = att.out(att.value(x));
    for (std::size_t i = 0; i < 8; ++i) CHECK(y.data()[i] == doctest::Approx(expected.data()[i]).epsilon(1e-14));
  }

  TEST_CASE("padded keys receive zero weight and rows sum to one") {
    ParameterSet ps;
    ParamBuilder pb(ps, 4);
    auto cfg = tiny_config();
    auto att = make_attention(pb, "att", cfg, false);
    std::mt19937_64 rng(2);
    Tensor q = random_tensor({2, 3, 8}, rng, false);
    Tensor kv = random_tensor({2, 5, 8}, rng, false);
    Tensor w;
    multi_head_attention(q, kv, SequenceMask({5, 2}), att, &w);
    // w: [2, H, 3, 5]
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t i = 0; i < 3; ++i) {
        double s0 = 0, s1 = 0;
        for (std::size_t k = 0; k < 5; ++k) {
          s0 += w.at({0, h, i, k});
          s1 += w.at({1, h, i, k});
          if (k >= 2) CHECK(w.at({1, h, i, k}) == 0.0);
        }
        CHECK(std::abs(s0 - 1) < 1e-12);
        CHECK(std::abs(s1 - 1) < 1e-12);
      }
  }

  TEST_CASE("cross-attention with one token") {
    ParameterSet ps;
    ParamBuilder pb(ps, 5);
    auto cfg = tiny_config();
    auto layer = make_cross_attention_layer(pb, "ca", cfg);
    std::mt19937_64 rng(3);
    Tensor q = random_tensor({1, 6, 8}, rng, false);
    Tensor kv = random_tensor({1, 1, 8}, rng, false);
    Tensor w;
    Tensor y = cross_attention(q, kv, SequenceMask({1}), layer.cross_norm, layer.cross_att, 0.0,
                               ForwardContext{}, "x", &w);
    for (double v : w.data()) CHECK(v == 1.0);
    CHECK(y.shape() == Shape{1, 6, 8});
    Tensor kv_empty = Tensor::zeros({1, 0, 8});
    CHECK_THROWS_AS(cross_attention(q, kv_empty, SequenceMask({0}), layer.cross_norm,
                                    layer.cross_att, 0.0, ForwardContext{}, "x"),
                    ContractError);
    Tensor out = transformer_ca_layer(q, SequenceMask({6}), kv, SequenceMask({1}), layer, cfg,
                                      ForwardContext{}, "ca");
    CHECK(out.shape() == q.shape());
  }

  TEST_CASE("mask shape mismatch is a dimension error") {
    ParameterSet ps;
    ParamBuilder pb(ps, 5);
    auto att = make_attention(pb, "att", tiny_config(), true);
    std::mt19937_64 rng(3);
    Tensor x = random_tensor({1, 4, 8}, rng, false);
    CHECK_THROWS_AS(multi_head_attention(x, x, SequenceMask({3}), att), DimensionError);
  }

  TEST_CASE("self-attention is permutation equivariant without position terms") {
    ParameterSet ps;
    ParamBuilder pb(ps, 6);
    auto cfg = tiny_config();
    auto att = make_attention(pb, "att", cfg, true);
    zero_positional_weights(att);
    auto norm = make_layer_norm(pb, "norm", 8);
    std::mt19937_64 rng(4);
    Tensor x = random_tensor({1, 5, 8}, rng, false);
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    std::vector<double> permuted;
    for (std::size_t t : perm) {
      auto r = row(x, 0, t);
      permuted.insert(permuted.end(), r.begin(), r.end());
    }
    Tensor xp = Tensor::from({1, 5, 8}, permuted);
    Tensor y = self_attention_rel(x, SequenceMask({5}), norm, att, 0.0, {}, "s");
    Tensor yp = self_attention_rel(xp, SequenceMask({5}), norm, att, 0.0, {}, "s");
    for (std::size_t i = 0; i < 5; ++i) {
      auto a = row(yp, 0, i), b = row(y, 0, perm[i]);
      for (std::size_t k = 0; k < 8; ++k) CHECK(a[k] == doctest::Approx(b[k]).epsilon(1e-12));
    }
  }

  TEST_CASE("conformer layer: shape, determinism, dropout") {
    ParameterSet ps;
    ParamBuilder pb(ps, 7);
    auto cfg = tiny_config();
    auto layer = make_conformer_layer(pb, "enc", cfg);
    std::mt19937_64 rng(5);
    Tensor x = random_tensor({2, 6, 8}, rng, false);
    SequenceMask mask({6, 4});
    Tensor a = conformer_layer(x, mask, layer, cfg, ForwardContext{false, 1}, "enc");
    Tensor b = conformer_layer(x, mask, layer, cfg, ForwardContext{false, 2}, "enc");
    CHECK(a.shape() == x.shape());
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
    Tensor c = conformer_layer(x, mask, layer, cfg, ForwardContext{true, 1}, "enc");
    Tensor d = conformer_layer(x, mask, layer, cfg, ForwardContext{true, 1}, "enc");
    Tensor e = conformer_layer(x, mask, layer, cfg, ForwardContext{true, 2}, "enc");
    CHECK(std::equal(c.data().begin(), c.data().end(), d.data().begin()));
    CHECK_FALSE(std::equal(c.data().begin(), c.data().end(), e.data().begin()));
  }

  TEST_CASE("padded frames never influence valid outputs") {
    ParameterSet ps;
    ParamBuilder pb(ps, 8);
    auto cfg = tiny_config();
    auto layer = make_conformer_layer(pb, "enc", cfg);
    std::mt19937_64 rng(6);
    Tensor x = random_tensor({2, 7, 8}, rng, false);
    Tensor x2 = Tensor::from(x.shape(), {x.data().begin(), x.data().end()});
    for (std::size_t t = 4; t < 7; ++t)
      for (std::size_t k = 0; k < 8; ++k) x2.mutable_data()[(7 + t) * 8 + k] = 100.0 + t + k;
    SequenceMask mask({7, 4});
    Tensor a = conformer_layer(x, mask, layer, cfg, {}, "enc");
    Tensor b = conformer_layer(x2, mask, layer, cfg, {}, "enc");
    for (std::size_t t = 0; t < 4; ++t) CHECK(row(a, 1, t) == row(b, 1, t));
    CHECK(row(a, 0, 6) == row(b, 0, 6));
  }

  TEST_CASE("padded batch matches the unpadded sequence") {
    ParameterSet ps;
    ParamBuilder pb(ps, 9);
    auto cfg = tiny_config();
    auto layer = make_conformer_layer(pb, "enc", cfg);
    std::mt19937_64 rng(7);
    Tensor x = random_tensor({2, 7, 8}, rng, false);
    Tensor alone = narrow(select(x, 1), 0, 0, 4);
    Tensor a = conformer_layer(x, SequenceMask({7, 4}), layer, cfg, {}, "enc");
    Tensor b = conformer_layer(reshape(alone, {1, 4, 8}), SequenceMask({4}), layer, cfg, {}, "enc");
    for (std::size_t t = 0; t < 4; ++t) {
      auto ra = row(a, 1, t), rb = row(b, 0, t);
      for (std::size_t k = 0; k < 8; ++k) CHECK(std::abs(ra[k] - rb[k]) < 1e-12);
    }
  }

  TEST_CASE("frontend lengths") {
    CHECK(subsampled_length(16) == 4);
    CHECK(subsampled_length(4) == 1);
    CHECK(subsampled_length(17) == 5);
    CHECK_THROWS_AS(subsampled_length(3), ContractError);
    ParameterSet ps;
    ParamBuilder pb(ps, 10);
    auto cfg = tiny_config();
    auto fe = make_frontend(pb, "fe", 5, cfg);
    std::mt19937_64 rng(8);
    Tensor x = random_tensor({2, 16, 5}, rng, false);
    SequenceMask out;
    Tensor y = subsample_frontend(x, SequenceMask({16, 9}), fe, out);
    CHECK(y.shape() == Shape{2, 4, 8});
    CHECK(out.lengths == std::vector<std::size_t>{4, 3});
  }

  TEST_CASE("frontend pad invariance") {
    ParameterSet ps;
    ParamBuilder pb(ps, 10);
    auto cfg = tiny_config();
    auto fe = make_frontend(pb, "fe", 3, cfg);
    std::mt19937_64 rng(9);
    Tensor x = random_tensor({2, 21, 3}, rng, false);
    SequenceMask out_a, out_b;
    Tensor a = subsample_frontend(x, SequenceMask({21, 13}), fe, out_a);
    Tensor alone = reshape(narrow(select(x, 1), 0, 0, 13), {1, 13, 3});
    Tensor b = subsample_frontend(alone, SequenceMask({13}), fe, out_b);
    REQUIRE(out_b.lengths[0] == out_a.lengths[1]);
    for (std::size_t t = 0; t < out_b.lengths[0]; ++t) {
      auto ra = row(a, 1, t), rb = row(b, 0, t);
      for (std::size_t k = 0; k < 8; ++k) CHECK(std::abs(ra[k] - rb[k]) < 1e-12);
    }
  }

  TEST_CASE("gaussian head") {
    ParameterSet ps;
    ParamBuilder pb(ps, 11);
    auto cfg = tiny_config();
    auto head = make_gaussian_head(pb, "head", cfg, 3);
    std::mt19937_64 rng(10);
    Tensor h = random_tensor({2, 4, 8}, rng, false);
    CHECK(ff_head(h, head, Activation::tanh).shape() == Shape{2, 4, 6});
    for (auto &[name, t] : ps.slots()) {
      for (double &v : const_cast<Tensor &>(t).mutable_data()) v = 0.0;
    }
    Tensor z = ff_head(h, head, Activation::tanh);
    for (double v : z.data()) CHECK(v == 0.0);  // mu = 0, logvar = 0 -> sigma = 1
  }

  TEST_CASE("gradcheck through two conformer layers") {
    ParameterSet ps;
    ParamBuilder pb(ps, 12);
    auto cfg = tiny_config();
    auto l1 = make_conformer_layer(pb, "l1", cfg);
    auto l2 = make_conformer_layer(pb, "l2", cfg);
    std::mt19937_64 rng(11);
    Tensor x = random_tensor({2, 4, 8}, rng, true);
    std::mt19937_64 wrng(12);
    Tensor proj = random_tensor({2, 4, 8}, wrng, false);
    SequenceMask mask({4, 3});
    std::vector<Tensor> inputs{x};
    for (auto &[name, t] : ps.unique()) inputs.push_back(t);
    const double err = gradcheck_max_error(inputs, [&] {
      Tensor y = conformer_layer(x, mask, l1, cfg, {}, "l1");
      y = conformer_layer(y, mask, l2, cfg, {}, "l2");
      return sum(mul(y, proj));
    });
    CHECK(err < 1e-4);
  }

  TEST_CASE("gradcheck through cross-attention layer, frontend and head") {
    ParameterSet ps;
    ParamBuilder pb(ps, 13);
    auto cfg = tiny_config();
    auto ca = make_cross_attention_layer(pb, "ca", cfg);
    auto fe = make_frontend(pb, "fe", 3, cfg);
    auto head = make_gaussian_head(pb, "head", cfg, 2);
    std::mt19937_64 rng(14);
    Tensor x = random_tensor({2, 9, 3}, rng, true);
    Tensor kv = random_tensor({2, 3, 8}, rng, true);
    std::vector<Tensor> inputs{x, kv};
    for (auto &[name, t] : ps.unique()) inputs.push_back(t);
    const double err = gradcheck_max_error(inputs, [&] {
      SequenceMask out;
      Tensor h = subsample_frontend(x, SequenceMask({9, 6}), fe, out);
      h = transformer_ca_layer(h, out, kv, SequenceMask({3, 2}), ca, cfg, {}, "ca");
      return sum(square(ff_head(h, head, Activation::tanh)));
    });
    CHECK(err < 1e-4);
  }
}
