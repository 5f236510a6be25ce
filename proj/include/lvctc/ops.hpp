#pragma once

// Differentiable tensor operations. Every function records a backward closure
// when recording is enabled and an input requires grad.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "lvctc/random.hpp"
#include "lvctc/tensor.hpp"

namespace lvctc {

// ---- elementwise arithmetic ------------------------------------------------

Tensor add(const Tensor &a, const Tensor &b);
Tensor sub(const Tensor &a, const Tensor &b);
Tensor mul(const Tensor &a, const Tensor &b);
Tensor div(const Tensor &a, const Tensor &b);
// bias broadcast over every leading position; bias shape must equal the
// trailing dims of x.
Tensor add_bias(const Tensor &x, const Tensor &bias);
Tensor scale(const Tensor &x, double factor);
Tensor add_scalar(const Tensor &x, double value);
// Elementwise product with a constant (non-differentiable) factor array.
Tensor mul_constant(const Tensor &x, std::span<const double> factors);
// One factor per row of the last axis.
Tensor scale_rows(const Tensor &x, std::span<const double> row_factors);
// Positions with mask != 0 are replaced by `value`; they pass no gradient.
Tensor masked_fill(const Tensor &x, std::span<const std::uint8_t> mask,
                   double value);
Tensor exp(const Tensor &x);
Tensor log(const Tensor &x);
Tensor square(const Tensor &x);

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor &x);
Tensor mean(const Tensor &x);
// Sum over the last axis; result drops it.
Tensor sum_last(const Tensor &x);
Tensor logsumexp(const Tensor &x, int axis);

// ---- shape manipulation ----------------------------------------------------

Tensor reshape(const Tensor &x, const Shape &shape);
Tensor transpose_last2(const Tensor &x);
// [..., T, H*dk] -> [..., H, T, dk]
Tensor split_heads(const Tensor &x, std::size_t heads);
// [..., H, T, dk] -> [..., T, H*dk]
Tensor merge_heads(const Tensor &x);
Tensor concat_last(const std::vector<Tensor> &parts);
Tensor slice_last(const Tensor &x, std::size_t start, std::size_t length);
Tensor narrow(const Tensor &x, int axis, std::size_t start, std::size_t length);
// Drops axis 0 by picking one index along it.
Tensor select(const Tensor &x, std::size_t index);
// Stacks equal-shape tensors along a new leading axis.
Tensor stack(const std::vector<Tensor> &parts);
Tensor index_select_last(const Tensor &x, std::span<const std::size_t> indices);
// out[..., i] = x[..., i - k] for i >= k, `fill` otherwise.
Tensor shift_right(const Tensor &x, std::size_t k, double fill);

// ---- neural network primitives ---------------------------------------------

// a: [..., M, K]; b: [..., K, P] (or [..., P, K] with transpose_b). The batch
// dims of b must be a suffix of those of a; b is broadcast over the rest.
Tensor matmul(const Tensor &a, const Tensor &b, bool transpose_b = false);
// x: [..., in]; weight: [in, out]; bias: [out] or undefined.
Tensor linear(const Tensor &x, const Tensor &weight, const Tensor &bias);

Tensor log_softmax(const Tensor &x, int axis = -1);
Tensor softmax(const Tensor &x, int axis = -1);
// Normalizes over the last axis.
Tensor layer_norm(const Tensor &x, const Tensor &gain, const Tensor &bias,
                  double eps = 1e-5);

enum class Activation { swish, tanh, sigmoid, relu };
Tensor activate(const Tensor &x, Activation kind);
Tensor swish(const Tensor &x);
Tensor tanh(const Tensor &x);
Tensor sigmoid(const Tensor &x);
Tensor relu(const Tensor &x);
// Splits the last axis into value/gate halves: a * sigmoid(b).
Tensor glu(const Tensor &x);

enum class ConvVariant { full, depthwise };
std::size_t conv_output_length(std::size_t length, std::size_t kernel,
                               std::size_t stride, std::size_t padding);
// x: [..., T, C_in]. full: weight [C_out, C_in, K]; depthwise: weight [C, K].
// bias may be undefined.
Tensor conv1d(const Tensor &x, const Tensor &weight, const Tensor &bias,
              std::size_t stride, std::size_t padding,
              ConvVariant variant = ConvVariant::full);

// table: [rows, d]; result shape is ids_shape + [d].
Tensor embedding(const Tensor &table, std::span<const std::size_t> ids,
                 const Shape &ids_shape);

Tensor dropout(const Tensor &x, double rate, Rng &rng, bool training);

// x: [..., T, 2T-1] scores against relative offsets T-1 .. -(T-1);
// returns [..., T, T] with out[i][j] = x[i][T-1-i+j].
Tensor rel_shift(const Tensor &x);

}  // namespace lvctc
