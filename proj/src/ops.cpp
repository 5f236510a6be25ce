#include "lvctc/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace lvctc {

namespace {

using Node = Tensor::Node;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void require_same_shape(const Tensor &a, const Tensor &b, const char *op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

// Splits a shape around one axis into (outer, n, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

std::size_t normalize_axis(const Tensor &x, int axis) {
  const int r = static_cast<int>(x.rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) +
                         " out of range for shape " + shape_string(x.shape()));
  }
  return static_cast<std::size_t>(a);
}

AxisSplit split_axis(const Shape &shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

std::size_t last_extent(const Tensor &x, const char *op) {
  if (x.rank() == 0) throw DimensionError(std::string(op) + ": scalar input");
  return x.shape().back();
}

bool wants_grad(const Node &self, std::size_t i) {
  return i < self.parents.size() && self.parents[i] &&
         self.parents[i]->requires_grad;
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor &x, Fwd fwd, Deriv deriv) {
  std::vector<double> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  return Tensor::make_result(x.shape(), std::move(out), {x}, [deriv](Node &self) {
    Node &p = *self.parents[0];
    auto &g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += self.grad[i] * deriv(p.value[i], self.value[i]);
    }
  });
}

double sigmoid_scalar(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

// ---- elementwise arithmetic ------------------------------------------------

Tensor add(const Tensor &a, const Tensor &b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node &self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants_grad(self, k)) continue;
      auto &g = self.parents[k]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor &a, const Tensor &b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node &self) {
    if (wants_grad(self, 0)) {
      auto &g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants_grad(self, 1)) {
      auto &g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor &a, const Tensor &b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node &self) {
    const auto &av = self.parents[0]->value;
    const auto &bv = self.parents[1]->value;
    if (wants_grad(self, 0)) {
      auto &g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (wants_grad(self, 1)) {
      auto &g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

Tensor div(const Tensor &a, const Tensor &b) {
  require_same_shape(a, b, "div");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / b.data()[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node &self) {
    const auto &bv = self.parents[1]->value;
    if (wants_grad(self, 0)) {
      auto &g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / bv[i];
    }
    if (wants_grad(self, 1)) {
      auto &g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] -= self.grad[i] * self.value[i] / bv[i];
      }
    }
  });
}

Tensor add_bias(const Tensor &x, const Tensor &bias) {
  const Shape &xs = x.shape();
  const Shape &bs = bias.shape();
  if (bs.size() > xs.size() ||
      !std::equal(bs.rbegin(), bs.rend(), xs.rbegin())) {
    throw DimensionError("add_bias: bias shape " + shape_string(bs) +
                         " is not a suffix of " + shape_string(xs));
  }
  const std::size_t d = bias.numel();
  std::vector<double> out(x.numel());
  auto xv = x.data();
  auto bv = bias.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + bv[i % d];
  return Tensor::make_result(xs, std::move(out), {x, bias}, [d](Node &self) {
    if (wants_grad(self, 0)) {
      auto &g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants_grad(self, 1)) {
      auto &g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % d] += self.grad[i];
    }
  });
}

Tensor scale(const Tensor &x, double factor) {
  return unary(
      x, [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor &x, double value) {
  return unary(
      x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor mul_constant(const Tensor &x, std::span<const double> factors) {
  if (factors.size() != x.numel()) {
    throw DimensionError("mul_constant: " + std::to_string(factors.size()) +
                         " factors for shape " + shape_string(x.shape()));
  }
  std::vector<double> f(factors.begin(), factors.end());
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * f[i];
  return Tensor::make_result(x.shape(), std::move(out), {x},
                             [f = std::move(f)](Node &self) {
                               auto &g = self.parents[0]->grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 g[i] += self.grad[i] * f[i];
                               }
                             });
}

Tensor scale_rows(const Tensor &x, std::span<const double> row_factors) {
  const std::size_t d = last_extent(x, "scale_rows");
  const std::size_t rows = d == 0 ? 0 : x.numel() / d;
  if (row_factors.size() != rows) {
    throw DimensionError("scale_rows: " + std::to_string(row_factors.size()) +
                         " factors for " + std::to_string(rows) + " rows");
  }
  std::vector<double> f(row_factors.begin(), row_factors.end());
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * f[i / d];
  return Tensor::make_result(x.shape(), std::move(out), {x},
                             [f = std::move(f), d](Node &self) {
                               auto &g = self.parents[0]->grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 g[i] += self.grad[i] * f[i / d];
                               }
                             });
}

Tensor masked_fill(const Tensor &x, std::span<const std::uint8_t> mask,
                   double value) {
  if (mask.size() != x.numel()) {
    throw DimensionError("masked_fill: mask of " + std::to_string(mask.size()) +
                         " entries for shape " + shape_string(x.shape()));
  }
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = m[i] ? value : x.data()[i];
  return Tensor::make_result(x.shape(), std::move(out), {x},
                             [m = std::move(m)](Node &self) {
                               auto &g = self.parents[0]->grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 if (!m[i]) g[i] += self.grad[i];
                               }
                             });
}

Tensor exp(const Tensor &x) {
  return unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor &x) {
  return unary(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor square(const Tensor &x) {
  return unary(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor &x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::make_result({}, {s}, {x}, [](Node &self) {
    auto &g = self.parents[0]->grad_buffer();
    for (double &v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor &x) {
  if (x.numel() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_last(const Tensor &x) {
  const std::size_t d = last_extent(x, "sum_last");
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  const std::size_t rows = shape_numel(shape);
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += x.data()[r * d + j];
    out[r] = s;
  }
  return Tensor::make_result(std::move(shape), std::move(out), {x}, [d](Node &self) {
    auto &g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i / d];
  });
}

Tensor logsumexp(const Tensor &x, int axis) {
  const std::size_t ax = normalize_axis(x, axis);
  const AxisSplit s = split_axis(x.shape(), ax);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(ax));
  std::vector<double> out(s.outer * s.inner);
  auto xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      double m = kNegInf;
      for (std::size_t k = 0; k < s.n; ++k) m = std::max(m, xv[base + k * s.inner]);
      double r = m;
      if (m != kNegInf) {
        double acc = 0.0;
        for (std::size_t k = 0; k < s.n; ++k) acc += std::exp(xv[base + k * s.inner] - m);
        r = m + std::log(acc);
      }
      out[o * s.inner + in] = r;
    }
  }
  return Tensor::make_result(std::move(shape), std::move(out), {x}, [s](Node &self) {
    Node &p = *self.parents[0];
    auto &g = p.grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const double y = self.value[o * s.inner + in];
        if (y == kNegInf) continue;
        const double gy = self.grad[o * s.inner + in];
        const std::size_t base = o * s.n * s.inner + in;
        for (std::size_t k = 0; k < s.n; ++k) {
          g[base + k * s.inner] += gy * std::exp(p.value[base + k * s.inner] - y);
        }
      }
    }
  });
}

// ---- shape manipulation ----------------------------------------------------

Tensor reshape(const Tensor &x, const Shape &shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) +
                         " as " + shape_string(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return Tensor::make_result(shape, std::move(out), {x}, [](Node &self) {
    auto &g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor transpose_last2(const Tensor &x) {
  if (x.rank() < 2) throw DimensionError("transpose_last2 needs rank >= 2");
  const std::size_t rows = x.dim(-2), cols = x.dim(-1);
  const std::size_t batch = x.numel() / std::max<std::size_t>(rows * cols, 1);
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  std::vector<double> out(x.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) {
        out[b * rows * cols + j * rows + i] = x.data()[b * rows * cols + i * cols + j];
      }
    }
  }
  return Tensor::make_result(std::move(shape), std::move(out), {x},
                             [batch, rows, cols](Node &self) {
                               auto &g = self.parents[0]->grad_buffer();
                               for (std::size_t b = 0; b < batch; ++b) {
                                 for (std::size_t i = 0; i < rows; ++i) {
                                   for (std::size_t j = 0; j < cols; ++j) {
                                     g[b * rows * cols + i * cols + j] +=
                                         self.grad[b * rows * cols + j * rows + i];
                                   }
                                 }
                               }
                             });
}

Tensor split_heads(const Tensor &x, std::size_t heads) {
  if (x.rank() < 2) throw DimensionError("split_heads needs rank >= 2");
  const std::size_t t_len = x.dim(-2), d = x.dim(-1);
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("split_heads: width " + std::to_string(d) +
                         " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t dk = d / heads;
  const std::size_t batch = x.numel() / std::max<std::size_t>(t_len * d, 1);
  Shape shape(x.shape().begin(), x.shape().end() - 2);
  shape.insert(shape.end(), {heads, t_len, dk});
  // out[b][h][t][k] = x[b][t][h*dk + k]
  auto index = [=](std::size_t b, std::size_t h, std::size_t t, std::size_t k) {
    return std::pair{((b * heads + h) * t_len + t) * dk + k, (b * t_len + t) * d + h * dk + k};
  };
  std::vector<double> out(x.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < t_len; ++t)
        for (std::size_t k = 0; k < dk; ++k) {
          auto [o, i] = index(b, h, t, k);
          out[o] = x.data()[i];
        }
  return Tensor::make_result(std::move(shape), std::move(out), {x},
                             [=](Node &self) {
                               auto &g = self.parents[0]->grad_buffer();
                               for (std::size_t b = 0; b < batch; ++b)
                                 for (std::size_t h = 0; h < heads; ++h)
                                   for (std::size_t t = 0; t < t_len; ++t)
                                     for (std::size_t k = 0; k < dk; ++k) {
                                       auto [o, i] = index(b, h, t, k);
                                       g[i] += self.grad[o];
                                     }
                             });
}

Tensor merge_heads(const Tensor &x) {
  if (x.rank() < 3) throw DimensionError("merge_heads needs rank >= 3");
  const std::size_t heads = x.dim(-3), t_len = x.dim(-2), dk = x.dim(-1);
  const std::size_t d = heads * dk;
  const std::size_t batch = x.numel() / std::max<std::size_t>(heads * t_len * dk, 1);
  Shape shape(x.shape().begin(), x.shape().end() - 3);
  shape.insert(shape.end(), {t_len, d});
  auto index = [=](std::size_t b, std::size_t h, std::size_t t, std::size_t k) {
    return std::pair{((b * heads + h) * t_len + t) * dk + k, (b * t_len + t) * d + h * dk + k};
  };
  std::vector<double> out(x.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < t_len; ++t)
        for (std::size_t k = 0; k < dk; ++k) {
          auto [i, o] = index(b, h, t, k);
          out[o] = x.data()[i];
        }
  return Tensor::make_result(std::move(shape), std::move(out), {x},
                             [=](Node &self) {
                               auto &g = self.parents[0]->grad_buffer();
                               for (std::size_t b = 0; b < batch; ++b)
                                 for (std::size_t h = 0; h < heads; ++h)
                                   for (std::size_t t = 0; t < t_len; ++t)
                                     for (std::size_t k = 0; k < dk; ++k) {
                                       auto [i, o] = index(b, h, t, k);
                                       g[i] += self.grad[o];
                                     }
                             });
}

Tensor concat_last(const std::vector<Tensor> &parts) {
  if (parts.empty()) throw ContractError("concat_last of no tensors");
  const Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto &p : parts) {
    if (p.rank() != lead.size() + 1 ||
        !std::equal(lead.begin(), lead.end(), p.shape().begin())) {
      throw DimensionError("concat_last: incompatible shape " + shape_string(p.shape()));
    }
    widths.push_back(p.dim(-1));
    total += p.dim(-1);
  }
  const std::size_t rows = shape_numel(lead);
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(parts[k].data().begin() + static_cast<std::ptrdiff_t>(r * widths[k]), widths[k],
                  out.begin() + static_cast<std::ptrdiff_t>(r * total + offset));
    }
    offset += widths[k];
  }
  Shape shape = lead;
  shape.push_back(total);
  return Tensor::make_result(std::move(shape), std::move(out), parts,
                             [widths, rows, total](Node &self) {
                               std::size_t off = 0;
                               for (std::size_t k = 0; k < widths.size(); ++k) {
                                 if (wants_grad(self, k)) {
                                   auto &g = self.parents[k]->grad_buffer();
                                   for (std::size_t r = 0; r < rows; ++r)
                                     for (std::size_t j = 0; j < widths[k]; ++j)
                                       g[r * widths[k] + j] += self.grad[r * total + off + j];
                                 }
                                 off += widths[k];
                               }
                             });
}

Tensor slice_last(const Tensor &x, std::size_t start, std::size_t length) {
  return narrow(x, -1, start, length);
}

Tensor narrow(const Tensor &x, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = normalize_axis(x, axis);
  const AxisSplit s = split_axis(x.shape(), ax);
  if (start + length > s.n) {
    throw IndexError("narrow: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") exceeds extent " +
                     std::to_string(s.n));
  }
  Shape shape = x.shape();
  shape[ax] = length;
  std::vector<double> out(s.outer * length * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>((o * s.n + start) * s.inner),
                length * s.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * length * s.inner));
  }
  return Tensor::make_result(std::move(shape), std::move(out), {x},
                             [s, start, length](Node &self) {
                               auto &g = self.parents[0]->grad_buffer();
                               for (std::size_t o = 0; o < s.outer; ++o) {
                                 const std::size_t src = o * length * s.inner;
                                 const std::size_t dst = (o * s.n + start) * s.inner;
                                 for (std::size_t i = 0; i < length * s.inner; ++i) {
                                   g[dst + i] += self.grad[src + i];
                                 }
                               }
                             });
}

Tensor select(const Tensor &x, std::size_t index) {
  if (x.rank() == 0) throw DimensionError("select on scalar");
  if (index >= x.dim(0)) {
    throw IndexError("select: index " + std::to_string(index) + " >= " +
                     std::to_string(x.dim(0)));
  }
  Shape shape(x.shape().begin() + 1, x.shape().end());
  const std::size_t inner = shape_numel(shape);
  std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(index * inner),
                          x.data().begin() + static_cast<std::ptrdiff_t>((index + 1) * inner));
  return Tensor::make_result(std::move(shape), std::move(out), {x},
                             [index, inner](Node &self) {
                               auto &g = self.parents[0]->grad_buffer();
                               for (std::size_t i = 0; i < inner; ++i) {
                                 g[index * inner + i] += self.grad[i];
                               }
                             });
}

Tensor stack(const std::vector<Tensor> &parts) {
  if (parts.empty()) throw ContractError("stack of no tensors");
  const Shape &inner_shape = parts[0].shape();
  const std::size_t inner = parts[0].numel();
  std::vector<double> out;
  out.reserve(inner * parts.size());
  for (const auto &p : parts) {
    if (p.shape() != inner_shape) {
      throw DimensionError("stack: shape " + shape_string(p.shape()) + " vs " +
                           shape_string(inner_shape));
    }
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Shape shape{parts.size()};
  shape.insert(shape.end(), inner_shape.begin(), inner_shape.end());
  return Tensor::make_result(std::move(shape), std::move(out), parts, [inner](Node &self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      if (!wants_grad(self, k)) continue;
      auto &g = self.parents[k]->grad_buffer();
      for (std::size_t i = 0; i < inner; ++i) g[i] += self.grad[k * inner + i];
    }
  });
}

Tensor index_select_last(const Tensor &x, std::span<const std::size_t> indices) {
  const std::size_t d = last_extent(x, "index_select_last");
  for (std::size_t idx : indices) {
    if (idx >= d) {
      throw IndexError("index_select_last: index " + std::to_string(idx) +
                       " >= extent " + std::to_string(d));
    }
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  const std::size_t rows = d == 0 ? 0 : x.numel() / d;
  const std::size_t w = idx.size();
  Shape shape = x.shape();
  shape.back() = w;
  std::vector<double> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < w; ++j) out[r * w + j] = x.data()[r * d + idx[j]];
  return Tensor::make_result(std::move(shape), std::move(out), {x},
                             [idx = std::move(idx), rows, d](Node &self) {
                               auto &g = self.parents[0]->grad_buffer();
                               const std::size_t w = idx.size();
                               for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t j = 0; j < w; ++j)
                                   g[r * d + idx[j]] += self.grad[r * w + j];
                             });
}

Tensor shift_right(const Tensor &x, std::size_t k, double fill) {
  const std::size_t d = last_extent(x, "shift_right");
  const std::size_t rows = d == 0 ? 0 : x.numel() / d;
  std::vector<double> out(x.numel(), fill);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = k; i < d; ++i) out[r * d + i] = x.data()[r * d + i - k];
  return Tensor::make_result(x.shape(), std::move(out), {x}, [rows, d, k](Node &self) {
    auto &g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t i = k; i < d; ++i) g[r * d + i - k] += self.grad[r * d + i];
  });
}

// ---- neural network primitives ---------------------------------------------

Tensor matmul(const Tensor &a, const Tensor &b, bool transpose_b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul needs rank >= 2 operands, got " +
                         shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1);
  const std::size_t bk = transpose_b ? b.dim(-1) : b.dim(-2);
  const std::size_t p = transpose_b ? b.dim(-2) : b.dim(-1);
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  const bool suffix = b_batch.size() <= a_batch.size() &&
                      std::equal(b_batch.rbegin(), b_batch.rend(), a_batch.rbegin());
  if (k != bk || !suffix) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) +
                         " and " + shape_string(b.shape()) +
                         (transpose_b ? " (b transposed)" : ""));
  }
  const std::size_t na = shape_numel(a_batch);
  const std::size_t nb = shape_numel(b_batch);
  Shape shape = a_batch;
  shape.insert(shape.end(), {m, p});
  std::vector<double> out(na * m * p);
  const std::size_t b_rows = transpose_b ? p : k, b_cols = transpose_b ? k : p;
  for (std::size_t i = 0; i < na; ++i) {
    ConstMatMap am(a.data().data() + i * m * k, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
    ConstMatMap bm(b.data().data() + (i % nb) * k * p, static_cast<Eigen::Index>(b_rows),
                   static_cast<Eigen::Index>(b_cols));
    MatMap cm(out.data() + i * m * p, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(p));
    if (transpose_b) {
      cm.noalias() = am * bm.transpose();
    } else {
      cm.noalias() = am * bm;
    }
  }
  return Tensor::make_result(
      std::move(shape), std::move(out), {a, b},
      [=](Node &self) {
        const bool ga = wants_grad(self, 0), gb = wants_grad(self, 1);
        Node &an = *self.parents[0];
        Node &bn = *self.parents[1];
        double *agrad = ga ? an.grad_buffer().data() : nullptr;
        double *bgrad = gb ? bn.grad_buffer().data() : nullptr;
        for (std::size_t i = 0; i < na; ++i) {
          ConstMatMap dc(self.grad.data() + i * m * p, static_cast<Eigen::Index>(m),
                         static_cast<Eigen::Index>(p));
          ConstMatMap am(an.value.data() + i * m * k, static_cast<Eigen::Index>(m),
                         static_cast<Eigen::Index>(k));
          ConstMatMap bm(bn.value.data() + (i % nb) * k * p, static_cast<Eigen::Index>(b_rows),
                         static_cast<Eigen::Index>(b_cols));
          if (ga) {
            MatMap da(agrad + i * m * k, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
            if (transpose_b) {
              da.noalias() += dc * bm;
            } else {
              da.noalias() += dc * bm.transpose();
            }
          }
          if (gb) {
            MatMap db(bgrad + (i % nb) * k * p, static_cast<Eigen::Index>(b_rows),
                      static_cast<Eigen::Index>(b_cols));
            if (transpose_b) {
              db.noalias() += dc.transpose() * am;
            } else {
              db.noalias() += am.transpose() * dc;
            }
          }
        }
      });
}

Tensor linear(const Tensor &x, const Tensor &weight, const Tensor &bias) {
  if (weight.rank() != 2) {
    throw DimensionError("linear: weight must be [in, out], got " +
                         shape_string(weight.shape()));
  }
  if (x.rank() == 0 || x.dim(-1) != weight.dim(0)) {
    throw DimensionError("linear: input " + shape_string(x.shape()) +
                         " does not match weight " + shape_string(weight.shape()));
  }
  // Fold leading dims into rows so one GEMM covers the whole batch.
  const std::size_t in = weight.dim(0), out = weight.dim(1);
  const std::size_t rows = x.numel() / std::max<std::size_t>(in, 1);
  Shape shape = x.shape();
  shape.back() = out;
  std::vector<double> y(rows * out);
  ConstMatMap xm(x.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(in));
  ConstMatMap wm(weight.data().data(), static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out));
  MatMap ym(y.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(out));
  ym.noalias() = xm * wm;
  if (bias.defined()) {
    if (bias.numel() != out) {
      throw DimensionError("linear: bias " + shape_string(bias.shape()) +
                           " does not match output width " + std::to_string(out));
    }
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < out; ++j) y[r * out + j] += bias.data()[j];
  }
  std::vector<Tensor> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return Tensor::make_result(
      std::move(shape), std::move(y), std::move(parents), [rows, in, out](Node &self) {
        ConstMatMap dy(self.grad.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(out));
        Node &xn = *self.parents[0];
        Node &wn = *self.parents[1];
        if (wants_grad(self, 0)) {
          MatMap dx(xn.grad_buffer().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(in));
          ConstMatMap wm(wn.value.data(), static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out));
          dx.noalias() += dy * wm.transpose();
        }
        if (wants_grad(self, 1)) {
          MatMap dw(wn.grad_buffer().data(), static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out));
          ConstMatMap xm(xn.value.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(in));
          dw.noalias() += xm.transpose() * dy;
        }
        if (wants_grad(self, 2)) {
          auto &db = self.parents[2]->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < out; ++j) db[j] += self.grad[r * out + j];
        }
      });
}

Tensor log_softmax(const Tensor &x, int axis) {
  const std::size_t ax = normalize_axis(x, axis);
  const AxisSplit s = split_axis(x.shape(), ax);
  std::vector<double> out(x.numel());
  auto xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      double m = kNegInf;
      for (std::size_t k = 0; k < s.n; ++k) m = std::max(m, xv[base + k * s.inner]);
      double acc = 0.0;
      for (std::size_t k = 0; k < s.n; ++k) acc += std::exp(xv[base + k * s.inner] - m);
      const double lse = m + std::log(acc);
      for (std::size_t k = 0; k < s.n; ++k) out[base + k * s.inner] = xv[base + k * s.inner] - lse;
    }
  }
  return Tensor::make_result(x.shape(), std::move(out), {x}, [s](Node &self) {
    auto &g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.n * s.inner + in;
        double gs = 0.0;
        for (std::size_t k = 0; k < s.n; ++k) gs += self.grad[base + k * s.inner];
        for (std::size_t k = 0; k < s.n; ++k) {
          const std::size_t i = base + k * s.inner;
          g[i] += self.grad[i] - std::exp(self.value[i]) * gs;
        }
      }
    }
  });
}

Tensor softmax(const Tensor &x, int axis) {
  const std::size_t ax = normalize_axis(x, axis);
  const AxisSplit s = split_axis(x.shape(), ax);
  std::vector<double> out(x.numel(), 0.0);
  auto xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      double m = kNegInf;
      for (std::size_t k = 0; k < s.n; ++k) m = std::max(m, xv[base + k * s.inner]);
      if (m == kNegInf) continue;  // fully masked row
      double acc = 0.0;
      for (std::size_t k = 0; k < s.n; ++k) {
        const double e = std::exp(xv[base + k * s.inner] - m);
        out[base + k * s.inner] = e;
        acc += e;
      }
      for (std::size_t k = 0; k < s.n; ++k) out[base + k * s.inner] /= acc;
    }
  }
  return Tensor::make_result(x.shape(), std::move(out), {x}, [s](Node &self) {
    auto &g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.n * s.inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < s.n; ++k) {
          dot += self.grad[base + k * s.inner] * self.value[base + k * s.inner];
        }
        for (std::size_t k = 0; k < s.n; ++k) {
          const std::size_t i = base + k * s.inner;
          g[i] += self.value[i] * (self.grad[i] - dot);
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor &x, const Tensor &gain, const Tensor &bias, double eps) {
  const std::size_t d = last_extent(x, "layer_norm");
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias width does not match " +
                         shape_string(x.shape()));
  }
  const std::size_t rows = d == 0 ? 0 : x.numel() / d;
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xv[r * d + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xv[r * d + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xv[r * d + j] - mu) * inv;
      xhat[r * d + j] = h;
      out[r * d + j] = gain.data()[j] * h + bias.data()[j];
    }
  }
  return Tensor::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node &self) {
        const auto &gv = self.parents[1]->value;
        if (wants_grad(self, 0)) {
          auto &g = self.parents[0]->grad_buffer();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double sum_dh = 0.0, sum_dh_h = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = self.grad[r * d + j] * gv[j];
              sum_dh += dh;
              sum_dh_h += dh * xhat[r * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = self.grad[r * d + j] * gv[j];
              g[r * d + j] += inv_std[r] * (dh - sum_dh * inv_d - xhat[r * d + j] * sum_dh_h * inv_d);
            }
          }
        }
        if (wants_grad(self, 1)) {
          auto &g = self.parents[1]->grad_buffer();
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % d] += self.grad[i] * xhat[i];
        }
        if (wants_grad(self, 2)) {
          auto &g = self.parents[2]->grad_buffer();
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % d] += self.grad[i];
        }
      });
}

Tensor swish(const Tensor &x) {
  return unary(
      x, [](double v) { return v * sigmoid_scalar(v); },
      [](double v, double) {
        const double s = sigmoid_scalar(v);
        return s + v * s * (1.0 - s);
      });
}

Tensor tanh(const Tensor &x) {
  return unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor &x) {
  return unary(
      x, [](double v) { return sigmoid_scalar(v); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor &x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor activate(const Tensor &x, Activation kind) {
  switch (kind) {
    case Activation::swish: return swish(x);
    case Activation::tanh: return tanh(x);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::relu: return relu(x);
  }
  throw ContractError("unknown activation");
}

Tensor glu(const Tensor &x) {
  const std::size_t d = last_extent(x, "glu");
  if (d % 2 != 0) {
    throw DimensionError("glu needs an even last extent, got shape " +
                         shape_string(x.shape()));
  }
  const std::size_t h = d / 2;
  const std::size_t rows = d == 0 ? 0 : x.numel() / d;
  Shape shape = x.shape();
  shape.back() = h;
  std::vector<double> out(rows * h);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < h; ++j)
      out[r * h + j] = x.data()[r * d + j] * sigmoid_scalar(x.data()[r * d + h + j]);
  return Tensor::make_result(std::move(shape), std::move(out), {x}, [rows, h, d](Node &self) {
    Node &p = *self.parents[0];
    auto &g = p.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < h; ++j) {
        const double a = p.value[r * d + j];
        const double s = sigmoid_scalar(p.value[r * d + h + j]);
        const double gy = self.grad[r * h + j];
        g[r * d + j] += gy * s;
        g[r * d + h + j] += gy * a * s * (1.0 - s);
      }
    }
  });
}

std::size_t conv_output_length(std::size_t length, std::size_t kernel,
                               std::size_t stride, std::size_t padding) {
  if (kernel == 0 || stride == 0) throw ContractError("conv1d: kernel and stride must be positive");
  const std::size_t padded = length + 2 * padding;
  if (padded < kernel) {
    throw DimensionError("conv1d: input length " + std::to_string(length) +
                         " with padding " + std::to_string(padding) +
                         " is shorter than kernel " + std::to_string(kernel));
  }
  return (padded - kernel) / stride + 1;
}

Tensor conv1d(const Tensor &x, const Tensor &weight, const Tensor &bias,
              std::size_t stride, std::size_t padding, ConvVariant variant) {
  if (x.rank() < 2) throw DimensionError("conv1d: input must be [..., T, C]");
  const std::size_t t_in = x.dim(-2), c_in = x.dim(-1);
  std::size_t c_out = 0, kernel = 0;
  if (variant == ConvVariant::full) {
    if (weight.rank() != 3 || weight.dim(1) != c_in) {
      throw DimensionError("conv1d: weight " + shape_string(weight.shape()) +
                           " does not match input channels " + std::to_string(c_in));
    }
    c_out = weight.dim(0);
    kernel = weight.dim(2);
  } else {
    if (weight.rank() != 2 || weight.dim(0) != c_in) {
      throw DimensionError("depthwise conv1d: weight " + shape_string(weight.shape()) +
                           " does not match channels " + std::to_string(c_in));
    }
    c_out = c_in;
    kernel = weight.dim(1);
  }
  if (bias.defined() && bias.numel() != c_out) {
    throw DimensionError("conv1d: bias " + shape_string(bias.shape()) + " for " +
                         std::to_string(c_out) + " output channels");
  }
  const std::size_t t_out = conv_output_length(t_in, kernel, stride, padding);
  const std::size_t batch = x.numel() / std::max<std::size_t>(t_in * c_in, 1);
  Shape shape = x.shape();
  shape[shape.size() - 2] = t_out;
  shape.back() = c_out;
  std::vector<double> out(batch * t_out * c_out, 0.0);
  const auto &xv = x.data();
  const auto &wv = weight.data();
  const bool full = variant == ConvVariant::full;
  // Input frame feeding output t at tap k; -1 when it falls in the padding.
  auto source = [=](std::size_t t, std::size_t k) -> std::ptrdiff_t {
    const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t * stride + k) -
                             static_cast<std::ptrdiff_t>(padding);
    return (s < 0 || s >= static_cast<std::ptrdiff_t>(t_in)) ? -1 : s;
  };
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < t_out; ++t) {
      double *y = out.data() + (b * t_out + t) * c_out;
      if (bias.defined()) std::copy_n(bias.data().begin(), c_out, y);
      for (std::size_t k = 0; k < kernel; ++k) {
        const std::ptrdiff_t s = source(t, k);
        if (s < 0) continue;
        const double *xr = xv.data() + (b * t_in + static_cast<std::size_t>(s)) * c_in;
        if (full) {
          for (std::size_t co = 0; co < c_out; ++co) {
            double acc = 0.0;
            const double *w = wv.data() + co * c_in * kernel + k;
            for (std::size_t ci = 0; ci < c_in; ++ci) acc += w[ci * kernel] * xr[ci];
            y[co] += acc;
          }
        } else {
          for (std::size_t c = 0; c < c_in; ++c) y[c] += wv[c * kernel + k] * xr[c];
        }
      }
    }
  }
  std::vector<Tensor> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return Tensor::make_result(
      std::move(shape), std::move(out), std::move(parents),
      [=](Node &self) {
        Node &xn = *self.parents[0];
        Node &wn = *self.parents[1];
        const bool gx = wants_grad(self, 0), gw = wants_grad(self, 1);
        double *dx = gx ? xn.grad_buffer().data() : nullptr;
        double *dw = gw ? wn.grad_buffer().data() : nullptr;
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t t = 0; t < t_out; ++t) {
            const double *dy = self.grad.data() + (b * t_out + t) * c_out;
            for (std::size_t k = 0; k < kernel; ++k) {
              const std::ptrdiff_t s = source(t, k);
              if (s < 0) continue;
              const std::size_t row = (b * t_in + static_cast<std::size_t>(s)) * c_in;
              const double *xr = xn.value.data() + row;
              if (full) {
                for (std::size_t co = 0; co < c_out; ++co) {
                  const double g = dy[co];
                  const std::size_t wbase = co * c_in * kernel + k;
                  for (std::size_t ci = 0; ci < c_in; ++ci) {
                    if (gx) dx[row + ci] += g * wn.value[wbase + ci * kernel];
                    if (gw) dw[wbase + ci * kernel] += g * xr[ci];
                  }
                }
              } else {
                for (std::size_t c = 0; c < c_in; ++c) {
                  if (gx) dx[row + c] += dy[c] * wn.value[c * kernel + k];
                  if (gw) dw[c * kernel + k] += dy[c] * xr[c];
                }
              }
            }
          }
        }
        if (wants_grad(self, 2)) {
          auto &db = self.parents[2]->grad_buffer();
          for (std::size_t i = 0; i < self.grad.size(); ++i) db[i % c_out] += self.grad[i];
        }
      });
}

Tensor embedding(const Tensor &table, std::span<const std::size_t> ids,
                 const Shape &ids_shape) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be [rows, d]");
  if (shape_numel(ids_shape) != ids.size()) {
    throw DimensionError("embedding: ids shape " + shape_string(ids_shape) +
                         " does not match " + std::to_string(ids.size()) + " ids");
  }
  const std::size_t rows = table.dim(0), d = table.dim(1);
  for (std::size_t id : ids) {
    if (id >= rows) {
      throw IndexError("embedding: id " + std::to_string(id) + " outside table of " +
                       std::to_string(rows) + " rows");
    }
  }
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  std::vector<double> out(idv.size() * d);
  for (std::size_t i = 0; i < idv.size(); ++i) {
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(idv[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  Shape shape = ids_shape;
  shape.push_back(d);
  return Tensor::make_result(std::move(shape), std::move(out), {table},
                             [idv = std::move(idv), d](Node &self) {
                               auto &g = self.parents[0]->grad_buffer();
                               for (std::size_t i = 0; i < idv.size(); ++i)
                                 for (std::size_t j = 0; j < d; ++j)
                                   g[idv[i] * d + j] += self.grad[i * d + j];
                             });
}

Tensor dropout(const Tensor &x, double rate, Rng &rng, bool training) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ContractError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> factors(x.numel());
  for (double &f : factors) f = uniform(rng) < rate ? 0.0 : keep_scale;
  return mul_constant(x, factors);
}

Tensor rel_shift(const Tensor &x) {
  if (x.rank() < 2) throw DimensionError("rel_shift needs rank >= 2");
  const std::size_t t_len = x.dim(-2);
  const std::size_t width = x.dim(-1);
  if (width != 2 * t_len - 1) {
    throw DimensionError("rel_shift: expected last extent " + std::to_string(2 * t_len - 1) +
                         ", got shape " + shape_string(x.shape()));
  }
  const std::size_t batch = x.numel() / (t_len * width);
  Shape shape = x.shape();
  shape.back() = t_len;
  std::vector<double> out(batch * t_len * t_len);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < t_len; ++i)
      for (std::size_t j = 0; j < t_len; ++j)
        out[(b * t_len + i) * t_len + j] = x.data()[(b * t_len + i) * width + t_len - 1 - i + j];
  return Tensor::make_result(std::move(shape), std::move(out), {x},
                             [batch, t_len, width](Node &self) {
                               auto &g = self.parents[0]->grad_buffer();
                               for (std::size_t b = 0; b < batch; ++b)
                                 for (std::size_t i = 0; i < t_len; ++i)
                                   for (std::size_t j = 0; j < t_len; ++j)
                                     g[(b * t_len + i) * width + t_len - 1 - i + j] +=
                                         self.grad[(b * t_len + i) * t_len + j];
                             });
}

}  // namespace lvctc
