#pragma once

// Dense row-major tensor of doubles with a dynamically recorded tape for
// reverse-mode differentiation.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lvctc/errors.hpp"

namespace lvctc {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape &shape);
std::string shape_string(const Shape &shape);

// Graph recording is on by default. NoGradGuard turns it off for the current
// thread, so results of ops never require grad (inference).
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard &) = delete;
  NoGradGuard &operator=(const NoGradGuard &) = delete;

 private:
  bool prev_;
};

class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until something flows into it
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads `self.grad` and accumulates into the parents' grad buffers.
    std::function<void(Node &self)> backward;

    std::vector<double> &grad_buffer();
  };

  Tensor() = default;

  static Tensor zeros(const Shape &shape, bool requires_grad = false);
  static Tensor full(const Shape &shape, double value, bool requires_grad = false);
  static Tensor from(const Shape &shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape &shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  // Negative axes count from the end.
  std::size_t dim(int axis) const;
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  // Direct write access; meant for leaves (parameters, inputs).
  std::span<double> mutable_data() { return node_->value; }
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Empty span when no gradient reached this tensor.
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad();
  void zero_grad();
  void clear_grad() { node_->grad.clear(); }

  // New leaf holding a copy of the values, cut from the graph.
  Tensor detach() const;
  bool same_node(const Tensor &other) const { return node_ == other.node_; }
  const Node *node_id() const { return node_.get(); }

  // Reverse-mode accumulation from a scalar.
  void backward() const;

  // Builds a result node. Parents and the backward closure are kept only when
  // recording is enabled and at least one parent requires grad.
  static Tensor make_result(Shape shape, std::vector<double> value,
                            std::vector<Tensor> parents,
                            std::function<void(Node &self)> backward);

  const std::shared_ptr<Node> &node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

}  // namespace lvctc
