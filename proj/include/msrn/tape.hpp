#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "msrn/error.hpp"
#include "msrn/tensor.hpp"

namespace msrn {

/// Handle to a value recorded on a Tape.
struct Var {
  static constexpr std::size_t kInvalid = std::numeric_limits<std::size_t>::max();
  std::size_t id = kInvalid;
  bool valid() const noexcept { return id != kInvalid; }
};

/// Everything a backward rule may read. grad_inputs[i] is null when input i
/// does not need a gradient.
struct BackwardArgs {
  const Tensor& output;
  const Tensor& grad_output;
  std::span<const Tensor* const> inputs;
  std::span<Tensor* const> grad_inputs;
};

using BackwardFn = std::function<void(const BackwardArgs&)>;

/// Gradients of named leaves, in the order the leaves were registered.
class GradientMap {
 public:
  void insert(std::string name, Tensor grad) {
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(grad));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("no gradient recorded for '" + name + "'");
    return entries_[it->second].second;
  }

  std::size_t size() const noexcept { return entries_.size(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Single-use record of executed operations for reverse-mode differentiation.
///
/// Leaves are created with parameter() or input(); operations append nodes via
/// record(). backward() replays the nodes in exact reverse order and returns
/// the gradient of every named leaf that requires one. A leaf that did not
/// participate in the loss gets an all-zero gradient.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  // Registers a named learnable. Registering the same name twice returns the
  // original handle.
  Var parameter(const std::string& name, const Tensor& value) {
    if (auto it = names_.find(name); it != names_.end()) return Var{it->second};
    return push_leaf(name, value, true);
  }

  // Registers a data leaf; pass a name and requires_grad to read its gradient.
  Var input(Tensor value, bool requires_grad = false, std::string name = {}) {
    if (requires_grad && name.empty()) name = "input:" + std::to_string(nodes_.size());
    if (!name.empty() && names_.count(name)) throw UsageError("duplicate leaf name '" + name + "'");
    return push_leaf(std::move(name), std::move(value), requires_grad);
  }

  Var constant(Tensor value) { return input(std::move(value), false); }

  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward,
             const std::string& op_name) {
    ensure_writable();
    require_finite(value, op_name);
    bool needs_grad = false;
    for (Var v : inputs) {
      check(v);
      needs_grad = needs_grad || nodes_[v.id].requires_grad;
    }
    Node node;
    node.value = std::move(value);
    node.inputs.reserve(inputs.size());
    for (Var v : inputs) node.inputs.push_back(v.id);
    node.requires_grad = needs_grad;
    if (needs_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var{nodes_.size() - 1};
  }

  const Tensor& value(Var v) const {
    check(v);
    return nodes_[v.id].value;
  }

  bool requires_grad(Var v) const {
    check(v);
    return nodes_[v.id].requires_grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

  // Node ids in the order backward() visited them (operation nodes only).
  const std::vector<std::size_t>& visit_order() const noexcept { return visit_order_; }

  GradientMap backward(Var loss) {
    if (consumed_) throw UsageError("tape already consumed by a previous backward pass");
    check(loss);
    if (nodes_[loss.id].value.size() != 1) {
      throw UsageError("backward requires a scalar loss, got shape " +
                       shape_str(nodes_[loss.id].value.shape()));
    }
    consumed_ = true;

    std::vector<Tensor> grads(nodes_.size());
    if (nodes_[loss.id].requires_grad) {
      grads[loss.id] = Tensor(nodes_[loss.id].value.shape(), 1.0);
    }
    visit_order_.clear();
    std::vector<const Tensor*> input_values;
    std::vector<Tensor*> input_grads;
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& node = nodes_[id];
      if (!node.backward) continue;
      visit_order_.push_back(id);
      if (grads[id].empty() && node.value.size() != 0) continue;  // no upstream gradient
      input_values.clear();
      input_grads.clear();
      for (std::size_t in : node.inputs) {
        input_values.push_back(&nodes_[in].value);
        if (nodes_[in].requires_grad) {
          if (grads[in].empty()) grads[in] = Tensor::zeros_like(nodes_[in].value);
          input_grads.push_back(&grads[in]);
        } else {
          input_grads.push_back(nullptr);
        }
      }
      node.backward(BackwardArgs{node.value, grads[id], input_values, input_grads});
      for (Tensor* g : input_grads) {
        if (g) require_finite(*g, "backward pass");
      }
    }

    GradientMap out;
    for (std::size_t id : leaf_order_) {
      const Node& node = nodes_[id];
      if (!node.requires_grad) continue;
      out.insert(node.name, grads[id].empty() ? Tensor::zeros_like(node.value) : std::move(grads[id]));
    }
    return out;
  }

 private:
  struct Node {
    std::string name;
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push_leaf(std::string name, Tensor value, bool requires_grad) {
    ensure_writable();
    require_finite(value, name.empty() ? "tape input" : name);
    Node node;
    node.name = name;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    nodes_.push_back(std::move(node));
    const std::size_t id = nodes_.size() - 1;
    if (!name.empty()) names_.emplace(std::move(name), id);
    leaf_order_.push_back(id);
    return Var{id};
  }

  void ensure_writable() const {
    if (consumed_) throw UsageError("cannot record on a consumed tape");
  }

  void check(Var v) const {
    if (!v.valid() || v.id >= nodes_.size()) throw UsageError("variable does not belong to this tape");
  }

  std::vector<Node> nodes_;
  std::vector<std::size_t> leaf_order_;
  std::map<std::string, std::size_t> names_;
  std::vector<std::size_t> visit_order_;
  bool consumed_ = false;
};

}  // namespace msrn
