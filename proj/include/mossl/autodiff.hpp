#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mossl/tensor.hpp"

namespace mossl {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
};

/// Records the operations of one forward pass and replays them in reverse.
///
/// Nodes are stored in creation order, which is a valid topological order, so
/// the backward sweep is a single reverse pass. Gradient buffers are allocated
/// lazily; a node that never receives a contribution has an all-zero gradient.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::span<const double> out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, {}});
    return Var{this, nodes_.size() - 1};
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    bool any = false;
    for (const Var& v : inputs) any = any || nodes_[v.id].requires_grad;
    nodes_.push_back(Node{std::move(value), {}, any, any ? std::move(backward) : Backward{}});
    return Var{this, nodes_.size() - 1};
  }

  Var record(Tensor value, const std::vector<Var>& inputs, Backward backward) {
    bool any = false;
    for (const Var& v : inputs) any = any || nodes_[v.id].requires_grad;
    nodes_.push_back(Node{std::move(value), {}, any, any ? std::move(backward) : Backward{}});
    return Var{this, nodes_.size() - 1};
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  std::span<double> grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }

  void backward(Var root) {
    if (root.tape != this) throw ConfigError("backward root belongs to another tape");
    if (nodes_[root.id].value.size() != 1) {
      throw DimensionError("backward needs a scalar root, got shape " + to_string(nodes_[root.id].value.shape()));
    }
    grad_buffer(root.id)[0] += 1.0;
    for (std::size_t id = root.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, n.grad);
    }
  }

  /// Gradient of the last backward root with respect to `v` (zeros if unreached).
  Tensor grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
    return Tensor(n.value.shape(), n.grad);
  }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }
inline bool Var::requires_grad() const { return tape->requires_grad(id); }

/// Ordered, named collection of learnable tensors.
class ParamSet {
 public:
  void add(std::string name, Tensor value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(value));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor& get(const std::string& name) { return entries_[lookup(name)].second; }
  const Tensor& get(const std::string& name) const { return entries_[lookup(name)].second; }

  std::size_t size() const noexcept { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) { return a.entries_ == b.entries_; }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return it->second;
  }

  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Parameters bound as leaves on a particular tape.
class BoundParams {
 public:
  BoundParams(Tape& tape, const ParamSet& params, bool requires_grad = true) {
    for (const auto& [name, value] : params) vars_.emplace(name, tape.leaf(value, requires_grad));
  }

  Var operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ConfigError("parameter " + name + " is not bound");
    return it->second;
  }

  bool contains(const std::string& name) const { return vars_.count(name) != 0; }

  ParamSet gradients(const Tape& tape, const ParamSet& like) const {
    ParamSet out;
    for (const auto& [name, _] : like) out.add(name, tape.grad((*this)[name]));
    return out;
  }

 private:
  std::map<std::string, Var> vars_;
};

}  // namespace mossl
