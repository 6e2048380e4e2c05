#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

// Dense float32 tensors with eager reverse-mode autodiff. The graph is built
// per forward pass and released by backward().

namespace nsr {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};
struct IndexError : std::runtime_error {
  explicit IndexError(const std::string& m) : std::runtime_error(m) {}
};
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& m) : std::runtime_error(m) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};

using Shape = std::vector<int>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

inline void check_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b)
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Shape shape;
  std::vector<float> val;
  bool requires_grad = false;
  std::vector<float> grad;                  // lazily allocated, zero-filled
  std::vector<NodePtr> parents;             // graph edges, cleared after backward
  std::function<void(Node&)> backfn;        // accumulates into parent grads
  int visit_tag = 0;
  bool freed = false;                       // op node whose graph was released

  float* gptr() {
    if (grad.empty()) grad.assign(val.size(), 0.f);
    return grad.data();
  }
};

inline bool& grad_mode() {
  thread_local bool on = true;
  return on;
}

struct NoGrad {
  bool prev;
  NoGrad() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGrad() { grad_mode() = prev; }
};

// Forward ops assert finite outputs when enabled (on by default).
inline bool& finite_checks() {
  thread_local bool on = true;
  return on;
}

inline void assert_finite(const char* op, const std::vector<float>& v) {
  if (!finite_checks()) return;
  for (float x : v)
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite value produced");
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : n_(std::move(n)) {}

  static Tensor zeros(Shape s, bool requires_grad = false) {
    return full(std::move(s), 0.f, requires_grad);
  }
  static Tensor full(Shape s, float v, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->val.assign((size_t)numel_of(s), v);
    n->shape = std::move(s);
    n->requires_grad = requires_grad && grad_mode();
    return Tensor(n);
  }
  static Tensor from(Shape s, std::vector<float> v, bool requires_grad = false) {
    if ((int64_t)v.size() != numel_of(s))
      throw ShapeError("Tensor::from: data length " + std::to_string(v.size()) +
                       " does not match shape " + shape_str(s));
    auto n = std::make_shared<Node>();
    n->shape = std::move(s);
    n->val = std::move(v);
    n->requires_grad = requires_grad && grad_mode();
    return Tensor(n);
  }
  static Tensor scalar(float v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape[(size_t)i]; }
  int ndim() const { return (int)n_->shape.size(); }
  int64_t numel() const { return (int64_t)n_->val.size(); }
  float* data() { return n_->val.data(); }
  const float* data() const { return n_->val.data(); }
  std::vector<float>& vec() { return n_->val; }
  const std::vector<float>& vec() const { return n_->val; }
  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rg) { n_->requires_grad = rg; }

  // Zero-filled on first access, so unreached leaves report zero gradients.
  const float* grad() const { return n_->gptr(); }
  std::vector<float>& grad_vec() { n_->gptr(); return n_->grad; }
  bool grad_allocated() const { return !n_->grad.empty(); }
  void zero_grad() { n_->grad.clear(); }

  float item() const {
    if (numel() != 1) throw UsageError("item: tensor has " + std::to_string(numel()) + " elements");
    return n_->val[0];
  }
  float at(std::initializer_list<int> idx) const {
    size_t off = 0;
    size_t i = 0;
    for (int v : idx) off = off * (size_t)n_->shape[i++] + (size_t)v;
    return n_->val[off];
  }

  NodePtr node() const { return n_; }

 private:
  NodePtr n_;
};

// Builds the result of an op; drops graph bookkeeping when grads are off or
// no parent participates.
inline Tensor make_op(const char* name, Shape shape, std::vector<float> val,
                      std::vector<Tensor> parents, std::function<void(Node&)> backfn) {
  assert_finite(name, val);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->val = std::move(val);
  bool rg = false;
  if (grad_mode())
    for (const auto& p : parents) rg = rg || p.requires_grad();
  n->requires_grad = rg;
  if (rg) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backfn = std::move(backfn);
  }
  return Tensor(n);
}

// Reverse-mode sweep from a scalar loss. Visits every reachable node exactly
// once in reverse topological order, then frees the graph edges.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw UsageError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  static thread_local int tag_counter = 0;
  const int tag = ++tag_counter;

  if (loss.node()->freed) throw UsageError("backward: graph already released by an earlier backward");

  std::vector<Node*> order;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.push_back({loss.node().get(), 0});
  loss.node()->visit_tag = tag;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->freed)
      throw UsageError("backward: graph already released by an earlier backward");
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && p->visit_tag != tag) {
        p->visit_tag = tag;
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad.assign(1, 1.f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backfn && !n->grad.empty()) n->backfn(*n);
  }
  for (Node* n : order) {
    if (n->backfn) n->freed = true;
    n->parents.clear();
    n->backfn = nullptr;
  }
}

}  // namespace nsr
