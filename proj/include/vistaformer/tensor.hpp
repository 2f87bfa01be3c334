#pragma once
// Dense row-major tensor with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a shared Node. Every op that touches a
// tensor requiring gradients records a Node carrying its parents and a
// backward rule; nodes are stamped with a monotonically increasing sequence
// number, so replaying them in descending sequence order is a valid reverse
// topological order of the recorded tape.
//
// Tensors may also be "meta": shape only, no storage. Ops propagate meta-ness
// and still report their operation counts, which lets the cost model trace
// shapes far too large to execute.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "errors.hpp"
#include "flop_counter.hpp"

namespace vf {

using Index = std::int64_t;
using Shape = std::vector<Index>;
using Rng = std::mt19937_64;

inline Index numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

inline Shape strides_of(const Shape& s) {
  Shape st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

// 64-byte aligned storage. Eigen picks its vectorised reduction order from
// the buffer alignment, so unaligned buffers would make results depend on
// where the allocator happened to place them.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t alignment = 64;

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(alignment)));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t(alignment)); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class S>
using Buffer = std::vector<S, AlignedAllocator<S>>;

template <class S>
struct Node {
  Shape shape;
  Buffer<S> data;
  Buffer<S> grad;
  bool requires_grad = false;
  bool meta = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }

  Buffer<S>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), S(0));
    return grad;
  }
};

namespace detail {
inline thread_local bool grad_enabled_flag = true;
inline thread_local std::uint64_t next_seq = 1;
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag; }

// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag) { detail::grad_enabled_flag = false; }
  ~NoGradGuard() { detail::grad_enabled_flag = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class S>
class Tensor {
 public:
  using Scalar = S;
  using NodePtr = std::shared_ptr<Node<S>>;

  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor from(Shape shape, Buffer<S> values) {
    for (Index d : shape)
      if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    if (numel_of(shape) != static_cast<Index>(values.size()))
      throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                       shape_str(shape));
    auto n = std::make_shared<Node<S>>();
    n->shape = std::move(shape);
    n->data = std::move(values);
    n->seq = detail::next_seq++;
    return Tensor(std::move(n));
  }  template <class A>
  static Tensor from(Shape shape, const std::vector<S, A>& values) {
    return from(std::move(shape), Buffer<S>(values.begin(), values.end()));
  }

  static Tensor full(Shape shape, S value) {
    const Index n = numel_of(shape);
    return from(std::move(shape), Buffer<S>(static_cast<std::size_t>(n), value));
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), S(0)); }
  static Tensor ones(Shape shape) { return full(std::move(shape), S(1)); }
  static Tensor meta(Shape shape) {
    for (Index d : shape)
      if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    auto n = std::make_shared<Node<S>>();
    n->shape = std::move(shape);
    n->meta = true;
    n->seq = detail::next_seq++;
    return Tensor(std::move(n));
  }
  static Tensor randn(Shape shape, Rng& rng, S stddev = S(1)) {
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    Buffer<S> v(static_cast<std::size_t>(numel_of(shape)));
    for (auto& x : v) x = static_cast<S>(dist(rng));
    return from(std::move(shape), std::move(v));
  }
  static Tensor uniform(Shape shape, Rng& rng, S lo, S hi) {
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    Buffer<S> v(static_cast<std::size_t>(numel_of(shape)));
    for (auto& x : v) x = static_cast<S>(dist(rng));
    return from(std::move(shape), std::move(v));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  Index dim(int i) const {
    const int n = ndim();
    if (i < 0) i += n;
    if (i < 0 || i >= n) throw ShapeError("axis out of range for shape " + shape_str(shape()));
    return node_->shape[static_cast<std::size_t>(i)];
  }
  Index numel() const { return numel_of(node_->shape); }
  bool is_meta() const { return node_->meta; }

  std::span<const S> data() const { return node_->data; }
  // Direct write access; only meaningful for leaves (parameters, inputs).
  std::span<S> mutable_data() { return node_->data; }
  S item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  S at(std::initializer_list<Index> idx) const {
    if (static_cast<int>(idx.size()) != ndim()) throw ShapeError("index rank mismatch");
    const Shape st = strides_of(shape());
    Index off = 0;
    int i = 0;
    for (Index v : idx) off += v * st[static_cast<std::size_t>(i++)];
    return node_->data[static_cast<std::size_t>(off)];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const S> grad() const { return node_->grad; }
  std::span<S> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  // Copy of the values with no graph history.
  Tensor detach() const {
    if (is_meta()) return meta(shape());
    return from(shape(), node_->data);
  }

  template <class T2>
  Tensor<T2> cast() const {
    if (is_meta()) return Tensor<T2>::meta(shape());
    std::vector<T2> v(node_->data.begin(), node_->data.end());
    return Tensor<T2>::from(shape(), std::move(v));
  }

  Node<S>* node() const { return node_.get(); }
  const NodePtr& node_ptr() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

template <class S>
bool any_meta(std::initializer_list<const Tensor<S>*> ts) {
  for (auto* t : ts)
    if (t && t->defined() && t->is_meta()) return true;
  return false;
}

// Creates an op result. When recording is enabled and any parent needs
// gradients, the node keeps its parents and backward rule.
template <class S>
Tensor<S> make_result(Shape shape, Buffer<S> data, bool meta,
                      std::initializer_list<const Tensor<S>*> parents,
                      std::function<void(Node<S>&)> backward_fn) {
  auto n = std::make_shared<Node<S>>();
  n->shape = std::move(shape);
  n->meta = meta;
  n->data = std::move(data);
  n->seq = next_seq++;
  bool needs = false;
  if (vf::grad_enabled() && !meta) {
    for (auto* p : parents)
      if (p && p->defined() && p->requires_grad()) needs = true;
  }
  if (needs) {
    n->requires_grad = true;
    for (auto* p : parents)
      if (p && p->defined()) n->parents.push_back(p->node_ptr());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor<S>(std::move(n));
}

template <class S>
bool wants_grad(const Tensor<S>& t) {
  return t.defined() && t.requires_grad();
}

template <class S>
Buffer<S>& grad_of(const Tensor<S>& t) {
  return t.node()->ensure_grad();
}

}  // namespace detail

// Populates .grad of every requires_grad leaf reachable from `loss` and
// consumes the recorded tape.
template <class S>
void backward(const Tensor<S>& loss) {
  if (loss.numel() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw ContractError("backward() on a tensor with no recorded history");

  // Shared ownership keeps every node alive until the tape is torn down;
  // closures hold the only references to some interior nodes.
  using NodePtr = std::shared_ptr<Node<S>>;
  std::vector<NodePtr> order;
  std::vector<NodePtr> stack{loss.node_ptr()};
  std::unordered_map<Node<S>*, bool> seen;
  seen[loss.node()] = true;
  while (!stack.empty()) {
    NodePtr n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents) {
      if (!p->requires_grad || seen.count(p.get())) continue;
      seen[p.get()] = true;
      stack.push_back(p);
    }
  }
  std::sort(order.begin(), order.end(), [](const NodePtr& a, const NodePtr& b) { return a->seq > b->seq; });

  loss.node()->ensure_grad()[0] = S(1);
  for (const NodePtr& n : order) {
    if (n->is_leaf() || n->grad.empty()) continue;
    n->backward_fn(*n);
  }
  for (const NodePtr& n : order) {
    if (n->is_leaf()) continue;
    n->backward_fn = nullptr;
    n->parents.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

// ---------------------------------------------------------------------------
// Element-wise arithmetic

template <class S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
}

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a, b, "add");
  record_flops(FlopCategory::Other, static_cast<std::uint64_t>(a.numel()) * OtherRates::elementwise);
  const bool meta = detail::any_meta<S>({&a, &b});
  Buffer<S> out;
  if (!meta) {
    out.resize(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  }
  return detail::make_result<S>(a.shape(), std::move(out), meta, {&a, &b}, [a, b](Node<S>& self) {
    for (const Tensor<S>* p : {&a, &b}) {
      if (!detail::wants_grad(*p)) continue;
      auto& g = detail::grad_of(*p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a, b, "sub");
  record_flops(FlopCategory::Other, static_cast<std::uint64_t>(a.numel()) * OtherRates::elementwise);
  const bool meta = detail::any_meta<S>({&a, &b});
  Buffer<S> out;
  if (!meta) {
    out.resize(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  }
  return detail::make_result<S>(a.shape(), std::move(out), meta, {&a, &b}, [a, b](Node<S>& self) {
    if (detail::wants_grad(a)) {
      auto& g = detail::grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants_grad(b)) {
      auto& g = detail::grad_of(b);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape(a, b, "mul");
  record_flops(FlopCategory::Other, static_cast<std::uint64_t>(a.numel()) * OtherRates::elementwise);
  const bool meta = detail::any_meta<S>({&a, &b});
  Buffer<S> out;
  if (!meta) {
    out.resize(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  }
  return detail::make_result<S>(a.shape(), std::move(out), meta, {&a, &b}, [a, b](Node<S>& self) {
    if (detail::wants_grad(a)) {
      auto& g = detail::grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b.data()[i];
    }
    if (detail::wants_grad(b)) {
      auto& g = detail::grad_of(b);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a.data()[i];
    }
  });
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  record_flops(FlopCategory::Other, static_cast<std::uint64_t>(a.numel()) * OtherRates::elementwise);
  Buffer<S> out;
  if (!a.is_meta()) {
    out.resize(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  }
  return detail::make_result<S>(a.shape(), std::move(out), a.is_meta(), {&a}, [a, factor](Node<S>& self) {
    auto& g = detail::grad_of(a);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& a, S value) {
  record_flops(FlopCategory::Other, static_cast<std::uint64_t>(a.numel()) * OtherRates::elementwise);
  Buffer<S> out;
  if (!a.is_meta()) {
    out.resize(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + value;
  }
  return detail::make_result<S>(a.shape(), std::move(out), a.is_meta(), {&a}, [a](Node<S>& self) {
    auto& g = detail::grad_of(a);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <class S>
Tensor<S> sum(const Tensor<S>& a) {
  if (a.is_meta()) return Tensor<S>::meta({1});
  S acc = 0;
  for (S v : a.data()) acc += v;
  return detail::make_result<S>({1}, {acc}, false, {&a}, [a](Node<S>& self) {
    auto& g = detail::grad_of(a);
    const S go = self.grad[0];
    for (auto& x : g) x += go;
  });
}

template <class S>
Tensor<S> mean(const Tensor<S>& a) {
  return scale(sum(a), S(1) / static_cast<S>(a.numel()));
}

// ---------------------------------------------------------------------------
// Layout

template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (numel_of(shape) != a.numel())
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Buffer<S> out;
  if (!a.is_meta()) out.assign(a.data().begin(), a.data().end());
  return detail::make_result<S>(std::move(shape), std::move(out), a.is_meta(), {&a}, [a](Node<S>& self) {
    auto& g = detail::grad_of(a);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

namespace detail {

// dst[out_index] (op)= src[permuted index], out_shape = in_shape[perm].
template <class S, bool Accumulate>
void permute_copy(const S* src, const Shape& in_shape, const std::vector<int>& perm, S* dst) {
  const int nd = static_cast<int>(in_shape.size());
  const Shape in_st = strides_of(in_shape);
  Shape out_shape(nd), src_st(nd);
  for (int i = 0; i < nd; ++i) {
    out_shape[i] = in_shape[perm[i]];
    src_st[i] = in_st[perm[i]];
  }
  const Index total = numel_of(out_shape);
  const Index inner = out_shape[nd - 1];
  const Index inner_st = src_st[nd - 1];
  std::vector<Index> idx(nd, 0);
  Index off = 0;
  for (Index o = 0; o < total; o += inner) {
    S* d = dst + o;
    const S* s = src + off;
    for (Index j = 0; j < inner; ++j) {
      if constexpr (Accumulate) d[j] += s[j * inner_st];
      else d[j] = s[j * inner_st];
    }
    for (int ax = nd - 2; ax >= 0; --ax) {
      ++idx[ax];
      off += src_st[ax];
      if (idx[ax] < out_shape[ax]) break;
      off -= src_st[ax] * out_shape[ax];
      idx[ax] = 0;
    }
  }
}

}  // namespace detail

template <class S>
Tensor<S> permute(const Tensor<S>& a, std::vector<int> perm) {
  const int nd = a.ndim();
  if (static_cast<int>(perm.size()) != nd) throw ShapeError("permute rank mismatch for " + shape_str(a.shape()));
  std::vector<int> inverse(nd, -1);
  for (int i = 0; i < nd; ++i) {
    if (perm[i] < 0 || perm[i] >= nd || inverse[perm[i]] != -1) throw ShapeError("invalid permutation");
    inverse[perm[i]] = i;
  }
  Shape out_shape(nd);
  for (int i = 0; i < nd; ++i) out_shape[i] = a.shape()[perm[i]];
  Buffer<S> out;
  if (!a.is_meta()) {
    out.resize(a.data().size());
    detail::permute_copy<S, false>(a.data().data(), a.shape(), perm, out.data());
  }
  return detail::make_result<S>(out_shape, std::move(out), a.is_meta(), {&a},
                                [a, inverse, out_shape](Node<S>& self) {
                                  auto& g = detail::grad_of(a);
                                  detail::permute_copy<S, true>(self.grad.data(), out_shape, inverse, g.data());
                                });
}

namespace detail {
// Splits a shape around `axis` into (outer, extent, inner) for axis-wise loops.
inline std::tuple<Index, Index, Index> axis_split(const Shape& s, int axis) {
  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) inner *= s[i];
  return {outer, s[axis], inner};
}
inline int norm_axis(int axis, int nd) {
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw ShapeError("axis " + std::to_string(axis) + " out of range");
  return axis;
}
}  // namespace detail

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const int nd = parts[0].ndim();
  axis = detail::norm_axis(axis, nd);
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  bool meta = false;
  for (const auto& p : parts) {
    if (p.ndim() != nd) throw ShapeError("concat rank mismatch");
    for (int i = 0; i < nd; ++i)
      if (i != axis && p.shape()[i] != parts[0].shape()[i])
        throw ShapeError("concat: shapes " + shape_str(parts[0].shape()) + " and " + shape_str(p.shape()) +
                         " differ off the concat axis");
    out_shape[axis] += p.shape()[axis];
    meta = meta || p.is_meta();
  }
  auto [outer, total_extent, inner] = detail::axis_split(out_shape, axis);
  Buffer<S> out;
  if (!meta) {
    out.resize(static_cast<std::size_t>(numel_of(out_shape)));
    Index offset = 0;
    for (const auto& p : parts) {
      const Index ext = p.shape()[axis];
      for (Index o = 0; o < outer; ++o)
        std::copy_n(p.data().data() + o * ext * inner, ext * inner,
                    out.data() + (o * total_extent + offset) * inner);
      offset += ext;
    }
  }
  auto node = std::make_shared<Node<S>>();
  node->shape = out_shape;
  node->meta = meta;
  node->data = std::move(out);
  node->seq = detail::next_seq++;
  bool needs = false;
  if (vf::grad_enabled() && !meta)
    for (const auto& p : parts) needs = needs || p.requires_grad();
  if (needs) {
    node->requires_grad = true;
    for (const auto& p : parts) node->parents.push_back(p.node_ptr());
    node->backward_fn = [parts, axis, outer, total_extent, inner](Node<S>& self) {
      Index offset = 0;
      for (const auto& p : parts) {
        const Index ext = p.shape()[axis];
        if (p.requires_grad()) {
          auto& g = detail::grad_of(p);
          for (Index o = 0; o < outer; ++o) {
            const S* src = self.grad.data() + (o * total_extent + offset) * inner;
            S* dst = g.data() + o * ext * inner;
            for (Index j = 0; j < ext * inner; ++j) dst[j] += src[j];
          }
        }
        offset += ext;
      }
    };
  }
  return Tensor<S>(std::move(node));
}

// Slice [start, start+length) along `axis`.
template <class S>
Tensor<S> narrow(const Tensor<S>& a, int axis, Index start, Index length) {
  axis = detail::norm_axis(axis, a.ndim());
  if (start < 0 || length <= 0 || start + length > a.shape()[axis])
    throw ShapeError("narrow out of range on " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  auto [outer, ext, inner] = detail::axis_split(a.shape(), axis);
  Buffer<S> out;
  if (!a.is_meta()) {
    out.resize(static_cast<std::size_t>(numel_of(out_shape)));
    for (Index o = 0; o < outer; ++o)
      std::copy_n(a.data().data() + (o * ext + start) * inner, length * inner, out.data() + o * length * inner);
  }
  return detail::make_result<S>(out_shape, std::move(out), a.is_meta(), {&a},
                                [a, outer, ext, inner, start, length](Node<S>& self) {
                                  auto& g = detail::grad_of(a);
                                  for (Index o = 0; o < outer; ++o) {
                                    const S* src = self.grad.data() + o * length * inner;
                                    S* dst = g.data() + (o * ext + start) * inner;
                                    for (Index j = 0; j < length * inner; ++j) dst[j] += src[j];
                                  }
                                });
}

// Zero-pads `amount` entries at the trailing end of `axis`.
template <class S>
Tensor<S> pad_end(const Tensor<S>& a, int axis, Index amount) {
  axis = detail::norm_axis(axis, a.ndim());
  if (amount < 0) throw ShapeError("negative padding");
  if (amount == 0) return a;
  Shape out_shape = a.shape();
  out_shape[axis] += amount;
  auto [outer, ext, inner] = detail::axis_split(a.shape(), axis);
  const Index out_ext = ext + amount;
  Buffer<S> out;
  if (!a.is_meta()) {
    out.assign(static_cast<std::size_t>(numel_of(out_shape)), S(0));
    for (Index o = 0; o < outer; ++o)
      std::copy_n(a.data().data() + o * ext * inner, ext * inner, out.data() + o * out_ext * inner);
  }
  return detail::make_result<S>(out_shape, std::move(out), a.is_meta(), {&a},
                                [a, outer, ext, inner, out_ext](Node<S>& self) {
                                  auto& g = detail::grad_of(a);
                                  for (Index o = 0; o < outer; ++o) {
                                    const S* src = self.grad.data() + o * out_ext * inner;
                                    S* dst = g.data() + o * ext * inner;
                                    for (Index j = 0; j < ext * inner; ++j) dst[j] += src[j];
                                  }
                                });
}

// Maximum along `axis`, keeping the axis with extent 1. Gradient flows to the
// first maximising entry.
template <class S>
Tensor<S> max_along(const Tensor<S>& a, int axis) {
  axis = detail::norm_axis(axis, a.ndim());
  Shape out_shape = a.shape();
  out_shape[axis] = 1;
  auto [outer, ext, inner] = detail::axis_split(a.shape(), axis);
  record_flops(FlopCategory::Other, static_cast<std::uint64_t>(a.numel()) * OtherRates::pool);
  Buffer<S> out;
  std::vector<Index> arg;
  if (!a.is_meta()) {
    out.resize(static_cast<std::size_t>(outer * inner));
    arg.resize(out.size());
    for (Index o = 0; o < outer; ++o)
      for (Index i = 0; i < inner; ++i) {
        const S* p = a.data().data() + o * ext * inner + i;
        Index best = 0;
        for (Index e = 1; e < ext; ++e)
          if (p[e * inner] > p[best * inner]) best = e;
        out[o * inner + i] = p[best * inner];
        arg[o * inner + i] = best;
      }
  }
  return detail::make_result<S>(out_shape, std::move(out), a.is_meta(), {&a},
                                [a, arg = std::move(arg), ext, inner](Node<S>& self) {
                                  auto& g = detail::grad_of(a);
                                  for (std::size_t k = 0; k < arg.size(); ++k) {
                                    const Index o = static_cast<Index>(k) / inner, i = static_cast<Index>(k) % inner;
                                    g[(o * ext + arg[k]) * inner + i] += self.grad[k];
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {
template <class S>
using MatR = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapR = Eigen::Map<MatR<S>>;
template <class S>
using CMapR = Eigen::Map<const MatR<S>>;
}  // namespace detail

// Batched matrix product with broadcasting over leading dimensions.
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() < 2 || b.ndim() < 2 || a.dim(-1) != b.dim(-2))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const Index M = a.dim(-2), K = a.dim(-1), N = b.dim(-1);
  const int nb = std::max(a.ndim(), b.ndim()) - 2;
  Shape batch(nb), a_bst(nb, 0), b_bst(nb, 0);
  {
    const Shape ast = strides_of(a.shape()), bst = strides_of(b.shape());
    for (int i = 0; i < nb; ++i) {
      const int ia = a.ndim() - 2 - nb + i, ib = b.ndim() - 2 - nb + i;
      const Index da = ia >= 0 ? a.shape()[ia] : 1, db = ib >= 0 ? b.shape()[ib] : 1;
      if (da != db && da != 1 && db != 1)
        throw ShapeError("matmul: batch dims of " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " do not broadcast");
      batch[i] = std::max(da, db);
      if (ia >= 0 && da != 1) a_bst[i] = ast[ia];
      if (ib >= 0 && db != 1) b_bst[i] = bst[ib];
    }
  }
  const Index nbatch = numel_of(batch);
  Shape out_shape = batch;
  out_shape.push_back(M);
  out_shape.push_back(N);
  record_flops(FlopCategory::Linear, static_cast<std::uint64_t>(nbatch * M * K * N));

  std::vector<Index> a_off(nbatch), b_off(nbatch);
  for (Index t = 0; t < nbatch; ++t) {
    Index rem = t, ao = 0, bo = 0;
    for (int i = nb - 1; i >= 0; --i) {
      const Index idx = rem % batch[i];
      rem /= batch[i];
      ao += idx * a_bst[i];
      bo += idx * b_bst[i];
    }
    a_off[t] = ao;
    b_off[t] = bo;
  }
  const bool meta = detail::any_meta<S>({&a, &b});
  Buffer<S> out;
  if (!meta) {
    out.resize(static_cast<std::size_t>(nbatch * M * N));
    for (Index t = 0; t < nbatch; ++t)
      detail::MapR<S>(out.data() + t * M * N, M, N).noalias() =
          detail::CMapR<S>(a.data().data() + a_off[t], M, K) * detail::CMapR<S>(b.data().data() + b_off[t], K, N);
  }
  return detail::make_result<S>(
      out_shape, std::move(out), meta, {&a, &b}, [a, b, a_off, b_off, M, K, N](Node<S>& self) {
        const Index nbatch = static_cast<Index>(a_off.size());
        for (Index t = 0; t < nbatch; ++t) {
          detail::CMapR<S> go(self.grad.data() + t * M * N, M, N);
          if (detail::wants_grad(a))
            detail::MapR<S>(detail::grad_of(a).data() + a_off[t], M, K).noalias() +=
                go * detail::CMapR<S>(b.data().data() + b_off[t], K, N).transpose();
          if (detail::wants_grad(b))
            detail::MapR<S>(detail::grad_of(b).data() + b_off[t], K, N).noalias() +=
                detail::CMapR<S>(a.data().data() + a_off[t], M, K).transpose() * go;
        }
      });
}

// y[..., out] = x[..., in] W^T + b, with W of shape (out, in).
template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b = {}) {
  if (w.ndim() != 2 || x.dim(-1) != w.dim(1))
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  const Index in = w.dim(1), outc = w.dim(0);
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != outc))
    throw ShapeError("linear: bias " + shape_str(b.shape()) + " vs weight " + shape_str(w.shape()));
  const Index rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outc;
  record_flops(FlopCategory::Linear, static_cast<std::uint64_t>(rows * in * outc));
  const bool meta = detail::any_meta<S>({&x, &w, &b});
  Buffer<S> out;
  if (!meta) {
    out.resize(static_cast<std::size_t>(rows * outc));
    detail::MapR<S> Y(out.data(), rows, outc);
    Y.noalias() = detail::CMapR<S>(x.data().data(), rows, in) * detail::CMapR<S>(w.data().data(), outc, in).transpose();
    if (b.defined()) Y.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(b.data().data(), outc);
  }
  return detail::make_result<S>(out_shape, std::move(out), meta, {&x, &w, &b}, [x, w, b, rows, in, outc](Node<S>& self) {
    detail::CMapR<S> go(self.grad.data(), rows, outc);
    if (detail::wants_grad(x))
      detail::MapR<S>(detail::grad_of(x).data(), rows, in).noalias() +=
          go * detail::CMapR<S>(w.data().data(), outc, in);
    if (detail::wants_grad(w))
      detail::MapR<S>(detail::grad_of(w).data(), outc, in).noalias() +=
          go.transpose() * detail::CMapR<S>(x.data().data(), rows, in);
    if (detail::wants_grad(b)) {
      auto& gb = detail::grad_of(b);
      Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(gb.data(), outc) += go.colwise().sum();
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax

template <class S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  axis = detail::norm_axis(axis, x.ndim());
  auto [outer, ext, inner] = detail::axis_split(x.shape(), axis);
  record_flops(FlopCategory::Other, static_cast<std::uint64_t>(x.numel()) * OtherRates::softmax);
  Buffer<S> out;
  if (!x.is_meta()) {
    out.resize(x.data().size());
    for (Index o = 0; o < outer; ++o)
      for (Index i = 0; i < inner; ++i) {
        const S* p = x.data().data() + o * ext * inner + i;
        S* q = out.data() + o * ext * inner + i;
        S mx = p[0];
        for (Index e = 1; e < ext; ++e) mx = std::max(mx, p[e * inner]);
        S total = 0;
        for (Index e = 0; e < ext; ++e) {
          q[e * inner] = std::exp(p[e * inner] - mx);
          total += q[e * inner];
        }
        for (Index e = 0; e < ext; ++e) q[e * inner] /= total;
      }
  }
  auto result = detail::make_result<S>(x.shape(), std::move(out), x.is_meta(), {&x}, nullptr);
  if (result.requires_grad()) {
    // Reads the output values from the node itself.
    result.node()->backward_fn = [x, outer, ext, inner](Node<S>& self) {
      auto& g = detail::grad_of(x);
      for (Index o = 0; o < outer; ++o)
        for (Index i = 0; i < inner; ++i) {
          const Index base = o * ext * inner + i;
          S dot = 0;
          for (Index e = 0; e < ext; ++e) dot += self.grad[base + e * inner] * self.data[base + e * inner];
          for (Index e = 0; e < ext; ++e)
            g[base + e * inner] += self.data[base + e * inner] * (self.grad[base + e * inner] - dot);
        }
    };
  }
  return result;
}

}  // namespace vf
