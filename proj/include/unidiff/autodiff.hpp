#pragma once

// Minimal reverse-mode differentiation over Tensor values. A Tape records each
// operation's output together with a closure that pushes the output gradient
// back to its parents. Tapes built with record = false skip the closures and
// serve as a plain forward evaluator.

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "unidiff/kernels.hpp"
#include "unidiff/tensor.hpp"

namespace unidiff {

template <class T>
class Tape;

template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  int dim(int i) const { return value().dim(i); }
};

template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Tensor<T> v) { return push(std::move(v), false, {}); }

  /// Leaf that owns its value and accumulates a gradient.
  Var<T> variable(Tensor<T> v) { return push(std::move(v), record_, {}); }

  /// Leaf that references an external tensor (e.g. a parameter); the tensor
  /// must outlive the tape.
  Var<T> reference(const Tensor<T>& v, bool requires_grad) {
    Node n;
    n.external = &v;
    n.requires_grad = record_ && requires_grad;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  /// Record an operation result. The closure is kept only when some parent
  /// requires a gradient.
  Var<T> push(Tensor<T> v, bool requires_grad, Backward fn) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = record_ && requires_grad;
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor<T>& value(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  /// Gradient buffer of node id, allocated on first use.
  Tensor<T>& grad_ref(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty() && !value(id).empty()) n.grad = Tensor<T>::zeros_like(value(id));
    if (n.grad.shape() != value(id).shape()) n.grad = Tensor<T>::zeros_like(value(id));
    return n.grad;
  }
  const Tensor<T>& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  bool has_grad(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }

  void accumulate(int id, const Tensor<T>& g) {
    if (!requires_grad(id)) return;
    Tensor<T>& dst = grad_ref(id);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
  }

  /// Backpropagate from a scalar (single element) node.
  void backward(Var<T> root) {
    if (!record_) throw ParameterError("backward on a non-recording tape");
    if (root.value().size() != 1) throw ShapeError("backward root must be a scalar");
    if (!requires_grad(root.id)) return;
    grad_ref(root.id)[0] = T(1);
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    Backward backward;
  };

  bool record_;
  std::vector<Node> nodes_;
};

namespace ops {

namespace detail {
template <class T>
bool any_grad(std::initializer_list<Var<T>> vs) {
  for (auto v : vs)
    if (v.tape->requires_grad(v.id)) return true;
  return false;
}
}  // namespace detail

/// Convolution with "same" padding; stride 1 or 2.
template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int stride = 1) {
  Tape<T>& tp = *x.tape;
  Tensor<T> out = kernels::conv2d(x.value(), w.value(), &b.value(), stride);
  return tp.push(std::move(out), detail::any_grad({x, w, b}), [x, w, b, stride](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gx = t.requires_grad(x.id) ? &t.grad_ref(x.id) : nullptr;
    Tensor<T>* gw = t.requires_grad(w.id) ? &t.grad_ref(w.id) : nullptr;
    Tensor<T>* gb = t.requires_grad(b.id) ? &t.grad_ref(b.id) : nullptr;
    kernels::conv2d_backward(t.value(x.id), t.value(w.id), stride, g, gx, gw, gb);
  });
}

template <class T>
Var<T> deconv2x2(Var<T> x, Var<T> w, Var<T> b) {
  Tape<T>& tp = *x.tape;
  Tensor<T> out = kernels::deconv2x2(x.value(), w.value(), &b.value());
  return tp.push(std::move(out), detail::any_grad({x, w, b}), [x, w, b](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gx = t.requires_grad(x.id) ? &t.grad_ref(x.id) : nullptr;
    Tensor<T>* gw = t.requires_grad(w.id) ? &t.grad_ref(w.id) : nullptr;
    Tensor<T>* gb = t.requires_grad(b.id) ? &t.grad_ref(b.id) : nullptr;
    kernels::deconv2x2_backward(t.value(x.id), t.value(w.id), g, gx, gw, gb);
  });
}

template <class T>
Var<T> dense(Var<T> x, Var<T> w, Var<T> b) {
  Tape<T>& tp = *x.tape;
  Tensor<T> out = kernels::dense(x.value(), w.value(), b.value());
  return tp.push(std::move(out), detail::any_grad({x, w, b}), [x, w, b](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& xv = t.value(x.id);
    const Tensor<T>& wv = t.value(w.id);
    const int n_ = xv.dim(0), in = xv.dim(1), out_ = wv.dim(0);
    const bool rx = t.requires_grad(x.id), rw = t.requires_grad(w.id), rb = t.requires_grad(b.id);
    Tensor<T>* gx = rx ? &t.grad_ref(x.id) : nullptr;
    Tensor<T>* gw = rw ? &t.grad_ref(w.id) : nullptr;
    Tensor<T>* gb = rb ? &t.grad_ref(b.id) : nullptr;
    for (int n = 0; n < n_; ++n)
      for (int o = 0; o < out_; ++o) {
        const T go = g[static_cast<std::size_t>(n) * out_ + o];
        if (gb) (*gb)[o] += go;
        for (int i = 0; i < in; ++i) {
          if (gw) (*gw)[static_cast<std::size_t>(o) * in + i] += go * xv[static_cast<std::size_t>(n) * in + i];
          if (gx) (*gx)[static_cast<std::size_t>(n) * in + i] += go * wv[static_cast<std::size_t>(o) * in + i];
        }
      }
  });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape->push(std::move(out), detail::any_grad({a, b}), [a, b](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(a.id, g);
    t.accumulate(b.id, g);
  });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.vec()) v *= s;
  return a.tape->push(std::move(out), detail::any_grad({a}), [a, s](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& ga = t.grad_ref(a.id);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * g[i];
  });
}

/// x (n, c, h, w) plus per-item channel offsets v (n, c).
template <class T>
Var<T> add_channel_bias(Var<T> x, Var<T> v) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& vv = v.value();
  if (vv.rank() != 2 || vv.dim(0) != xv.dim(0) || vv.dim(1) != xv.dim(1))
    throw ShapeError("add_channel_bias: " + shape_str(xv.shape()) + " vs " + shape_str(vv.shape()));
  Tensor<T> out = xv;
  const int n_ = xv.dim(0), c_ = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  for (int n = 0; n < n_; ++n)
    for (int c = 0; c < c_; ++c) {
      T* p = out.plane(n, c);
      const T b = vv[static_cast<std::size_t>(n) * c_ + c];
      for (int i = 0; i < hw; ++i) p[i] += b;
    }
  return x.tape->push(std::move(out), detail::any_grad({x, v}), [x, v, n_, c_, hw](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(x.id, g);
    if (t.requires_grad(v.id)) {
      Tensor<T>& gv = t.grad_ref(v.id);
      for (int n = 0; n < n_; ++n)
        for (int c = 0; c < c_; ++c) {
          const T* p = g.plane(n, c);
          T s = 0;
          for (int i = 0; i < hw; ++i) s += p[i];
          gv[static_cast<std::size_t>(n) * c_ + c] += s;
        }
    }
  });
}

/// Channel-wise concatenation of (n, c_i, h, w) maps.
template <class T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) || av.dim(3) != bv.dim(3))
    throw ShapeError("concat_channels: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  const int n_ = av.dim(0), ca = av.dim(1), cb = bv.dim(1), hw = av.dim(2) * av.dim(3);
  Tensor<T> out({n_, ca + cb, av.dim(2), av.dim(3)});
  for (int n = 0; n < n_; ++n) {
    std::copy(av.item(n), av.item(n) + static_cast<std::size_t>(ca) * hw, out.item(n));
    std::copy(bv.item(n), bv.item(n) + static_cast<std::size_t>(cb) * hw, out.item(n) + static_cast<std::size_t>(ca) * hw);
  }
  return a.tape->push(std::move(out), detail::any_grad({a, b}), [a, b, n_, ca, cb, hw](Tape<T>& t, const Tensor<T>& g) {
    const std::size_t sa = static_cast<std::size_t>(ca) * hw, sb = static_cast<std::size_t>(cb) * hw;
    if (t.requires_grad(a.id)) {
      Tensor<T>& ga = t.grad_ref(a.id);
      for (int n = 0; n < n_; ++n)
        for (std::size_t i = 0; i < sa; ++i) ga.item(n)[i] += g.item(n)[i];
    }
    if (t.requires_grad(b.id)) {
      Tensor<T>& gb = t.grad_ref(b.id);
      for (int n = 0; n < n_; ++n)
        for (std::size_t i = 0; i < sb; ++i) gb.item(n)[i] += g.item(n)[sa + i];
    }
  });
}

template <class T>
Var<T> upsample2(Var<T> x) {
  Tensor<T> out = kernels::upsample2(x.value());
  return x.tape->push(std::move(out), detail::any_grad({x}), [x](Tape<T>& t, const Tensor<T>& g) {
    kernels::upsample2_backward(g, t.grad_ref(x.id));
  });
}

template <class T>
Var<T> avgpool2(Var<T> x) {
  Tensor<T> out = kernels::avgpool2(x.value());
  return x.tape->push(std::move(out), detail::any_grad({x}), [x](Tape<T>& t, const Tensor<T>& g) {
    kernels::avgpool2_backward(g, t.grad_ref(x.id));
  });
}

template <class T>
T sigmoid(T v) {
  return v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

/// x * sigmoid(x)
template <class T>
Var<T> silu(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.vec()) v = v * sigmoid(v);
  return x.tape->push(std::move(out), detail::any_grad({x}), [x](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& xv = t.value(x.id);
    Tensor<T>& gx = t.grad_ref(x.id);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const T s = sigmoid(xv[i]);
      gx[i] += g[i] * s * (T(1) + xv[i] * (T(1) - s));
    }
  });
}

/// log(1 + exp(x)), strictly positive.
template <class T>
Var<T> softplus(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.vec()) v = v > T(20) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  return x.tape->push(std::move(out), detail::any_grad({x}), [x](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& xv = t.value(x.id);
    Tensor<T>& gx = t.grad_ref(x.id);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * sigmoid(xv[i]);
  });
}

/// Per-pixel L2 normalisation across channels of (n, c, h, w).
template <class T>
Var<T> normalize_channels(Var<T> x, T eps = T(1e-12)) {
  const Tensor<T>& xv = x.value();
  const int n_ = xv.dim(0), c_ = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor<T> out(xv.shape());
  Tensor<T> inv_norm({n_, hw});
  for (int n = 0; n < n_; ++n)
    for (int p = 0; p < hw; ++p) {
      T s = 0;
      for (int c = 0; c < c_; ++c) s += xv.plane(n, c)[p] * xv.plane(n, c)[p];
      const T inv = T(1) / std::sqrt(s + eps);
      inv_norm[static_cast<std::size_t>(n) * hw + p] = inv;
      for (int c = 0; c < c_; ++c) out.plane(n, c)[p] = xv.plane(n, c)[p] * inv;
    }
  const int out_id = static_cast<int>(x.tape->size());
  auto fn = [x, out_id, inv_norm = std::move(inv_norm), n_, c_, hw](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& y = t.value(out_id);
    Tensor<T>& gx = t.grad_ref(x.id);
    for (int n = 0; n < n_; ++n)
      for (int p = 0; p < hw; ++p) {
        T dot = 0;
        for (int c = 0; c < c_; ++c) dot += y.plane(n, c)[p] * g.plane(n, c)[p];
        const T inv = inv_norm[static_cast<std::size_t>(n) * hw + p];
        for (int c = 0; c < c_; ++c) gx.plane(n, c)[p] += inv * (g.plane(n, c)[p] - y.plane(n, c)[p] * dot);
      }
  };
  return x.tape->push(std::move(out), detail::any_grad({x}), std::move(fn));
}

/// Sum of all elements of a list of scalars.
template <class T>
Var<T> sum_scalars(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("sum of no terms");
  Tape<T>& tp = *parts[0].tape;
  T s = 0;
  bool rg = false;
  for (auto p : parts) {
    s += p.value()[0];
    rg = rg || tp.requires_grad(p.id);
  }
  return tp.push(Tensor<T>({1}, std::vector<T>{s}), rg, [parts](Tape<T>& t, const Tensor<T>& g) {
    for (auto p : parts) t.accumulate(p.id, g);
  });
}

}  // namespace ops
}  // namespace unidiff
