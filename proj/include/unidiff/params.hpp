#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include <zlib.h>

#include "unidiff/autodiff.hpp"
#include "unidiff/errors.hpp"
#include "unidiff/tensor.hpp"

namespace unidiff {

/// Named, ordered collection of learnable arrays.
template <class T>
class ParamSet {
 public:
  using Map = std::map<std::string, Tensor<T>>;

  void add(const std::string& name, Tensor<T> value) {
    if (!entries_.emplace(name, std::move(value)).second) throw ShapeError("duplicate parameter '" + name + "'");
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  const Tensor<T>& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ShapeError("missing parameter '" + name + "'");
    return it->second;
  }
  Tensor<T>& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ShapeError("missing parameter '" + name + "'");
    return it->second;
  }

  const Map& entries() const { return entries_; }
  Map& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
  }

  /// Zero-valued set with the same names and shapes.
  ParamSet zeros_like() const {
    ParamSet z;
    for (const auto& [k, t] : entries_) z.add(k, Tensor<T>::zeros_like(t));
    return z;
  }

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& [k, t] : entries_) out.add(k, t.template cast<U>());
    return out;
  }

  bool operator==(const ParamSet& o) const { return entries_ == o.entries_; }

 private:
  Map entries_;
};

/// Throws ShapeError naming the first parameter whose name or shape differs.
template <class A, class B>
void require_same_structure(const ParamSet<A>& a, const ParamSet<B>& b) {
  auto ia = a.entries().begin();
  auto ib = b.entries().begin();
  for (; ia != a.entries().end() && ib != b.entries().end(); ++ia, ++ib) {
    if (ia->first != ib->first) throw ShapeError("parameter name mismatch: '" + ia->first + "' vs '" + ib->first + "'");
    if (ia->second.shape() != ib->second.shape())
      throw ShapeError("parameter '" + ia->first + "' shape " + shape_str(ia->second.shape()) + " vs " +
                       shape_str(ib->second.shape()));
  }
  if (ia != a.entries().end()) throw ShapeError("parameter '" + ia->first + "' missing from second set");
  if (ib != b.entries().end()) throw ShapeError("parameter '" + ib->first + "' missing from first set");
}

inline std::uint32_t crc32_bytes(const void* data, std::size_t n, std::uint32_t crc = 0) {
  const auto* p = static_cast<const Bytef*>(data);
  uLong c = crc;
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = ::crc32(c, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

inline std::string hex32(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

/// Digest of the parameter names and shapes (not the values).
template <class T>
std::string structure_digest(const ParamSet<T>& p) {
  std::string s;
  for (const auto& [k, t] : p.entries()) s += k + shape_str(t.shape()) + ";";
  return hex32(crc32_bytes(s.data(), s.size()));
}

/// Digest of the float32 parameter bytes.
template <class T>
std::string value_digest(const ParamSet<T>& p) {
  std::uint32_t c = 0;
  for (const auto& [k, t] : p.entries()) {
    c = crc32_bytes(k.data(), k.size(), c);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const float v = static_cast<float>(t[i]);
      c = crc32_bytes(&v, sizeof v, c);
    }
  }
  return hex32(c);
}

/// Makes parameters available on a tape and gathers their gradients afterwards.
template <class T>
class ParamBinder {
 public:
  ParamBinder(const ParamSet<T>& params, Tape<T>& tape, bool trainable = true)
      : params_(params), tape_(tape), trainable_(trainable) {}

  Var<T> operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    Var<T> v = tape_.reference(params_.at(name), trainable_);
    bound_.emplace(name, v);
    return v;
  }

  Tape<T>& tape() { return tape_; }
  const ParamSet<T>& params() const { return params_; }

  /// Gradient for every parameter; zeros for those the graph never touched.
  ParamSet<T> gradients() const {
    ParamSet<T> g = params_.zeros_like();
    for (const auto& [k, v] : bound_)
      if (tape_.has_grad(v.id)) g.at(k) = tape_.grad(v.id);
    return g;
  }

 private:
  const ParamSet<T>& params_;
  Tape<T>& tape_;
  bool trainable_;
  std::map<std::string, Var<T>> bound_;
};

}  // namespace unidiff
