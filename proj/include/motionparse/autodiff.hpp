#pragma once

// Minimal reverse-mode automatic differentiation.
//
// A `Var` is a value plus an index into the thread-local tape. Constants
// carry index -1 and never touch the tape, so mixing plain doubles into an
// expression is free. Every recorded node has at most two parents.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <type_traits>
#include <vector>

namespace motionparse::ad {

struct Node {
  std::int32_t a;
  std::int32_t b;
  double da;
  double db;
};

class Tape {
 public:
  std::int32_t push(std::int32_t a, double da, std::int32_t b, double db) {
    nodes_.push_back(Node{a, b, da, db});
    return static_cast<std::int32_t>(nodes_.size() - 1);
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }
  void reserve(std::size_t n) { nodes_.reserve(n); }

  /// Back-propagates a unit seed from `output` and returns adjoints for
  /// every node on the tape. The buffer is reused by the next call.
  const std::vector<double>& adjoints(std::int32_t output) {
    adj_.assign(nodes_.size(), 0.0);
    if (output < 0) return adj_;
    adj_[static_cast<std::size_t>(output)] = 1.0;
    for (std::size_t k = static_cast<std::size_t>(output) + 1; k-- > 0;) {
      const double g = adj_[k];
      if (g == 0.0) continue;
      const Node& n = nodes_[k];
      if (n.a >= 0) adj_[static_cast<std::size_t>(n.a)] += n.da * g;
      if (n.b >= 0) adj_[static_cast<std::size_t>(n.b)] += n.db * g;
    }
    return adj_;
  }

  void swap_storage(Tape& o) noexcept {
    nodes_.swap(o.nodes_);
    adj_.swap(o.adj_);
  }

 private:
  std::vector<Node> nodes_;
  std::vector<double> adj_;
};

inline Tape*& active_tape() {
  thread_local Tape* tape = nullptr;
  return tape;
}

class Var {
 public:
  Var() = default;
  Var(double v) : v_(v), i_(-1) {}  // NOLINT: implicit constant lift

  static Var make_leaf(double v) {
    Tape* t = active_tape();
    if (t == nullptr) throw std::logic_error("ad::Var leaf created without an active tape");
    return Var(v, t->push(-1, 0.0, -1, 0.0));
  }

  double value() const { return v_; }
  std::int32_t index() const { return i_; }
  bool is_constant() const { return i_ < 0; }

  // Records a node whose value is `v` and whose partials with respect to the
  // operands `x` and `y` are `dx` and `dy`.
  static Var unary(double v, const Var& x, double dx) {
    if (x.i_ < 0) return Var(v);
    return Var(v, active_tape()->push(x.i_, dx, -1, 0.0));
  }
  static Var binary(double v, const Var& x, double dx, const Var& y, double dy) {
    if (x.i_ < 0) return unary(v, y, dy);
    if (y.i_ < 0) return unary(v, x, dx);
    return Var(v, active_tape()->push(x.i_, dx, y.i_, dy));
  }

  Var& operator+=(const Var& o) { return *this = *this + o; }
  Var& operator-=(const Var& o) { return *this = *this - o; }
  Var& operator*=(const Var& o) { return *this = *this * o; }
  Var& operator/=(const Var& o) { return *this = *this / o; }

  friend Var operator+(const Var& x, const Var& y) { return binary(x.v_ + y.v_, x, 1.0, y, 1.0); }
  friend Var operator-(const Var& x, const Var& y) { return binary(x.v_ - y.v_, x, 1.0, y, -1.0); }
  friend Var operator*(const Var& x, const Var& y) { return binary(x.v_ * y.v_, x, y.v_, y, x.v_); }
  friend Var operator/(const Var& x, const Var& y) {
    const double r = x.v_ / y.v_;
    return binary(r, x, 1.0 / y.v_, y, -r / y.v_);
  }
  friend Var operator-(const Var& x) { return unary(-x.v_, x, -1.0); }

  friend bool operator<(const Var& x, const Var& y) { return x.v_ < y.v_; }
  friend bool operator>(const Var& x, const Var& y) { return x.v_ > y.v_; }
  friend bool operator<=(const Var& x, const Var& y) { return x.v_ <= y.v_; }
  friend bool operator>=(const Var& x, const Var& y) { return x.v_ >= y.v_; }

  friend Var exp(const Var& x) {
    const double e = std::exp(x.v_);
    return unary(e, x, e);
  }
  friend Var log(const Var& x) { return unary(std::log(x.v_), x, 1.0 / x.v_); }
  friend Var sqrt(const Var& x) {
    const double s = std::sqrt(x.v_);
    return unary(s, x, s > 0.0 ? 0.5 / s : 0.0);
  }
  // Subgradient 0 at the kink.
  friend Var abs(const Var& x) {
    const double d = x.v_ > 0.0 ? 1.0 : (x.v_ < 0.0 ? -1.0 : 0.0);
    return unary(std::abs(x.v_), x, d);
  }
  friend Var sin(const Var& x) { return unary(std::sin(x.v_), x, std::cos(x.v_)); }
  friend Var cos(const Var& x) { return unary(std::cos(x.v_), x, -std::sin(x.v_)); }

 private:
  Var(double v, std::int32_t i) : v_(v), i_(i) {}

  double v_ = 0.0;
  std::int32_t i_ = -1;
};

/// RAII scope that installs a fresh tape for the current thread.
class TapeScope {
 public:
  explicit TapeScope(std::size_t reserve = 1 << 20) : previous_(active_tape()) {
    // Take over this thread's spare buffers so repeated scopes do not
    // reallocate.
    tape_.swap_storage(spare());
    tape_.clear();
    tape_.reserve(reserve);
    active_tape() = &tape_;
  }
  ~TapeScope() {
    active_tape() = previous_;
    tape_.clear();
    tape_.swap_storage(spare());
  }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

  Tape& tape() { return tape_; }

 private:
  static Tape& spare() {
    thread_local Tape t;
    return t;
  }
  Tape tape_;
  Tape* previous_;
};

template <class T>
inline constexpr bool is_var_v = std::is_same_v<std::remove_cvref_t<T>, Var>;

inline double value_of(double x) { return x; }
inline double value_of(const Var& x) { return x.value(); }

}  // namespace motionparse::ad

namespace motionparse {
using ad::value_of;

// Scalar helpers usable for both double and ad::Var.
template <class T>
T square(const T& x) {
  return x * x;
}
}  // namespace motionparse
