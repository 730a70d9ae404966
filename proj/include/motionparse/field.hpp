#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "motionparse/autodiff.hpp"

namespace motionparse {

/// Raised when an input violates an operation's mathematical precondition.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Dense row-major grid with interleaved channels.
template <class T>
class Field {
 public:
  using value_type = T;

  Field() = default;
  Field(int width, int height, int channels = 1, T fill = T{})
      : width_(width), height_(height), channels_(channels) {
    if (width < 0 || height < 0 || channels < 1)
      throw DomainError("Field: invalid shape " + std::to_string(width) + "x" +
                        std::to_string(height) + "x" + std::to_string(channels));
    data_.assign(static_cast<std::size_t>(width) * height * channels, fill);
  }

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }
  std::size_t pixels() const { return static_cast<std::size_t>(width_) * height_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(int x, int y, int c = 0) { return data_[index(x, y, c)]; }
  const T& operator()(int x, int y, int c = 0) const { return data_[index(x, y, c)]; }

  std::size_t index(int x, int y, int c = 0) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  template <class U>
  bool same_shape(const Field<U>& o) const {
    return width_ == o.width() && height_ == o.height() && channels_ == o.channels();
  }
  template <class U>
  bool same_grid(const Field<U>& o) const {
    return width_ == o.width() && height_ == o.height();
  }

  friend bool operator==(const Field& a, const Field& b) {
    return a.width_ == b.width_ && a.height_ == b.height_ && a.channels_ == b.channels_ &&
           a.data_ == b.data_;
  }

 private:
  int width_ = 0;
  int height_ = 0;
  int channels_ = 1;
  std::vector<T> data_;
};

using ScalarField = Field<double>;
using VectorField = Field<double>;
using MaskField = Field<std::uint8_t>;

template <class U, class T>
Field<U> cast_field(const Field<T>& f) {
  Field<U> out(f.width(), f.height(), f.channels());
  for (std::size_t i = 0; i < f.size(); ++i) out.data()[i] = U(f.data()[i]);
  return out;
}

template <class T>
ScalarField values_of(const Field<T>& f) {
  ScalarField out(f.width(), f.height(), f.channels());
  for (std::size_t i = 0; i < f.size(); ++i) out.data()[i] = value_of(f.data()[i]);
  return out;
}

template <class T>
Field<T> channel(const Field<T>& f, int c) {
  Field<T> out(f.width(), f.height(), 1);
  for (int y = 0; y < f.height(); ++y)
    for (int x = 0; x < f.width(); ++x) out(x, y) = f(x, y, c);
  return out;
}

inline void require_same_grid(const auto& a, const auto& b, const char* what) {
  if (!a.same_grid(b))
    throw DomainError(std::string(what) + ": grid mismatch (" + std::to_string(a.width()) + "x" +
                      std::to_string(a.height()) + " vs " + std::to_string(b.width()) + "x" +
                      std::to_string(b.height()) + ")");
}

// ---------------------------------------------------------------------------
// Parallelism. MOTIONPARSE_THREADS caps the worker count (0 or unset = auto).

inline unsigned worker_count() {
  unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("MOTIONPARSE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return static_cast<unsigned>(std::min<long>(v, 256));
  }
  return hw;
}

/// Runs fn(row_begin, row_end) over contiguous row tiles. Tiles write
/// disjoint outputs, so the result does not depend on the worker count.
template <class Fn>
void parallel_rows(int rows, Fn&& fn) {
  const unsigned workers = std::min<unsigned>(worker_count(), static_cast<unsigned>(std::max(rows, 1)));
  if (workers <= 1 || rows < 16) {
    fn(0, rows);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const int chunk = (rows + static_cast<int>(workers) - 1) / static_cast<int>(workers);
  for (unsigned w = 0; w < workers; ++w) {
    const int begin = static_cast<int>(w) * chunk;
    const int end = std::min(rows, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace motionparse
