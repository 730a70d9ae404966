#pragma once

// Sampling, warping, splatting, pyramids, finite-difference operators and
// SSIM over dense fields. Everything that can sit on a differentiable path
// is templated on the scalar type.

#include <array>
#include <cmath>
#include <vector>

#include "motionparse/field.hpp"
#include "motionparse/geometry.hpp"

namespace motionparse {

inline constexpr int kPyramidLevels = 4;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;
inline constexpr double kBoundsSlack = 1e-12;

template <class T>
struct Sample {
  T value;
  bool in_bounds;
};

/// Bilinear interpolation at continuous (u, v). Outside [0,W-1]x[0,H-1] the
/// coordinate is clamped to the edge and the result is flagged.
template <class F, class C>
auto bilinear_sample(const Field<F>& field, const C& u, const C& v, int c = 0)
    -> Sample<decltype(std::declval<F>() * std::declval<C>())> {
  using R = decltype(std::declval<F>() * std::declval<C>());
  const int w = field.width();
  const int h = field.height();
  const double uv = value_of(u);
  const double vv = value_of(v);
  // Round-off slack so that reprojected border pixels stay in bounds.
  const double tu = kBoundsSlack * w;
  const double tv = kBoundsSlack * h;
  const bool inside = uv >= -tu && uv <= w - 1.0 + tu && vv >= -tv && vv <= h - 1.0 + tv;

  // Clamped coordinates carry no derivative.
  const C uc = (uv >= 0.0 && uv <= w - 1.0) ? u : C(std::clamp(uv, 0.0, w - 1.0));
  const C vc = (vv >= 0.0 && vv <= h - 1.0) ? v : C(std::clamp(vv, 0.0, h - 1.0));

  int x0 = static_cast<int>(std::floor(value_of(uc)));
  int y0 = static_cast<int>(std::floor(value_of(vc)));
  x0 = std::clamp(x0, 0, std::max(w - 2, 0));
  y0 = std::clamp(y0, 0, std::max(h - 2, 0));
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const C fx = uc - double(x0);
  const C fy = vc - double(y0);

  const F& f00 = field(x0, y0, c);
  const F& f10 = field(x1, y0, c);
  const F& f01 = field(x0, y1, c);
  const F& f11 = field(x1, y1, c);
  // Weighted form so that integer coordinates return stored values exactly.
  const C gx = 1.0 - fx;
  const C gy = 1.0 - fy;
  const R top = gx * f00 + fx * f10;
  const R bottom = gx * f01 + fx * f11;
  return {gy * top + fy * bottom, inside};
}

inline Sample<double> bilinear_sample(const ScalarField& field, const PixelCoord& p, int c = 0) {
  if (field.empty()) throw DomainError("bilinear_sample: empty field");
  return bilinear_sample(field, p.u, p.v, c);
}

struct WarpResult {
  ScalarField image;
  MaskField valid;
};

/// Samples `source` at absolute coordinates `coords` (2 channels: u, v).
inline WarpResult inverse_warp(const ScalarField& source, const VectorField& coords) {
  if (coords.channels() != 2) throw DomainError("inverse_warp: coords must have 2 channels");
  WarpResult out{ScalarField(coords.width(), coords.height(), source.channels()),
                 MaskField(coords.width(), coords.height(), 1, 0)};
  parallel_rows(coords.height(), [&](int y0, int y1) {
    for (int y = y0; y < y1; ++y)
      for (int x = 0; x < coords.width(); ++x) {
        bool inside = true;
        for (int c = 0; c < source.channels(); ++c) {
          const auto s = bilinear_sample(source, coords(x, y, 0), coords(x, y, 1), c);
          out.image(x, y, c) = s.value;
          inside = s.in_bounds;
        }
        out.valid(x, y) = inside ? 1 : 0;
      }
  });
  return out;
}

/// Identity coordinate grid plus a 2-channel displacement.
inline VectorField coords_from_flow(const VectorField& flow) {
  VectorField coords(flow.width(), flow.height(), 2);
  for (int y = 0; y < flow.height(); ++y)
    for (int x = 0; x < flow.width(); ++x) {
      coords(x, y, 0) = x + flow(x, y, 0);
      coords(x, y, 1) = y + flow(x, y, 1);
    }
  return coords;
}

/// Each source pixel deposits bilinear weights at p + flow(p). Deposits that
/// leave the grid are dropped. Row tiles accumulate into private buffers that
/// are merged in tile order, so the output does not depend on the tiling.
inline ScalarField forward_splat_weights(const VectorField& flow) {
  if (flow.channels() != 2) throw DomainError("forward_splat_weights: flow must have 2 channels");
  const int w = flow.width();
  const int h = flow.height();
  auto splat_rows = [&](int y0, int y1, ScalarField& acc) {
    for (int y = y0; y < y1; ++y)
      for (int x = 0; x < w; ++x) {
        const double tu = x + flow(x, y, 0);
        const double tv = y + flow(x, y, 1);
        if (!std::isfinite(tu) || !std::isfinite(tv)) continue;
        const double fu = std::floor(tu);
        const double fv = std::floor(tv);
        const double au = tu - fu;
        const double av = tv - fv;
        const std::array<double, 2> wu{1.0 - au, au};
        const std::array<double, 2> wv{1.0 - av, av};
        for (int j = 0; j < 2; ++j)
          for (int i = 0; i < 2; ++i) {
            const double px = fu + i;
            const double py = fv + j;
            if (px < 0 || py < 0 || px > w - 1 || py > h - 1) continue;
            acc(static_cast<int>(px), static_cast<int>(py)) += wu[static_cast<std::size_t>(i)] * wv[static_cast<std::size_t>(j)];
          }
      }
  };

  const int tiles = static_cast<int>(std::min<unsigned>(worker_count(), static_cast<unsigned>(std::max(h / 8, 1))));
  std::vector<ScalarField> partial(static_cast<std::size_t>(tiles), ScalarField(w, h, 1, 0.0));
  const int chunk = (h + tiles - 1) / tiles;
  parallel_rows(tiles, [&](int t0, int t1) {
    for (int t = t0; t < t1; ++t)
      splat_rows(t * chunk, std::min(h, (t + 1) * chunk), partial[static_cast<std::size_t>(t)]);
  });
  ScalarField total(w, h, 1, 0.0);
  for (const auto& p : partial)
    for (std::size_t i = 0; i < total.size(); ++i) total.data()[i] += p.data()[i];
  return total;
}

// ---------------------------------------------------------------------------
// Pyramids

/// 2x2 average pooling; odd trailing rows/columns average what exists.
template <class T>
Field<T> downsample(const Field<T>& f) {
  const int w = (f.width() + 1) / 2;
  const int h = (f.height() + 1) / 2;
  Field<T> out(w, h, f.channels());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int xs = 2 * x;
      const int ys = 2 * y;
      const int nx = std::min(2, f.width() - xs);
      const int ny = std::min(2, f.height() - ys);
      const double inv = 1.0 / (nx * ny);
      for (int c = 0; c < f.channels(); ++c) {
        T acc = f(xs, ys, c);
        if (nx > 1) acc = acc + f(xs + 1, ys, c);
        if (ny > 1) acc = acc + f(xs, ys + 1, c);
        if (nx > 1 && ny > 1) acc = acc + f(xs + 1, ys + 1, c);
        out(x, y, c) = acc * inv;
      }
    }
  return out;
}

template <class T>
using Pyramid = std::array<Field<T>, kPyramidLevels>;
using ImagePyramid = Pyramid<double>;

inline void check_pyramid_size(int width, int height) {
  if (width < 8 || height < 8)
    throw DomainError("build_pyramid: need at least 8x8 pixels for " + std::to_string(kPyramidLevels) +
                      " levels, got " + std::to_string(width) + "x" + std::to_string(height));
}

template <class T>
Pyramid<T> build_pyramid(const Field<T>& f) {
  check_pyramid_size(f.width(), f.height());
  Pyramid<T> p;
  p[0] = f;
  for (int l = 1; l < kPyramidLevels; ++l) p[static_cast<std::size_t>(l)] = downsample(p[static_cast<std::size_t>(l - 1)]);
  return p;
}

/// Pyramid of a displacement field: values are in pixels of their own
/// level, so each halving of the grid halves the vectors.
template <class T>
Pyramid<T> build_flow_pyramid(const Field<T>& flow) {
  Pyramid<T> p = build_pyramid(flow);
  double s = 1.0;
  for (int l = 1; l < kPyramidLevels; ++l) {
    s *= 0.5;
    for (auto& v : p[static_cast<std::size_t>(l)].data()) v = v * s;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Finite differences

/// Per channel (d/du, d/dv); central differences inside, one-sided at borders.
inline VectorField spatial_gradient(const ScalarField& f) {
  const int w = f.width();
  const int h = f.height();
  const int nc = f.channels();
  VectorField g(w, h, 2 * nc);
  auto diff = [](double lo, double hi, int span) { return (hi - lo) / span; };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < nc; ++c) {
        const int xl = std::max(x - 1, 0), xr = std::min(x + 1, w - 1);
        const int yl = std::max(y - 1, 0), yr = std::min(y + 1, h - 1);
        g(x, y, 2 * c) = xr > xl ? diff(f(xl, y, c), f(xr, y, c), xr - xl) : 0.0;
        g(x, y, 2 * c + 1) = yr > yl ? diff(f(x, yl, c), f(x, yr, c), yr - yl) : 0.0;
      }
  return g;
}

/// Signed Laplacian per channel from second differences along each axis.
/// Border pixels reuse the stencil of their nearest interior neighbour, so
/// the operator is exact for quadratics everywhere. Axes shorter than three
/// samples contribute nothing.
template <class T>
Field<T> laplacian(const Field<T>& f) {
  const int w = f.width();
  const int h = f.height();
  Field<T> out(w, h, f.channels(), T(0.0));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < f.channels(); ++c) {
        T acc(0.0);
        bool any = false;
        if (w >= 3) {
          const int xc = std::clamp(x, 1, w - 2);
          acc = f(xc - 1, y, c) - 2.0 * f(xc, y, c) + f(xc + 1, y, c);
          any = true;
        }
        if (h >= 3) {
          const int yc = std::clamp(y, 1, h - 2);
          const T dyy = f(x, yc - 1, c) - 2.0 * f(x, yc, c) + f(x, yc + 1, c);
          acc = any ? acc + dyy : dyy;
        }
        out(x, y, c) = acc;
      }
  return out;
}

// ---------------------------------------------------------------------------
// SSIM

/// Mean over a 3x3 window with replicated borders.
template <class T>
Field<T> box_mean3(const Field<T>& f) {
  const int w = f.width();
  const int h = f.height();
  Field<T> rows(w, h, f.channels());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < f.channels(); ++c)
        rows(x, y, c) = f(std::max(x - 1, 0), y, c) + f(x, y, c) + f(std::min(x + 1, w - 1), y, c);
  Field<T> out(w, h, f.channels());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < f.channels(); ++c)
        out(x, y, c) = (rows(x, std::max(y - 1, 0), c) + rows(x, y, c) + rows(x, std::min(y + 1, h - 1), c)) *
                       (1.0 / 9.0);
  return out;
}

/// Per-pixel SSIM with a 3x3 uniform window, C1 = 0.01^2 and C2 = 0.03^2.
template <class T>
Field<T> ssim_map(const Field<T>& a, const Field<T>& b) {
  if (!a.same_shape(b)) throw DomainError("ssim_map: shape mismatch");
  Field<T> aa(a.width(), a.height(), a.channels());
  Field<T> bb(a.width(), a.height(), a.channels());
  Field<T> ab(a.width(), a.height(), a.channels());
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa.data()[i] = a.data()[i] * a.data()[i];
    bb.data()[i] = b.data()[i] * b.data()[i];
    ab.data()[i] = a.data()[i] * b.data()[i];
  }
  const Field<T> mu_a = box_mean3(a);
  const Field<T> mu_b = box_mean3(b);
  const Field<T> m_aa = box_mean3(aa);
  const Field<T> m_bb = box_mean3(bb);
  const Field<T> m_ab = box_mean3(ab);
  Field<T> out(a.width(), a.height(), a.channels());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T& ma = mu_a.data()[i];
    const T& mb = mu_b.data()[i];
    const T ma_mb = ma * mb;
    const T ma2 = ma * ma;
    const T mb2 = mb * mb;
    const T var_a = m_aa.data()[i] - ma2;
    const T var_b = m_bb.data()[i] - mb2;
    const T cov = m_ab.data()[i] - ma_mb;
    const T num = (2.0 * ma_mb + kSsimC1) * (2.0 * cov + kSsimC2);
    const T den = (ma2 + mb2 + kSsimC1) * (var_a + var_b + kSsimC2);
    out.data()[i] = num / den;
  }
  return out;
}

}  // namespace motionparse
