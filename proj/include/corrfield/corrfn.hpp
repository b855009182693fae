#pragma once

// Fourier-parameterized correlation functions.
//
// A location's correlations with the L positions of one axis form a
// sequence C. Mirroring C to length 2L makes its periodic extension
// continuous, and the extension is modelled by
//
//   G(theta, j) = a0 + sum_{n=1..N} A_n sin(n * w * j + psi_n),  w = pi / L.
//
// In two dimensions a location u carries one parameter set per axis and
// cor2d(u, v) = G(v_x; theta_hor) * G(v_y; theta_ver), with w = pi / W on the
// horizontal axis and w = pi / H on the vertical one. Parameter vectors are
// packed as [a0, A_1..A_N, psi_1..psi_N].

#include <cmath>
#include <complex>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "corrfield/error.hpp"
#include "corrfield/ops.hpp"
#include "corrfield/tensor.hpp"

namespace corrfield {

struct CorrParams1D {
  double a0 = 0.0;
  std::vector<double> amplitudes;
  std::vector<double> phases;

  std::size_t terms() const { return amplitudes.size(); }

  // Packed [a0, A_1..A_N, psi_1..psi_N].
  std::vector<double> packed() const {
    std::vector<double> out{a0};
    out.insert(out.end(), amplitudes.begin(), amplitudes.end());
    out.insert(out.end(), phases.begin(), phases.end());
    return out;
  }

  static CorrParams1D unpack(std::span<const double> packed) {
    if (packed.empty() || packed.size() % 2 == 0) {
      throw ShapeError("packed correlation parameters need 2N+1 entries, got " +
                       std::to_string(packed.size()));
    }
    const std::size_t n = (packed.size() - 1) / 2;
    CorrParams1D p;
    p.a0 = packed[0];
    p.amplitudes.assign(packed.begin() + 1, packed.begin() + 1 + static_cast<std::ptrdiff_t>(n));
    p.phases.assign(packed.begin() + 1 + static_cast<std::ptrdiff_t>(n), packed.end());
    return p;
  }

  static CorrParams1D constant(double value, std::size_t terms = 0) {
    return CorrParams1D{value, std::vector<double>(terms, 0.0),
                        std::vector<double>(terms, 0.0)};
  }

  void validate() const {
    if (amplitudes.size() != phases.size()) {
      throw ShapeError("correlation parameters need as many phases as amplitudes");
    }
    bool finite = std::isfinite(a0);
    for (double v : amplitudes) finite = finite && std::isfinite(v);
    for (double v : phases) finite = finite && std::isfinite(v);
    if (!finite) throw NumericalError("non-finite correlation parameter");
  }
};

struct AxialParams {
  CorrParams1D hor;
  CorrParams1D ver;
};

// A location's correlation sequence with every position on one axis.
struct CorrSequence {
  std::vector<double> values;
  std::size_t origin = 0;
};

inline double base_frequency(std::size_t length) {
  if (length == 0) throw std::invalid_argument("sequence length must be >= 1");
  return std::numbers::pi / static_cast<double>(length);
}

// C'[j] = C[j] for j < L, C[2L - j - 1] for L <= j < 2L.
inline std::vector<double> mirror_extend(std::span<const double> c) {
  if (c.empty()) throw std::invalid_argument("cannot mirror an empty sequence");
  const std::size_t len = c.size();
  std::vector<double> out(2 * len);
  for (std::size_t j = 0; j < len; ++j) {
    out[j] = c[j];
    out[2 * len - 1 - j] = c[j];
  }
  return out;
}

inline std::vector<double> mirror_extend(const CorrSequence& c) {
  return mirror_extend(std::span<const double>(c.values));
}

inline double eval_corr_1d(const CorrParams1D& theta, double j, std::size_t length) {
  const double w = base_frequency(length);
  double g = theta.a0;
  for (std::size_t n = 0; n < theta.terms(); ++n) {
    g += theta.amplitudes[n] *
         std::sin(static_cast<double>(n + 1) * w * j + theta.phases[n]);
  }
  return g;
}

// Amplitude/phase form of the mean and first N harmonics of a length-2L
// sequence, so that eval_corr_1d(fit, j, L) is the truncated Fourier
// reconstruction at integer j. With N = L the Nyquist term is included and
// the reconstruction is exact.
inline CorrParams1D fit_dft(std::span<const double> t, std::size_t terms) {
  if (t.empty() || t.size() % 2 != 0) {
    throw std::invalid_argument("fit_dft needs a sequence of even length 2L, got " +
                                std::to_string(t.size()));
  }
  const std::size_t length = t.size() / 2;
  if (terms > length) {
    throw std::invalid_argument("fit_dft: " + std::to_string(terms) +
                                " harmonics need at least that many samples per half period (L = " +
                                std::to_string(length) + ")");
  }
  const double m = static_cast<double>(t.size());
  const double w = base_frequency(length);
  CorrParams1D p;
  for (double v : t) p.a0 += v;
  p.a0 /= m;
  for (std::size_t n = 1; n <= terms; ++n) {
    // t_j ~ a cos(n w j) + b sin(n w j) = A sin(n w j + psi),
    // with a = A sin(psi), b = A cos(psi).
    double a = 0.0;
    double b = 0.0;
    for (std::size_t j = 0; j < t.size(); ++j) {
      const double x = static_cast<double>(n) * w * static_cast<double>(j);
      a += t[j] * std::cos(x);
      b += t[j] * std::sin(x);
    }
    // The Nyquist harmonic is its own conjugate and carries weight 1/M.
    const double weight = (n == length) ? 1.0 / m : 2.0 / m;
    a *= weight;
    b *= weight;
    p.amplitudes.push_back(std::hypot(a, b));
    p.phases.push_back(std::atan2(a, b));
  }
  return p;
}

inline double eval_corr_2d(const AxialParams& theta, double vx, double vy,
                           std::size_t height, std::size_t width) {
  return eval_corr_1d(theta.hor, vx, width) * eval_corr_1d(theta.ver, vy, height);
}

// Dense H x W map, row-major.
struct CorrelationMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

inline CorrelationMap correlation_map(const AxialParams& theta, std::size_t height,
                                      std::size_t width) {
  if (height == 0 || width == 0) {
    throw std::invalid_argument("correlation map needs positive extents");
  }
  CorrelationMap map{height, width, std::vector<double>(height * width)};
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      map.values[y * width + x] = eval_corr_2d(theta, static_cast<double>(x),
                                               static_cast<double>(y), height, width);
  return map;
}

// ---------------------------------------------------------------------------
// Differentiable forms

// G(theta, j) from elementary tensor ops. theta has 2N+1 entries; j may have
// any shape and the result has the shape of j. Differentiable in both.
template <std::floating_point T>
BasicTensor<T> corr_1d(const BasicTensor<T>& theta, const BasicTensor<T>& j,
                       std::size_t length) {
  if (theta.rank() != 1 || theta.size() % 2 == 0) {
    throw ShapeError("theta must be a vector of 2N+1 entries, got " +
                     to_string(theta.shape()));
  }
  const std::size_t n_terms = (theta.size() - 1) / 2;
  const T w = static_cast<T>(base_frequency(length));
  // a0 broadcast over j; shapes stay [1] when j is a scalar.
  BasicTensor<T> g = add(slice(theta, 0, 0, 1), scale(j, T(0)));
  for (std::size_t n = 1; n <= n_terms; ++n) {
    auto amp = slice(theta, 0, n, n + 1);
    auto phase = slice(theta, 0, n_terms + n, n_terms + n + 1);
    g = add(g, mul(amp, sin(add(scale(j, static_cast<T>(n) * w), phase))));
  }
  return j.rank() > 0 ? g : reshape(g, Shape{});
}

// Fused evaluation of G at fixed coordinates for every parameter vector.
// theta: [..., 2N+1]; result: [..., coords.size()] with
// out[..., p] = G(theta[...], coords[p]) for axis length `length`.
template <std::floating_point T>
BasicTensor<T> axial_correlations(const BasicTensor<T>& theta,
                                  std::vector<double> coords,
                                  std::size_t length) {
  if (theta.rank() == 0 || theta.shape().back() % 2 == 0) {
    throw ShapeError("theta must end in an axis of 2N+1 entries, got " +
                     to_string(theta.shape()));
  }
  if (coords.empty()) throw ShapeError("axial_correlations needs coordinates");
  const std::size_t packed = theta.shape().back();
  const std::size_t n_terms = (packed - 1) / 2;
  const std::size_t rows = theta.size() / packed;
  const std::size_t cols = coords.size();
  const double w = base_frequency(length);

  // Harmonic arguments n * w * coord are shared by all rows.
  std::vector<T> harmonic(n_terms * cols);
  for (std::size_t n = 0; n < n_terms; ++n)
    for (std::size_t p = 0; p < cols; ++p)
      harmonic[n * cols + p] = static_cast<T>(static_cast<double>(n + 1) * w * coords[p]);

  const auto tv = theta.values();
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* th = &tv[r * packed];
    for (std::size_t p = 0; p < cols; ++p) {
      T g = th[0];
      for (std::size_t n = 0; n < n_terms; ++n)
        g += th[1 + n] * std::sin(harmonic[n * cols + p] + th[1 + n_terms + n]);
      out[r * cols + p] = g;
    }
  }
  Shape out_shape = theta.shape();
  out_shape.back() = cols;
  return BasicTensor<T>::make_result(
      std::move(out_shape), std::move(out), {theta.node()},
      [=](detail::Node<T>& self) {
        auto& in = *self.inputs[0];
        for (std::size_t r = 0; r < rows; ++r) {
          const T* th = &in.value[r * packed];
          T* gth = &in.grad[r * packed];
          for (std::size_t p = 0; p < cols; ++p) {
            const T g = self.grad[r * cols + p];
            gth[0] += g;
            for (std::size_t n = 0; n < n_terms; ++n) {
              const T arg = harmonic[n * cols + p] + th[1 + n_terms + n];
              gth[1 + n] += g * std::sin(arg);
              gth[1 + n_terms + n] += g * th[1 + n] * std::cos(arg);
            }
          }
        }
      });
}

inline std::vector<double> integer_coords(std::size_t length) {
  std::vector<double> c(length);
  for (std::size_t i = 0; i < length; ++i) c[i] = static_cast<double>(i);
  return c;
}

// Per-location axial parameters for an H x W map. hor and ver are
// H x W x (2N+1) tensors in packed layout.
template <std::floating_point T>
struct CorrParamField {
  BasicTensor<T> hor;
  BasicTensor<T> ver;

  CorrParamField(BasicTensor<T> hor_params, BasicTensor<T> ver_params)
      : hor(std::move(hor_params)), ver(std::move(ver_params)) {
    if (hor.rank() != 3 || hor.shape() != ver.shape() || hor.dim(2) % 2 == 0) {
      throw ShapeError("correlation field needs matching H x W x (2N+1) tensors, got " +
                       to_string(hor.shape()) + " and " + to_string(ver.shape()));
    }
  }

  // Builds a constant-in-graph field from explicit per-location parameters,
  // given row-major (y * W + x).
  static CorrParamField from_params(std::size_t height, std::size_t width,
                                    const std::vector<AxialParams>& params) {
    if (params.size() != height * width || params.empty()) {
      throw ShapeError("need H*W parameter pairs");
    }
    const std::size_t packed = 2 * params.front().hor.terms() + 1;
    std::vector<T> h, v;
    for (const auto& p : params) {
      p.hor.validate();
      p.ver.validate();
      auto ph = p.hor.packed();
      auto pv = p.ver.packed();
      if (ph.size() != packed || pv.size() != packed) {
        throw ShapeError("all locations must share the Fourier level");
      }
      h.insert(h.end(), ph.begin(), ph.end());
      v.insert(v.end(), pv.begin(), pv.end());
    }
    return CorrParamField(BasicTensor<T>(Shape{height, width, packed}, std::move(h)),
                          BasicTensor<T>(Shape{height, width, packed}, std::move(v)));
  }

  std::size_t height() const { return hor.dim(0); }
  std::size_t width() const { return hor.dim(1); }
  std::size_t terms() const { return (hor.dim(2) - 1) / 2; }
  std::size_t scalar_count() const { return hor.size() + ver.size(); }

  AxialParams at(std::size_t y, std::size_t x) const {
    const std::size_t packed = hor.dim(2);
    const std::size_t base = (y * width() + x) * packed;
    std::vector<double> h(packed), v(packed);
    for (std::size_t k = 0; k < packed; ++k) {
      h[k] = static_cast<double>(hor[base + k]);
      v[k] = static_cast<double>(ver[base + k]);
    }
    return {CorrParams1D::unpack(h), CorrParams1D::unpack(v)};
  }
};

}  // namespace corrfield
