#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "msrn/error.hpp"
#include "msrn/parallel.hpp"
#include "msrn/rng.hpp"
#include "msrn/tape.hpp"
#include "msrn/tensor.hpp"

// Layer primitives. Activations are laid out [n, h, w, b, c]: sample, spatial
// row, spatial column, spectral band, channel. Convolution kernel banks are
// [kh, kw, kb, c_in, c_out].

namespace msrn {

enum class Mode { Train, Eval };

enum class Padding { Same, Valid };

inline const char* axis_name(std::size_t axis) {
  static constexpr std::array<const char*, 3> names{"height", "width", "band"};
  return axis < names.size() ? names[axis] : "?";
}

struct Conv3dSpec {
  std::array<std::size_t, 3> kernel{1, 1, 1};
  std::array<std::size_t, 3> stride{1, 1, 1};
  Padding padding = Padding::Same;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;

  void validate() const {
    for (std::size_t a = 0; a < 3; ++a) {
      if (kernel[a] < 1) throw ConfigError(std::string("conv kernel extent on ") + axis_name(a) + " must be >= 1");
      if (stride[a] < 1) throw ConfigError(std::string("conv stride on ") + axis_name(a) + " must be >= 1");
      if (padding == Padding::Same && stride[a] != 1) {
        throw ConfigError("SAME padding requires stride 1 on every axis");
      }
    }
    if (in_channels < 1 || out_channels < 1) throw ConfigError("conv channel counts must be >= 1");
  }

  Shape weight_shape() const { return {kernel[0], kernel[1], kernel[2], in_channels, out_channels}; }

  std::size_t pad_low(std::size_t axis) const {
    return padding == Padding::Same ? (kernel[axis] - 1) / 2 : 0;
  }

  Shape output_shape(const Shape& in) const {
    validate();
    if (in.size() != 5) throw ShapeError("conv3d input must be rank 5 [n,h,w,b,c], got " + shape_str(in));
    if (in[4] != in_channels) {
      throw ShapeError("conv3d channel axis: input has " + std::to_string(in[4]) + " channels, spec expects " +
                       std::to_string(in_channels));
    }
    Shape out{in[0], 0, 0, 0, out_channels};
    for (std::size_t a = 0; a < 3; ++a) {
      const std::size_t extent = in[a + 1];
      if (extent == 0) throw ShapeError(std::string("conv3d ") + axis_name(a) + " axis is empty");
      if (padding == Padding::Same) {
        out[a + 1] = extent;
      } else {
        if (kernel[a] > extent) {
          throw ShapeError(std::string("conv3d ") + axis_name(a) + " axis: VALID kernel extent " +
                           std::to_string(kernel[a]) + " exceeds input extent " + std::to_string(extent));
        }
        out[a + 1] = (extent - kernel[a]) / stride[a] + 1;
      }
    }
    return out;
  }
};

/// Per-channel batch normalization parameters and running statistics.
struct BatchNormState {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.9;
  double epsilon = 1e-5;

  static BatchNormState fresh(std::size_t channels) {
    BatchNormState s;
    s.gamma = Tensor({channels}, 1.0);
    s.beta = Tensor({channels}, 0.0);
    s.running_mean = Tensor({channels}, 0.0);
    s.running_var = Tensor({channels}, 1.0);
    return s;
  }

  std::size_t channels() const { return gamma.size(); }

  void validate() const {
    const Shape expected{gamma.size()};
    require_shape(beta, expected, "batchnorm beta");
    require_shape(running_mean, expected, "batchnorm running_mean");
    require_shape(running_var, expected, "batchnorm running_var");
    for (double v : running_var.data()) {
      if (v < 0.0) throw NumericError("batchnorm running variance is negative");
    }
    if (!(momentum > 0.0 && momentum < 1.0)) throw ConfigError("batchnorm momentum must lie in (0,1)");
    if (!(epsilon > 0.0)) throw ConfigError("batchnorm epsilon must be positive");
  }
};

namespace detail {

struct ConvGeometry {
  std::size_t n, in[3], ci, out[3], co, k[3], s[3], pad[3];

  ConvGeometry(const Shape& x, const Shape& y, const Conv3dSpec& spec) {
    n = x[0];
    ci = x[4];
    co = y[4];
    for (std::size_t a = 0; a < 3; ++a) {
      in[a] = x[a + 1];
      out[a] = y[a + 1];
      k[a] = spec.kernel[a];
      s[a] = spec.stride[a];
      pad[a] = spec.pad_low(a);
    }
  }

  std::size_t in_sample() const { return in[0] * in[1] * in[2] * ci; }
  std::size_t out_sample() const { return out[0] * out[1] * out[2] * co; }

  // Input coordinate for output index o and kernel tap t; false if it falls in padding.
  bool source(std::size_t axis, std::size_t o, std::size_t t, std::size_t& idx) const {
    const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(o * s[axis] + t) - static_cast<std::ptrdiff_t>(pad[axis]);
    if (p < 0 || p >= static_cast<std::ptrdiff_t>(in[axis])) return false;
    idx = static_cast<std::size_t>(p);
    return true;
  }

  // Calls fn(out_offset, in_offset, weight_offset) for every valid (output, tap) pair of one sample.
  template <typename Fn>
  void for_each_tap(Fn&& fn) const {
    for (std::size_t oh = 0; oh < out[0]; ++oh)
      for (std::size_t ow = 0; ow < out[1]; ++ow)
        for (std::size_t ob = 0; ob < out[2]; ++ob) {
          const std::size_t o_off = ((oh * out[1] + ow) * out[2] + ob) * co;
          for (std::size_t th = 0; th < k[0]; ++th) {
            std::size_t ih;
            if (!source(0, oh, th, ih)) continue;
            for (std::size_t tw = 0; tw < k[1]; ++tw) {
              std::size_t iw;
              if (!source(1, ow, tw, iw)) continue;
              for (std::size_t tb = 0; tb < k[2]; ++tb) {
                std::size_t ib;
                if (!source(2, ob, tb, ib)) continue;
                const std::size_t i_off = ((ih * in[1] + iw) * in[2] + ib) * ci;
                const std::size_t w_off = ((th * k[1] + tw) * k[2] + tb) * ci * co;
                fn(o_off, i_off, w_off);
              }
            }
          }
        }
  }
};

inline Tensor conv3d_forward(const Tensor& x, const Conv3dSpec& spec, const Tensor& w, const Tensor& bias) {
  const Shape out_shape = spec.output_shape(x.shape());
  require_shape(w, spec.weight_shape(), "conv3d weights");
  require_shape(bias, {spec.out_channels}, "conv3d bias");
  const ConvGeometry g(x.shape(), out_shape, spec);
  Tensor y(out_shape);
  const double* wp = w.ptr();
  const double* bp = bias.ptr();
  parallel_for(g.n, [&](std::size_t n) {
    const double* xs = x.ptr() + n * g.in_sample();
    double* ys = y.ptr() + n * g.out_sample();
    for (std::size_t o = 0; o < g.out_sample(); o += g.co) {
      for (std::size_t d = 0; d < g.co; ++d) ys[o + d] = bp[d];
    }
    g.for_each_tap([&](std::size_t o_off, std::size_t i_off, std::size_t w_off) {
      double* out = ys + o_off;
      const double* in = xs + i_off;
      const double* wt = wp + w_off;
      for (std::size_t c = 0; c < g.ci; ++c) {
        const double v = in[c];
        const double* row = wt + c * g.co;
        for (std::size_t d = 0; d < g.co; ++d) out[d] += v * row[d];
      }
    });
  });
  return y;
}

// Accumulates into whichever of dx, dw, dbias is non-null. Weight and bias
// gradients are formed per sample and summed in sample order.
inline void conv3d_backward(const Tensor& x, const Conv3dSpec& spec, const Tensor& w, const Tensor& dy,
                            Tensor* dx, Tensor* dw, Tensor* dbias) {
  const ConvGeometry g(x.shape(), dy.shape(), spec);
  const std::size_t wsize = w.size();
  std::vector<std::vector<double>> dw_parts(dw ? g.n : 0);
  std::vector<std::vector<double>> db_parts(dbias ? g.n : 0);
  parallel_for(g.n, [&](std::size_t n) {
    const double* xs = x.ptr() + n * g.in_sample();
    const double* gs = dy.ptr() + n * g.out_sample();
    double* dxs = dx ? dx->ptr() + n * g.in_sample() : nullptr;
    double* dws = nullptr;
    if (dw) {
      dw_parts[n].assign(wsize, 0.0);
      dws = dw_parts[n].data();
    }
    if (dbias) {
      std::vector<double>& db = db_parts[n];
      db.assign(g.co, 0.0);
      for (std::size_t o = 0; o < g.out_sample(); o += g.co) {
        for (std::size_t d = 0; d < g.co; ++d) db[d] += gs[o + d];
      }
    }
    if (!dxs && !dws) return;
    g.for_each_tap([&](std::size_t o_off, std::size_t i_off, std::size_t w_off) {
      const double* gout = gs + o_off;
      const double* wt = w.ptr() + w_off;
      for (std::size_t c = 0; c < g.ci; ++c) {
        const double* row = wt + c * g.co;
        if (dxs) {
          double acc = 0.0;
          for (std::size_t d = 0; d < g.co; ++d) acc += gout[d] * row[d];
          dxs[i_off + c] += acc;
        }
        if (dws) {
          const double v = xs[i_off + c];
          double* drow = dws + w_off + c * g.co;
          for (std::size_t d = 0; d < g.co; ++d) drow[d] += v * gout[d];
        }
      }
    });
  });
  for (std::size_t n = 0; n < dw_parts.size(); ++n) {
    double* out = dw->ptr();
    for (std::size_t i = 0; i < wsize; ++i) out[i] += dw_parts[n][i];
  }
  for (std::size_t n = 0; n < db_parts.size(); ++n) {
    for (std::size_t d = 0; d < g.co; ++d) (*dbias)[d] += db_parts[n][d];
  }
}

inline std::size_t channel_count(const Tensor& x, const char* op) {
  if (x.rank() < 1 || x.shape().back() == 0) {
    throw ShapeError(std::string(op) + ": input needs a non-empty trailing channel axis, got " + shape_str(x.shape()));
  }
  return x.shape().back();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv3d

/// Direct 3D convolution. VALID extents follow floor((in - k) / s) + 1; SAME
/// keeps extents (stride 1 only) with zero padding of floor((k-1)/2) low and
/// the remainder high.
inline Tensor conv3d(const Tensor& x, const Conv3dSpec& spec, const Tensor& weights, const Tensor& bias) {
  Tensor y = detail::conv3d_forward(x, spec, weights, bias);
  require_finite(y, "conv3d");
  return y;
}

inline Var conv3d(Tape& tape, Var x, Var weights, Var bias, const Conv3dSpec& spec) {
  Tensor y = detail::conv3d_forward(tape.value(x), spec, tape.value(weights), tape.value(bias));
  return tape.record(
      std::move(y), {x, weights, bias},
      [spec](const BackwardArgs& a) {
        detail::conv3d_backward(*a.inputs[0], spec, *a.inputs[1], a.grad_output, a.grad_inputs[0], a.grad_inputs[1],
                                a.grad_inputs[2]);
      },
      "conv3d");
}

// ---------------------------------------------------------------------------
// batchnorm

/// Normalizes over every axis except the trailing channel axis. In Train mode
/// batch statistics are used and, when running_sink is given, its running
/// statistics are updated as running = momentum * running + (1 - momentum) *
/// batch (variance with Bessel's correction). Eval mode reads running
/// statistics only.
inline Var batchnorm(Tape& tape, Var x, Var gamma, Var beta, const BatchNormState& state, Mode mode,
                     BatchNormState* running_sink = nullptr) {
  const Tensor& xv = tape.value(x);
  const std::size_t c = detail::channel_count(xv, "batchnorm");
  state.validate();
  if (state.channels() != c) {
    throw ShapeError("batchnorm channel axis: input has " + std::to_string(c) + " channels, state has " +
                     std::to_string(state.channels()));
  }
  const Tensor& gv = tape.value(gamma);
  const Tensor& bv = tape.value(beta);
  require_shape(gv, {c}, "batchnorm gamma");
  require_shape(bv, {c}, "batchnorm beta");
  const std::size_t rows = xv.size() / c;

  std::vector<double> mean(c, 0.0), var(c, 0.0);
  if (mode == Mode::Train) {
    if (rows < 2) {
      throw DegenerateError("batchnorm in training mode needs at least 2 elements per channel, got " +
                            std::to_string(rows));
    }
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) mean[j] += xv[r * c + j];
    for (std::size_t j = 0; j < c; ++j) mean[j] /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        const double d = xv[r * c + j] - mean[j];
        var[j] += d * d;
      }
    for (std::size_t j = 0; j < c; ++j) var[j] /= static_cast<double>(rows);
    if (running_sink) {
      const double m = state.momentum;
      const double bessel = static_cast<double>(rows) / static_cast<double>(rows - 1);
      for (std::size_t j = 0; j < c; ++j) {
        running_sink->running_mean[j] = m * running_sink->running_mean[j] + (1.0 - m) * mean[j];
        running_sink->running_var[j] = m * running_sink->running_var[j] + (1.0 - m) * var[j] * bessel;
      }
    }
  } else {
    for (std::size_t j = 0; j < c; ++j) {
      mean[j] = state.running_mean[j];
      var[j] = state.running_var[j];
    }
  }

  std::vector<double> inv_std(c);
  for (std::size_t j = 0; j < c; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + state.epsilon);

  Tensor xhat(xv.shape());
  Tensor y(xv.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t i = r * c + j;
      xhat[i] = (xv[i] - mean[j]) * inv_std[j];
      y[i] = gv[j] * xhat[i] + bv[j];
    }

  return tape.record(
      std::move(y), {x, gamma, beta},
      [mode, c, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](const BackwardArgs& a) {
        const Tensor& g = a.grad_output;
        const Tensor& gam = *a.inputs[1];
        std::vector<double> sum_g(c, 0.0), sum_g_xhat(c, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            const std::size_t i = r * c + j;
            sum_g[j] += g[i];
            sum_g_xhat[j] += g[i] * xhat[i];
          }
        if (Tensor* dgamma = a.grad_inputs[1]) {
          for (std::size_t j = 0; j < c; ++j) (*dgamma)[j] += sum_g_xhat[j];
        }
        if (Tensor* dbeta = a.grad_inputs[2]) {
          for (std::size_t j = 0; j < c; ++j) (*dbeta)[j] += sum_g[j];
        }
        if (Tensor* dx = a.grad_inputs[0]) {
          const double m = static_cast<double>(rows);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) {
              const std::size_t i = r * c + j;
              if (mode == Mode::Train) {
                (*dx)[i] += gam[j] * inv_std[j] * (g[i] - sum_g[j] / m - xhat[i] * sum_g_xhat[j] / m);
              } else {
                (*dx)[i] += gam[j] * inv_std[j] * g[i];
              }
            }
        }
      },
      "batchnorm");
}

// ---------------------------------------------------------------------------
// relu

inline Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
  return y;
}

/// max(x, 0); the subgradient at 0 is 0.
inline Var relu(Tape& tape, Var x) {
  return tape.record(
      relu(tape.value(x)), {x},
      [](const BackwardArgs& a) {
        const Tensor& xv = *a.inputs[0];
        Tensor& dx = *a.grad_inputs[0];
        for (std::size_t i = 0; i < xv.size(); ++i) {
          if (xv[i] > 0.0) dx[i] += a.grad_output[i];
        }
      },
      "relu");
}

// ---------------------------------------------------------------------------
// dropout

inline void check_dropout_probability(double p) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must lie in [0, 1), got " + std::to_string(p));
}

/// Inverted dropout: in Train mode each element is zeroed with probability p
/// and survivors are scaled by 1/(1-p). Eval mode is the identity.
inline Var dropout(Tape& tape, Var x, double p, Rng& rng, Mode mode) {
  check_dropout_probability(p);
  if (mode == Mode::Eval || p == 0.0) return x;
  const Tensor& xv = tape.value(x);
  const double scale = 1.0 / (1.0 - p);
  Tensor mask(xv.shape());
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    mask[i] = rng.uniform() < p ? 0.0 : scale;
    y[i] = xv[i] * mask[i];
  }
  return tape.record(
      std::move(y), {x},
      [mask = std::move(mask)](const BackwardArgs& a) {
        Tensor& dx = *a.grad_inputs[0];
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += a.grad_output[i] * mask[i];
      },
      "dropout");
}

// ---------------------------------------------------------------------------
// global average pooling

inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 5) throw ShapeError("global_avg_pool expects [n,h,w,b,c], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(4);
  const std::size_t volume = x.dim(1) * x.dim(2) * x.dim(3);
  if (volume == 0) throw ShapeError("global_avg_pool over an empty spatial volume " + shape_str(x.shape()));
  Tensor y({n, c});
  for (std::size_t s = 0; s < n; ++s) {
    const double* xs = x.ptr() + s * volume * c;
    for (std::size_t v = 0; v < volume; ++v)
      for (std::size_t j = 0; j < c; ++j) y[s * c + j] += xs[v * c + j];
    for (std::size_t j = 0; j < c; ++j) y[s * c + j] /= static_cast<double>(volume);
  }
  return y;
}

inline Var global_avg_pool(Tape& tape, Var x) {
  return tape.record(
      global_avg_pool(tape.value(x)), {x},
      [](const BackwardArgs& a) {
        Tensor& dx = *a.grad_inputs[0];
        const Shape& s = dx.shape();
        const std::size_t n = s[0], c = s[4], volume = s[1] * s[2] * s[3];
        const double inv = 1.0 / static_cast<double>(volume);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t v = 0; v < volume; ++v)
            for (std::size_t j = 0; j < c; ++j) dx[(i * volume + v) * c + j] += a.grad_output[i * c + j] * inv;
      },
      "global_avg_pool");
}

// ---------------------------------------------------------------------------
// dense

inline Tensor dense(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() != 2 || w.rank() != 2) {
    throw ShapeError("dense expects x [n,f] and W [f,k], got " + shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  const std::size_t n = x.dim(0), f = x.dim(1), k = w.dim(1);
  if (w.dim(0) != f) {
    throw ShapeError("dense inner dimension: x has " + std::to_string(f) + " features, W has " +
                     std::to_string(w.dim(0)) + " rows");
  }
  require_shape(bias, {k}, "dense bias");
  Tensor y({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    double* row = y.ptr() + i * k;
    for (std::size_t j = 0; j < k; ++j) row[j] = bias[j];
    for (std::size_t q = 0; q < f; ++q) {
      const double v = x[i * f + q];
      const double* wr = w.ptr() + q * k;
      for (std::size_t j = 0; j < k; ++j) row[j] += v * wr[j];
    }
  }
  return y;
}

inline Var dense(Tape& tape, Var x, Var w, Var bias) {
  return tape.record(
      dense(tape.value(x), tape.value(w), tape.value(bias)), {x, w, bias},
      [](const BackwardArgs& a) {
        const Tensor& xv = *a.inputs[0];
        const Tensor& wv = *a.inputs[1];
        const Tensor& g = a.grad_output;
        const std::size_t n = xv.dim(0), f = xv.dim(1), k = wv.dim(1);
        if (Tensor* dx = a.grad_inputs[0]) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t q = 0; q < f; ++q) {
              double acc = 0.0;
              for (std::size_t j = 0; j < k; ++j) acc += g[i * k + j] * wv[q * k + j];
              (*dx)[i * f + q] += acc;
            }
        }
        if (Tensor* dw = a.grad_inputs[1]) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t q = 0; q < f; ++q)
              for (std::size_t j = 0; j < k; ++j) (*dw)[q * k + j] += xv[i * f + q] * g[i * k + j];
        }
        if (Tensor* db = a.grad_inputs[2]) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < k; ++j) (*db)[j] += g[i * k + j];
        }
      },
      "dense");
}

// ---------------------------------------------------------------------------
// softmax cross-entropy

/// Row-wise softmax with max subtraction.
inline Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax expects [n,k], got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Tensor p(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.ptr() + i * k;
    double peak = row[0];
    for (std::size_t j = 1; j < k; ++j) peak = std::max(peak, row[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      p[i * k + j] = std::exp(row[j] - peak);
      total += p[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) p[i * k + j] /= total;
  }
  return p;
}

struct CrossEntropy {
  Var loss;     // scalar, mean over the batch
  Tensor probs; // [n, k]
};

/// Mean negative log-likelihood of the labelled classes (0-based indices).
inline CrossEntropy softmax_cross_entropy(Tape& tape, Var logits, std::span<const std::size_t> labels) {
  const Tensor& z = tape.value(logits);
  if (z.rank() != 2) throw ShapeError("softmax_cross_entropy expects logits [n,k], got " + shape_str(z.shape()));
  const std::size_t n = z.dim(0), k = z.dim(1);
  if (labels.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(n) + " logit rows but " +
                     std::to_string(labels.size()) + " labels");
  }
  for (std::size_t y : labels) {
    if (y >= k) throw DataError("label " + std::to_string(y) + " out of range for " + std::to_string(k) + " classes");
  }
  Tensor probs = softmax(z);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = z.ptr() + i * k;
    double peak = row[0];
    for (std::size_t j = 1; j < k; ++j) peak = std::max(peak, row[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) total += std::exp(row[j] - peak);
    loss += std::log(total) + peak - row[labels[i]];
  }
  loss /= static_cast<double>(n);
  std::vector<std::size_t> targets(labels.begin(), labels.end());
  Var out = tape.record(
      Tensor(Shape{}, std::vector<double>{loss}), {logits},
      [probs, targets = std::move(targets), n, k](const BackwardArgs& a) {
        Tensor& dz = *a.grad_inputs[0];
        const double scale = a.grad_output[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < k; ++j) {
            const double onehot = (targets[i] == j) ? 1.0 : 0.0;
            dz[i * k + j] += (probs[i * k + j] - onehot) * scale;
          }
      },
      "softmax_cross_entropy");
  return CrossEntropy{out, std::move(probs)};
}

// ---------------------------------------------------------------------------
// structural glue

/// Concatenates along the trailing channel axis; all other extents must agree.
inline Var concat_channels(Tape& tape, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels needs at least one input");
  const Shape& first = tape.value(parts[0]).shape();
  if (first.empty()) throw ShapeError("concat_channels cannot join scalars");
  std::vector<std::size_t> widths;
  Shape out_shape = first;
  out_shape.back() = 0;
  for (Var v : parts) {
    const Shape& s = tape.value(v).shape();
    if (s.size() != first.size() || !std::equal(s.begin(), s.end() - 1, first.begin())) {
      throw ShapeError("concat_channels: shape " + shape_str(s) + " incompatible with " + shape_str(first));
    }
    widths.push_back(s.back());
    out_shape.back() += s.back();
  }
  const std::size_t total = out_shape.back();
  const std::size_t rows = shape_size(out_shape) / total;
  Tensor y(out_shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& xv = tape.value(parts[p]);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < widths[p]; ++j) y[r * total + offset + j] = xv[r * widths[p] + j];
    offset += widths[p];
  }
  return tape.record(
      std::move(y), parts,
      [widths, rows, total](const BackwardArgs& a) {
        std::size_t offset = 0;
        for (std::size_t p = 0; p < widths.size(); ++p) {
          if (Tensor* dx = a.grad_inputs[p]) {
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < widths[p]; ++j) (*dx)[r * widths[p] + j] += a.grad_output[r * total + offset + j];
          }
          offset += widths[p];
        }
      },
      "concat_channels");
}

inline Var add(Tape& tape, Var a, Var b) {
  const Tensor& av = tape.value(a);
  const Tensor& bv = tape.value(b);
  require_shape(bv, av.shape(), "add");
  Tensor y = av;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return tape.record(
      std::move(y), {a, b},
      [](const BackwardArgs& args) {
        for (Tensor* g : args.grad_inputs) {
          if (!g) continue;
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += args.grad_output[i];
        }
      },
      "add");
}

inline Var scale(Tape& tape, Var x, double factor) {
  Tensor y = tape.value(x);
  for (double& v : y.data()) v *= factor;
  return tape.record(
      std::move(y), {x},
      [factor](const BackwardArgs& a) {
        Tensor& dx = *a.grad_inputs[0];
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += a.grad_output[i] * factor;
      },
      "scale");
}

// Scalar sum of all elements.
inline Var sum(Tape& tape, Var x) {
  double total = 0.0;
  for (double v : tape.value(x).data()) total += v;
  return tape.record(
      Tensor(Shape{}, std::vector<double>{total}), {x},
      [](const BackwardArgs& a) {
        Tensor& dx = *a.grad_inputs[0];
        for (double& v : dx.data()) v += a.grad_output[0];
      },
      "sum");
}

// Scalar sum(x * weights) against a constant weight tensor.
inline Var weighted_sum(Tape& tape, Var x, const Tensor& weights) {
  const Tensor& xv = tape.value(x);
  require_shape(weights, xv.shape(), "weighted_sum weights");
  double total = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) total += xv[i] * weights[i];
  return tape.record(
      Tensor(Shape{}, std::vector<double>{total}), {x},
      [weights](const BackwardArgs& a) {
        Tensor& dx = *a.grad_inputs[0];
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += a.grad_output[0] * weights[i];
      },
      "weighted_sum");
}

}  // namespace msrn
