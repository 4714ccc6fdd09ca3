#pragma once

#include <Eigen/Core>

#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rbnn/tensor.hpp"

namespace rbnn {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  std::size_t id() const noexcept { return id_; }
  Tape& tape() const { return *tape_; }
  inline const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode gradient tape. Nodes are appended in evaluation order, so the
/// reverse of insertion order is a valid reverse topological order.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), false, nullptr, "constant"); }
  Var parameter(Tensor value) { return push(std::move(value), true, nullptr, "parameter"); }

  /// Records the output of a primitive. The backward closure is dropped when
  /// no input needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward, const char* op) {
    bool needs = false;
    for (const Var& in : inputs) {
      check_owned(in);
      needs = needs || nodes_[in.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr, op);
  }

  const Tensor& value(Var v) const {
    check_owned(v);
    return nodes_[v.id()].value;
  }

  bool requires_grad(Var v) const {
    check_owned(v);
    return nodes_[v.id()].requires_grad;
  }

  /// Gradient of the last backward() target w.r.t. `v`; zeros if `v` does not
  /// influence it.
  const Tensor& grad(Var v) {
    check_owned(v);
    Node& n = nodes_[v.id()];
    ensure_grad(n);
    return n.grad;
  }

  /// Mutable gradient buffer for backward closures; nullptr when `v` needs no gradient.
  double* grad_buffer(Var v) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) return nullptr;
    ensure_grad(n);
    return n.grad.data();
  }

  void backward(Var loss) {
    check_owned(loss);
    Node& root = nodes_[loss.id()];
    if (root.value.size() != 1) {
      throw ShapeError("backward() needs a scalar target, got " + shape_str(root.value.shape()));
    }
    for (auto& n : nodes_) {
      n.grad = Tensor();
      n.has_grad = false;
    }
    root.grad = Tensor(root.value.shape(), 1.0);
    root.has_grad = true;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || !n.has_grad) continue;
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
    const char* op = "";
    bool has_grad = false;
  };

  static void ensure_grad(Node& n) {
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape());
      n.has_grad = true;
    }
  }

  Var push(Tensor value, bool requires_grad, Backward backward, const char* op) {
    if (!value.all_finite()) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
    nodes_.push_back(Node{std::move(value), Tensor(), requires_grad, std::move(backward), op, false});
    return Var(this, nodes_.size() - 1);
  }

  void check_owned(Var v) const {
    if (v.tape_ != this || v.id_ >= nodes_.size()) throw std::logic_error("Var does not belong to this tape");
  }

  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

inline void require_same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw std::logic_error("operands live on different tapes");
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <class F, class D>
Var unary_elementwise(Var x, const char* op, F fn, D dfdx) {
  const Tensor& in = x.value();
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fn(in[i]);
  return x.tape().record(std::move(out), {x},
                         [x, dfdx](Tape& t, const Tensor& g) {
                           double* gx = t.grad_buffer(x);
                           const Tensor& xin = x.value();
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(xin[i]);
                         },
                         op);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(Var a, Var b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape().record(std::move(out), {a, b},
                         [a, b](Tape& t, const Tensor& g) {
                           for (Var v : {a, b}) {
                             if (double* gv = t.grad_buffer(v)) {
                               for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
                             }
                           }
                         },
                         "add");
}

inline Var mul(Var a, Var b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape().record(std::move(out), {a, b},
                         [a, b](Tape& t, const Tensor& g) {
                           const Tensor& av = a.value();
                           const Tensor& bv = b.value();
                           if (double* ga = t.grad_buffer(a)) {
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                           }
                           if (double* gb = t.grad_buffer(b)) {
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                           }
                         },
                         "mul");
}

inline Var scale(Var a, double c) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= c;
  return a.tape().record(std::move(out), {a},
                         [a, c](Tape& t, const Tensor& g) {
                           double* ga = t.grad_buffer(a);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
                         },
                         "scale");
}

/// Sum of all entries as a scalar.
inline Var sum(Var a) {
  const Tensor& av = a.value();
  double s = 0.0;
  for (double v : av.values()) s += v;
  return a.tape().record(Tensor::scalar(s), {a},
                         [a](Tape& t, const Tensor& g) {
                           double* ga = t.grad_buffer(a);
                           const std::size_t n = a.value().size();
                           for (std::size_t i = 0; i < n; ++i) ga[i] += g[0];
                         },
                         "sum");
}

/// Multiplies x[N, C, ...] by a constant factor per (n, c), broadcast over the
/// trailing extents. Used for the flipout sign vectors.
inline Var scale_channels(Var x, Tensor factors) {
  const Tensor& xv = x.value();
  if (xv.rank() < 2 || factors.shape() != Shape{xv.dim(0), xv.dim(1)}) {
    throw ShapeError("scale_channels: factors " + shape_str(factors.shape()) + " do not match input " +
                     shape_str(xv.shape()));
  }
  const std::size_t nc = xv.dim(0) * xv.dim(1);
  const std::size_t inner = xv.size() / nc;
  Tensor out = xv;
  for (std::size_t k = 0; k < nc; ++k) {
    for (std::size_t i = 0; i < inner; ++i) out[k * inner + i] *= factors[k];
  }
  return x.tape().record(std::move(out), {x},
                         [x, factors = std::move(factors), nc, inner](Tape& t, const Tensor& g) {
                           double* gx = t.grad_buffer(x);
                           for (std::size_t k = 0; k < nc; ++k) {
                             for (std::size_t i = 0; i < inner; ++i) gx[k * inner + i] += g[k * inner + i] * factors[k];
                           }
                         },
                         "scale_channels");
}

/// Adds bias[C] to x[N, C, ...] broadcast over batch and trailing extents.
inline Var add_channel_bias(Var x, Var bias) {
  detail::require_same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (xv.rank() < 2 || bv.shape() != Shape{xv.dim(1)}) {
    throw ShapeError("add_channel_bias: bias " + shape_str(bv.shape()) + " vs input " + shape_str(xv.shape()));
  }
  const std::size_t n = xv.dim(0), c = xv.dim(1), inner = xv.size() / (n * c);
  Tensor out = xv;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[(a * c + k) * inner + i] += bv[k];
  return x.tape().record(std::move(out), {x, bias},
                         [x, bias, n, c, inner](Tape& t, const Tensor& g) {
                           if (double* gx = t.grad_buffer(x)) {
                             for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                           }
                           if (double* gb = t.grad_buffer(bias)) {
                             for (std::size_t a = 0; a < n; ++a)
                               for (std::size_t k = 0; k < c; ++k)
                                 for (std::size_t i = 0; i < inner; ++i) gb[k] += g[(a * c + k) * inner + i];
                           }
                         },
                         "add_channel_bias");
}

inline Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape().record(std::move(out), {x},
                         [x](Tape& t, const Tensor& g) {
                           double* gx = t.grad_buffer(x);
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                         },
                         "reshape");
}

/// [N, ...] -> [N, prod(...)].
inline Var flatten(Var x) {
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("flatten: scalar input");
  return reshape(x, Shape{s[0], x.value().size() / s[0]});
}

// ---------------------------------------------------------------------------
// Activations

inline Var relu(Var x) {
  return detail::unary_elementwise(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var tanh(Var x) {
  return detail::unary_elementwise(
      x, "tanh", [](double v) { return std::tanh(v); },
      [](double v) {
        const double y = std::tanh(v);
        return 1.0 - y * y;
      });
}

inline double softplus(double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }
inline double sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Var softplus(Var x) {
  return detail::unary_elementwise(
      x, "softplus", [](double v) { return softplus(v); }, [](double v) { return sigmoid(v); });
}

// ---------------------------------------------------------------------------
// Convolution, dense, pooling

enum class Padding { Valid, Same };

struct ConvGeometry {
  std::size_t out_h = 0, out_w = 0;
  std::size_t pad_top = 0, pad_left = 0;
};

/// Output extents and leading padding, TensorFlow conventions.
inline ConvGeometry conv_geometry(std::size_t h, std::size_t w, std::size_t kh, std::size_t kw, std::size_t stride,
                                  Padding padding) {
  if (stride == 0) throw ShapeError("conv: stride must be positive");
  ConvGeometry g;
  if (padding == Padding::Valid) {
    if (kh > h || kw > w) {
      throw ShapeError("conv: kernel " + std::to_string(kh) + "x" + std::to_string(kw) + " larger than input " +
                       std::to_string(h) + "x" + std::to_string(w));
    }
    g.out_h = (h - kh) / stride + 1;
    g.out_w = (w - kw) / stride + 1;
  } else {
    g.out_h = (h + stride - 1) / stride;
    g.out_w = (w + stride - 1) / stride;
    const std::size_t need_h = (g.out_h - 1) * stride + kh;
    const std::size_t need_w = (g.out_w - 1) * stride + kw;
    g.pad_top = need_h > h ? (need_h - h) / 2 : 0;
    g.pad_left = need_w > w ? (need_w - w) / 2 : 0;
  }
  return g;
}

namespace detail {

struct ConvDims {
  std::size_t n, c, h, w, f, kh, kw, stride;
  ConvGeometry geo;
  std::size_t kdim() const { return c * kh * kw; }
  std::size_t l() const { return geo.out_h * geo.out_w; }
};

// Unfolds one sample x[C, H, W] into cols[C*kH*kW, outH*outW].
inline void im2col(const double* x, const ConvDims& d, double* cols) {
  const std::size_t ho = d.geo.out_h, wo = d.geo.out_w, l = d.l();
  for (std::size_t ci = 0; ci < d.c; ++ci) {
    const double* plane = x + ci * d.h * d.w;
    for (std::size_t i = 0; i < d.kh; ++i) {
      for (std::size_t j = 0; j < d.kw; ++j) {
        double* dst = cols + ((ci * d.kh + i) * d.kw + j) * l;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * d.stride + i) - static_cast<long>(d.geo.pad_top);
          double* drow = dst + oy * wo;
          if (iy < 0 || iy >= static_cast<long>(d.h)) {
            std::fill_n(drow, wo, 0.0);
            continue;
          }
          const double* src = plane + iy * d.w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * d.stride + j) - static_cast<long>(d.geo.pad_left);
            drow[ox] = (ix >= 0 && ix < static_cast<long>(d.w)) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

// Folds cols back into one sample's gradient, accumulating.
inline void col2im(const double* cols, const ConvDims& d, double* gx) {
  const std::size_t ho = d.geo.out_h, wo = d.geo.out_w, l = d.l();
  for (std::size_t ci = 0; ci < d.c; ++ci) {
    double* plane = gx + ci * d.h * d.w;
    for (std::size_t i = 0; i < d.kh; ++i) {
      for (std::size_t j = 0; j < d.kw; ++j) {
        const double* src = cols + ((ci * d.kh + i) * d.kw + j) * l;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * d.stride + i) - static_cast<long>(d.geo.pad_top);
          if (iy < 0 || iy >= static_cast<long>(d.h)) continue;
          double* drow = plane + iy * d.w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * d.stride + j) - static_cast<long>(d.geo.pad_left);
            if (ix >= 0 && ix < static_cast<long>(d.w)) drow[ix] += src[oy * wo + ox];
          }
        }
      }
    }
  }
}

// Stride-1 convolution done directly as row axpys; avoids the unfold for
// layers with few filters, where the GEMM shape is too skinny to pay off.
template <class RowFn>
inline void for_each_stride1_row(const ConvDims& d, RowFn&& fn) {
  const long pt = static_cast<long>(d.geo.pad_top), pl = static_cast<long>(d.geo.pad_left);
  for (std::size_t i = 0; i < d.kh; ++i) {
    for (std::size_t oy = 0; oy < d.geo.out_h; ++oy) {
      const long iy = static_cast<long>(oy + i) - pt;
      if (iy < 0 || iy >= static_cast<long>(d.h)) continue;
      for (std::size_t j = 0; j < d.kw; ++j) {
        const long shift = static_cast<long>(j) - pl;
        const long lo = std::max<long>(0, -shift);
        const long hi = std::min<long>(static_cast<long>(d.geo.out_w), static_cast<long>(d.w) - shift);
        if (hi <= lo) continue;
        fn(i, j, oy, static_cast<std::size_t>(iy), static_cast<std::size_t>(lo), static_cast<std::size_t>(hi - lo),
           static_cast<std::size_t>(lo + shift));
      }
    }
  }
}

inline void conv_direct_forward(const double* x, const double* k, const ConvDims& d, double* out) {
  const std::size_t l = d.l();
  for (std::size_t b = 0; b < d.n; ++b) {
    for (std::size_t f = 0; f < d.f; ++f) {
      double* oplane = out + (b * d.f + f) * l;
      for (std::size_t c = 0; c < d.c; ++c) {
        const double* xplane = x + (b * d.c + c) * d.h * d.w;
        const double* kf = k + ((f * d.c + c) * d.kh) * d.kw;
        for_each_stride1_row(d, [&](std::size_t i, std::size_t j, std::size_t oy, std::size_t iy, std::size_t olo,
                                    std::size_t len, std::size_t ilo) {
          const double wv = kf[i * d.kw + j];
          double* dst = oplane + oy * d.geo.out_w + olo;
          const double* src = xplane + iy * d.w + ilo;
          for (std::size_t t = 0; t < len; ++t) dst[t] += wv * src[t];
        });
      }
    }
  }
}

inline void conv_direct_backward(const double* x, const double* k, const double* g, const ConvDims& d, double* gx,
                                 double* gk) {
  using Vec = Eigen::Map<const Eigen::VectorXd>;
  const std::size_t l = d.l();
  for (std::size_t b = 0; b < d.n; ++b) {
    for (std::size_t f = 0; f < d.f; ++f) {
      const double* gplane = g + (b * d.f + f) * l;
      for (std::size_t c = 0; c < d.c; ++c) {
        const double* xplane = x + (b * d.c + c) * d.h * d.w;
        double* gxplane = gx ? gx + (b * d.c + c) * d.h * d.w : nullptr;
        const std::size_t kofs = ((f * d.c + c) * d.kh) * d.kw;
        for_each_stride1_row(d, [&](std::size_t i, std::size_t j, std::size_t oy, std::size_t iy, std::size_t olo,
                                    std::size_t len, std::size_t ilo) {
          const double* grow = gplane + oy * d.geo.out_w + olo;
          if (gk) gk[kofs + i * d.kw + j] += Vec(grow, len).dot(Vec(xplane + iy * d.w + ilo, len));
          if (gxplane) {
            const double wv = k[kofs + i * d.kw + j];
            double* dst = gxplane + iy * d.w + ilo;
            for (std::size_t t = 0; t < len; ++t) dst[t] += wv * grow[t];
          }
        });
      }
    }
  }
}

inline bool use_direct_conv(const ConvDims& d) { return d.stride == 1 && d.f * d.c <= 8; }

}  // namespace detail

/// Cross-correlation of input[N, C, H, W] with kernel[F, C, kH, kW].
inline Var conv2d(Var input, Var kernel, std::size_t stride = 1, Padding padding = Padding::Valid) {
  detail::require_same_tape(input, kernel);
  const Tensor& x = input.value();
  const Tensor& k = kernel.value();
  if (x.rank() != 4 || k.rank() != 4) {
    throw ShapeError("conv2d: expected 4-d input and kernel, got " + shape_str(x.shape()) + " and " +
                     shape_str(k.shape()));
  }
  detail::ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), k.dim(0), k.dim(2), k.dim(3), stride, {}};
  if (k.dim(1) != d.c) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(k.dim(1)) + " input channels, input has " +
                     std::to_string(d.c));
  }
  d.geo = conv_geometry(d.h, d.w, d.kh, d.kw, stride, padding);
  const std::size_t kdim = d.kdim(), l = d.l();

  Tensor out(Shape{d.n, d.f, d.geo.out_h, d.geo.out_w});
  if (detail::use_direct_conv(d)) {
    detail::conv_direct_forward(x.data(), k.data(), d, out.data());
  } else {
    std::vector<double> cols(kdim * l);
    detail::ConstRowMap kmat(k.data(), d.f, kdim);
    for (std::size_t b = 0; b < d.n; ++b) {
      detail::im2col(x.data() + b * d.c * d.h * d.w, d, cols.data());
      detail::RowMap(out.data() + b * d.f * l, d.f, l).noalias() = kmat * detail::ConstRowMap(cols.data(), kdim, l);
    }
  }

  return input.tape().record(
      std::move(out), {input, kernel},
      [input, kernel, d](Tape& t, const Tensor& g) {
        const std::size_t kdim = d.kdim(), l = d.l();
        const Tensor& xv = input.value();
        const Tensor& kv = kernel.value();
        double* gk = t.grad_buffer(kernel);
        double* gx = t.grad_buffer(input);
        if (detail::use_direct_conv(d)) {
          detail::conv_direct_backward(xv.data(), kv.data(), g.data(), d, gx, gk);
          return;
        }
        std::vector<double> cols(kdim * l);
        detail::RowMat dcols;
        for (std::size_t b = 0; b < d.n; ++b) {
          detail::ConstRowMap gm(g.data() + b * d.f * l, d.f, l);
          if (gk) {
            detail::im2col(xv.data() + b * d.c * d.h * d.w, d, cols.data());
            detail::RowMap(gk, d.f, kdim).noalias() += gm * detail::ConstRowMap(cols.data(), kdim, l).transpose();
          }
          if (gx) {
            dcols.noalias() = detail::ConstRowMap(kv.data(), d.f, kdim).transpose() * gm;
            detail::col2im(dcols.data(), d, gx + b * d.c * d.h * d.w);
          }
        }
      },
      "conv2d");
}

/// input[N, D] * weight[D, K].
inline Var matmul(Var input, Var weight) {
  detail::require_same_tape(input, weight);
  const Tensor& x = input.value();
  const Tensor& wv = weight.value();
  if (x.rank() != 2 || wv.rank() != 2 || x.dim(1) != wv.dim(0)) {
    throw ShapeError("dense: inner dimensions disagree, input " + shape_str(x.shape()) + " weight " +
                     shape_str(wv.shape()));
  }
  const std::size_t n = x.dim(0), d = x.dim(1), k = wv.dim(1);
  Tensor out(Shape{n, k});
  detail::RowMap(out.data(), n, k).noalias() = detail::ConstRowMap(x.data(), n, d) * detail::ConstRowMap(wv.data(), d, k);
  return input.tape().record(std::move(out), {input, weight},
                             [input, weight, n, d, k](Tape& t, const Tensor& g) {
                               detail::ConstRowMap gm(g.data(), n, k);
                               if (double* gx = t.grad_buffer(input)) {
                                 detail::RowMap(gx, n, d).noalias() +=
                                     gm * detail::ConstRowMap(weight.value().data(), d, k).transpose();
                               }
                               if (double* gw = t.grad_buffer(weight)) {
                                 detail::RowMap(gw, d, k).noalias() +=
                                     detail::ConstRowMap(input.value().data(), n, d).transpose() * gm;
                               }
                             },
                             "matmul");
}

/// Affine map input[N, D] * weight[D, K] + bias[K].
inline Var dense(Var input, Var weight, Var bias) {
  const Tensor& b = bias.value();
  if (b.shape() != Shape{weight.value().rank() == 2 ? weight.value().dim(1) : 0}) {
    throw ShapeError("dense: bias " + shape_str(b.shape()) + " does not match weight " +
                     shape_str(weight.value().shape()));
  }
  return add_channel_bias(matmul(input, weight), bias);
}

/// Max pooling over window x window patches of x[N, C, H, W], valid padding.
/// Ties route the gradient to the first maximal element in row-major order.
inline Var maxpool2d(Var x, std::size_t window, std::size_t stride) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw ShapeError("maxpool2d: expected 4-d input, got " + shape_str(xv.shape()));
  if (window == 0 || stride == 0) throw ShapeError("maxpool2d: window and stride must be positive");
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (window > h || window > w) {
    throw ShapeError("maxpool2d: window " + std::to_string(window) + " larger than input " + std::to_string(h) + "x" +
                     std::to_string(w));
  }
  const std::size_t ho = (h - window) / stride + 1, wo = (w - window) / stride + 1;
  Tensor out(Shape{n, c, ho, wo});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  std::size_t o = 0;
  for (std::size_t p = 0; p < n * c; ++p) {
    const std::size_t base = p * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox, ++o) {
        std::size_t best = base + (oy * stride) * w + ox * stride;
        for (std::size_t i = 0; i < window; ++i) {
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t idx = base + (oy * stride + i) * w + ox * stride + j;
            if (xv[idx] > xv[best]) best = idx;
          }
        }
        out[o] = xv[best];
        (*argmax)[o] = best;
      }
    }
  }
  return x.tape().record(std::move(out), {x},
                         [x, argmax](Tape& t, const Tensor& g) {
                           double* gx = t.grad_buffer(x);
                           for (std::size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
                         },
                         "maxpool2d");
}

// ---------------------------------------------------------------------------
// Loss

/// Row-wise softmax of logits[N, K], max-subtracted.
inline Tensor softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax: expected [N, K], got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Tensor p(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data() + i * k;
    const double m = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += (p[i * k + j] = std::exp(row[j] - m));
    for (std::size_t j = 0; j < k; ++j) p[i * k + j] /= z;
  }
  return p;
}

/// Mean over the batch of -log softmax(logits)[label].
inline Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& lv = logits.value();
  if (lv.rank() != 2 || lv.dim(0) != labels.size()) {
    throw ShapeError("softmax_cross_entropy: logits " + shape_str(lv.shape()) + " with " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = lv.dim(0), k = lv.dim(1);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(labels[i]) + " outside [0, " +
                              std::to_string(k) + ")");
    }
    const double* row = lv.data() + i * k;
    const double m = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - m);
    loss += std::log(z) + m - row[labels[i]];
  }
  loss /= static_cast<double>(n);
  auto probs = std::make_shared<Tensor>(softmax_rows(lv));
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.tape().record(Tensor::scalar(loss), {logits},
                              [logits, probs, lab = std::move(lab), n, k](Tape& t, const Tensor& g) {
                                double* gl = t.grad_buffer(logits);
                                const double s = g[0] / static_cast<double>(n);
                                for (std::size_t i = 0; i < n; ++i) {
                                  for (std::size_t j = 0; j < k; ++j) {
                                    const double onehot = static_cast<std::size_t>(lab[i]) == j ? 1.0 : 0.0;
                                    gl[i * k + j] += s * ((*probs)[i * k + j] - onehot);
                                  }
                                }
                              },
                              "softmax_cross_entropy");
}

}  // namespace rbnn
