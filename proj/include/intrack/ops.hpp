// Differentiable operations over Var<Scalar>. Activity tensors are laid out
// B x C x H x W; convolution kernels are kh x kw x Cin x Cout.
#pragma once

#include "intrack/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <optional>
#include <span>

namespace intrack {

enum class Pointwise { kSoftplus, kSigmoid, kTanh, kRelu };
enum class Elementwise { kAdd, kSub, kMul };

namespace detail {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstRowMap = Eigen::Map<const RowMatrix<Scalar>>;

inline void require_rank4(const Shape& s, const char* what) {
  if (s.size() != 4) throw DimensionError(std::string(what) + " expects a B x C x H x W tensor, got " + to_string(s));
}

struct ConvGeometry {
  Index batch, cin, cout, height, width, kh, kw;
  Index pad_h() const { return (kh - 1) / 2; }
  Index pad_w() const { return (kw - 1) / 2; }
  Index patch() const { return cin * kh * kw; }
  Index plane() const { return height * width; }
};

// Unfolds one image (cin x H x W) into a (cin*kh*kw) x (H*W) row-major matrix.
template <typename Scalar>
void im2col(const Scalar* image, const ConvGeometry& g, Scalar* cols) {
  const Index hw = g.plane();
  for (Index c = 0; c < g.cin; ++c) {
    const Scalar* plane = image + c * hw;
    for (Index dy = 0; dy < g.kh; ++dy) {
      for (Index dx = 0; dx < g.kw; ++dx) {
        Scalar* row = cols + ((c * g.kh + dy) * g.kw + dx) * hw;
        const Index oy = dy - g.pad_h();
        const Index ox = dx - g.pad_w();
        const Index x0 = std::max<Index>(0, -ox);
        const Index x1 = std::min<Index>(g.width, g.width - ox);
        for (Index y = 0; y < g.height; ++y) {
          Scalar* out = row + y * g.width;
          const Index sy = y + oy;
          if (sy < 0 || sy >= g.height || x1 <= x0) {
            std::fill(out, out + g.width, Scalar(0));
            continue;
          }
          std::fill(out, out + x0, Scalar(0));
          std::memcpy(out + x0, plane + sy * g.width + x0 + ox, sizeof(Scalar) * static_cast<std::size_t>(x1 - x0));
          std::fill(out + x1, out + g.width, Scalar(0));
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const Scalar* cols, const ConvGeometry& g, Scalar* image) {
  const Index hw = g.plane();
  for (Index c = 0; c < g.cin; ++c) {
    Scalar* plane = image + c * hw;
    for (Index dy = 0; dy < g.kh; ++dy) {
      for (Index dx = 0; dx < g.kw; ++dx) {
        const Scalar* row = cols + ((c * g.kh + dy) * g.kw + dx) * hw;
        const Index oy = dy - g.pad_h();
        const Index ox = dx - g.pad_w();
        const Index x0 = std::max<Index>(0, -ox);
        const Index x1 = std::min<Index>(g.width, g.width - ox);
        for (Index y = 0; y < g.height; ++y) {
          const Index sy = y + oy;
          if (sy < 0 || sy >= g.height) continue;
          const Scalar* src = row + y * g.width;
          Scalar* dst = plane + sy * g.width + ox;
          for (Index x = x0; x < x1; ++x) dst[x] += src[x];
        }
      }
    }
  }
}

// Kernel kh x kw x Cin x Cout -> Cout x (Cin*kh*kw), matching im2col row order.
template <typename Scalar>
RowMatrix<Scalar> kernel_matrix(const Tensor<Scalar>& kernel, const ConvGeometry& g) {
  RowMatrix<Scalar> w(g.cout, g.patch());
  for (Index dy = 0; dy < g.kh; ++dy)
    for (Index dx = 0; dx < g.kw; ++dx)
      for (Index c = 0; c < g.cin; ++c)
        for (Index o = 0; o < g.cout; ++o)
          w(o, (c * g.kh + dy) * g.kw + dx) = kernel.at(dy, dx, c, o);
  return w;
}

template <typename Scalar>
Tensor<Scalar> kernel_from_matrix(const RowMatrix<Scalar>& w, const ConvGeometry& g) {
  Tensor<Scalar> kernel({g.kh, g.kw, g.cin, g.cout});
  for (Index dy = 0; dy < g.kh; ++dy)
    for (Index dx = 0; dx < g.kw; ++dx)
      for (Index c = 0; c < g.cin; ++c)
        for (Index o = 0; o < g.cout; ++o)
          kernel.at(dy, dx, c, o) = w(o, (c * g.kh + dy) * g.kw + dx);
  return kernel;
}

template <typename Scalar>
Scalar softplus(Scalar x) {
  // max(x, 0) + log1p(exp(-|x|)) never overflows and equals x for large x.
  return std::max(x, Scalar(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

// Broadcast classification for elementwise ops.
enum class Broadcast { kNone, kChannel };

inline Broadcast broadcast_kind(const Shape& a, const Shape& b) {
  if (a == b) return Broadcast::kNone;
  if (b.size() == 1 && a.size() >= 2 && a[1] == b[0]) return Broadcast::kChannel;
  throw DimensionError("incompatible elementwise shapes", a, b);
}

// Sums a full-shape tensor over every axis except axis 1.
template <typename Scalar>
Tensor<Scalar> sum_to_channels(const Tensor<Scalar>& full) {
  const Index batch = full.dim(0), channels = full.dim(1);
  const Index inner = full.size() / (batch * channels);
  Tensor<Scalar> out({channels});
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < channels; ++c)
      out[c] += full.array().segment((b * channels + c) * inner, inner).sum();
  return out;
}

template <typename Scalar>
Tensor<Scalar> expand_channels(const Tensor<Scalar>& vec, const Shape& shape) {
  Tensor<Scalar> out(shape);
  const Index batch = shape[0], channels = shape[1];
  const Index inner = out.size() / (batch * channels);
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < channels; ++c)
      out.array().segment((b * channels + c) * inner, inner).setConstant(vec[c]);
  return out;
}

}  // namespace detail

/// Same-padded, stride-1 cross-correlation.
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& kernel,
                   const Var<Scalar>& bias = Var<Scalar>()) {
  using namespace detail;
  require_rank4(input.shape(), "conv2d input");
  if (kernel.shape().size() != 4) throw DimensionError("conv2d kernel must be kh x kw x Cin x Cout, got " + to_string(kernel.shape()));
  const ConvGeometry g{input.dim(0), kernel.dim(2), kernel.dim(3), input.dim(2), input.dim(3), kernel.dim(0), kernel.dim(1)};
  if (input.dim(1) != g.cin) throw DimensionError("conv2d channel mismatch", input.shape(), kernel.shape());
  if (g.kh % 2 == 0 || g.kw % 2 == 0) throw DimensionError("conv2d needs odd kernel sizes, got " + to_string(kernel.shape()));
  if (bias.valid() && (bias.shape().size() != 1 || bias.dim(0) != g.cout))
    throw DimensionError("conv2d bias mismatch", bias.shape(), kernel.shape());

  const bool pointwise = g.kh == 1 && g.kw == 1;
  const RowMatrix<Scalar> w = kernel_matrix(kernel.value(), g);
  auto out = Tensor<Scalar>::uninitialized({g.batch, g.cout, g.height, g.width});
  RowMatrix<Scalar> cols(pointwise ? 0 : g.patch(), pointwise ? 0 : g.plane());
  for (Index b = 0; b < g.batch; ++b) {
    RowMap<Scalar> y(out.data() + b * g.cout * g.plane(), g.cout, g.plane());
    const Scalar* x = input.value().data() + b * g.cin * g.plane();
    if (pointwise) {
      y.noalias() = w * ConstRowMap<Scalar>(x, g.cin, g.plane());
    } else {
      im2col(x, g, cols.data());
      y.noalias() = w * cols;
    }
    if (bias.valid()) y.colwise() += bias.array().matrix();
  }

  return emit(std::move(out), {&input, &kernel, &bias}, [&] {
    return [g, pointwise, w, in = input.node(), k = kernel.node(), bs = bias.node()](Node<Scalar>& self) {
      RowMatrix<Scalar> dw = RowMatrix<Scalar>::Zero(g.cout, g.patch());
      RowMatrix<Scalar> cols(pointwise ? 0 : g.patch(), pointwise ? 0 : g.plane());
      Tensor<Scalar>* dx = in->requires_grad ? &in->grad_buffer() : nullptr;
      for (Index b = 0; b < g.batch; ++b) {
        ConstRowMap<Scalar> dy(self.grad.data() + b * g.cout * g.plane(), g.cout, g.plane());
        const Scalar* x = in->value.data() + b * g.cin * g.plane();
        if (pointwise) {
          ConstRowMap<Scalar> xm(x, g.cin, g.plane());
          if (k->requires_grad) dw.noalias() += dy * xm.transpose();
          if (dx) {
            RowMap<Scalar> dxm(dx->data() + b * g.cin * g.plane(), g.cin, g.plane());
            dxm.noalias() += w.transpose() * dy;
          }
        } else {
          if (k->requires_grad) {
            im2col(x, g, cols.data());
            dw.noalias() += dy * cols.transpose();
          }
          if (dx) {
            cols.noalias() = w.transpose() * dy;
            col2im_add(cols.data(), g, dx->data() + b * g.cin * g.plane());
          }
        }
      }
      if (k->requires_grad) k->accumulate(kernel_from_matrix(dw, g));
      if (bs && bs->requires_grad) {
        Tensor<Scalar> db({g.cout});
        for (Index b = 0; b < g.batch; ++b)
          db.array() += ConstRowMap<Scalar>(self.grad.data() + b * g.cout * g.plane(), g.cout, g.plane())
                            .rowwise().sum().array();
        bs->accumulate(db);
      }
    };
  });
}

template <typename Scalar>
Var<Scalar> pointwise(Pointwise kind, const Var<Scalar>& x) {
  using namespace detail;
  auto out = Tensor<Scalar>::uninitialized(x.shape());
  auto& o = out.array();
  const auto& in = x.array();
  switch (kind) {
    case Pointwise::kSoftplus: o = in.max(Scalar(0)) + (-in.abs()).exp().log1p(); break;
    case Pointwise::kSigmoid: o = in.logistic(); break;
    case Pointwise::kTanh: o = in.tanh(); break;
    case Pointwise::kRelu: o = in.max(Scalar(0)); break;
  }
  return emit(std::move(out), {&x}, [&] {
    return [kind, src = x.node()](Node<Scalar>& self) {
      auto d = Tensor<Scalar>::uninitialized(self.value.shape());
      const auto& y = self.value.array();
      const auto& g = self.grad.array();
      switch (kind) {
        case Pointwise::kSoftplus:
          d.array() = g * src->value.array().logistic();
          break;
        case Pointwise::kSigmoid: d.array() = g * y * (Scalar(1) - y); break;
        case Pointwise::kTanh: d.array() = g * (Scalar(1) - y.square()); break;
        case Pointwise::kRelu: d.array() = (src->value.array() > Scalar(0)).select(g, Scalar(0)); break;
      }
      src->accumulate(std::move(d));
    };
  });
}

template <typename Scalar> Var<Scalar> softplus(const Var<Scalar>& x) { return pointwise(Pointwise::kSoftplus, x); }
template <typename Scalar> Var<Scalar> sigmoid(const Var<Scalar>& x) { return pointwise(Pointwise::kSigmoid, x); }
template <typename Scalar> Var<Scalar> tanh(const Var<Scalar>& x) { return pointwise(Pointwise::kTanh, x); }
template <typename Scalar> Var<Scalar> relu(const Var<Scalar>& x) { return pointwise(Pointwise::kRelu, x); }

/// a (op) b where b has a's shape or is a per-channel vector.
template <typename Scalar>
Var<Scalar> elementwise(Elementwise kind, const Var<Scalar>& a, const Var<Scalar>& b) {
  using namespace detail;
  const Broadcast bc = broadcast_kind(a.shape(), b.shape());
  Tensor<Scalar> expanded;
  const Tensor<Scalar>* rhs = &b.value();
  if (bc == Broadcast::kChannel) {
    expanded = expand_channels(b.value(), a.shape());
    rhs = &expanded;
  }
  auto out = Tensor<Scalar>::uninitialized(a.shape());
  switch (kind) {
    case Elementwise::kAdd: out.array() = a.array() + rhs->array(); break;
    case Elementwise::kSub: out.array() = a.array() - rhs->array(); break;
    case Elementwise::kMul: out.array() = a.array() * rhs->array(); break;
  }
  return emit(std::move(out), {&a, &b}, [&] {
    return [kind, bc, na = a.node(), nb = b.node()](Node<Scalar>& self) {
      const auto& g = self.grad;
      if (na->requires_grad) {
        if (kind == Elementwise::kMul) {
          Tensor<Scalar> d = bc == Broadcast::kChannel ? expand_channels(nb->value, g.shape()) : nb->value;
          d.array() *= g.array();
          na->accumulate(std::move(d));
        } else {
          na->accumulate(g);
        }
      }
      if (nb->requires_grad) {
        Tensor<Scalar> d = g;
        if (kind == Elementwise::kMul) d.array() *= na->value.array();
        if (kind == Elementwise::kSub) d.array() = -d.array();
        if (bc == Broadcast::kChannel) nb->accumulate(sum_to_channels(d));
        else nb->accumulate(std::move(d));
      }
    };
  });
}

template <typename Scalar> Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) { return elementwise(Elementwise::kAdd, a, b); }
template <typename Scalar> Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) { return elementwise(Elementwise::kSub, a, b); }
template <typename Scalar> Var<Scalar> operator*(const Var<Scalar>& a, const Var<Scalar>& b) { return elementwise(Elementwise::kMul, a, b); }

/// Per-channel normalization with statistics of the current batch and space.
template <typename Scalar>
Var<Scalar> batchnorm_spatial(const Var<Scalar>& x, const Var<Scalar>& scale, const Var<Scalar>& shift,
                              Scalar eps = Scalar(1e-5)) {
  using namespace detail;
  require_rank4(x.shape(), "batchnorm_spatial");
  const Index batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (scale.shape() != Shape{channels} || shift.shape() != Shape{channels})
    throw DimensionError("batchnorm_spatial parameter mismatch", x.shape(), scale.shape());
  const Index count = batch * plane;
  if (count < 2) throw DimensionError("batchnorm_spatial needs at least two values per channel");

  auto normalized = Tensor<Scalar>::uninitialized(x.shape());
  Eigen::Array<Scalar, Eigen::Dynamic, 1> inv_std(channels);
  for (Index c = 0; c < channels; ++c) {
    Scalar mean = 0;
    for (Index b = 0; b < batch; ++b) mean += x.array().segment((b * channels + c) * plane, plane).sum();
    mean /= Scalar(count);
    Scalar var = 0;
    for (Index b = 0; b < batch; ++b)
      var += (x.array().segment((b * channels + c) * plane, plane) - mean).square().sum();
    var /= Scalar(count);
    inv_std[c] = Scalar(1) / std::sqrt(var + eps);
    for (Index b = 0; b < batch; ++b) {
      const Index off = (b * channels + c) * plane;
      normalized.array().segment(off, plane) = (x.array().segment(off, plane) - mean) * inv_std[c];
    }
  }
  auto out = Tensor<Scalar>::uninitialized(x.shape());
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < channels; ++c) {
      const Index off = (b * channels + c) * plane;
      out.array().segment(off, plane) = normalized.array().segment(off, plane) * scale.value()[c] + shift.value()[c];
    }

  return emit(std::move(out), {&x, &scale, &shift}, [&] {
    return [batch, channels, plane, count, inv_std, xhat = std::move(normalized), nx = x.node(),
            ns = scale.node(), nt = shift.node()](Node<Scalar>& self) {
      const auto& g = self.grad.array();
      Tensor<Scalar> dscale({channels}), dshift({channels});
      for (Index c = 0; c < channels; ++c)
        for (Index b = 0; b < batch; ++b) {
          const Index off = (b * channels + c) * plane;
          dshift[c] += g.segment(off, plane).sum();
          dscale[c] += (g.segment(off, plane) * xhat.array().segment(off, plane)).sum();
        }
      if (nx->requires_grad) {
        auto dx = Tensor<Scalar>::uninitialized(self.value.shape());
        for (Index c = 0; c < channels; ++c) {
          const Scalar k = ns->value[c] * inv_std[c];
          const Scalar mean_g = dshift[c] / Scalar(count);
          const Scalar mean_gx = dscale[c] / Scalar(count);
          for (Index b = 0; b < batch; ++b) {
            const Index off = (b * channels + c) * plane;
            dx.array().segment(off, plane) =
                k * (g.segment(off, plane) - mean_g - xhat.array().segment(off, plane) * mean_gx);
          }
        }
        nx->accumulate(std::move(dx));
      }
      if (ns->requires_grad) ns->accumulate(dscale);
      if (nt->requires_grad) nt->accumulate(dshift);
    };
  });
}

/// Mean over H x W (shape B x C), or over C x H x W when `include_channels` (shape B).
template <typename Scalar>
Var<Scalar> global_mean(const Var<Scalar>& x, bool include_channels = true) {
  using namespace detail;
  require_rank4(x.shape(), "global_mean");
  const Index batch = x.dim(0), channels = x.dim(1);
  const Index group = include_channels ? x.value().size() / batch : x.dim(2) * x.dim(3);
  const Index groups = x.value().size() / group;
  Tensor<Scalar> out(include_channels ? Shape{batch} : Shape{batch, channels});
  for (Index i = 0; i < groups; ++i) out[i] = x.array().segment(i * group, group).mean();
  return emit(std::move(out), {&x}, [&] {
    return [group, groups, nx = x.node()](Node<Scalar>& self) {
      Tensor<Scalar> d(nx->value.shape());
      for (Index i = 0; i < groups; ++i) d.array().segment(i * group, group).setConstant(self.grad[i] / Scalar(group));
      nx->accumulate(d);
    };
  });
}

/// Sum of all elements, shape [1].
template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  using namespace detail;
  Tensor<Scalar> out({1}, x.array().sum());
  return emit(std::move(out), {&x}, [&] {
    return [nx = x.node()](Node<Scalar>& self) {
      nx->accumulate(Tensor<Scalar>(nx->value.shape(), self.grad[0]));
    };
  });
}

/// Per-channel L2 norm over H x W, shape B x C.
template <typename Scalar>
Var<Scalar> channel_l2(const Var<Scalar>& x) {
  using namespace detail;
  require_rank4(x.shape(), "channel_l2");
  const Index plane = x.dim(2) * x.dim(3);
  const Index groups = x.dim(0) * x.dim(1);
  Tensor<Scalar> out({x.dim(0), x.dim(1)});
  for (Index i = 0; i < groups; ++i) out[i] = std::sqrt(x.array().segment(i * plane, plane).square().sum());
  return emit(std::move(out), {&x}, [&] {
    return [plane, groups, nx = x.node()](Node<Scalar>& self) {
      Tensor<Scalar> d(nx->value.shape());
      for (Index i = 0; i < groups; ++i) {
        const Scalar norm = self.value[i];
        if (norm > Scalar(0))
          d.array().segment(i * plane, plane) = nx->value.array().segment(i * plane, plane) * (self.grad[i] / norm);
      }
      nx->accumulate(d);
    };
  });
}

/// Softmax over H x W for each (batch, channel).
template <typename Scalar>
Var<Scalar> spatial_softmax(const Var<Scalar>& x) {
  using namespace detail;
  require_rank4(x.shape(), "spatial_softmax");
  const Index plane = x.dim(2) * x.dim(3);
  const Index groups = x.dim(0) * x.dim(1);
  auto out = Tensor<Scalar>::uninitialized(x.shape());
  for (Index i = 0; i < groups; ++i) {
    auto seg = x.array().segment(i * plane, plane);
    auto o = out.array().segment(i * plane, plane);
    o = (seg - seg.maxCoeff()).exp();
    o /= o.sum();
  }
  return emit(std::move(out), {&x}, [&] {
    return [plane, groups, nx = x.node()](Node<Scalar>& self) {
      auto d = Tensor<Scalar>::uninitialized(self.value.shape());
      for (Index i = 0; i < groups; ++i) {
        auto y = self.value.array().segment(i * plane, plane);
        auto g = self.grad.array().segment(i * plane, plane);
        const Scalar dot = (y * g).sum();
        d.array().segment(i * plane, plane) = y * (g - dot);
      }
      nx->accumulate(std::move(d));
    };
  });
}

/// Stacks two B x C x H x W tensors along channels.
template <typename Scalar>
Var<Scalar> concat_channels(const Var<Scalar>& a, const Var<Scalar>& b) {
  using namespace detail;
  require_rank4(a.shape(), "concat_channels");
  require_rank4(b.shape(), "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw DimensionError("concat_channels mismatch", a.shape(), b.shape());
  const Index batch = a.dim(0), plane = a.dim(2) * a.dim(3);
  const Index na = a.dim(1) * plane, nb = b.dim(1) * plane;
  auto out = Tensor<Scalar>::uninitialized({batch, a.dim(1) + b.dim(1), a.dim(2), a.dim(3)});
  for (Index i = 0; i < batch; ++i) {
    out.array().segment(i * (na + nb), na) = a.array().segment(i * na, na);
    out.array().segment(i * (na + nb) + na, nb) = b.array().segment(i * nb, nb);
  }
  return emit(std::move(out), {&a, &b}, [&] {
    return [batch, na, nb, pa = a.node(), pb = b.node()](Node<Scalar>& self) {
      if (pa->requires_grad) {
        auto& d = pa->grad_buffer();
        for (Index i = 0; i < batch; ++i) d.array().segment(i * na, na) += self.grad.array().segment(i * (na + nb), na);
      }
      if (pb->requires_grad) {
        auto& d = pb->grad_buffer();
        for (Index i = 0; i < batch; ++i)
          d.array().segment(i * nb, nb) += self.grad.array().segment(i * (na + nb) + na, nb);
      }
    };
  });
}

/// Mean binary cross-entropy of logits against {0,1} labels.
template <typename Scalar>
Var<Scalar> bce_with_logits(const Var<Scalar>& logits, std::span<const Scalar> labels) {
  using namespace detail;
  const Index n = logits.value().size();
  if (static_cast<Index>(labels.size()) != n)
    throw DimensionError("bce_with_logits label count", logits.shape(), Shape{static_cast<Index>(labels.size())});
  for (Scalar y : labels)
    if (y != Scalar(0) && y != Scalar(1)) throw std::invalid_argument("bce_with_logits labels must be 0 or 1");
  Scalar total = 0;
  for (Index i = 0; i < n; ++i) {
    const Scalar z = logits.value()[i];
    // log(1 + exp(-(2y-1) z)) in a form that never overflows.
    total += std::max(z, Scalar(0)) - z * labels[static_cast<std::size_t>(i)] + std::log1p(std::exp(-std::abs(z)));
  }
  Tensor<Scalar> out({1}, total / Scalar(n));
  std::vector<Scalar> y(labels.begin(), labels.end());
  return emit(std::move(out), {&logits}, [&] {
    return [n, y = std::move(y), nl = logits.node()](Node<Scalar>& self) {
      Tensor<Scalar> d(nl->value.shape());
      for (Index i = 0; i < n; ++i)
        d[i] = (sigmoid(nl->value[i]) - y[static_cast<std::size_t>(i)]) * self.grad[0] / Scalar(n);
      nl->accumulate(d);
    };
  });
}

}  // namespace intrack
