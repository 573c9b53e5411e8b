#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "ks/keyed_transform.hpp"
#include "ks/tensor.hpp"

namespace ks {

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a tape.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<Scalar>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

/// Reverse-mode record of one forward pass. Single writer; one backward per tape.
template <typename Scalar>
class Tape {
 public:
  /// Receives the gradient of the loss w.r.t. the node's output and
  /// accumulates into its parents through `Tape::accumulate`.
  using Backward = std::function<void(Tape&, const Tensor<Scalar>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Tensor<Scalar> value) { return push(std::move(value), false, nullptr); }
  Var<Scalar> variable(Tensor<Scalar> value) { return push(std::move(value), true, nullptr); }

  /// Records an op output. The node needs a gradient iff any parent does.
  Var<Scalar> record(Tensor<Scalar> value, std::initializer_list<Var<Scalar>> parents, Backward fn) {
    bool needs = false;
    for (const auto& p : parents) {
      check_owned(p);
      needs = needs || nodes_[p.id].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr);
  }

  const Tensor<Scalar>& value(const Var<Scalar>& v) const {
    check_owned(v);
    return nodes_[v.id].value;
  }
  bool requires_grad(const Var<Scalar>& v) const {
    check_owned(v);
    return nodes_[v.id].requires_grad;
  }
  std::size_t size() const { return nodes_.size(); }

  /// Adds `g` into the gradient buffer of `v` (no-op for constants).
  void accumulate(const Var<Scalar>& v, const Tensor<Scalar>& g) {
    auto& node = nodes_[v.id];
    if (!node.requires_grad) return;
    if (node.grad.empty() && node.value.size() > 0) {
      node.grad = g;
    } else {
      node.grad.data() += g.data();
    }
  }
  /// Mutable gradient buffer for in-place accumulation by kernels.
  Tensor<Scalar>& grad_buffer(const Var<Scalar>& v) {
    auto& node = nodes_[v.id];
    if (node.grad.size() != node.value.size()) node.grad = Tensor<Scalar>::zeros(node.value.shape());
    return node.grad;
  }
  bool needs_grad(const Var<Scalar>& v) const { return nodes_[v.id].requires_grad; }

  /// Seeds d(loss)/d(loss) = 1 and visits recorded ops in reverse order.
  void backward(const Var<Scalar>& loss) {
    if (loss.tape != this || loss.id >= nodes_.size())
      throw TapeError("loss was not recorded on this tape");
    if (nodes_[loss.id].value.size() != 1)
      throw TapeError("backward needs a scalar loss, got shape " +
                      shape_string(nodes_[loss.id].value.shape()));
    if (backward_done_) throw TapeError("backward already ran on this tape");
    backward_done_ = true;
    visit_order_.clear();
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad = Tensor<Scalar>::constant(nodes_[loss.id].value.shape(), Scalar(1));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (!node.backward || node.grad.empty()) continue;
      visit_order_.push_back(i);
      // The node's grad is final once every consumer (all later ids) ran.
      node.backward(*this, node.grad);
    }
  }

  /// d(loss)/d(v); exactly zero when v did not influence the loss.
  Tensor<Scalar> gradient(const Var<Scalar>& v) const {
    check_owned(v);
    const auto& node = nodes_[v.id];
    if (node.grad.size() != node.value.size()) return Tensor<Scalar>::zeros(node.value.shape());
    return node.grad;
  }

  /// Node ids whose backward ran, in visit order.
  const std::vector<std::size_t>& visit_order() const { return visit_order_; }

 private:
  struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var<Scalar> push(Tensor<Scalar> value, bool needs, Backward fn) {
    nodes_.push_back(Node{std::move(value), {}, needs, std::move(fn)});
    return {this, nodes_.size() - 1};
  }
  void check_owned(const Var<Scalar>& v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw TapeError("variable belongs to another tape");
  }

  std::vector<Node> nodes_;
  std::vector<std::size_t> visit_order_;
  bool backward_done_ = false;
};

namespace detail {

[[noreturn]] inline void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

inline void expect_rank(const char* op, const char* what, const Shape& s, std::size_t rank) {
  if (s.size() != rank)
    shape_fail(op, std::string(what) + " must have rank " + std::to_string(rank) + ", got " + shape_string(s));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Kernels. Every kernel accumulates per output element in row-major order, so
// results do not depend on batch composition or thread count.

/// Strided convolution whose kernel and stride both equal `patch`.
/// x (B, C, H, W), weight (O, C, p, p), bias (O) -> (B, O, H/p, W/p).
template <typename Scalar>
Var<Scalar> patch_embed(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias, int patch) {
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  detail::expect_rank("patch_embed", "input", xs, 4);
  detail::expect_rank("patch_embed", "weight", ws, 4);
  const Index batch = xs[0], chans = xs[1], height = xs[2], width = xs[3], outc = ws[0];
  if (patch < 1 || ws[1] != chans || ws[2] != patch || ws[3] != patch || height % patch || width % patch ||
      bias.shape() != Shape{outc})
    detail::shape_fail("patch_embed", "input " + shape_string(xs) + ", weight " + shape_string(ws) +
                                          ", bias " + shape_string(bias.shape()) + ", patch " +
                                          std::to_string(patch));
  const Index oh = height / patch, ow = width / patch, cols_n = oh * ow, k = chans * patch * patch;
  const Index in_stride = chans * height * width, out_stride = outc * cols_n;

  // im2col row index = (c * p + i) * p + j: channel-major block flattening.
  auto im2col = [=](const Scalar* img, RowMatrix<Scalar>& cols) {
    for (Index c = 0; c < chans; ++c)
      for (Index i = 0; i < patch; ++i)
        for (Index j = 0; j < patch; ++j) {
          const Index row = (c * patch + i) * patch + j;
          for (Index py = 0; py < oh; ++py)
            for (Index px = 0; px < ow; ++px)
              cols(row, py * ow + px) = img[(c * height + py * patch + i) * width + px * patch + j];
        }
  };

  const auto& xv = x.value();
  const auto wm = weight.value().matrix(outc, k);
  const auto& bv = bias.value().data();
  Tensor<Scalar> out({batch, outc, oh, ow});
  auto cols = std::make_shared<std::vector<RowMatrix<Scalar>>>(static_cast<std::size_t>(batch), RowMatrix<Scalar>(k, cols_n));
  for (Index b = 0; b < batch; ++b) {
    auto& cb = (*cols)[b];
    im2col(xv.ptr() + b * in_stride, cb);
    auto ob = out.matrix(outc, cols_n, b * out_stride);
    ob.noalias() = wm * cb;
    ob.colwise() += bv;
  }

  return x.tape->record(std::move(out), {x, weight, bias}, [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto wmat = t.value(weight).matrix(outc, k);
    const bool dx = t.needs_grad(x), dw = t.needs_grad(weight), db = t.needs_grad(bias);
    for (Index b = 0; b < batch; ++b) {
      const auto gb = g.matrix(outc, cols_n, b * out_stride);
      const auto& cb = (*cols)[b];
      if (dw) t.grad_buffer(weight).matrix(outc, k).noalias() += gb * cb.transpose();
      if (db) t.grad_buffer(bias).data() += gb.rowwise().sum();
      if (dx) {
        const RowMatrix<Scalar> dcols = wmat.transpose() * gb;
        Scalar* gx = t.grad_buffer(x).ptr() + b * in_stride;
        for (Index c = 0; c < chans; ++c)
          for (Index i = 0; i < patch; ++i)
            for (Index j = 0; j < patch; ++j) {
              const Index row = (c * patch + i) * patch + j;
              for (Index py = 0; py < oh; ++py)
                for (Index px = 0; px < ow; ++px)
                  gx[(c * height + py * patch + i) * width + px * patch + j] += dcols(row, py * ow + px);
            }
      }
    }
  });
}

/// Depthwise convolution with same padding (odd kernel side).
/// x (B, C, H, W), weight (C, 1, k, k), bias (C).
template <typename Scalar>
Var<Scalar> depthwise_conv(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  detail::expect_rank("depthwise_conv", "input", xs, 4);
  detail::expect_rank("depthwise_conv", "weight", ws, 4);
  const Index batch = xs[0], chans = xs[1], height = xs[2], width = xs[3], ks = ws[2];
  if (ws[0] != chans || ws[1] != 1 || ws[3] != ks || ks % 2 == 0 || bias.shape() != Shape{chans})
    detail::shape_fail("depthwise_conv", "input " + shape_string(xs) + ", weight " + shape_string(ws) +
                                             ", bias " + shape_string(bias.shape()));
  const Index pad = ks / 2;

  const auto& xv = x.value();
  const auto& wv = weight.value();
  const auto& bv = bias.value();
  Tensor<Scalar> out(xs);
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < chans; ++c) {
      const Scalar* in = xv.ptr() + (b * chans + c) * height * width;
      const Scalar* w = wv.ptr() + c * ks * ks;
      Scalar* o = out.ptr() + (b * chans + c) * height * width;
      for (Index y = 0; y < height; ++y)
        for (Index xx = 0; xx < width; ++xx) {
          Scalar acc = bv[c];
          for (Index i = 0; i < ks; ++i) {
            const Index iy = y + i - pad;
            if (iy < 0 || iy >= height) continue;
            for (Index j = 0; j < ks; ++j) {
              const Index ix = xx + j - pad;
              if (ix < 0 || ix >= width) continue;
              acc += w[i * ks + j] * in[iy * width + ix];
            }
          }
          o[y * width + xx] = acc;
        }
    }

  return x.tape->record(std::move(out), {x, weight, bias}, [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto& xv = t.value(x);
    const auto& wv = t.value(weight);
    const bool dx = t.needs_grad(x), dw = t.needs_grad(weight), db = t.needs_grad(bias);
    Scalar* gx = dx ? t.grad_buffer(x).ptr() : nullptr;
    Scalar* gw = dw ? t.grad_buffer(weight).ptr() : nullptr;
    Scalar* gbias = db ? t.grad_buffer(bias).ptr() : nullptr;
    for (Index b = 0; b < batch; ++b)
      for (Index c = 0; c < chans; ++c) {
        const Index base = (b * chans + c) * height * width;
        const Scalar* in = xv.ptr() + base;
        const Scalar* w = wv.ptr() + c * ks * ks;
        const Scalar* go = g.ptr() + base;
        for (Index y = 0; y < height; ++y)
          for (Index xx = 0; xx < width; ++xx) {
            const Scalar gv = go[y * width + xx];
            if (db) gbias[c] += gv;
            for (Index i = 0; i < ks; ++i) {
              const Index iy = y + i - pad;
              if (iy < 0 || iy >= height) continue;
              for (Index j = 0; j < ks; ++j) {
                const Index ix = xx + j - pad;
                if (ix < 0 || ix >= width) continue;
                if (dx) gx[base + iy * width + ix] += w[i * ks + j] * gv;
                if (dw) gw[c * ks * ks + i * ks + j] += in[iy * width + ix] * gv;
              }
            }
          }
      }
  });
}

/// 1x1 convolution. x (B, Cin, H, W), weight (Cout, Cin), bias (Cout).
template <typename Scalar>
Var<Scalar> pointwise_conv(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  detail::expect_rank("pointwise_conv", "input", xs, 4);
  detail::expect_rank("pointwise_conv", "weight", ws, 2);
  const Index batch = xs[0], cin = xs[1], spatial = xs[2] * xs[3], cout = ws[0];
  if (ws[1] != cin || bias.shape() != Shape{cout})
    detail::shape_fail("pointwise_conv", "input " + shape_string(xs) + ", weight " + shape_string(ws) +
                                             ", bias " + shape_string(bias.shape()));
  const auto& xv = x.value();
  const auto wm = weight.value().matrix(cout, cin);
  Tensor<Scalar> out({batch, cout, xs[2], xs[3]});
  for (Index b = 0; b < batch; ++b) {
    auto ob = out.matrix(cout, spatial, b * cout * spatial);
    ob.noalias() = wm * xv.matrix(cin, spatial, b * cin * spatial);
    ob.colwise() += bias.value().data();
  }
  return x.tape->record(std::move(out), {x, weight, bias}, [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto& xv = t.value(x);
    const auto wmat = t.value(weight).matrix(cout, cin);
    const bool dx = t.needs_grad(x), dw = t.needs_grad(weight), db = t.needs_grad(bias);
    for (Index b = 0; b < batch; ++b) {
      const auto gb = g.matrix(cout, spatial, b * cout * spatial);
      if (dw) t.grad_buffer(weight).matrix(cout, cin).noalias() += gb * xv.matrix(cin, spatial, b * cin * spatial).transpose();
      if (db) t.grad_buffer(bias).data() += gb.rowwise().sum();
      if (dx) t.grad_buffer(x).matrix(cin, spatial, b * cin * spatial).noalias() += wmat.transpose() * gb;
    }
  });
}

/// Exact GELU: x * Phi(x).
template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& x) {
  const auto& xv = x.value();
  Tensor<Scalar> out(xv.shape());
  const Scalar inv_sqrt2 = Scalar(1) / std::sqrt(Scalar(2));
  for (Index i = 0; i < xv.size(); ++i) out[i] = Scalar(0.5) * xv[i] * (Scalar(1) + std::erf(xv[i] * inv_sqrt2));
  return x.tape->record(std::move(out), {x}, [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto& xv = t.value(x);
    const Scalar inv_sqrt_2pi = Scalar(1) / std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar>);
    auto& gx = t.grad_buffer(x);
    for (Index i = 0; i < xv.size(); ++i) {
      const Scalar v = xv[i];
      const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2));
      gx[i] += g[i] * (cdf + v * inv_sqrt_2pi * std::exp(Scalar(-0.5) * v * v));
    }
  });
}

enum class NormMode {
  Train,       ///< batch statistics; batch mean/var reported for running updates
  BatchStats,  ///< batch statistics, nothing reported
  Eval,        ///< stored running statistics
};

template <typename Scalar>
struct BatchStats {
  Tensor<Scalar> mean;
  Tensor<Scalar> var;  ///< unbiased
};

/// Per-channel normalization with learned scale/shift over (B, C[, H, W]).
/// In Train mode the batch mean and unbiased variance are written to `stats`.
template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& x, const Var<Scalar>& scale, const Var<Scalar>& shift,
                       const Tensor<Scalar>& running_mean, const Tensor<Scalar>& running_var, NormMode mode,
                       Scalar eps = Scalar(1e-5), BatchStats<Scalar>* stats = nullptr) {
  const auto& xs = x.shape();
  if (xs.size() != 2 && xs.size() != 4) detail::shape_fail("batch_norm", "input " + shape_string(xs));
  const Index batch = xs[0], chans = xs[1], spatial = xs.size() == 4 ? xs[2] * xs[3] : 1;
  const Shape cshape{chans};
  if (scale.shape() != cshape || shift.shape() != cshape || running_mean.shape() != cshape ||
      running_var.shape() != cshape)
    detail::shape_fail("batch_norm", "input " + shape_string(xs) + " with channel parameters " +
                                         shape_string(scale.shape()));
  const Index count = batch * spatial;
  if (mode != NormMode::Eval && count < 2)
    detail::shape_fail("batch_norm", "batch statistics need at least 2 values per channel");

  const auto& xv = x.value();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mean(chans), inv_std(chans);
  if (mode == NormMode::Eval) {
    mean = running_mean.data();
    for (Index c = 0; c < chans; ++c) inv_std[c] = Scalar(1) / std::sqrt(running_var[c] + eps);
  } else {
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> var(chans);
    for (Index c = 0; c < chans; ++c) {
      Scalar s = 0;
      for (Index b = 0; b < batch; ++b)
        for (Index i = 0; i < spatial; ++i) s += xv[(b * chans + c) * spatial + i];
      const Scalar m = s / Scalar(count);
      Scalar ss = 0;
      for (Index b = 0; b < batch; ++b)
        for (Index i = 0; i < spatial; ++i) {
          const Scalar d = xv[(b * chans + c) * spatial + i] - m;
          ss += d * d;
        }
      mean[c] = m;
      var[c] = ss / Scalar(count);
      inv_std[c] = Scalar(1) / std::sqrt(var[c] + eps);
    }
    if (mode == NormMode::Train && stats) {
      stats->mean = Tensor<Scalar>(cshape, mean);
      stats->var = Tensor<Scalar>(cshape, var * (Scalar(count) / Scalar(count - 1)));
    }
  }

  Tensor<Scalar> xhat(xs), out(xs);
  const auto& sc = scale.value();
  const auto& sh = shift.value();
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < chans; ++c)
      for (Index i = 0; i < spatial; ++i) {
        const Index at = (b * chans + c) * spatial + i;
        xhat[at] = (xv[at] - mean[c]) * inv_std[c];
        out[at] = sc[c] * xhat[at] + sh[c];
      }

  const bool batch_mode = mode != NormMode::Eval;
  return x.tape->record(
      std::move(out), {x, scale, shift},
      [=, xhat = std::move(xhat)](Tape<Scalar>& t, const Tensor<Scalar>& g) {
        const auto& sc = t.value(scale);
        Eigen::Matrix<Scalar, Eigen::Dynamic, 1> sum_g = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(chans);
        Eigen::Matrix<Scalar, Eigen::Dynamic, 1> sum_gx = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(chans);
        for (Index b = 0; b < batch; ++b)
          for (Index c = 0; c < chans; ++c)
            for (Index i = 0; i < spatial; ++i) {
              const Index at = (b * chans + c) * spatial + i;
              sum_g[c] += g[at];
              sum_gx[c] += g[at] * xhat[at];
            }
        if (t.needs_grad(scale)) t.grad_buffer(scale).data() += sum_gx;
        if (t.needs_grad(shift)) t.grad_buffer(shift).data() += sum_g;
        if (!t.needs_grad(x)) return;
        auto& gx = t.grad_buffer(x);
        const Scalar n = Scalar(count);
        for (Index b = 0; b < batch; ++b)
          for (Index c = 0; c < chans; ++c)
            for (Index i = 0; i < spatial; ++i) {
              const Index at = (b * chans + c) * spatial + i;
              if (batch_mode)
                gx[at] += sc[c] * inv_std[c] * (g[at] - sum_g[c] / n - xhat[at] * sum_gx[c] / n);
              else
                gx[at] += sc[c] * inv_std[c] * g[at];
            }
      });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.shape() != b.shape())
    detail::shape_fail("add", shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor<Scalar> out(a.shape(), a.value().data() + b.value().data());
  return a.tape->record(std::move(out), {a, b}, [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.shape() != b.shape())
    detail::shape_fail("mul", shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor<Scalar> out(a.shape(), a.value().data().cwiseProduct(b.value().data()));
  return a.tape->record(std::move(out), {a, b}, [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    if (t.needs_grad(a)) t.grad_buffer(a).data() += g.data().cwiseProduct(t.value(b).data());
    if (t.needs_grad(b)) t.grad_buffer(b).data() += g.data().cwiseProduct(t.value(a).data());
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  Tensor<Scalar> out = Tensor<Scalar>::scalar(a.value().data().sum());
  return a.tape->record(std::move(out), {a}, [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.grad_buffer(a).data().array() += g[0];
  });
}

/// (B, C, H, W) -> (B, C)
template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& x) {
  const auto& xs = x.shape();
  detail::expect_rank("global_avg_pool", "input", xs, 4);
  const Index rows = xs[0] * xs[1], spatial = xs[2] * xs[3];
  Tensor<Scalar> out({xs[0], xs[1]});
  out.data() = x.value().matrix(rows, spatial).rowwise().sum() / Scalar(spatial);
  return x.tape->record(std::move(out), {x}, [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    auto gx = t.grad_buffer(x).matrix(rows, spatial);
    gx.colwise() += g.data() / Scalar(spatial);
  });
}

/// Affine layer. x (B, I), weight (O, I), bias (O) -> (B, O).
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  detail::expect_rank("linear", "input", xs, 2);
  detail::expect_rank("linear", "weight", ws, 2);
  if (ws[1] != xs[1] || bias.shape() != Shape{ws[0]})
    detail::shape_fail("linear", "input " + shape_string(xs) + ", weight " + shape_string(ws) + ", bias " +
                                     shape_string(bias.shape()));
  const Index batch = xs[0], in = xs[1], outn = ws[0];
  const auto wm = weight.value().matrix(outn, in);
  Tensor<Scalar> out({batch, outn});
  // Row by row so each sample's result is independent of the batch size.
  for (Index b = 0; b < batch; ++b)
    out.matrix(outn, 1, b * outn).noalias() = wm * x.value().matrix(in, 1, b * in) + bias.value().data();
  return x.tape->record(std::move(out), {x, weight, bias}, [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto& xv = t.value(x);
    const auto wmat = t.value(weight).matrix(outn, in);
    const bool dx = t.needs_grad(x), dw = t.needs_grad(weight), db = t.needs_grad(bias);
    for (Index b = 0; b < batch; ++b) {
      const auto gb = g.matrix(outn, 1, b * outn);
      if (dw) t.grad_buffer(weight).matrix(outn, in).noalias() += gb * xv.matrix(1, in, b * in);
      if (db) t.grad_buffer(bias).matrix(outn, 1) += gb;
      if (dx) t.grad_buffer(x).matrix(in, 1, b * in).noalias() += wmat.transpose() * gb;
    }
  });
}

enum class Reduction { Mean, Sum };

/// Softmax cross-entropy of logits (B, K) against integer labels.
template <typename Scalar>
Var<Scalar> softmax_cross_entropy(const Var<Scalar>& logits, std::span<const int> labels,
                                  Reduction reduction = Reduction::Mean) {
  const auto& ls = logits.shape();
  detail::expect_rank("softmax_cross_entropy", "logits", ls, 2);
  const Index batch = ls[0], classes = ls[1];
  if (static_cast<Index>(labels.size()) != batch || batch == 0)
    detail::shape_fail("softmax_cross_entropy", "logits " + shape_string(ls) + " with " +
                                                    std::to_string(labels.size()) + " labels");
  for (int y : labels)
    if (y < 0 || y >= classes)
      detail::shape_fail("softmax_cross_entropy", "label " + std::to_string(y) + " outside [0, " +
                                                      std::to_string(classes) + ")");
  const auto z = logits.value().matrix(batch, classes);
  auto probs = std::make_shared<RowMatrix<Scalar>>(batch, classes);
  Scalar total = 0;
  for (Index b = 0; b < batch; ++b) {
    const Scalar zmax = z.row(b).maxCoeff();
    const auto shifted = (z.row(b).array() - zmax).exp();
    const Scalar s = shifted.sum();
    probs->row(b) = shifted / s;
    total += std::log(s) + zmax - z(b, labels[b]);
  }
  const Scalar norm = reduction == Reduction::Mean ? Scalar(1) / Scalar(batch) : Scalar(1);
  std::vector<int> ys(labels.begin(), labels.end());
  return logits.tape->record(Tensor<Scalar>::scalar(total * norm), {logits},
                             [=, ys = std::move(ys)](Tape<Scalar>& t, const Tensor<Scalar>& g) {
                               auto gz = t.grad_buffer(logits).matrix(batch, classes);
                               RowMatrix<Scalar> d = *probs;
                               for (Index b = 0; b < batch; ++b) d(b, ys[b]) -= Scalar(1);
                               gz += d * (g[0] * norm);
                             });
}

/// Keyed block-wise pixel shuffle of every image in a (B, 3, H, W) batch.
/// Its gradient is the inverse shuffle of the incoming gradient.
template <typename Scalar>
Var<Scalar> block_shuffle(const Var<Scalar>& x, const PermutationVector& perm) {
  const auto& xs = x.shape();
  detail::expect_rank("block_shuffle", "input", xs, 4);
  const Index per_image = xs[1] * xs[2] * xs[3];
  Tensor<Scalar> out(xs);
  for (Index b = 0; b < xs[0]; ++b)
    permute_blocks<Scalar>(std::span<const Scalar>(x.value().ptr() + b * per_image, per_image),
                           std::span<Scalar>(out.ptr() + b * per_image, per_image), int(xs[1]), int(xs[2]),
                           int(xs[3]), perm);
  return x.tape->record(std::move(out), {x}, [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    Tensor<Scalar> back(xs);
    for (Index b = 0; b < xs[0]; ++b)
      permute_blocks<Scalar>(std::span<const Scalar>(g.ptr() + b * per_image, per_image),
                             std::span<Scalar>(back.ptr() + b * per_image, per_image), int(xs[1]), int(xs[2]),
                             int(xs[3]), perm, true);
    t.accumulate(x, back);
  });
}

/// Central-difference check of the tape gradient of `f` at `x`. Returns the
/// max over coordinates of |a - n| / max(|a|, |n|, 1e-8). When `max_coords`
/// is positive, an evenly strided subset of coordinates is checked.
template <typename Scalar>
Scalar finite_diff_check(const std::function<Var<Scalar>(Tape<Scalar>&, const Var<Scalar>&)>& f,
                         const Tensor<Scalar>& x, Scalar eps, Index max_coords = 0) {
  Tensor<Scalar> analytic;
  {
    Tape<Scalar> tape;
    const auto xv = tape.variable(x);
    const auto loss = f(tape, xv);
    tape.backward(loss);
    analytic = tape.gradient(xv);
  }
  auto eval = [&](const Tensor<Scalar>& at) {
    Tape<Scalar> tape;
    return f(tape, tape.constant(at)).value().item();
  };
  const Index n = x.size();
  const Index stride = max_coords > 0 && n > max_coords ? (n + max_coords - 1) / max_coords : 1;
  Scalar worst = 0;
  Tensor<Scalar> probe = x;
  for (Index i = 0; i < n; i += stride) {
    const Scalar orig = probe[i];
    probe[i] = orig + eps;
    const Scalar up = eval(probe);
    probe[i] = orig - eps;
    const Scalar down = eval(probe);
    probe[i] = orig;
    const Scalar numeric = (up - down) / (Scalar(2) * eps);
    const Scalar a = analytic[i];
    const Scalar denom = std::max({std::abs(a), std::abs(numeric), Scalar(1e-8)});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace ks
