#pragma once

// Image ops over [B, C, H, W] tensors: convolutions, pooling, normalization,
// channel concatenation and channel softmax. Convolutions lower to
// im2col + GEMM through Eigen.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "sauron/tensor.hpp"

namespace sauron {

struct ConvGeometry {
  std::size_t channels = 0, height = 0, width = 0;
  std::size_t kernel = 1, stride = 1, padding = 0;
  std::size_t out_height = 0, out_width = 0;

  std::size_t patch() const { return channels * kernel * kernel; }
  std::size_t positions() const { return out_height * out_width; }
};

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < k) return 0;
  return (in + 2 * pad - k) / stride + 1;
}

inline std::size_t conv_transpose_out_size(std::size_t in, std::size_t k, std::size_t stride,
                                           std::size_t pad) {
  return (in - 1) * stride + k - 2 * pad;
}

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* col) {
  const std::size_t P = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kernel; ++ki)
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        T* row = col + ((c * g.kernel + ki) * g.kernel + kj) * P;
        for (std::size_t oh = 0; oh < g.out_height; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.padding);
          T* dst = row + oh * g.out_width;
          if (ih < 0 || ih >= static_cast<long>(g.height)) {
            std::fill(dst, dst + g.out_width, T(0));
            continue;
          }
          const T* src = image + (c * g.height + static_cast<std::size_t>(ih)) * g.width;
          for (std::size_t ow = 0; ow < g.out_width; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.padding);
            dst[ow] = (iw < 0 || iw >= static_cast<long>(g.width)) ? T(0) : src[iw];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* image) {
  const std::size_t P = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kernel; ++ki)
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const T* row = col + ((c * g.kernel + ki) * g.kernel + kj) * P;
        for (std::size_t oh = 0; oh < g.out_height; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.padding);
          if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
          T* dst = image + (c * g.height + static_cast<std::size_t>(ih)) * g.width;
          const T* src = row + oh * g.out_width;
          for (std::size_t ow = 0; ow < g.out_width; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.padding);
            if (iw >= 0 && iw < static_cast<long>(g.width)) dst[iw] += src[ow];
          }
        }
      }
}

template <std::floating_point T>
void require_rank4(const char* op, const char* name, const Tensor<T>& t) {
  if (t.rank() != 4)
    throw ShapeError(std::string(op) + ": " + name + " must be rank 4 [B,C,H,W], got " +
                     shape_str(t.shape()));
}

// [Cout, Cin, k, k] -> [Cout*k*k, Cin]
template <typename T>
RowMat<T> transposed_kernel_matrix(std::span<const T> w, std::size_t cout, std::size_t cin, std::size_t k) {
  RowMat<T> m(cout * k * k, cin);
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t ci = 0; ci < cin; ++ci)
      for (std::size_t kk = 0; kk < k * k; ++kk) m(co * k * k + kk, ci) = w[(co * cin + ci) * k * k + kk];
  return m;
}

}  // namespace detail

/// 2D cross-correlation. weights: [Cout, Cin, k, k]; bias: [Cout] or undefined.
template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t padding = 0) {
  detail::require_rank4("conv2d", "input", input);
  detail::require_rank4("conv2d", "weights", weights);
  if (stride < 1) throw InvalidArgument("conv2d: stride must be >= 1");
  const std::size_t B = input.dim(0), cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t cout = weights.dim(0), k = weights.dim(2);
  if (k < 1 || weights.dim(3) != k) detail::shape_mismatch("conv2d", "input", input.shape(), "weights", weights.shape(), "kernel must be square and >= 1");
  if (weights.dim(1) != cin)
    detail::shape_mismatch("conv2d", "input", input.shape(), "weights", weights.shape(),
                           "input channels differ from weights' Cin");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout))
    detail::shape_mismatch("conv2d", "weights", weights.shape(), "bias", bias.shape());
  ConvGeometry g{cin, H, W, k, stride, padding, conv_out_size(H, k, stride, padding),
                 conv_out_size(W, k, stride, padding)};
  if (g.out_height == 0 || g.out_width == 0)
    detail::shape_mismatch("conv2d", "input", input.shape(), "weights", weights.shape(), "kernel larger than padded input");

  const std::size_t Kc = g.patch(), P = g.positions();
  auto cols = std::make_shared<std::vector<T>>(B * Kc * P);
  std::vector<T> out(B * cout * P);
  detail::ConstMapMat<T> Wm(weights.data().data(), cout, Kc);
  for (std::size_t b = 0; b < B; ++b) {
    T* col = cols->data() + b * Kc * P;
    detail::im2col(input.data().data() + b * cin * H * W, g, col);
    detail::MapMat<T> O(out.data() + b * cout * P, cout, P);
    O.noalias() = Wm * detail::ConstMapMat<T>(col, Kc, P);
    if (bias.defined())
      for (std::size_t c = 0; c < cout; ++c) O.row(c).array() += bias[c];
  }
  std::vector<Tensor<T>> parents{input, weights};
  if (bias.defined()) parents.push_back(bias);
  return detail::make_result<T>(
      "conv2d", {B, cout, g.out_height, g.out_width}, std::move(out), std::move(parents),
      [g, cols, B, cout](detail::Node<T>& self) {
        const std::size_t Kc = g.patch(), P = g.positions();
        const auto& wv = self.parents[1]->value;
        detail::ConstMapMat<T> Wm(wv.data(), cout, Kc);
        T* gx = detail::grad_of(self, 0);
        T* gw = detail::grad_of(self, 1);
        T* gb = self.parents.size() > 2 ? detail::grad_of(self, 2) : nullptr;
        detail::RowMat<T> dcol;
        for (std::size_t b = 0; b < B; ++b) {
          detail::ConstMapMat<T> G(self.grad.data() + b * cout * P, cout, P);
          const T* col = cols->data() + b * Kc * P;
          if (gw) detail::MapMat<T>(gw, cout, Kc).noalias() += G * detail::ConstMapMat<T>(col, Kc, P).transpose();
          // Sequential sum: Eigen's vectorized reduction peels by pointer
          // alignment, which makes results vary between runs.
          if (gb)
            for (std::size_t c = 0; c < cout; ++c) {
              const T* row = self.grad.data() + (b * cout + c) * P;
              gb[c] += std::accumulate(row, row + P, T(0));
            }
          if (gx) {
            dcol.noalias() = Wm.transpose() * G;
            detail::col2im_add(dcol.data(), g, gx + b * g.channels * g.height * g.width);
          }
        }
      });
}

/// Transposed convolution. weights: [Cout, Cin, k, k] (same axis order as conv2d,
/// so structural pruning treats both layer kinds alike).
template <std::floating_point T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                           std::size_t stride = 1, std::size_t padding = 0) {
  detail::require_rank4("conv_transpose2d", "input", input);
  detail::require_rank4("conv_transpose2d", "weights", weights);
  if (stride < 1) throw InvalidArgument("conv_transpose2d: stride must be >= 1");
  const std::size_t B = input.dim(0), cin = input.dim(1), Hin = input.dim(2), Win = input.dim(3);
  const std::size_t cout = weights.dim(0), k = weights.dim(2);
  if (weights.dim(1) != cin)
    detail::shape_mismatch("conv_transpose2d", "input", input.shape(), "weights", weights.shape(),
                           "input channels differ from weights' Cin");
  if (k < 1 || weights.dim(3) != k)
    detail::shape_mismatch("conv_transpose2d", "input", input.shape(), "weights", weights.shape(), "kernel must be square and >= 1");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout))
    detail::shape_mismatch("conv_transpose2d", "weights", weights.shape(), "bias", bias.shape());
  if ((Hin - 1) * stride + k <= 2 * padding || (Win - 1) * stride + k <= 2 * padding)
    detail::shape_mismatch("conv_transpose2d", "input", input.shape(), "weights", weights.shape(), "padding consumes the output");
  // Geometry of the *output* image seen as a conv input: its im2col positions are the input pixels.
  ConvGeometry g{cout, conv_transpose_out_size(Hin, k, stride, padding),
                 conv_transpose_out_size(Win, k, stride, padding), k, stride, padding, Hin, Win};
  const std::size_t Kc = g.patch(), P = g.positions();
  auto Wt = std::make_shared<detail::RowMat<T>>(detail::transposed_kernel_matrix(weights.data(), cout, cin, k));
  std::vector<T> out(B * cout * g.height * g.width, T(0));
  detail::RowMat<T> col(Kc, P);
  for (std::size_t b = 0; b < B; ++b) {
    col.noalias() = *Wt * detail::ConstMapMat<T>(input.data().data() + b * cin * P, cin, P);
    T* ob = out.data() + b * cout * g.height * g.width;
    detail::col2im_add(col.data(), g, ob);
    if (bias.defined())
      for (std::size_t c = 0; c < cout; ++c)
        for (std::size_t i = 0; i < g.height * g.width; ++i) ob[c * g.height * g.width + i] += bias[c];
  }
  std::vector<Tensor<T>> parents{input, weights};
  if (bias.defined()) parents.push_back(bias);
  return detail::make_result<T>(
      "conv_transpose2d", {B, cout, g.height, g.width}, std::move(out), std::move(parents),
      [g, Wt, B, cin, cout](detail::Node<T>& self) {
        const std::size_t Kc = g.patch(), P = g.positions(), HW = g.height * g.width, k = g.kernel;
        const auto& xv = self.parents[0]->value;
        T* gx = detail::grad_of(self, 0);
        T* gw = detail::grad_of(self, 1);
        T* gb = self.parents.size() > 2 ? detail::grad_of(self, 2) : nullptr;
        detail::RowMat<T> dcol(Kc, P);
        detail::RowMat<T> dWt = detail::RowMat<T>::Zero(Kc, cin);
        for (std::size_t b = 0; b < B; ++b) {
          const T* gout = self.grad.data() + b * cout * HW;
          detail::im2col(gout, g, dcol.data());
          detail::ConstMapMat<T> X(xv.data() + b * cin * P, cin, P);
          if (gx) detail::MapMat<T>(gx + b * cin * P, cin, P).noalias() += Wt->transpose() * dcol;
          if (gw) dWt.noalias() += dcol * X.transpose();
          if (gb)
            for (std::size_t c = 0; c < cout; ++c)
              for (std::size_t i = 0; i < HW; ++i) gb[c] += gout[c * HW + i];
        }
        if (gw)
          for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t ci = 0; ci < cin; ++ci)
              for (std::size_t kk = 0; kk < k * k; ++kk) gw[(co * cin + ci) * k * k + kk] += dWt(co * k * k + kk, ci);
      });
}

/// Average pooling with window and stride `window`; trailing rows/cols that do
/// not fill a window are dropped (floor semantics).
template <std::floating_point T>
Tensor<T> avg_pool2d(const Tensor<T>& input, std::size_t window) {
  detail::require_rank4("avg_pool2d", "input", input);
  if (window < 1) throw InvalidArgument("avg_pool2d: window must be >= 1");
  const std::size_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t Ho = H / window, Wo = W / window;
  if (Ho == 0 || Wo == 0)
    throw ShapeError("avg_pool2d: window " + std::to_string(window) + " larger than input " + detail::shape_str(input.shape()));
  const T inv = T(1) / static_cast<T>(window * window);
  std::vector<T> out(B * C * Ho * Wo, T(0));
  const auto x = input.data();
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t oh = 0; oh < Ho; ++oh)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        T acc = 0;
        for (std::size_t i = 0; i < window; ++i)
          for (std::size_t j = 0; j < window; ++j) acc += x[(bc * H + oh * window + i) * W + ow * window + j];
        out[(bc * Ho + oh) * Wo + ow] = acc * inv;
      }
  return detail::make_result<T>("avg_pool2d", {B, C, Ho, Wo}, std::move(out), {input},
                                [=](detail::Node<T>& self) {
                                  T* gx = detail::grad_of(self, 0);
                                  if (!gx) return;
                                  for (std::size_t bc = 0; bc < B * C; ++bc)
                                    for (std::size_t oh = 0; oh < Ho; ++oh)
                                      for (std::size_t ow = 0; ow < Wo; ++ow) {
                                        const T gv = self.grad[(bc * Ho + oh) * Wo + ow] * inv;
                                        for (std::size_t i = 0; i < window; ++i)
                                          for (std::size_t j = 0; j < window; ++j)
                                            gx[(bc * H + oh * window + i) * W + ow * window + j] += gv;
                                      }
                                });
}

template <std::floating_point T>
Tensor<T> max_pool2d(const Tensor<T>& input, std::size_t window) {
  detail::require_rank4("max_pool2d", "input", input);
  if (window < 1) throw InvalidArgument("max_pool2d: window must be >= 1");
  const std::size_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t Ho = H / window, Wo = W / window;
  if (Ho == 0 || Wo == 0) throw ShapeError("max_pool2d: window larger than input " + detail::shape_str(input.shape()));
  std::vector<T> out(B * C * Ho * Wo);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const auto x = input.data();
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t oh = 0; oh < Ho; ++oh)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        std::size_t best = (bc * H + oh * window) * W + ow * window;
        for (std::size_t i = 0; i < window; ++i)
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t idx = (bc * H + oh * window + i) * W + ow * window + j;
            if (x[idx] > x[best]) best = idx;
          }
        const std::size_t o = (bc * Ho + oh) * Wo + ow;
        out[o] = x[best];
        (*argmax)[o] = best;
      }
  return detail::make_result<T>("max_pool2d", {B, C, Ho, Wo}, std::move(out), {input},
                                [argmax](detail::Node<T>& self) {
                                  if (T* gx = detail::grad_of(self, 0))
                                    for (std::size_t o = 0; o < self.grad.size(); ++o) gx[(*argmax)[o]] += self.grad[o];
                                });
}

/// Concatenation along the channel axis.
template <std::floating_point T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_channels: no inputs");
  for (const auto& p : parts) detail::require_rank4("concat_channels", "part", p);
  const std::size_t B = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3);
  std::size_t C = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.dim(0) != B || p.dim(2) != H || p.dim(3) != W)
      detail::shape_mismatch("concat_channels", "first part", parts[0].shape(), "part", p.shape());
    widths.push_back(p.dim(1));
    C += p.dim(1);
  }
  if (parts.size() == 1) return parts[0];
  const std::size_t HW = H * W;
  std::vector<T> out(B * C * HW);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const T* src = parts[p].data().data() + b * widths[p] * HW;
      std::copy(src, src + widths[p] * HW, out.data() + (b * C + offset) * HW);
      offset += widths[p];
    }
  }
  return detail::make_result<T>("concat_channels", {B, C, H, W}, std::move(out), parts,
                                [widths, B, C, HW](detail::Node<T>& self) {
                                  for (std::size_t b = 0; b < B; ++b) {
                                    std::size_t offset = 0;
                                    for (std::size_t p = 0; p < widths.size(); ++p) {
                                      if (T* g = detail::grad_of(self, p)) {
                                        const T* src = self.grad.data() + (b * C + offset) * HW;
                                        T* dst = g + b * widths[p] * HW;
                                        for (std::size_t i = 0; i < widths[p] * HW; ++i) dst[i] += src[i];
                                      }
                                      offset += widths[p];
                                    }
                                  }
                                });
}

namespace detail {

// Normalizes groups that share a channel: instance norm uses one group per
// (sample, channel); batch norm one group per channel across the batch.
template <std::floating_point T>
Tensor<T> grouped_norm(const char* op, const Tensor<T>& input, const Tensor<T>& gamma,
                       const Tensor<T>& beta, T eps, bool per_sample, std::vector<T>* batch_mean,
                       std::vector<T>* batch_var) {
  require_rank4(op, "input", input);
  const std::size_t B = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  if (gamma.numel() != C || beta.numel() != C)
    shape_mismatch(op, "input", input.shape(), "gamma/beta", gamma.shape());
  const std::size_t groups = per_sample ? B * C : C;
  const std::size_t count = per_sample ? HW : B * HW;
  auto xhat = std::make_shared<std::vector<T>>(input.numel());
  auto inv_std = std::make_shared<std::vector<T>>(groups);
  std::vector<T> out(input.numel());
  const auto x = input.data();
  auto for_group = [&](std::size_t gidx, auto&& fn) {
    if (per_sample) {
      for (std::size_t i = 0; i < HW; ++i) fn(gidx * HW + i);
    } else {
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < HW; ++i) fn((b * C + gidx) * HW + i);
    }
  };
  if (batch_mean) batch_mean->assign(C, T(0));
  if (batch_var) batch_var->assign(C, T(0));
  for (std::size_t gi = 0; gi < groups; ++gi) {
    T m = 0;
    for_group(gi, [&](std::size_t i) { m += x[i]; });
    m /= static_cast<T>(count);
    T v = 0;
    for_group(gi, [&](std::size_t i) { v += (x[i] - m) * (x[i] - m); });
    v /= static_cast<T>(count);
    const T is = T(1) / std::sqrt(v + eps);
    (*inv_std)[gi] = is;
    const std::size_t c = per_sample ? gi % C : gi;
    for_group(gi, [&](std::size_t i) {
      (*xhat)[i] = (x[i] - m) * is;
      out[i] = (*xhat)[i] * gamma[c] + beta[c];
    });
    if (!per_sample && batch_mean) {
      (*batch_mean)[c] = m;
      (*batch_var)[c] = v;
    }
  }
  return make_result<T>(op, input.shape(), std::move(out), {input, gamma, beta},
                        [=](Node<T>& self) {
                          const auto& gv = self.parents[1]->value;
                          T* gx = grad_of(self, 0);
                          T* gg = grad_of(self, 1);
                          T* gb = grad_of(self, 2);
                          auto group_iter = [&](std::size_t gidx, auto&& fn) {
                            if (per_sample) {
                              for (std::size_t i = 0; i < HW; ++i) fn(gidx * HW + i);
                            } else {
                              for (std::size_t b = 0; b < B; ++b)
                                for (std::size_t i = 0; i < HW; ++i) fn((b * C + gidx) * HW + i);
                            }
                          };
                          for (std::size_t gi = 0; gi < groups; ++gi) {
                            const std::size_t c = per_sample ? gi % C : gi;
                            T sum_d = 0, sum_dx = 0;
                            group_iter(gi, [&](std::size_t i) {
                              const T dy = self.grad[i];
                              if (gg) gg[c] += dy * (*xhat)[i];
                              if (gb) gb[c] += dy;
                              const T d = dy * gv[c];
                              sum_d += d;
                              sum_dx += d * (*xhat)[i];
                            });
                            if (!gx) continue;
                            const T n = static_cast<T>(count), is = (*inv_std)[gi];
                            group_iter(gi, [&](std::size_t i) {
                              const T d = self.grad[i] * gv[c];
                              gx[i] += is / n * (n * d - sum_d - (*xhat)[i] * sum_dx);
                            });
                          }
                        });
}

}  // namespace detail

/// Per-sample, per-channel normalization with an affine transform.
template <std::floating_point T>
Tensor<T> instance_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  return detail::grouped_norm<T>("instance_norm", input, gamma, beta, eps, true, nullptr, nullptr);
}

/// Training-mode batch normalization; batch statistics are reported for the
/// running averages.
template <std::floating_point T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                     std::vector<T>* batch_mean = nullptr, std::vector<T>* batch_var = nullptr) {
  return detail::grouped_norm<T>("batch_norm", input, gamma, beta, eps, false, batch_mean, batch_var);
}

/// Inference-mode batch normalization with fixed statistics.
template <std::floating_point T>
Tensor<T> batch_norm_inference(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                               std::span<const T> mean, std::span<const T> var, T eps) {
  detail::require_rank4("batch_norm_inference", "input", input);
  const std::size_t B = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  if (gamma.numel() != C || beta.numel() != C || mean.size() != C || var.size() != C)
    detail::shape_mismatch("batch_norm_inference", "input", input.shape(), "gamma", gamma.shape());
  auto inv_std = std::make_shared<std::vector<T>>(C);
  for (std::size_t c = 0; c < C; ++c) (*inv_std)[c] = T(1) / std::sqrt(var[c] + eps);
  std::vector<T> m(mean.begin(), mean.end());
  std::vector<T> out(input.numel());
  const auto x = input.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t idx = (b * C + c) * HW + i;
        out[idx] = (x[idx] - m[c]) * (*inv_std)[c] * gamma[c] + beta[c];
      }
  return detail::make_result<T>("batch_norm_inference", input.shape(), std::move(out), {input, gamma, beta},
                                [=](detail::Node<T>& self) {
                                  const auto& xv = self.parents[0]->value;
                                  const auto& gv = self.parents[1]->value;
                                  T* gx = detail::grad_of(self, 0);
                                  T* gg = detail::grad_of(self, 1);
                                  T* gb = detail::grad_of(self, 2);
                                  for (std::size_t b = 0; b < B; ++b)
                                    for (std::size_t c = 0; c < C; ++c)
                                      for (std::size_t i = 0; i < HW; ++i) {
                                        const std::size_t idx = (b * C + c) * HW + i;
                                        const T dy = self.grad[idx];
                                        if (gx) gx[idx] += dy * gv[c] * (*inv_std)[c];
                                        if (gg) gg[c] += dy * (xv[idx] - m[c]) * (*inv_std)[c];
                                        if (gb) gb[c] += dy;
                                      }
                                });
}

/// Softmax over the channel axis of [B, C, H, W].
template <std::floating_point T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  detail::require_rank4("softmax_channels", "logits", logits);
  const std::size_t B = logits.dim(0), C = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
  std::vector<T> out(logits.numel());
  const auto x = logits.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < HW; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, x[(b * C + c) * HW + i]);
      T z = 0;
      for (std::size_t c = 0; c < C; ++c) z += std::exp(x[(b * C + c) * HW + i] - mx);
      for (std::size_t c = 0; c < C; ++c) out[(b * C + c) * HW + i] = std::exp(x[(b * C + c) * HW + i] - mx) / z;
    }
  return detail::make_result<T>("softmax_channels", logits.shape(), std::move(out), {logits},
                                [B, C, HW](detail::Node<T>& self) {
                                  T* gx = detail::grad_of(self, 0);
                                  if (!gx) return;
                                  const auto& y = self.value;
                                  for (std::size_t b = 0; b < B; ++b)
                                    for (std::size_t i = 0; i < HW; ++i) {
                                      T dot = 0;
                                      for (std::size_t c = 0; c < C; ++c) {
                                        const std::size_t idx = (b * C + c) * HW + i;
                                        dot += self.grad[idx] * y[idx];
                                      }
                                      for (std::size_t c = 0; c < C; ++c) {
                                        const std::size_t idx = (b * C + c) * HW + i;
                                        gx[idx] += y[idx] * (self.grad[idx] - dot);
                                      }
                                    }
                                });
}

}  // namespace sauron
