#include "cracknet/layers.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace cracknet {

int64_t conv_out_size(int64_t in, int64_t k, int64_t stride, int64_t padding) {
  return (in + 2 * padding - k) / stride + 1;
}

Conv2d Conv2d::make(int64_t c_in, int64_t c_out, int64_t k, int64_t stride,
                    int64_t padding, Rng& rng) {
  Conv2d layer;
  const double stddev = std::sqrt(2.0 / static_cast<double>(c_in * k * k));
  layer.weight = randn({c_out, c_in, k, k}, rng, stddev, true);
  layer.bias = Tensor::zeros({c_out}, true);
  layer.stride = stride;
  layer.padding = padding;
  return layer;
}

namespace {

// Expands x[C,H,W] into col[C*k*k, rows*Wo] for output rows [oh0, oh1).
// Inner spans are copied contiguously where the kernel tap stays in bounds.
void im2col(const double* x, int64_t C, int64_t H, int64_t W, int64_t k,
            int64_t stride, int64_t pad, int64_t oh0, int64_t oh1, int64_t Wo,
            double* col) {
  const int64_t rows = oh1 - oh0;
  for (int64_t c = 0; c < C; ++c) {
    const double* plane = x + c * H * W;
    for (int64_t ki = 0; ki < k; ++ki) {
      for (int64_t kj = 0; kj < k; ++kj) {
        double* dst = col + ((c * k + ki) * k + kj) * rows * Wo;
        // Valid ow range for this kernel tap: 0 <= ow*stride - pad + kj < W.
        int64_t lo = pad - kj;
        int64_t ow_lo = lo > 0 ? (lo + stride - 1) / stride : 0;
        int64_t hi = W - 1 - kj + pad;
        int64_t ow_hi = hi >= 0 ? std::min(Wo - 1, hi / stride) : -1;
        for (int64_t oh = oh0; oh < oh1; ++oh) {
          double* row = dst + (oh - oh0) * Wo;
          const int64_t ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H || ow_hi < ow_lo) {
            std::memset(row, 0, sizeof(double) * static_cast<size_t>(Wo));
            continue;
          }
          if (ow_lo > 0) std::memset(row, 0, sizeof(double) * static_cast<size_t>(ow_lo));
          const double* src = plane + ih * W + (ow_lo * stride - pad + kj);
          if (stride == 1) {
            std::memcpy(row + ow_lo, src, sizeof(double) * static_cast<size_t>(ow_hi - ow_lo + 1));
          } else {
            for (int64_t ow = ow_lo; ow <= ow_hi; ++ow) row[ow] = src[(ow - ow_lo) * stride];
          }
          if (ow_hi + 1 < Wo) {
            std::memset(row + ow_hi + 1, 0, sizeof(double) * static_cast<size_t>(Wo - ow_hi - 1));
          }
        }
      }
    }
  }
}

// Transpose of im2col: scatter-adds col gradients back into dx[C,H,W].
void col2im_add(const double* col, int64_t C, int64_t H, int64_t W, int64_t k,
                int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, double* dx) {
  for (int64_t c = 0; c < C; ++c) {
    double* plane = dx + c * H * W;
    for (int64_t ki = 0; ki < k; ++ki) {
      for (int64_t kj = 0; kj < k; ++kj) {
        const double* src = col + ((c * k + ki) * k + kj) * Ho * Wo;
        for (int64_t oh = 0; oh < Ho; ++oh) {
          const int64_t ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) continue;
          const double* row = src + oh * Wo;
          for (int64_t ow = 0; ow < Wo; ++ow) {
            const int64_t iw = ow * stride - pad + kj;
            if (iw < 0 || iw >= W) continue;
            plane[ih * W + iw] += row[ow];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Conv2d& layer) {
  const Shape& xs = x.shape();
  if (xs.size() != 4) throw DimensionError("conv2d expects [B,C,H,W], got " + shape_str(xs));
  const int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const int64_t Cout = layer.out_channels();
  const int64_t k = layer.kernel();
  const int64_t s = layer.stride;
  const int64_t p = layer.padding;
  if (C != layer.in_channels()) {
    throw DimensionError("conv2d channel mismatch: input has " + std::to_string(C) +
                         ", layer expects " + std::to_string(layer.in_channels()));
  }
  const int64_t Ho = conv_out_size(H, k, s, p);
  const int64_t Wo = conv_out_size(W, k, s, p);
  if (Ho <= 0 || Wo <= 0) {
    throw DimensionError("conv2d input " + shape_str(xs) + " too small for kernel " +
                         std::to_string(k));
  }

  const int64_t ckk = C * k * k;
  const bool rg = Tape::active().enabled() &&
                  (x.requires_grad() || layer.weight.requires_grad() ||
                   layer.bias.requires_grad());

  std::vector<double> out(static_cast<size_t>(B * Cout * Ho * Wo));
  const double* px = x.data().data();
  const double* pw = layer.weight.data().data();
  const double* pb = layer.bias.data().data();

  // When recording, the full col buffer is kept for the backward pass.
  // Otherwise output rows are processed in strips to bound the buffer.
  auto cols = rg ? std::make_shared<std::vector<double>>(
                       static_cast<size_t>(B * ckk * Ho * Wo))
                 : nullptr;
  const int64_t strip_budget = 8 * 1024 * 1024;  // doubles; 64 MB per strip
  const int64_t strip_rows =
      rg ? Ho : std::max<int64_t>(1, strip_budget / std::max<int64_t>(1, ckk * Wo));

  std::vector<double> strip_buf;
  if (!rg) strip_buf.resize(static_cast<size_t>(ckk * std::min(strip_rows, Ho) * Wo));

  std::vector<double> strip_out;
  if (!rg) strip_out.resize(static_cast<size_t>(Cout * std::min(strip_rows, Ho) * Wo));

  for (int64_t b = 0; b < B; ++b) {
    const double* xb = px + b * C * H * W;
    double* ob = out.data() + b * Cout * Ho * Wo;
    if (rg) {
      double* col = cols->data() + b * ckk * Ho * Wo;
      im2col(xb, C, H, W, k, s, p, 0, Ho, Wo, col);
      detail::gemm(detail::GemmKind::nn, Cout, Ho * Wo, ckk, pw, col, ob, false);
    } else {
      for (int64_t oh0 = 0; oh0 < Ho; oh0 += strip_rows) {
        const int64_t oh1 = std::min(Ho, oh0 + strip_rows);
        const int64_t cols_n = (oh1 - oh0) * Wo;
        im2col(xb, C, H, W, k, s, p, oh0, oh1, Wo, strip_buf.data());
        detail::gemm(detail::GemmKind::nn, Cout, cols_n, ckk, pw, strip_buf.data(),
                     strip_out.data(), false);
        for (int64_t co = 0; co < Cout; ++co) {
          std::memcpy(ob + co * Ho * Wo + oh0 * Wo, strip_out.data() + co * cols_n,
                      sizeof(double) * static_cast<size_t>(cols_n));
        }
      }
    }
    for (int64_t co = 0; co < Cout; ++co) {
      const double bias = pb[co];
      double* row = ob + co * Ho * Wo;
      for (int64_t i = 0; i < Ho * Wo; ++i) row[i] += bias;
    }
  }

  Tensor res({B, Cout, Ho, Wo}, std::move(out), rg);
  if (rg) {
    auto xi = x.impl();
    auto wi = layer.weight.impl();
    auto bi = layer.bias.impl();
    auto oi = res.impl();
    Tape::active().record(oi, [xi, wi, bi, oi, cols, B, C, H, W, Cout, Ho, Wo, k, s, p, ckk]() {
      const double* g = oi->grad.data();
      const double* pw = wi->data.data();
      if (bi->requires_grad) {
        if (bi->grad.empty()) bi->grad.assign(bi->data.size(), 0.0);
        double* db = bi->grad.data();
        for (int64_t b = 0; b < B; ++b) {
          for (int64_t co = 0; co < Cout; ++co) {
            const double* row = g + (b * Cout + co) * Ho * Wo;
            double acc = 0.0;
            for (int64_t i = 0; i < Ho * Wo; ++i) acc += row[i];
            db[co] += acc;
          }
        }
      }
      if (wi->requires_grad) {
        if (wi->grad.empty()) wi->grad.assign(wi->data.size(), 0.0);
        for (int64_t b = 0; b < B; ++b) {
          detail::gemm(detail::GemmKind::nt, Cout, ckk, Ho * Wo,
                       g + b * Cout * Ho * Wo, cols->data() + b * ckk * Ho * Wo,
                       wi->grad.data(), true);
        }
      }
      if (xi->requires_grad) {
        if (xi->grad.empty()) xi->grad.assign(xi->data.size(), 0.0);
        std::vector<double> dcol(static_cast<size_t>(ckk * Ho * Wo));
        for (int64_t b = 0; b < B; ++b) {
          detail::gemm(detail::GemmKind::tn, ckk, Ho * Wo, Cout, pw,
                       g + b * Cout * Ho * Wo, dcol.data(), false);
          col2im_add(dcol.data(), C, H, W, k, s, p, Ho, Wo,
                     xi->grad.data() + b * C * H * W);
        }
      }
    });
  }
  return res;
}

BatchNorm2d BatchNorm2d::make(int64_t channels) {
  BatchNorm2d layer;
  layer.gamma = Tensor::full({channels}, 1.0, true);
  layer.beta = Tensor::zeros({channels}, true);
  layer.running_mean.assign(static_cast<size_t>(channels), 0.0);
  layer.running_var.assign(static_cast<size_t>(channels), 1.0);
  return layer;
}

Tensor batchnorm2d(const Tensor& x, BatchNorm2d& layer, Mode mode) {
  const Shape& xs = x.shape();
  if (xs.size() != 4) throw DimensionError("batchnorm2d expects [B,C,H,W], got " + shape_str(xs));
  const int64_t C = xs[1];
  if (C != layer.channels()) {
    throw DimensionError("batchnorm2d channel mismatch: input has " + std::to_string(C) +
                         ", layer expects " + std::to_string(layer.channels()));
  }
  const Shape cshape{1, C, 1, 1};
  Tensor gamma = reshape(layer.gamma, cshape);
  Tensor beta = reshape(layer.beta, cshape);

  if (mode == Mode::train) {
    const int64_t n = xs[0] * xs[2] * xs[3];
    if (n < 2) {
      throw NumericError("batchnorm2d train mode with a single value per channel: "
                         "degenerate statistics");
    }
    Tensor mu = reduce_mean(x, {0, 2, 3}, true);
    Tensor xc = sub(x, mu);
    Tensor var = reduce_mean(mul(xc, xc), {0, 2, 3}, true);
    Tensor xn = div(xc, sqrt(add(var, layer.eps)));

    // Running blend uses the unbiased variance, matching the common
    // framework convention.
    const double m = layer.momentum;
    const double unbias = static_cast<double>(n) / static_cast<double>(n - 1);
    const double* mu_d = mu.data().data();
    const double* var_d = var.data().data();
    for (int64_t c = 0; c < C; ++c) {
      layer.running_mean[static_cast<size_t>(c)] =
          (1.0 - m) * layer.running_mean[static_cast<size_t>(c)] + m * mu_d[c];
      layer.running_var[static_cast<size_t>(c)] =
          (1.0 - m) * layer.running_var[static_cast<size_t>(c)] + m * var_d[c] * unbias;
    }
    return add(mul(xn, gamma), beta);
  }

  Tensor rm(cshape, layer.running_mean);
  Tensor rv(cshape, layer.running_var);
  Tensor xn = div(sub(x, rm), sqrt(add(rv, layer.eps)));
  return add(mul(xn, gamma), beta);
}

Dense Dense::make(int64_t in, int64_t out, bool with_bias, Rng& rng) {
  Dense layer;
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  layer.weight = rand_uniform({in, out}, rng, -bound, bound, true);
  if (with_bias) layer.bias = rand_uniform({out}, rng, -bound, bound, true);
  return layer;
}

Tensor dense(const Tensor& x, const Dense& layer) {
  const Shape& xs = x.shape();
  if (xs.back() != layer.in_features()) {
    throw DimensionError("dense feature mismatch: input " + shape_str(xs) +
                         ", layer expects " + std::to_string(layer.in_features()));
  }
  Tensor y = matmul(x, layer.weight);
  if (layer.bias.defined()) y = add(y, layer.bias);
  return y;
}

Tensor maxpool2d(const Tensor& x, int64_t k, int64_t stride, int64_t padding) {
  const Shape& xs = x.shape();
  if (xs.size() != 4) throw DimensionError("maxpool2d expects [B,C,H,W], got " + shape_str(xs));
  const int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const int64_t Ho = conv_out_size(H, k, stride, padding);
  const int64_t Wo = conv_out_size(W, k, stride, padding);
  if (Ho <= 0 || Wo <= 0) throw DimensionError("maxpool2d input too small");

  std::vector<double> out(static_cast<size_t>(B * C * Ho * Wo));
  auto argmax = std::make_shared<std::vector<int64_t>>(out.size());
  const double* px = x.data().data();
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const double* plane = px + bc * H * W;
    double* oplane = out.data() + bc * Ho * Wo;
    int64_t* aplane = argmax->data() + bc * Ho * Wo;
    for (int64_t oh = 0; oh < Ho; ++oh) {
      for (int64_t ow = 0; ow < Wo; ++ow) {
        double best = -std::numeric_limits<double>::infinity();
        int64_t best_idx = -1;
        for (int64_t ki = 0; ki < k; ++ki) {
          const int64_t ih = oh * stride - padding + ki;
          if (ih < 0 || ih >= H) continue;
          for (int64_t kj = 0; kj < k; ++kj) {
            const int64_t iw = ow * stride - padding + kj;
            if (iw < 0 || iw >= W) continue;
            const double v = plane[ih * W + iw];
            if (v > best) {
              best = v;
              best_idx = ih * W + iw;
            }
          }
        }
        oplane[oh * Wo + ow] = best;
        aplane[oh * Wo + ow] = bc * H * W + best_idx;
      }
    }
  }

  bool rg = Tape::active().enabled() && x.requires_grad();
  Tensor res({B, C, Ho, Wo}, std::move(out), rg);
  if (rg) {
    auto xi = x.impl(), oi = res.impl();
    Tape::active().record(oi, [xi, oi, argmax]() {
      const double* g = oi->grad.data();
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), 0.0);
      double* dx = xi->grad.data();
      for (size_t i = 0; i < argmax->size(); ++i) dx[(*argmax)[i]] += g[i];
    });
  }
  return res;
}

namespace {

struct LerpAxis {
  std::vector<int64_t> i0, i1;
  std::vector<double> w1;  // weight on i1; weight on i0 is 1-w1
};

// Half-pixel source coordinates for a 2x upsample, clamped to the edge.
LerpAxis bilinear_axis(int64_t in, int64_t out) {
  LerpAxis ax;
  ax.i0.resize(static_cast<size_t>(out));
  ax.i1.resize(static_cast<size_t>(out));
  ax.w1.resize(static_cast<size_t>(out));
  for (int64_t o = 0; o < out; ++o) {
    const double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    double f = std::floor(src);
    double t = src - f;
    int64_t lo = static_cast<int64_t>(f);
    int64_t hi = lo + 1;
    lo = std::clamp<int64_t>(lo, 0, in - 1);
    hi = std::clamp<int64_t>(hi, 0, in - 1);
    ax.i0[static_cast<size_t>(o)] = lo;
    ax.i1[static_cast<size_t>(o)] = hi;
    ax.w1[static_cast<size_t>(o)] = t;
  }
  return ax;
}

}  // namespace

Tensor upsample2x(const Tensor& x, UpsampleMode mode) {
  const Shape& xs = x.shape();
  if (xs.size() != 4) throw DimensionError("upsample2x expects [B,C,H,W], got " + shape_str(xs));
  const int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const int64_t Ho = 2 * H, Wo = 2 * W;
  std::vector<double> out(static_cast<size_t>(B * C * Ho * Wo));
  const double* px = x.data().data();

  if (mode == UpsampleMode::nearest) {
    for (int64_t bc = 0; bc < B * C; ++bc) {
      const double* plane = px + bc * H * W;
      double* oplane = out.data() + bc * Ho * Wo;
      for (int64_t oh = 0; oh < Ho; ++oh) {
        const double* srow = plane + (oh / 2) * W;
        double* drow = oplane + oh * Wo;
        for (int64_t ow = 0; ow < Wo; ++ow) drow[ow] = srow[ow / 2];
      }
    }
  } else {
    const LerpAxis ay = bilinear_axis(H, Ho);
    const LerpAxis axx = bilinear_axis(W, Wo);
    for (int64_t bc = 0; bc < B * C; ++bc) {
      const double* plane = px + bc * H * W;
      double* oplane = out.data() + bc * Ho * Wo;
      for (int64_t oh = 0; oh < Ho; ++oh) {
        const double* r0 = plane + ay.i0[static_cast<size_t>(oh)] * W;
        const double* r1 = plane + ay.i1[static_cast<size_t>(oh)] * W;
        const double ty = ay.w1[static_cast<size_t>(oh)];
        double* drow = oplane + oh * Wo;
        for (int64_t ow = 0; ow < Wo; ++ow) {
          const int64_t c0 = axx.i0[static_cast<size_t>(ow)];
          const int64_t c1 = axx.i1[static_cast<size_t>(ow)];
          const double tx = axx.w1[static_cast<size_t>(ow)];
          const double top = r0[c0] * (1.0 - tx) + r0[c1] * tx;
          const double bot = r1[c0] * (1.0 - tx) + r1[c1] * tx;
          drow[ow] = top * (1.0 - ty) + bot * ty;
        }
      }
    }
  }

  bool rg = Tape::active().enabled() && x.requires_grad();
  Tensor res({B, C, Ho, Wo}, std::move(out), rg);
  if (rg) {
    auto xi = x.impl(), oi = res.impl();
    Tape::active().record(oi, [xi, oi, B, C, H, W, Ho, Wo, mode]() {
      const double* g = oi->grad.data();
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), 0.0);
      double* dx = xi->grad.data();
      if (mode == UpsampleMode::nearest) {
        for (int64_t bc = 0; bc < B * C; ++bc) {
          const double* gplane = g + bc * Ho * Wo;
          double* dplane = dx + bc * H * W;
          for (int64_t oh = 0; oh < Ho; ++oh) {
            const double* grow = gplane + oh * Wo;
            double* drow = dplane + (oh / 2) * W;
            for (int64_t ow = 0; ow < Wo; ++ow) drow[ow / 2] += grow[ow];
          }
        }
      } else {
        const LerpAxis ay = bilinear_axis(H, Ho);
        const LerpAxis axx = bilinear_axis(W, Wo);
        for (int64_t bc = 0; bc < B * C; ++bc) {
          const double* gplane = g + bc * Ho * Wo;
          double* dplane = dx + bc * H * W;
          for (int64_t oh = 0; oh < Ho; ++oh) {
            const int64_t y0 = ay.i0[static_cast<size_t>(oh)];
            const int64_t y1 = ay.i1[static_cast<size_t>(oh)];
            const double ty = ay.w1[static_cast<size_t>(oh)];
            const double* grow = gplane + oh * Wo;
            for (int64_t ow = 0; ow < Wo; ++ow) {
              const int64_t c0 = axx.i0[static_cast<size_t>(ow)];
              const int64_t c1 = axx.i1[static_cast<size_t>(ow)];
              const double tx = axx.w1[static_cast<size_t>(ow)];
              const double gv = grow[ow];
              dplane[y0 * W + c0] += gv * (1.0 - ty) * (1.0 - tx);
              dplane[y0 * W + c1] += gv * (1.0 - ty) * tx;
              dplane[y1 * W + c0] += gv * ty * (1.0 - tx);
              dplane[y1 * W + c1] += gv * ty * tx;
            }
          }
        }
      }
    });
  }
  return res;
}

}  // namespace cracknet
