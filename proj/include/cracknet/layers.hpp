#pragma once

#include "cracknet/common.hpp"
#include "cracknet/tensor.hpp"

namespace cracknet {

enum class Mode { train, eval };

int64_t conv_out_size(int64_t in, int64_t k, int64_t stride, int64_t padding);

// 2-D convolution with zero padding. Weight layout [C_out, C_in, k, k].
struct Conv2d {
  Tensor weight;
  Tensor bias;
  int64_t stride = 1;
  int64_t padding = 0;

  // Kaiming fan-in init for the kernel, zero bias.
  static Conv2d make(int64_t c_in, int64_t c_out, int64_t k, int64_t stride,
                     int64_t padding, Rng& rng);

  int64_t out_channels() const { return weight.shape()[0]; }
  int64_t in_channels() const { return weight.shape()[1]; }
  int64_t kernel() const { return weight.shape()[2]; }
  int64_t param_count() const {
    return out_channels() * (in_channels() * kernel() * kernel() + 1);
  }
};

Tensor conv2d(const Tensor& x, const Conv2d& layer);

struct BatchNorm2d {
  Tensor gamma;
  Tensor beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  static BatchNorm2d make(int64_t channels);
  int64_t channels() const { return gamma.numel(); }
};

// Train mode normalizes with batch statistics and updates the running
// buffers (unbiased variance in the blend); eval mode uses the buffers.
Tensor batchnorm2d(const Tensor& x, BatchNorm2d& layer, Mode mode);

// Fully connected projection, weight [in, out]; input rank 2 or 3 with the
// projection applied to the trailing axis.
struct Dense {
  Tensor weight;
  Tensor bias;  // undefined handle when constructed without bias

  static Dense make(int64_t in, int64_t out, bool with_bias, Rng& rng);

  int64_t in_features() const { return weight.shape()[0]; }
  int64_t out_features() const { return weight.shape()[1]; }
  int64_t param_count() const {
    return weight.numel() + (bias.defined() ? bias.numel() : 0);
  }
};

Tensor dense(const Tensor& x, const Dense& layer);

// Window max; padding cells are ignored rather than treated as zeros, and
// ties route the gradient to the first occurrence in scan order.
Tensor maxpool2d(const Tensor& x, int64_t k = 3, int64_t stride = 2,
                 int64_t padding = 1);

enum class UpsampleMode { nearest, bilinear };

// Doubles both spatial dims. Bilinear uses half-pixel (align_corners=false)
// source coordinates with clamp-to-edge sampling.
Tensor upsample2x(const Tensor& x, UpsampleMode mode);

}  // namespace cracknet
