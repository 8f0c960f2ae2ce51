#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cmtnet/tensor.hpp"

// Layer kernels with hand-written backward passes. Backward functions
// accumulate (+=) into parameter gradients and overwrite input gradients.
namespace cmtnet::ops {

/// 3x3 convolution, stride 1, zero padding 1. weight is (out, in, 3, 3).
template <typename T>
void conv3x3_forward(const Tensor<T>& x, std::span<const T> weight, std::span<const T> bias,
                     int out_channels, Tensor<T>& y);

/// `dx` may be null when the input gradient is not needed.
template <typename T>
void conv3x3_backward(const Tensor<T>& x, std::span<const T> weight, const Tensor<T>& dy,
                      std::span<T> dweight, std::span<T> dbias, Tensor<T>* dx);

template <typename T>
struct BatchNormCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;
  bool batch_stats = true;
};

/// Training-mode batch norm over (N, H, W) per channel. Updates running
/// statistics with `momentum` (unbiased variance, as in PyTorch).
template <typename T>
void batchnorm_forward_train(const Tensor<T>& x, std::span<const T> gamma, std::span<const T> beta,
                             std::span<T> running_mean, std::span<T> running_var, T momentum,
                             T eps, Tensor<T>& y, BatchNormCache<T>& cache);

/// Batch norm with fixed running statistics. Cache may be null.
template <typename T>
void batchnorm_forward_eval(const Tensor<T>& x, std::span<const T> gamma, std::span<const T> beta,
                            std::span<const T> running_mean, std::span<const T> running_var, T eps,
                            Tensor<T>& y, BatchNormCache<T>* cache);

template <typename T>
void batchnorm_backward(const BatchNormCache<T>& cache, std::span<const T> gamma, const Tensor<T>& dy,
                        std::span<T> dgamma, std::span<T> dbeta, Tensor<T>& dx);

template <typename T>
void relu_inplace(Tensor<T>& x);

/// Zeroes dy where the ReLU output y was not positive.
template <typename T>
void relu_backward_inplace(const Tensor<T>& y, Tensor<T>& dy);

/// 2x2 max pool, stride 2, ceil mode (partial windows at odd borders).
/// indices hold the argmax position within each input plane.
template <typename T>
void maxpool2x2_forward(const Tensor<T>& x, Tensor<T>& y, std::vector<std::int32_t>& indices);

template <typename T>
void maxpool2x2_backward(const Tensor<T>& dy, const std::vector<std::int32_t>& indices, int in_h,
                         int in_w, Tensor<T>& dx);

/// Places each value at its recorded argmax position in an (in_h, in_w) plane.
template <typename T>
void unpool2x2_forward(const Tensor<T>& x, const std::vector<std::int32_t>& indices, int out_h,
                       int out_w, Tensor<T>& y);

/// `dx` must already have the shape of the unpooled input.
template <typename T>
void unpool2x2_backward(const Tensor<T>& dy, const std::vector<std::int32_t>& indices, Tensor<T>& dx);

/// Global average pool to (n, c). Output stored row-major n x c.
template <typename T>
void global_avg_pool(const Tensor<T>& x, std::vector<T>& out);

template <typename T>
void global_avg_pool_backward(const std::vector<T>& dout, Tensor<T>& dx);

/// y (n x out) = x (n x in) * W^T + b, W is (out, in).
template <typename T>
void linear_forward(std::span<const T> x, int n, int in, std::span<const T> weight,
                    std::span<const T> bias, int out, std::vector<T>& y);

template <typename T>
void linear_backward(std::span<const T> x, int n, int in, std::span<const T> weight, int out,
                     std::span<const T> dy, std::span<T> dweight, std::span<T> dbias,
                     std::vector<T>* dx);

}  // namespace cmtnet::ops
