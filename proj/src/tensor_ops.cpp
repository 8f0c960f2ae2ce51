#include "cmtnet/tensor_ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <type_traits>

namespace cmtnet::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using MapConstMat = Eigen::Map<const RowMat<T>>;

// accumulator wide enough for channel statistics
template <typename T>
using Acc = std::conditional_t<(sizeof(T) < sizeof(double)), double, T>;

template <typename T>
void im2col3x3(const T* x, int channels, int h, int w, T* col) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < channels; ++c) {
    const T* plane = x + static_cast<std::size_t>(c) * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* row = col + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * hw;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          T* out = row + static_cast<std::size_t>(y) * w;
          if (sy < 0 || sy >= h) {
            std::fill(out, out + w, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(sy) * w;
          for (int x0 = 0; x0 < w; ++x0) {
            const int sx = x0 + kx - 1;
            out[x0] = (sx < 0 || sx >= w) ? T(0) : src[sx];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im3x3(const T* col, int channels, int h, int w, T* x) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::fill(x, x + static_cast<std::size_t>(channels) * hw, T(0));
  for (int c = 0; c < channels; ++c) {
    T* plane = x + static_cast<std::size_t>(c) * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* row = col + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * hw;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          const T* in = row + static_cast<std::size_t>(y) * w;
          T* dst = plane + static_cast<std::size_t>(sy) * w;
          for (int x0 = 0; x0 < w; ++x0) {
            const int sx = x0 + kx - 1;
            if (sx >= 0 && sx < w) dst[sx] += in[x0];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
void conv3x3_forward(const Tensor<T>& x, std::span<const T> weight, std::span<const T> bias,
                     int out_channels, Tensor<T>& y) {
  const int k = x.c * 9;
  if (weight.size() != static_cast<std::size_t>(out_channels) * k) {
    throw std::invalid_argument("conv3x3_forward: weight size mismatch");
  }
  y = Tensor<T>(x.n, out_channels, x.h, x.w);
  const Eigen::Index hw = static_cast<Eigen::Index>(x.plane());
  std::vector<T> col(static_cast<std::size_t>(k) * hw);
  MapConstMat<T> wm(weight.data(), out_channels, k);
  MapConstMat<T> cm(col.data(), k, hw);
  for (int i = 0; i < x.n; ++i) {
    im2col3x3(x.sample(i), x.c, x.h, x.w, col.data());
    MapMat<T> ym(y.sample(i), out_channels, hw);
    ym.noalias() = wm * cm;
    if (!bias.empty()) {
      for (int o = 0; o < out_channels; ++o) ym.row(o).array() += bias[static_cast<std::size_t>(o)];
    }
  }
}

template <typename T>
void conv3x3_backward(const Tensor<T>& x, std::span<const T> weight, const Tensor<T>& dy,
                      std::span<T> dweight, std::span<T> dbias, Tensor<T>* dx) {
  const int k = x.c * 9;
  const int out_channels = dy.c;
  const Eigen::Index hw = static_cast<Eigen::Index>(x.plane());
  std::vector<T> col(static_cast<std::size_t>(k) * hw);
  std::vector<T> dcol(dx ? col.size() : 0);
  MapConstMat<T> wm(weight.data(), out_channels, k);
  MapMat<T> dwm(dweight.data(), out_channels, k);
  MapConstMat<T> cm(col.data(), k, hw);
  if (dx) *dx = Tensor<T>(x.n, x.c, x.h, x.w);
  for (int i = 0; i < x.n; ++i) {
    MapConstMat<T> dym(dy.sample(i), out_channels, hw);
    im2col3x3(x.sample(i), x.c, x.h, x.w, col.data());
    dwm.noalias() += dym * cm.transpose();
    if (!dbias.empty()) {
      // plain loop: Eigen's vectorized sum depends on buffer alignment
      for (int o = 0; o < out_channels; ++o) {
        const T* row = dy.sample(i) + static_cast<std::size_t>(o) * hw;
        T s = 0;
        for (Eigen::Index p = 0; p < hw; ++p) s += row[p];
        dbias[static_cast<std::size_t>(o)] += s;
      }
    }
    if (dx) {
      MapMat<T> dcm(dcol.data(), k, hw);
      dcm.noalias() = wm.transpose() * dym;
      col2im3x3(dcol.data(), x.c, x.h, x.w, dx->sample(i));
    }
  }
}

template <typename T>
void batchnorm_forward_train(const Tensor<T>& x, std::span<const T> gamma, std::span<const T> beta,
                             std::span<T> running_mean, std::span<T> running_var, T momentum, T eps,
                             Tensor<T>& y, BatchNormCache<T>& cache) {
  y = Tensor<T>(x.n, x.c, x.h, x.w);
  cache.xhat = Tensor<T>(x.n, x.c, x.h, x.w);
  cache.inv_std.assign(static_cast<std::size_t>(x.c), T(0));
  cache.batch_stats = true;
  const std::size_t hw = x.plane();
  const std::size_t m = hw * static_cast<std::size_t>(x.n);
  for (int ch = 0; ch < x.c; ++ch) {
    Acc<T> sum = 0;
    for (int i = 0; i < x.n; ++i) {
      const T* p = x.sample(i) + ch * hw;
      for (std::size_t j = 0; j < hw; ++j) sum += p[j];
    }
    const Acc<T> mean = sum / static_cast<Acc<T>>(m);
    Acc<T> sq = 0;
    for (int i = 0; i < x.n; ++i) {
      const T* p = x.sample(i) + ch * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        const Acc<T> d = p[j] - mean;
        sq += d * d;
      }
    }
    const Acc<T> var = sq / static_cast<Acc<T>>(m);
    const T inv_std = static_cast<T>(1 / std::sqrt(var + eps));
    cache.inv_std[static_cast<std::size_t>(ch)] = inv_std;
    const T g = gamma[static_cast<std::size_t>(ch)];
    const T b = beta[static_cast<std::size_t>(ch)];
    const T mean_t = static_cast<T>(mean);
    for (int i = 0; i < x.n; ++i) {
      const T* p = x.sample(i) + ch * hw;
      T* xh = cache.xhat.sample(i) + ch * hw;
      T* q = y.sample(i) + ch * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        xh[j] = (p[j] - mean_t) * inv_std;
        q[j] = g * xh[j] + b;
      }
    }
    const Acc<T> unbiased = m > 1 ? sq / static_cast<Acc<T>>(m - 1) : var;
    const auto c = static_cast<std::size_t>(ch);
    running_mean[c] = (1 - momentum) * running_mean[c] + momentum * static_cast<T>(mean);
    running_var[c] = (1 - momentum) * running_var[c] + momentum * static_cast<T>(unbiased);
  }
}

template <typename T>
void batchnorm_forward_eval(const Tensor<T>& x, std::span<const T> gamma, std::span<const T> beta,
                            std::span<const T> running_mean, std::span<const T> running_var, T eps,
                            Tensor<T>& y, BatchNormCache<T>* cache) {
  y = Tensor<T>(x.n, x.c, x.h, x.w);
  if (cache) {
    cache->xhat = Tensor<T>(x.n, x.c, x.h, x.w);
    cache->inv_std.assign(static_cast<std::size_t>(x.c), T(0));
    cache->batch_stats = false;
  }
  const std::size_t hw = x.plane();
  for (int ch = 0; ch < x.c; ++ch) {
    const auto c = static_cast<std::size_t>(ch);
    const T inv_std = T(1) / std::sqrt(running_var[c] + eps);
    if (cache) cache->inv_std[c] = inv_std;
    for (int i = 0; i < x.n; ++i) {
      const T* p = x.sample(i) + ch * hw;
      T* q = y.sample(i) + ch * hw;
      T* xh = cache ? cache->xhat.sample(i) + ch * hw : nullptr;
      for (std::size_t j = 0; j < hw; ++j) {
        const T v = (p[j] - running_mean[c]) * inv_std;
        if (xh) xh[j] = v;
        q[j] = gamma[c] * v + beta[c];
      }
    }
  }
}

template <typename T>
void batchnorm_backward(const BatchNormCache<T>& cache, std::span<const T> gamma, const Tensor<T>& dy,
                        std::span<T> dgamma, std::span<T> dbeta, Tensor<T>& dx) {
  const auto& xhat = cache.xhat;
  dx = Tensor<T>(dy.n, dy.c, dy.h, dy.w);
  const std::size_t hw = dy.plane();
  const std::size_t m = hw * static_cast<std::size_t>(dy.n);
  for (int ch = 0; ch < dy.c; ++ch) {
    const auto c = static_cast<std::size_t>(ch);
    Acc<T> sum_dy = 0;
    Acc<T> sum_dy_xhat = 0;
    for (int i = 0; i < dy.n; ++i) {
      const T* g = dy.sample(i) + ch * hw;
      const T* xh = xhat.sample(i) + ch * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        sum_dy += g[j];
        sum_dy_xhat += static_cast<Acc<T>>(g[j]) * xh[j];
      }
    }
    dgamma[c] += static_cast<T>(sum_dy_xhat);
    dbeta[c] += static_cast<T>(sum_dy);
    const T scale = gamma[c] * cache.inv_std[c];
    if (!cache.batch_stats) {
      for (int i = 0; i < dy.n; ++i) {
        const T* g = dy.sample(i) + ch * hw;
        T* d = dx.sample(i) + ch * hw;
        for (std::size_t j = 0; j < hw; ++j) d[j] = g[j] * scale;
      }
      continue;
    }
    const T mean_dy = static_cast<T>(sum_dy / static_cast<Acc<T>>(m));
    const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / static_cast<Acc<T>>(m));
    for (int i = 0; i < dy.n; ++i) {
      const T* g = dy.sample(i) + ch * hw;
      const T* xh = xhat.sample(i) + ch * hw;
      T* d = dx.sample(i) + ch * hw;
      for (std::size_t j = 0; j < hw; ++j) d[j] = scale * (g[j] - mean_dy - xh[j] * mean_dy_xhat);
    }
  }
}

template <typename T>
void relu_inplace(Tensor<T>& x) {
  for (auto& v : x.data) v = v > T(0) ? v : T(0);
}

template <typename T>
void relu_backward_inplace(const Tensor<T>& y, Tensor<T>& dy) {
  for (std::size_t i = 0; i < dy.data.size(); ++i) {
    if (!(y.data[i] > T(0))) dy.data[i] = T(0);
  }
}

template <typename T>
void maxpool2x2_forward(const Tensor<T>& x, Tensor<T>& y, std::vector<std::int32_t>& indices) {
  const int oh = (x.h + 1) / 2;
  const int ow = (x.w + 1) / 2;
  y = Tensor<T>(x.n, x.c, oh, ow);
  indices.assign(y.size(), 0);
  std::size_t out = 0;
  for (int i = 0; i < x.n; ++i) {
    for (int ch = 0; ch < x.c; ++ch) {
      const T* p = x.sample(i) + static_cast<std::size_t>(ch) * x.plane();
      for (int yy = 0; yy < oh; ++yy) {
        for (int xx = 0; xx < ow; ++xx, ++out) {
          int best = (2 * yy) * x.w + 2 * xx;
          T best_v = p[best];
          for (int dy = 0; dy < 2; ++dy) {
            const int sy = 2 * yy + dy;
            if (sy >= x.h) continue;
            for (int dx = 0; dx < 2; ++dx) {
              const int sx = 2 * xx + dx;
              if (sx >= x.w) continue;
              const int idx = sy * x.w + sx;
              if (p[idx] > best_v) {
                best_v = p[idx];
                best = idx;
              }
            }
          }
          y.data[out] = best_v;
          indices[out] = best;
        }
      }
    }
  }
}

template <typename T>
void maxpool2x2_backward(const Tensor<T>& dy, const std::vector<std::int32_t>& indices, int in_h,
                         int in_w, Tensor<T>& dx) {
  dx = Tensor<T>(dy.n, dy.c, in_h, in_w);
  const std::size_t out_plane = dy.plane();
  const std::size_t in_plane = dx.plane();
  for (std::size_t p = 0; p < static_cast<std::size_t>(dy.n) * dy.c; ++p) {
    for (std::size_t j = 0; j < out_plane; ++j) {
      const std::size_t o = p * out_plane + j;
      dx.data[p * in_plane + static_cast<std::size_t>(indices[o])] += dy.data[o];
    }
  }
}

template <typename T>
void unpool2x2_forward(const Tensor<T>& x, const std::vector<std::int32_t>& indices, int out_h,
                       int out_w, Tensor<T>& y) {
  if (indices.size() != x.size()) throw std::invalid_argument("unpool: index count mismatch");
  y = Tensor<T>(x.n, x.c, out_h, out_w);
  const std::size_t in_plane = x.plane();
  const std::size_t out_plane = y.plane();
  for (std::size_t p = 0; p < static_cast<std::size_t>(x.n) * x.c; ++p) {
    for (std::size_t j = 0; j < in_plane; ++j) {
      const std::size_t i = p * in_plane + j;
      y.data[p * out_plane + static_cast<std::size_t>(indices[i])] = x.data[i];
    }
  }
}

template <typename T>
void unpool2x2_backward(const Tensor<T>& dy, const std::vector<std::int32_t>& indices, Tensor<T>& dx) {
  const std::size_t in_plane = dx.plane();
  const std::size_t out_plane = dy.plane();
  for (std::size_t p = 0; p < static_cast<std::size_t>(dx.n) * dx.c; ++p) {
    for (std::size_t j = 0; j < in_plane; ++j) {
      const std::size_t i = p * in_plane + j;
      dx.data[i] = dy.data[p * out_plane + static_cast<std::size_t>(indices[i])];
    }
  }
}

template <typename T>
void global_avg_pool(const Tensor<T>& x, std::vector<T>& out) {
  out.assign(static_cast<std::size_t>(x.n) * x.c, T(0));
  const std::size_t hw = x.plane();
  for (std::size_t p = 0; p < out.size(); ++p) {
    Acc<T> s = 0;
    for (std::size_t j = 0; j < hw; ++j) s += x.data[p * hw + j];
    out[p] = static_cast<T>(s / static_cast<Acc<T>>(hw));
  }
}

template <typename T>
void global_avg_pool_backward(const std::vector<T>& dout, Tensor<T>& dx) {
  const std::size_t hw = dx.plane();
  const T inv = T(1) / static_cast<T>(hw);
  for (std::size_t p = 0; p < dout.size(); ++p) {
    std::fill(dx.data.begin() + static_cast<std::ptrdiff_t>(p * hw),
              dx.data.begin() + static_cast<std::ptrdiff_t>((p + 1) * hw), dout[p] * inv);
  }
}

template <typename T>
void linear_forward(std::span<const T> x, int n, int in, std::span<const T> weight,
                    std::span<const T> bias, int out, std::vector<T>& y) {
  y.assign(static_cast<std::size_t>(n) * out, T(0));
  MapConstMat<T> xm(x.data(), n, in);
  MapConstMat<T> wm(weight.data(), out, in);
  MapMat<T> ym(y.data(), n, out);
  ym.noalias() = xm * wm.transpose();
  for (int i = 0; i < n; ++i) {
    for (int o = 0; o < out; ++o) ym(i, o) += bias[static_cast<std::size_t>(o)];
  }
}

template <typename T>
void linear_backward(std::span<const T> x, int n, int in, std::span<const T> weight, int out,
                     std::span<const T> dy, std::span<T> dweight, std::span<T> dbias,
                     std::vector<T>* dx) {
  MapConstMat<T> xm(x.data(), n, in);
  MapConstMat<T> wm(weight.data(), out, in);
  MapConstMat<T> dym(dy.data(), n, out);
  MapMat<T> dwm(dweight.data(), out, in);
  dwm.noalias() += dym.transpose() * xm;
  for (int o = 0; o < out; ++o) {
    T s = 0;
    for (int i = 0; i < n; ++i) s += dym(i, o);
    dbias[static_cast<std::size_t>(o)] += s;
  }
  if (dx) {
    dx->assign(static_cast<std::size_t>(n) * in, T(0));
    MapMat<T> dxm(dx->data(), n, in);
    dxm.noalias() = dym * wm;
  }
}

#define CMTNET_INSTANTIATE_OPS(T)                                                                   \
  template void conv3x3_forward<T>(const Tensor<T>&, std::span<const T>, std::span<const T>, int,   \
                                   Tensor<T>&);                                                     \
  template void conv3x3_backward<T>(const Tensor<T>&, std::span<const T>, const Tensor<T>&,         \
                                    std::span<T>, std::span<T>, Tensor<T>*);                        \
  template void batchnorm_forward_train<T>(const Tensor<T>&, std::span<const T>, std::span<const T>, \
                                           std::span<T>, std::span<T>, T, T, Tensor<T>&,            \
                                           BatchNormCache<T>&);                                     \
  template void batchnorm_forward_eval<T>(const Tensor<T>&, std::span<const T>, std::span<const T>, \
                                          std::span<const T>, std::span<const T>, T, Tensor<T>&,    \
                                          BatchNormCache<T>*);                                      \
  template void batchnorm_backward<T>(const BatchNormCache<T>&, std::span<const T>,                 \
                                      const Tensor<T>&, std::span<T>, std::span<T>, Tensor<T>&);    \
  template void relu_inplace<T>(Tensor<T>&);                                                        \
  template void relu_backward_inplace<T>(const Tensor<T>&, Tensor<T>&);                             \
  template void maxpool2x2_forward<T>(const Tensor<T>&, Tensor<T>&, std::vector<std::int32_t>&);    \
  template void maxpool2x2_backward<T>(const Tensor<T>&, const std::vector<std::int32_t>&, int, int, \
                                       Tensor<T>&);                                                 \
  template void unpool2x2_forward<T>(const Tensor<T>&, const std::vector<std::int32_t>&, int, int,  \
                                     Tensor<T>&);                                                   \
  template void unpool2x2_backward<T>(const Tensor<T>&, const std::vector<std::int32_t>&,           \
                                      Tensor<T>&);                                                  \
  template void global_avg_pool<T>(const Tensor<T>&, std::vector<T>&);                              \
  template void global_avg_pool_backward<T>(const std::vector<T>&, Tensor<T>&);                     \
  template void linear_forward<T>(std::span<const T>, int, int, std::span<const T>,                 \
                                  std::span<const T>, int, std::vector<T>&);                        \
  template void linear_backward<T>(std::span<const T>, int, int, std::span<const T>, int,           \
                                   std::span<const T>, std::span<T>, std::span<T>, std::vector<T>*);

CMTNET_INSTANTIATE_OPS(float)
CMTNET_INSTANTIATE_OPS(double)
CMTNET_INSTANTIATE_OPS(long double)

#undef CMTNET_INSTANTIATE_OPS

}  // namespace cmtnet::ops
