#include "sparling/layers.hpp"

#include <Eigen/Core>
#ifdef __AVX512F__
#include <immintrin.h>
#endif
#include <algorithm>
#include <cmath>
#include <memory>

namespace sparling::ops {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

void accumulate(Tensor& dst, const Tensor& src) {
  float* __restrict d = dst.raw();
  const float* __restrict s = src.raw();
  const std::size_t n = dst.size();
  for (std::size_t i = 0; i < n; ++i) d[i] += s[i];
}

struct ConvGeometry {
  int batch, height, width, in_ch, kh, kw, out_ch;
  long rows() const { return static_cast<long>(batch) * height * width; }
  long cols() const { return static_cast<long>(kh) * kw * in_ch; }
};

void im2col(const float* in, const ConvGeometry& c, float* cols) {
  const int ph = c.kh / 2, pw = c.kw / 2;
  const long ncols = c.cols();
  for (int b = 0; b < c.batch; ++b) {
    for (int y = 0; y < c.height; ++y) {
      for (int x = 0; x < c.width; ++x) {
        float* row = cols + ((static_cast<long>(b) * c.height + y) * c.width + x) * ncols;
        for (int ky = 0; ky < c.kh; ++ky) {
          const int iy = y + ky - ph;
          for (int kx = 0; kx < c.kw; ++kx) {
            const int ix = x + kx - pw;
            float* dst = row + (ky * c.kw + kx) * c.in_ch;
            if (iy < 0 || iy >= c.height || ix < 0 || ix >= c.width) {
              std::fill(dst, dst + c.in_ch, 0.0f);
            } else {
              const float* src = in + ((static_cast<long>(b) * c.height + iy) * c.width + ix) * c.in_ch;
              std::copy(src, src + c.in_ch, dst);
            }
          }
        }
      }
    }
  }
}

void col2im_add(const float* cols, const ConvGeometry& c, float* out) {
  const int ph = c.kh / 2, pw = c.kw / 2;
  const long ncols = c.cols();
  for (int b = 0; b < c.batch; ++b) {
    for (int y = 0; y < c.height; ++y) {
      for (int x = 0; x < c.width; ++x) {
        const float* row = cols + ((static_cast<long>(b) * c.height + y) * c.width + x) * ncols;
        for (int ky = 0; ky < c.kh; ++ky) {
          const int iy = y + ky - ph;
          if (iy < 0 || iy >= c.height) continue;
          for (int kx = 0; kx < c.kw; ++kx) {
            const int ix = x + kx - pw;
            if (ix < 0 || ix >= c.width) continue;
            const float* src = row + (ky * c.kw + kx) * c.in_ch;
            float* dst = out + ((static_cast<long>(b) * c.height + iy) * c.width + ix) * c.in_ch;
            for (int ci = 0; ci < c.in_ch; ++ci) dst[ci] += src[ci];
          }
        }
      }
    }
  }
}

// Per-channel Σ(x - center) or Σ(x - center)² over n rows of channels-last
// data, float partials folded into double every block of rows.
void channel_sums(const float* x, const float* center, std::size_t n, int channels, std::vector<double>& out) {
  constexpr std::size_t kBlock = 256;
  std::vector<float> part(channels);
  for (std::size_t r0 = 0; r0 < n; r0 += kBlock) {
    std::fill(part.begin(), part.end(), 0.0f);
    const std::size_t r1 = std::min(n, r0 + kBlock);
    for (std::size_t i = r0; i < r1; ++i) {
      const float* row = x + i * channels;
      if (center) {
        for (int c = 0; c < channels; ++c) {
          const float d = row[c] - center[c];
          part[c] += d * d;
        }
      } else {
        for (int c = 0; c < channels; ++c) part[c] += row[c];
      }
    }
    for (int c = 0; c < channels; ++c) out[c] += part[c];
  }
}

// Per-channel Σ a·(b - center).
void channel_dot(const float* a, const float* b, const float* center, std::size_t n, int channels,
                 std::vector<double>& out) {
  constexpr std::size_t kBlock = 256;
  std::vector<float> part(channels);
  for (std::size_t r0 = 0; r0 < n; r0 += kBlock) {
    std::fill(part.begin(), part.end(), 0.0f);
    const std::size_t r1 = std::min(n, r0 + kBlock);
    for (std::size_t i = r0; i < r1; ++i) {
      for (int c = 0; c < channels; ++c) part[c] += a[i * channels + c] * (b[i * channels + c] - center[c]);
    }
    for (int c = 0; c < channels; ++c) out[c] += part[c];
  }
}

#ifdef __AVX512F__
// Direct "same" convolution for channels-last tensors whose output channel
// count is a multiple of 16: one zmm register per 16 output channels,
// blocks of 8 output pixels per pass.
bool direct_conv_ok(int out_ch) { return out_ch % 16 == 0; }

FloatBuffer pad_input(const float* in, const ConvGeometry& c) {
  const int ph = c.kh / 2, pw = c.kw / 2;
  const int hp = c.height + 2 * ph, wp = c.width + 2 * pw;
  FloatBuffer out(static_cast<std::size_t>(c.batch) * hp * wp * c.in_ch, 0.0f);
  for (int b = 0; b < c.batch; ++b) {
    for (int y = 0; y < c.height; ++y) {
      const float* src = in + (static_cast<std::size_t>(b) * c.height + y) * c.width * c.in_ch;
      float* dst = out.data() + ((static_cast<std::size_t>(b) * hp + y + ph) * wp + pw) * c.in_ch;
      std::copy_n(src, static_cast<std::size_t>(c.width) * c.in_ch, dst);
    }
  }
  return out;
}

template <int P>
inline void direct_conv_block(const float* xp, const float* kernel, const ConvGeometry& c, int wp, int co,
                              const __m512& bias, float* out) {
  __m512 acc[P];
  for (int p = 0; p < P; ++p) acc[p] = bias;
  for (int ky = 0; ky < c.kh; ++ky) {
    for (int kx = 0; kx < c.kw; ++kx) {
      const float* xrow = xp + (static_cast<std::size_t>(ky) * wp + kx) * c.in_ch;
      const float* krow = kernel + static_cast<std::size_t>(ky * c.kw + kx) * c.in_ch * c.out_ch + co;
      for (int ci = 0; ci < c.in_ch; ++ci) {
        const __m512 w = _mm512_loadu_ps(krow + static_cast<std::size_t>(ci) * c.out_ch);
        for (int p = 0; p < P; ++p) {
          acc[p] = _mm512_fmadd_ps(_mm512_set1_ps(xrow[static_cast<std::size_t>(p) * c.in_ch + ci]), w, acc[p]);
        }
      }
    }
  }
  for (int p = 0; p < P; ++p) _mm512_storeu_ps(out + static_cast<std::size_t>(p) * c.out_ch + co, acc[p]);
}

// out[B,H,W,Cout] = conv(in, kernel) + bias, `in` given zero-padded.
void direct_conv(const float* padded, const float* kernel, const float* bias, const ConvGeometry& c, float* out) {
  const int wp = c.width + 2 * (c.kw / 2);
  const int hp = c.height + 2 * (c.kh / 2);
  for (int b = 0; b < c.batch; ++b) {
    for (int y = 0; y < c.height; ++y) {
      const float* xbase = padded + (static_cast<std::size_t>(b) * hp + y) * wp * c.in_ch;
      float* obase = out + (static_cast<std::size_t>(b) * c.height + y) * c.width * c.out_ch;
      for (int co = 0; co < c.out_ch; co += 16) {
        const __m512 bv = bias ? _mm512_loadu_ps(bias + co) : _mm512_setzero_ps();
        int x = 0;
        for (; x + 8 <= c.width; x += 8) {
          direct_conv_block<8>(xbase + static_cast<std::size_t>(x) * c.in_ch, kernel, c, wp, co, bv,
                               obase + static_cast<std::size_t>(x) * c.out_ch);
        }
        for (; x < c.width; ++x) {
          direct_conv_block<1>(xbase + static_cast<std::size_t>(x) * c.in_ch, kernel, c, wp, co, bv,
                               obase + static_cast<std::size_t>(x) * c.out_ch);
        }
      }
    }
  }
}

// dkernel[kh,kw,Cin,Cout] += Σ_pixels padded[pixel+tap, ci] · dout[pixel, co].
void direct_conv_dkernel(const float* padded, const float* dout, const ConvGeometry& c, float* dkernel) {
  const int wp = c.width + 2 * (c.kw / 2);
  const int hp = c.height + 2 * (c.kh / 2);
  constexpr int kBlock = 16;
  for (int ky = 0; ky < c.kh; ++ky) {
    for (int kx = 0; kx < c.kw; ++kx) {
      for (int co = 0; co < c.out_ch; co += 16) {
        for (int ci0 = 0; ci0 < c.in_ch; ci0 += kBlock) {
          const int nci = std::min(kBlock, c.in_ch - ci0);
          __m512 acc[kBlock];
          for (int j = 0; j < kBlock; ++j) acc[j] = _mm512_setzero_ps();
          for (int b = 0; b < c.batch; ++b) {
            for (int y = 0; y < c.height; ++y) {
              const float* xrow =
                  padded + ((static_cast<std::size_t>(b) * hp + y + ky) * wp + kx) * c.in_ch + ci0;
              const float* drow = dout + (static_cast<std::size_t>(b) * c.height + y) * c.width * c.out_ch + co;
              for (int x = 0; x < c.width; ++x) {
                const __m512 d = _mm512_loadu_ps(drow + static_cast<std::size_t>(x) * c.out_ch);
                const float* xv = xrow + static_cast<std::size_t>(x) * c.in_ch;
                if (nci == kBlock) {
                  for (int j = 0; j < kBlock; ++j) acc[j] = _mm512_fmadd_ps(_mm512_set1_ps(xv[j]), d, acc[j]);
                } else {
                  for (int j = 0; j < nci; ++j) acc[j] = _mm512_fmadd_ps(_mm512_set1_ps(xv[j]), d, acc[j]);
                }
              }
            }
          }
          for (int j = 0; j < nci; ++j) {
            float* dst = dkernel + (static_cast<std::size_t>(ky * c.kw + kx) * c.in_ch + ci0 + j) * c.out_ch + co;
            _mm512_storeu_ps(dst, _mm512_add_ps(_mm512_loadu_ps(dst), acc[j]));
          }
        }
      }
    }
  }
}

// Kernel for the input gradient: taps flipped, in/out channels swapped.
std::vector<float> flip_kernel(const float* kernel, const ConvGeometry& c) {
  std::vector<float> out(static_cast<std::size_t>(c.kh) * c.kw * c.in_ch * c.out_ch);
  for (int ky = 0; ky < c.kh; ++ky) {
    for (int kx = 0; kx < c.kw; ++kx) {
      const std::size_t src_tap = static_cast<std::size_t>(ky * c.kw + kx);
      const std::size_t dst_tap = static_cast<std::size_t>((c.kh - 1 - ky) * c.kw + (c.kw - 1 - kx));
      for (int ci = 0; ci < c.in_ch; ++ci) {
        for (int co = 0; co < c.out_ch; ++co) {
          out[(dst_tap * c.out_ch + co) * c.in_ch + ci] = kernel[(src_tap * c.in_ch + ci) * c.out_ch + co];
        }
      }
    }
  }
  return out;
}
#else
bool direct_conv_ok(int) { return false; }
#endif

}  // namespace

NodeId conv2d(Graph& g, NodeId input, NodeId kernel, NodeId bias) {
  const Tensor& x = g.value(input);
  const Tensor& k = g.value(kernel);
  const Tensor& b = g.value(bias);
  require(x.rank() == 4, "conv2d: input must be [B,H,W,Cin], got " + shape_str(x.shape()));
  require(k.rank() == 4, "conv2d: kernel must be [kh,kw,Cin,Cout], got " + shape_str(k.shape()));
  require(k.dim(0) % 2 == 1 && k.dim(1) % 2 == 1, "conv2d: kernel spatial dims must be odd, got " +
                                                      shape_str(k.shape()));
  require(k.dim(2) == x.dim(3), "conv2d: kernel expects " + std::to_string(k.dim(2)) +
                                    " input channels, input " + shape_str(x.shape()) + " has " +
                                    std::to_string(x.dim(3)));
  require(b.rank() == 1 && b.dim(0) == k.dim(3), "conv2d: bias " + shape_str(b.shape()) +
                                                     " does not match kernel " + shape_str(k.shape()));
  const ConvGeometry geo{x.dim(0), x.dim(1), x.dim(2), x.dim(3), k.dim(0), k.dim(1), k.dim(3)};
  const bool pointwise = geo.kh == 1 && geo.kw == 1;
  const bool direct = !pointwise && direct_conv_ok(geo.out_ch);

  Tensor out(Shape{geo.batch, geo.height, geo.width, geo.out_ch});
  // Forward operand kept for the kernel gradient: padded input (direct) or im2col matrix.
  std::shared_ptr<FloatBuffer> saved;
  if (direct) {
#ifdef __AVX512F__
    saved = std::make_shared<FloatBuffer>(pad_input(x.raw(), geo));
    direct_conv(saved->data(), k.raw(), b.raw(), geo, out.raw());
#endif
  } else {
    const float* cols_ptr = x.raw();
    if (!pointwise) {
      saved = std::make_shared<FloatBuffer>(static_cast<std::size_t>(geo.rows() * geo.cols()));
      im2col(x.raw(), geo, saved->data());
      cols_ptr = saved->data();
    }
    MatMap o(out.raw(), geo.rows(), geo.out_ch);
    o.noalias() = ConstMatMap(cols_ptr, geo.rows(), geo.cols()) * ConstMatMap(k.raw(), geo.cols(), geo.out_ch);
    o.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(b.raw(), geo.out_ch);
  }

  if (!g.grad_enabled()) saved.reset();
  return g.record("conv2d", {input, kernel, bias}, std::move(out),
                  [=](Graph& gr, NodeId self) {
                    const Tensor& dout_t = gr.grad(self);
                    ConstMatMap dout(dout_t.raw(), geo.rows(), geo.out_ch);
                    if (gr.requires_grad(kernel)) {
                      float* dk_ptr = gr.grad_buffer(kernel).raw();
                      if (direct) {
#ifdef __AVX512F__
                        direct_conv_dkernel(saved->data(), dout_t.raw(), geo, dk_ptr);
#endif
                      } else {
                        const float* cp = pointwise ? gr.value(input).raw() : saved->data();
                        MatMap dk(dk_ptr, geo.cols(), geo.out_ch);
                        dk.noalias() += ConstMatMap(cp, geo.rows(), geo.cols()).transpose() * dout;
                      }
                    }
                    if (gr.requires_grad(bias)) {
                      Eigen::Map<Eigen::RowVectorXf> db(gr.grad_buffer(bias).raw(), geo.out_ch);
                      db += dout.colwise().sum();
                    }
                    if (gr.requires_grad(input)) {
                      const float* kp = gr.value(kernel).raw();
                      ConstMatMap km(kp, geo.cols(), geo.out_ch);
                      if (pointwise) {
                        MatMap dx(gr.grad_buffer(input).raw(), geo.rows(), geo.cols());
                        dx.noalias() += dout * km.transpose();
                      } else if (direct && direct_conv_ok(geo.in_ch)) {
#ifdef __AVX512F__
                        const ConvGeometry back{geo.batch, geo.height, geo.width, geo.out_ch,
                                                geo.kh,    geo.kw,     geo.in_ch};
                        const std::vector<float> flipped = flip_kernel(kp, geo);
                        const FloatBuffer padded = pad_input(dout_t.raw(), back);
                        std::vector<float> dx(static_cast<std::size_t>(geo.rows()) * geo.in_ch);
                        direct_conv(padded.data(), flipped.data(), nullptr, back, dx.data());
                        float* __restrict dst = gr.grad_buffer(input).raw();
                        for (std::size_t i = 0; i < dx.size(); ++i) dst[i] += dx[i];
#endif
                      } else {
                        RowMat dcols = dout * km.transpose();
                        col2im_add(dcols.data(), geo, gr.grad_buffer(input).raw());
                      }
                    }
                  });
}

NodeId batchnorm(Graph& g, NodeId input, NodeId gamma, NodeId beta, BatchNormStats& stats, Mode mode) {
  const Tensor& x = g.value(input);
  require(x.rank() >= 2, "batchnorm: input needs a batch and a channel axis, got " + shape_str(x.shape()));
  const int channels = x.channels();
  require(g.value(gamma).shape() == Shape{channels} && g.value(beta).shape() == Shape{channels},
          "batchnorm: gamma/beta must be [" + std::to_string(channels) + "]");
  require(stats.mean.shape() == Shape{channels} && stats.var.shape() == Shape{channels},
          "batchnorm: running stats do not match channel count " + std::to_string(channels));
  const std::size_t n = x.size() / static_cast<std::size_t>(channels);
  const float* gm = g.value(gamma).raw();
  const float* bt = g.value(beta).raw();

  auto mean = std::make_shared<std::vector<float>>(channels);
  auto invstd = std::make_shared<std::vector<float>>(channels);
  if (mode == Mode::Train) {
    require(x.dim(0) >= 2, "batchnorm: train mode needs at least 2 batch elements, got " +
                               shape_str(x.shape()));
    std::vector<double> sum(channels, 0.0), sq(channels, 0.0);
    channel_sums(x.raw(), nullptr, n, channels, sum);
    for (int c = 0; c < channels; ++c) (*mean)[c] = static_cast<float>(sum[c] / static_cast<double>(n));
    channel_sums(x.raw(), mean->data(), n, channels, sq);
    for (int c = 0; c < channels; ++c) {
      const double var = sq[c] / static_cast<double>(n);
      (*invstd)[c] = static_cast<float>(1.0 / std::sqrt(var + stats.epsilon));
      stats.mean[c] = stats.momentum * stats.mean[c] + (1.0f - stats.momentum) * (*mean)[c];
      stats.var[c] = stats.momentum * stats.var[c] + (1.0f - stats.momentum) * static_cast<float>(var);
    }
  } else {
    for (int c = 0; c < channels; ++c) {
      (*mean)[c] = stats.mean[c];
      (*invstd)[c] = 1.0f / std::sqrt(stats.var[c] + stats.epsilon);
    }
  }

  Tensor out(x.shape());
  {
    std::vector<float> a(channels), shift(channels);
    for (int c = 0; c < channels; ++c) {
      a[c] = gm[c] * (*invstd)[c];
      shift[c] = bt[c] - a[c] * (*mean)[c];
    }
    const float* __restrict src = x.raw();
    float* __restrict dst = out.raw();
    for (std::size_t i = 0; i < n; ++i) {
      for (int c = 0; c < channels; ++c) dst[i * channels + c] = a[c] * src[i * channels + c] + shift[c];
    }
  }

  const bool train = mode == Mode::Train;
  return g.record("batchnorm", {input, gamma, beta}, std::move(out),
                  [=](Graph& gr, NodeId self) {
                    const float* __restrict dy = gr.grad(self).raw();
                    const float* __restrict xv = gr.value(input).raw();
                    const float* gmv = gr.value(gamma).raw();
                    std::vector<double> sum_dy(channels, 0.0), sum_dy_x(channels, 0.0);
                    channel_sums(dy, nullptr, n, channels, sum_dy);
                    channel_dot(dy, xv, mean->data(), n, channels, sum_dy_x);
                    std::vector<double> sum_dy_xhat(channels);
                    for (int c = 0; c < channels; ++c) sum_dy_xhat[c] = sum_dy_x[c] * (*invstd)[c];
                    if (gr.requires_grad(gamma)) {
                      Tensor& dg = gr.grad_buffer(gamma);
                      for (int c = 0; c < channels; ++c) dg[c] += static_cast<float>(sum_dy_xhat[c]);
                    }
                    if (gr.requires_grad(beta)) {
                      Tensor& db = gr.grad_buffer(beta);
                      for (int c = 0; c < channels; ++c) db[c] += static_cast<float>(sum_dy[c]);
                    }
                    if (!gr.requires_grad(input)) return;
                    float* __restrict dx = gr.grad_buffer(input).raw();
                    // dx = a·dy + b·x + c per channel.
                    std::vector<float> ca(channels), cb(channels), cc(channels);
                    const double inv_n = 1.0 / static_cast<double>(n);
                    for (int c = 0; c < channels; ++c) {
                      const double s = static_cast<double>(gmv[c]) * (*invstd)[c];
                      if (train) {
                        const double k = (*invstd)[c] * inv_n * sum_dy_xhat[c];
                        ca[c] = static_cast<float>(s);
                        cb[c] = static_cast<float>(-s * k);
                        cc[c] = static_cast<float>(s * (k * (*mean)[c] - inv_n * sum_dy[c]));
                      } else {
                        ca[c] = static_cast<float>(s);
                        cb[c] = 0.0f;
                        cc[c] = 0.0f;
                      }
                    }
                    for (std::size_t i = 0; i < n; ++i) {
                      for (int c = 0; c < channels; ++c) {
                        const std::size_t j = i * channels + c;
                        dx[j] += ca[c] * dy[j] + cb[c] * xv[j] + cc[c];
                      }
                    }
                  });
}

NodeId relu(Graph& g, NodeId x) {
  const Tensor& v = g.value(x);
  Tensor out(v.shape());
  {
    const float* __restrict src = v.raw();
    float* __restrict dst = out.raw();
    for (std::size_t i = 0; i < v.size(); ++i) dst[i] = std::max(src[i], 0.0f);
  }
  return g.record("relu", {x}, std::move(out), [x](Graph& gr, NodeId self) {
    const float* __restrict dy = gr.grad(self).raw();
    const float* __restrict y = gr.value(self).raw();
    const std::size_t n = gr.value(self).size();
    float* __restrict dx = gr.grad_buffer(x).raw();
    for (std::size_t i = 0; i < n; ++i) dx[i] += y[i] > 0.0f ? dy[i] : 0.0f;
  });
}

NodeId sigmoid(Graph& g, NodeId x) {
  const Tensor& v = g.value(x);
  Tensor out(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = 1.0f / (1.0f + std::exp(-v[i]));
  return g.record("sigmoid", {x}, std::move(out), [x](Graph& gr, NodeId self) {
    const Tensor& dy = gr.grad(self);
    const Tensor& y = gr.value(self);
    Tensor& dx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * y[i] * (1.0f - y[i]);
  });
}

NodeId add(Graph& g, NodeId a, NodeId b) {
  const Tensor& va = g.value(a);
  const Tensor& vb = g.value(b);
  require(va.shape() == vb.shape(), "add: shape mismatch " + shape_str(va.shape()) + " vs " +
                                        shape_str(vb.shape()));
  Tensor out(va.shape());
  {
    const float* __restrict pa = va.raw();
    const float* __restrict pb = vb.raw();
    float* __restrict dst = out.raw();
    for (std::size_t i = 0; i < va.size(); ++i) dst[i] = pa[i] + pb[i];
  }
  return g.record("add", {a, b}, std::move(out), [a, b](Graph& gr, NodeId self) {
    const Tensor& dy = gr.grad(self);
    if (gr.requires_grad(a)) accumulate(gr.grad_buffer(a), dy);
    if (gr.requires_grad(b)) accumulate(gr.grad_buffer(b), dy);
  });
}

NodeId add_scalar(Graph& g, NodeId x, float c) {
  const Tensor& v = g.value(x);
  Tensor out(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] + c;
  return g.record("add_scalar", {x}, std::move(out),
                  [x](Graph& gr, NodeId self) { accumulate(gr.grad_buffer(x), gr.grad(self)); });
}

NodeId scale(Graph& g, NodeId x, float c) {
  const Tensor& v = g.value(x);
  Tensor out(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * c;
  return g.record("scale", {x}, std::move(out), [x, c](Graph& gr, NodeId self) {
    const Tensor& dy = gr.grad(self);
    Tensor& dx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += c * dy[i];
  });
}

NodeId sum_all(Graph& g, NodeId x) {
  const Tensor& v = g.value(x);
  double s = 0.0;
  for (float f : v.data()) s += f;
  return g.record("sum_all", {x}, Tensor::scalar(static_cast<float>(s)), [x](Graph& gr, NodeId self) {
    const float dy = gr.grad(self)[0];
    Tensor& dx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy;
  });
}

NodeId mean_all(Graph& g, NodeId x) {
  const Tensor& v = g.value(x);
  double s = 0.0;
  for (float f : v.data()) s += f;
  const double n = static_cast<double>(v.size());
  return g.record("mean_all", {x}, Tensor::scalar(static_cast<float>(s / n)), [x, n](Graph& gr, NodeId self) {
    const float dy = static_cast<float>(gr.grad(self)[0] / n);
    Tensor& dx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy;
  });
}

NodeId reshape(Graph& g, NodeId x, Shape shape) {
  Tensor out = g.value(x).reshaped(std::move(shape));
  return g.record("reshape", {x}, std::move(out), [x](Graph& gr, NodeId self) {
    accumulate(gr.grad_buffer(x), gr.grad(self));
  });
}

NodeId maxpool2d(Graph& g, NodeId x, int size) {
  const Tensor& v = g.value(x);
  require(v.rank() == 4, "maxpool2d: input must be [B,H,W,C], got " + shape_str(v.shape()));
  require(size >= 1 && v.dim(1) % size == 0 && v.dim(2) % size == 0,
          "maxpool2d: spatial dims of " + shape_str(v.shape()) + " not divisible by " + std::to_string(size));
  const int B = v.dim(0), H = v.dim(1), W = v.dim(2), C = v.dim(3);
  const int oh = H / size, ow = W / size;
  Tensor out(Shape{B, oh, ow, C});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  for (int b = 0; b < B; ++b) {
    for (int y = 0; y < oh; ++y) {
      for (int xo = 0; xo < ow; ++xo) {
        for (int c = 0; c < C; ++c) {
          std::size_t best = 0;
          float best_v = 0.0f;
          bool first = true;
          for (int dy = 0; dy < size; ++dy) {
            for (int dx = 0; dx < size; ++dx) {
              const std::size_t idx =
                  ((static_cast<std::size_t>(b) * H + y * size + dy) * W + xo * size + dx) * C + c;
              if (first || v[idx] > best_v) {
                best = idx;
                best_v = v[idx];
                first = false;
              }
            }
          }
          const std::size_t o = ((static_cast<std::size_t>(b) * oh + y) * ow + xo) * C + c;
          out[o] = best_v;
          (*argmax)[o] = best;
        }
      }
    }
  }
  return g.record("maxpool2d", {x}, std::move(out), [x, argmax](Graph& gr, NodeId self) {
    const Tensor& dy = gr.grad(self);
    Tensor& dx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[(*argmax)[i]] += dy[i];
  });
}

NodeId concat_channels(Graph& g, NodeId a, NodeId b) {
  const Tensor& va = g.value(a);
  const Tensor& vb = g.value(b);
  require(va.rank() == vb.rank() && va.rank() >= 2, "concat_channels: rank mismatch");
  for (int i = 0; i + 1 < va.rank(); ++i) {
    require(va.dim(i) == vb.dim(i), "concat_channels: leading dims differ " + shape_str(va.shape()) +
                                        " vs " + shape_str(vb.shape()));
  }
  const int ca = va.channels(), cb = vb.channels();
  Shape shape = va.shape();
  shape.back() = ca + cb;
  Tensor out(shape);
  const std::size_t rows = va.size() / ca;
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(va.raw() + r * ca, ca, out.raw() + r * (ca + cb));
    std::copy_n(vb.raw() + r * cb, cb, out.raw() + r * (ca + cb) + ca);
  }
  return g.record("concat_channels", {a, b}, std::move(out), [=](Graph& gr, NodeId self) {
    const Tensor& dy = gr.grad(self);
    for (std::size_t r = 0; r < rows; ++r) {
      if (gr.requires_grad(a)) {
        float* da = gr.grad_buffer(a).raw() + r * ca;
        for (int c = 0; c < ca; ++c) da[c] += dy[r * (ca + cb) + c];
      }
      if (gr.requires_grad(b)) {
        float* db = gr.grad_buffer(b).raw() + r * cb;
        for (int c = 0; c < cb; ++c) db[c] += dy[r * (ca + cb) + ca + c];
      }
    }
  });
}

NodeId dense(Graph& g, NodeId x, NodeId weight, NodeId bias) {
  const Tensor& v = g.value(x);
  const Tensor& w = g.value(weight);
  const Tensor& b = g.value(bias);
  require(v.rank() == 2, "dense: input must be [B,In], got " + shape_str(v.shape()));
  require(w.rank() == 2 && w.dim(0) == v.dim(1), "dense: weight " + shape_str(w.shape()) +
                                                     " incompatible with input " + shape_str(v.shape()));
  require(b.rank() == 1 && b.dim(0) == w.dim(1), "dense: bias " + shape_str(b.shape()) +
                                                     " incompatible with weight " + shape_str(w.shape()));
  const int rows = v.dim(0), in = v.dim(1), outn = w.dim(1);
  Tensor out(Shape{rows, outn});
  MatMap o(out.raw(), rows, outn);
  o.noalias() = ConstMatMap(v.raw(), rows, in) * ConstMatMap(w.raw(), in, outn);
  o.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(b.raw(), outn);
  return g.record("dense", {x, weight, bias}, std::move(out), [=](Graph& gr, NodeId self) {
    ConstMatMap dy(gr.grad(self).raw(), rows, outn);
    if (gr.requires_grad(weight)) {
      MatMap dw(gr.grad_buffer(weight).raw(), in, outn);
      dw.noalias() += ConstMatMap(gr.value(x).raw(), rows, in).transpose() * dy;
    }
    if (gr.requires_grad(bias)) {
      Eigen::Map<Eigen::RowVectorXf> db(gr.grad_buffer(bias).raw(), outn);
      db += dy.colwise().sum();
    }
    if (gr.requires_grad(x)) {
      MatMap dx(gr.grad_buffer(x).raw(), rows, in);
      dx.noalias() += dy * ConstMatMap(gr.value(weight).raw(), in, outn).transpose();
    }
  });
}

NodeId softmax_xent(Graph& g, NodeId logits, const std::vector<int>& targets) {
  const Tensor& v = g.value(logits);
  require(v.rank() == 3, "softmax_xent: logits must be [B,L,K], got " + shape_str(v.shape()));
  const int k = v.dim(2);
  const std::size_t slots = static_cast<std::size_t>(v.dim(0)) * v.dim(1);
  require(targets.size() == slots, "softmax_xent: expected " + std::to_string(slots) + " targets, got " +
                                       std::to_string(targets.size()));
  for (int t : targets) {
    if (t < 0 || t >= k) {
      throw std::out_of_range("softmax_xent: target " + std::to_string(t) + " outside [0," +
                              std::to_string(k) + ")");
    }
  }
  auto probs = std::make_shared<std::vector<float>>(v.size());
  double loss = 0.0;
  for (std::size_t s = 0; s < slots; ++s) {
    const float* row = v.raw() + s * k;
    const float mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (int j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    for (int j = 0; j < k; ++j) (*probs)[s * k + j] = static_cast<float>(std::exp(row[j] - mx) / z);
    loss += std::log(z) + mx - row[targets[s]];
  }
  loss /= static_cast<double>(slots);
  return g.record("softmax_xent", {logits}, Tensor::scalar(static_cast<float>(loss)),
                  [=](Graph& gr, NodeId self) {
                    const float scale_f = gr.grad(self)[0] / static_cast<float>(slots);
                    Tensor& dx = gr.grad_buffer(logits);
                    for (std::size_t s = 0; s < slots; ++s) {
                      for (int j = 0; j < k; ++j) {
                        const float onehot = j == targets[s] ? 1.0f : 0.0f;
                        dx[s * k + j] += scale_f * ((*probs)[s * k + j] - onehot);
                      }
                    }
                  });
}

NodeId kl_bernoulli(Graph& g, NodeId mean, double rho) {
  require(g.value(mean).size() == 1, "kl_bernoulli: mean must be scalar");
  if (!(rho > 0.0 && rho < 1.0)) throw std::invalid_argument("kl_bernoulli: rho must lie in (0,1)");
  constexpr double lo = 1e-7, hi = 1.0 - 1e-7;
  const double raw = g.value(mean)[0];
  const double m = std::clamp(raw, lo, hi);
  const bool clamped = raw < lo || raw > hi;
  const double kl = rho * std::log(rho / m) + (1.0 - rho) * std::log((1.0 - rho) / (1.0 - m));
  return g.record("kl_bernoulli", {mean}, Tensor::scalar(static_cast<float>(kl)), [=](Graph& gr, NodeId self) {
    if (clamped) return;
    const double d = -rho / m + (1.0 - rho) / (1.0 - m);
    gr.grad_buffer(mean)[0] += static_cast<float>(gr.grad(self)[0] * d);
  });
}

NodeId residual_block(Graph& g, NodeId x, const ResidualParams& p, BatchNormStats& bn1, BatchNormStats& bn2,
                      Mode mode) {
  NodeId h = conv2d(g, x, p.conv1_kernel, p.conv1_bias);
  h = relu(g, batchnorm(g, h, p.bn1_gamma, p.bn1_beta, bn1, mode));
  h = conv2d(g, h, p.conv2_kernel, p.conv2_bias);
  h = batchnorm(g, h, p.bn2_gamma, p.bn2_beta, bn2, mode);
  return relu(g, add(g, x, h));
}

}  // namespace sparling::ops
