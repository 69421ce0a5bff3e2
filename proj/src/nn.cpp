#include "rdl/nn.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace rdl {
namespace {

[[maybe_unused]] void gemm(CBLAS_ORDER order, CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, int m, int n, int k, float alpha,
          const float* a, int lda, const float* b, int ldb, float beta, float* c, int ldc) {
  cblas_sgemm(order, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

[[maybe_unused]] void gemm(CBLAS_ORDER order, CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, int m, int n, int k, double alpha,
          const double* a, int lda, const double* b, int ldb, double beta, double* c, int ldc) {
  cblas_dgemm(order, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(const ConvShape& shape, Rng& rng) : shape_(shape) {
  if (shape.in <= 0 || shape.out <= 0 || shape.kernel <= 0 || shape.stride <= 0 || shape.groups <= 0) {
    throw std::invalid_argument("conv: non-positive dimension");
  }
  if (shape.in % shape.groups != 0 || shape.out % shape.groups != 0) {
    throw std::invalid_argument("conv: channels " + std::to_string(shape.in) + "->" +
                                std::to_string(shape.out) + " not divisible by groups " +
                                std::to_string(shape.groups));
  }
  weight.value = Tensor(shape.out, shape.in / shape.groups, shape.kernel, shape.kernel);
  weight.grad = Tensor(shape.out, shape.in / shape.groups, shape.kernel, shape.kernel);
  if (shape.bias) {
    bias.value = Tensor(1, shape.out, 1, 1);
    bias.grad = Tensor(1, shape.out, 1, 1);
    bias.decay = false;
  }
  // He-normal on fan-in.
  const double fan_in = static_cast<double>(shape.in / shape.groups) * shape.kernel * shape.kernel;
  reset(std::sqrt(2.0 / fan_in), 0.0f, rng);
}

void Conv2d::reset(double std, Real bias_value, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std);
  for (Real& w : weight.value.values()) w = static_cast<Real>(dist(rng));
  if (shape_.bias) bias.value.fill(bias_value);
}

void Conv2d::zero_weights() {
  weight.value.fill(0.0f);
  if (shape_.bias) bias.value.fill(0.0f);
}

int64_t Conv2d::param_count() const {
  return static_cast<int64_t>(weight.value.size()) + (shape_.bias ? shape_.out : 0);
}

int64_t Conv2d::macs(int out_h, int out_w) const {
  return static_cast<int64_t>(out_h) * out_w * shape_.out * (shape_.in / shape_.groups) *
         shape_.kernel * shape_.kernel;
}

void Conv2d::visit(StateVisitor& v, const std::string& prefix) {
  v.param(prefix + ".weight", weight);
  if (shape_.bias) v.param(prefix + ".bias", bias);
}

void Conv2d::im2col(const Real* image, int h, int w, int group, Real* col) const {
  const int k = shape_.kernel, s = shape_.stride, p = shape_.pad;
  const int oh = out_size(h), ow = out_size(w);
  const int cin_g = shape_.in / shape_.groups;
  const size_t plane = static_cast<size_t>(h) * w;
  for (int c = 0; c < cin_g; ++c) {
    const Real* src = image + static_cast<size_t>(group * cin_g + c) * plane;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s - p + ky;
          if (iy < 0 || iy >= h) {
            std::fill_n(col, ow, 0.0f);
            col += ow;
            continue;
          }
          const Real* row = src + static_cast<size_t>(iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s - p + kx;
            *col++ = (ix >= 0 && ix < w) ? row[ix] : 0.0f;
          }
        }
      }
    }
  }
}

void Conv2d::col2im(const Real* col, int h, int w, int group, Real* image) const {
  const int k = shape_.kernel, s = shape_.stride, p = shape_.pad;
  const int oh = out_size(h), ow = out_size(w);
  const int cin_g = shape_.in / shape_.groups;
  const size_t plane = static_cast<size_t>(h) * w;
  for (int c = 0; c < cin_g; ++c) {
    Real* dst = image + static_cast<size_t>(group * cin_g + c) * plane;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s - p + ky;
          if (iy < 0 || iy >= h) {
            col += ow;
            continue;
          }
          Real* row = dst + static_cast<size_t>(iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s - p + kx;
            if (ix >= 0 && ix < w) row[ix] += *col;
            ++col;
          }
        }
      }
    }
  }
}

Tensor Conv2d::forward(const Tensor& x, Mode mode) {
  if (x.c() != shape_.in) {
    throw std::invalid_argument("conv: expected " + std::to_string(shape_.in) +
                                " input channels, got " + std::to_string(x.c()));
  }
  const int oh = out_size(x.h()), ow = out_size(x.w());
  if (oh <= 0 || ow <= 0) throw std::invalid_argument("conv: input too small");
  Tensor y(x.n(), shape_.out, oh, ow);
  const int G = shape_.groups;
  const int cin_g = shape_.in / G, cout_g = shape_.out / G;
  const int K = cin_g * shape_.kernel * shape_.kernel;
  const int P = oh * ow;
  std::vector<Real> col;
  if (!is_pointwise()) col.resize(static_cast<size_t>(K) * P);
  for (int n = 0; n < x.n(); ++n) {
    for (int g = 0; g < G; ++g) {
      const Real* B;
      if (is_pointwise()) {
        B = x.plane(n, g * cin_g);
      } else {
        im2col(x.image(n), x.h(), x.w(), g, col.data());
        B = col.data();
      }
      const Real* A = weight.value.data() + static_cast<size_t>(g) * cout_g * K;
      gemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, cout_g, P, K, 1.0f, A, K, B, P,
                  0.0f, y.plane(n, g * cout_g), P);
    }
    if (shape_.bias) {
      for (int c = 0; c < shape_.out; ++c) {
        Real* out = y.plane(n, c);
        const Real b = bias.value.data()[c];
        for (int i = 0; i < P; ++i) out[i] += b;
      }
    }
  }
  last_macs_ = macs(oh, ow);
  if (records(mode)) {
    input_ = x;
  } else {
    input_ = Tensor();
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& dy, bool need_input_grad) {
  const Tensor& x = input_;
  if (x.empty()) throw std::logic_error("conv backward without recorded forward");
  const int oh = dy.h(), ow = dy.w();
  const int G = shape_.groups;
  const int cin_g = shape_.in / G, cout_g = shape_.out / G;
  const int K = cin_g * shape_.kernel * shape_.kernel;
  const int P = oh * ow;
  Tensor dx;
  if (need_input_grad) dx = Tensor(x.n(), x.c(), x.h(), x.w());
  std::vector<Real> col;
  std::vector<Real> dcol;
  if (!is_pointwise()) {
    col.resize(static_cast<size_t>(K) * P);
    if (need_input_grad) dcol.resize(static_cast<size_t>(K) * P);
  }
  for (int n = 0; n < x.n(); ++n) {
    for (int g = 0; g < G; ++g) {
      const Real* B;
      if (is_pointwise()) {
        B = x.plane(n, g * cin_g);
      } else {
        im2col(x.image(n), x.h(), x.w(), g, col.data());
        B = col.data();
      }
      const Real* D = dy.plane(n, g * cout_g);
      Real* dW = weight.grad.data() + static_cast<size_t>(g) * cout_g * K;
      gemm(CblasRowMajor, CblasNoTrans, CblasTrans, cout_g, K, P, 1.0f, D, P, B, P, 1.0f,
                  dW, K);
      if (need_input_grad) {
        const Real* A = weight.value.data() + static_cast<size_t>(g) * cout_g * K;
        if (is_pointwise()) {
          gemm(CblasRowMajor, CblasTrans, CblasNoTrans, K, P, cout_g, 1.0f, A, K, D, P,
                      0.0f, dx.plane(n, g * cin_g), P);
        } else {
          gemm(CblasRowMajor, CblasTrans, CblasNoTrans, K, P, cout_g, 1.0f, A, K, D, P,
                      0.0f, dcol.data(), P);
          col2im(dcol.data(), x.h(), x.w(), g, dx.image(n));
        }
      }
    }
    if (shape_.bias) {
      for (int c = 0; c < shape_.out; ++c) {
        const Real* d = dy.plane(n, c);
        double s = 0.0;
        for (int i = 0; i < P; ++i) s += d[i];
        bias.grad.data()[c] += static_cast<Real>(s);
      }
    }
  }
  return dx;
}

// ----------------------------------------------------------- BatchNorm2d

BatchNorm2d::BatchNorm2d(int channels, double momentum, double eps)
    : channels_(channels), momentum_(momentum), eps_(eps) {
  gamma.value = Tensor(1, channels, 1, 1, 1.0f);
  gamma.grad = Tensor(1, channels, 1, 1);
  gamma.decay = false;
  beta.value = Tensor(1, channels, 1, 1, 0.0f);
  beta.grad = Tensor(1, channels, 1, 1);
  beta.decay = false;
  running_mean = Tensor(1, channels, 1, 1, 0.0f);
  running_var = Tensor(1, channels, 1, 1, 1.0f);
}

void BatchNorm2d::visit(StateVisitor& v, const std::string& prefix) {
  v.param(prefix + ".gamma", gamma);
  v.param(prefix + ".beta", beta);
  v.buffer(prefix + ".running_mean", running_mean);
  v.buffer(prefix + ".running_var", running_var);
}

Tensor BatchNorm2d::forward(const Tensor& x, Mode mode) {
  if (x.c() != channels_) throw std::invalid_argument("batchnorm: channel mismatch");
  Tensor y(x.n(), x.c(), x.h(), x.w());
  const size_t plane = x.plane_size();
  const size_t count = plane * x.n();
  const bool train = mode == Mode::kTrain;
  used_batch_stats_ = train;
  inv_std_.assign(channels_, 0.0f);
  if (records(mode)) {
    xhat_ = Tensor(x.n(), x.c(), x.h(), x.w());
  } else {
    xhat_ = Tensor();
  }
  for (int c = 0; c < channels_; ++c) {
    double mean, var;
    if (train) {
      double s = 0.0;
      for (int n = 0; n < x.n(); ++n) {
        const Real* p = x.plane(n, c);
        for (size_t i = 0; i < plane; ++i) s += p[i];
      }
      mean = s / count;
      double ss = 0.0;
      for (int n = 0; n < x.n(); ++n) {
        const Real* p = x.plane(n, c);
        for (size_t i = 0; i < plane; ++i) {
          const double d = p[i] - mean;
          ss += d * d;
        }
      }
      var = ss / count;
      const double unbiased = count > 1 ? ss / (count - 1) : var;
      running_mean.data()[c] =
          static_cast<Real>((1.0 - momentum_) * running_mean.data()[c] + momentum_ * mean);
      running_var.data()[c] =
          static_cast<Real>((1.0 - momentum_) * running_var.data()[c] + momentum_ * unbiased);
    } else {
      mean = running_mean.data()[c];
      var = running_var.data()[c];
    }
    const Real inv = static_cast<Real>(1.0 / std::sqrt(var + eps_));
    inv_std_[c] = inv;
    const Real g = gamma.value.data()[c], b = beta.value.data()[c];
    const Real m = static_cast<Real>(mean);
    for (int n = 0; n < x.n(); ++n) {
      const Real* p = x.plane(n, c);
      Real* o = y.plane(n, c);
      Real* h = xhat_.empty() ? nullptr : xhat_.plane(n, c);
      for (size_t i = 0; i < plane; ++i) {
        const Real xh = (p[i] - m) * inv;
        if (h) h[i] = xh;
        o[i] = g * xh + b;
      }
    }
  }
  return y;
}

Tensor BatchNorm2d::backward(const Tensor& dy) {
  if (xhat_.empty()) throw std::logic_error("batchnorm backward without recorded forward");
  Tensor dx(dy.n(), dy.c(), dy.h(), dy.w());
  const size_t plane = dy.plane_size();
  const double count = static_cast<double>(plane) * dy.n();
  for (int c = 0; c < channels_; ++c) {
    double dg = 0.0, db = 0.0;
    for (int n = 0; n < dy.n(); ++n) {
      const Real* d = dy.plane(n, c);
      const Real* h = xhat_.plane(n, c);
      for (size_t i = 0; i < plane; ++i) {
        dg += static_cast<double>(d[i]) * h[i];
        db += d[i];
      }
    }
    gamma.grad.data()[c] += static_cast<Real>(dg);
    beta.grad.data()[c] += static_cast<Real>(db);
    const Real g = gamma.value.data()[c];
    const Real inv = inv_std_[c];
    if (used_batch_stats_) {
      const Real scale = static_cast<Real>(g * inv / count);
      const Real mdb = static_cast<Real>(db), mdg = static_cast<Real>(dg);
      const Real cnt = static_cast<Real>(count);
      for (int n = 0; n < dy.n(); ++n) {
        const Real* d = dy.plane(n, c);
        const Real* h = xhat_.plane(n, c);
        Real* o = dx.plane(n, c);
        for (size_t i = 0; i < plane; ++i) o[i] = scale * (cnt * d[i] - mdb - h[i] * mdg);
      }
    } else {
      const Real scale = g * inv;
      for (int n = 0; n < dy.n(); ++n) {
        const Real* d = dy.plane(n, c);
        Real* o = dx.plane(n, c);
        for (size_t i = 0; i < plane; ++i) o[i] = scale * d[i];
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------- ConvBn

ConvBn::ConvBn(const ConvShape& shape, bool relu, Rng& rng)
    : conv(ConvShape{shape.in, shape.out, shape.kernel, shape.stride, shape.pad, shape.groups, false},
           rng),
      bn(shape.out),
      relu_(relu) {}

Tensor ConvBn::forward(const Tensor& x, Mode mode) {
  Tensor y = bn.forward(conv.forward(x, mode), mode);
  if (relu_) {
    relu_inplace(y);
    if (records(mode)) output_ = y;
  }
  return y;
}

Tensor ConvBn::backward(const Tensor& dy, bool need_input_grad) {
  if (relu_) {
    Tensor d = dy;
    relu_backward_inplace(d, output_);
    return conv.backward(bn.backward(d), need_input_grad);
  }
  return conv.backward(bn.backward(dy), need_input_grad);
}

void ConvBn::visit(StateVisitor& v, const std::string& prefix) {
  conv.visit(v, prefix + ".conv");
  bn.visit(v, prefix + ".bn");
}

// --------------------------------------------------------------- MaxPool

Tensor MaxPool::forward(const Tensor& x, Mode mode) {
  const int oh = out_size(x.h()), ow = out_size(x.w());
  Tensor y(x.n(), x.c(), oh, ow);
  const bool rec = records(mode);
  if (rec) argmax_.assign(y.size(), 0);
  in_h_ = x.h();
  in_w_ = x.w();
  in_c_ = x.c();
  size_t idx = 0;
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const Real* p = x.plane(n, c);
      Real* o = y.plane(n, c);
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox, ++idx) {
          Real best = -std::numeric_limits<Real>::infinity();
          int arg = 0;
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = oy * 2 - 1 + ky;
            if (iy < 0 || iy >= x.h()) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = ox * 2 - 1 + kx;
              if (ix < 0 || ix >= x.w()) continue;
              const Real v = p[iy * x.w() + ix];
              if (v > best) {
                best = v;
                arg = iy * x.w() + ix;
              }
            }
          }
          o[oy * ow + ox] = best;
          if (rec) argmax_[idx] = arg;
        }
      }
    }
  }
  return y;
}

Tensor MaxPool::backward(const Tensor& dy) {
  if (argmax_.size() != dy.size()) throw std::logic_error("maxpool backward without forward");
  Tensor dx(dy.n(), in_c_, in_h_, in_w_);
  size_t idx = 0;
  for (int n = 0; n < dy.n(); ++n) {
    for (int c = 0; c < dy.c(); ++c) {
      const Real* d = dy.plane(n, c);
      Real* o = dx.plane(n, c);
      for (size_t i = 0; i < dy.plane_size(); ++i, ++idx) o[argmax_[idx]] += d[i];
    }
  }
  return dx;
}

// ------------------------------------------------------ resize / pooling

Tensor resize_nearest(const Tensor& x, int out_h, int out_w) {
  Tensor y(x.n(), x.c(), out_h, out_w);
  std::vector<int> sy(out_h), sx(out_w);
  for (int i = 0; i < out_h; ++i) sy[i] = static_cast<int>(static_cast<int64_t>(i) * x.h() / out_h);
  for (int i = 0; i < out_w; ++i) sx[i] = static_cast<int>(static_cast<int64_t>(i) * x.w() / out_w);
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const Real* p = x.plane(n, c);
      Real* o = y.plane(n, c);
      for (int oy = 0; oy < out_h; ++oy) {
        for (int ox = 0; ox < out_w; ++ox) o[oy * out_w + ox] = p[sy[oy] * x.w() + sx[ox]];
      }
    }
  }
  return y;
}

Tensor resize_nearest_backward(const Tensor& dy, int in_h, int in_w) {
  Tensor dx(dy.n(), dy.c(), in_h, in_w);
  const int oh = dy.h(), ow = dy.w();
  std::vector<int> sy(oh), sx(ow);
  for (int i = 0; i < oh; ++i) sy[i] = static_cast<int>(static_cast<int64_t>(i) * in_h / oh);
  for (int i = 0; i < ow; ++i) sx[i] = static_cast<int>(static_cast<int64_t>(i) * in_w / ow);
  for (int n = 0; n < dy.n(); ++n) {
    for (int c = 0; c < dy.c(); ++c) {
      const Real* d = dy.plane(n, c);
      Real* o = dx.plane(n, c);
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) o[sy[oy] * in_w + sx[ox]] += d[oy * ow + ox];
      }
    }
  }
  return dx;
}

Tensor global_avg_pool(const Tensor& x) {
  Tensor y(x.n(), x.c(), 1, 1);
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const Real* p = x.plane(n, c);
      double s = 0.0;
      for (size_t i = 0; i < x.plane_size(); ++i) s += p[i];
      y.at(n, c, 0, 0) = static_cast<Real>(s / x.plane_size());
    }
  }
  return y;
}

Tensor global_avg_pool_backward(const Tensor& dy, int h, int w) {
  Tensor dx(dy.n(), dy.c(), h, w);
  const Real inv = 1.0f / static_cast<Real>(h * w);
  for (int n = 0; n < dy.n(); ++n) {
    for (int c = 0; c < dy.c(); ++c) {
      Real* o = dx.plane(n, c);
      const Real g = dy.at(n, c, 0, 0) * inv;
      for (size_t i = 0; i < dx.plane_size(); ++i) o[i] = g;
    }
  }
  return dx;
}

}  // namespace rdl
