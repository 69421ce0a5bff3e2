#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace rdl {

#ifdef RDL_DOUBLE
using Real = double;
#else
using Real = float;
#endif

/// Dense tensor in NCHW layout.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w, Real fill = 0.0f);

  int n() const { return n_; }
  int c() const { return c_; }
  int h() const { return h_; }
  int w() const { return w_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  size_t plane_size() const { return static_cast<size_t>(h_) * w_; }

  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }
  std::span<Real> values() { return data_; }
  std::span<const Real> values() const { return data_; }

  Real* image(int n) { return data_.data() + static_cast<size_t>(n) * c_ * plane_size(); }
  const Real* image(int n) const {
    return data_.data() + static_cast<size_t>(n) * c_ * plane_size();
  }
  Real* plane(int n, int c) { return image(n) + static_cast<size_t>(c) * plane_size(); }
  const Real* plane(int n, int c) const {
    return image(n) + static_cast<size_t>(c) * plane_size();
  }

  Real& at(int n, int c, int y, int x) { return plane(n, c)[static_cast<size_t>(y) * w_ + x]; }
  Real at(int n, int c, int y, int x) const {
    return plane(n, c)[static_cast<size_t>(y) * w_ + x];
  }

  bool same_shape(const Tensor& o) const {
    return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }
  std::string shape_string() const;

  void fill(Real v);
  void add_(const Tensor& other);

 private:
  int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  std::vector<Real> data_;
};

Tensor slice_channels(const Tensor& t, int begin, int end);
void write_channels(Tensor& dst, const Tensor& src, int begin);
Tensor concat_channels(std::span<const Tensor> parts);

void relu_inplace(Tensor& t);
/// dy masked by (output > 0), in place.
void relu_backward_inplace(Tensor& dy, const Tensor& output);

}  // namespace rdl
