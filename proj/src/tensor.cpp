#include "rdl/tensor.hpp"

#include <algorithm>
#include <stdexcept>

namespace rdl {

Tensor::Tensor(int n, int c, int h, int w, Real fill)
    : n_(n), c_(c), h_(h), w_(w),
      data_(static_cast<size_t>(n) * c * h * w, fill) {
  if (n < 0 || c < 0 || h < 0 || w < 0) throw std::invalid_argument("negative tensor dimension");
}

std::string Tensor::shape_string() const {
  return "[" + std::to_string(n_) + "," + std::to_string(c_) + "," + std::to_string(h_) + "," +
         std::to_string(w_) + "]";
}

void Tensor::fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::add_(const Tensor& other) {
  if (!same_shape(other)) {
    throw std::invalid_argument("tensor add: shape " + shape_string() + " vs " +
                                other.shape_string());
  }
  for (size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
}

Tensor slice_channels(const Tensor& t, int begin, int end) {
  if (begin < 0 || end > t.c() || begin > end) throw std::out_of_range("slice_channels");
  Tensor out(t.n(), end - begin, t.h(), t.w());
  const size_t chunk = static_cast<size_t>(end - begin) * t.plane_size();
  for (int n = 0; n < t.n(); ++n) std::copy_n(t.plane(n, begin), chunk, out.image(n));
  return out;
}

void write_channels(Tensor& dst, const Tensor& src, int begin) {
  if (src.n() != dst.n() || src.h() != dst.h() || src.w() != dst.w() ||
      begin + src.c() > dst.c()) {
    throw std::invalid_argument("write_channels: incompatible shapes");
  }
  const size_t chunk = static_cast<size_t>(src.c()) * src.plane_size();
  for (int n = 0; n < src.n(); ++n) std::copy_n(src.image(n), chunk, dst.plane(n, begin));
}

Tensor concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) return {};
  int channels = 0;
  for (const auto& p : parts) channels += p.c();
  Tensor out(parts[0].n(), channels, parts[0].h(), parts[0].w());
  int at = 0;
  for (const auto& p : parts) {
    write_channels(out, p, at);
    at += p.c();
  }
  return out;
}

void relu_inplace(Tensor& t) {
  for (Real& v : t.values()) v = v > 0.0f ? v : 0.0f;
}

void relu_backward_inplace(Tensor& dy, const Tensor& output) {
  auto d = dy.values();
  auto o = output.values();
  for (size_t i = 0; i < d.size(); ++i) {
    if (!(o[i] > 0.0f)) d[i] = 0.0f;
  }
}

}  // namespace rdl
