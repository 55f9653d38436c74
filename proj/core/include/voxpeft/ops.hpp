#pragma once

#include <vector>

#include "voxpeft/tensor.hpp"

// Differentiable primitives. All functions record onto the tape when any
// input requires a gradient and gradient recording is enabled.
namespace voxpeft {

// Elementwise, with trailing-dimension broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// [.., m, k] x [.., k, n] -> [.., m, n]; leading dims broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

// x [.., in] · weight[out, in]ᵀ + bias[out]. `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor reshape(const Tensor& a, const Shape& shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& order);
Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);

Tensor softmax(const Tensor& a); // over the last axis
Tensor gelu(const Tensor& a);    // erf form

// Normalizes every vector along the last axis.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// x [c, ...]: normalizes each channel over its spatial extent, then applies
// per-channel gamma/beta.
Tensor channel_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// x [c_in, d, h, w], kernel [c_out, c_in, kd, kh, kw], bias [c_out] or
// undefined. Cross-correlation.
Tensor conv3d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride = 1,
              std::size_t pad = 0);
// x [c_in, d, h, w], kernel [c_in, c_out, kd, kh, kw].
Tensor conv_transpose3d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
                        std::size_t stride = 1, std::size_t pad = 0);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mse_loss(const Tensor& pred, const Tensor& target);

} // namespace voxpeft
