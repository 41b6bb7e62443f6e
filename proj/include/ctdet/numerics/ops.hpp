#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ctdet/numerics/tensor.hpp"

// Differentiable tensor ops. Every op records its backward on the tape when
// an operand requires gradients (see make_op_result).
namespace ctdet::ops {

// [m x k] * [k x n] -> [m x n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s);

// Adds a vector along the last axis (per-channel bias).
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// Row-wise softmax of a 2-D tensor, stabilized by the row max.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);

// Rows scaled to unit L2 norm (rows with zero norm pass through unchanged).
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x);

// out(i,j) = -||a_i - b_j||^2 for a: [m x c], b: [n x c].
template <typename T>
Tensor<T> neg_sq_distance(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b);

// Rows [begin, end) of a 2-D tensor.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

// Channelwise spatial pooling over an H x W x C tensor. Windows that run past
// the border are truncated; average pooling divides by the truncated size.
template <typename T>
Tensor<T> spatial_max_pool(const Tensor<T>& x, int kernel, int stride,
                           bool ceil_mode = true);

template <typename T>
Tensor<T> spatial_avg_pool(const Tensor<T>& x, int kernel, int stride,
                           bool ceil_mode = true);

// Output extent of a pooling window sweep along one axis.
std::size_t pooled_extent(std::size_t in, int kernel, int stride,
                          bool ceil_mode);

// Cross-correlation of x: [H x W x Cin] with w: [k x k x Cin x Cout] and
// zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride,
                 int padding);

// Sum over rows with targets[i] >= 0 of -log softmax(logits)(i, targets[i]).
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits,
                                std::span<const int> targets);

// Sum over entries with mask[i] != 0 of the binary cross-entropy between
// sigmoid(logits[i]) and targets[i].
template <typename T>
Tensor<T> sigmoid_bce(const Tensor<T>& logits, std::span<const T> targets,
                      std::span<const std::uint8_t> mask);

// Sum over rows with mask[i] != 0 of smooth-L1(pred(i,:) - target(i,:)).
template <typename T>
Tensor<T> smooth_l1(const Tensor<T>& pred, std::span<const T> target,
                    std::span<const std::uint8_t> mask);

// Scalar helpers used by the loss and tests.
template <typename T>
T smooth_l1_value(T diff);

template <typename T>
T sigmoid_bce_value(T logit, T target);

}  // namespace ctdet::ops
