#pragma once

#include <cstddef>
#include <vector>

#include "fss/tensor.h"

// Pure forward/backward kernels. Every function here is free of hidden state
// and safe to call concurrently. Backward functions take nullable output
// pointers; a null pointer means that gradient is not wanted. Gradients are
// accumulated (+=) into the outputs, never overwritten.
namespace fss::kernels {

// ---------------------------------------------------------------------------
// Cosine correlation.
//
// out[i, j] = ReLU(<q_i, s_j> / (|q_i| |s_j|)), with 0 for any zero-norm row.
// q: [n_q x c], s: [n_s x c] -> [n_q x n_s].
template <typename T>
BasicTensor<T> cosine_similarity_map(const BasicTensor<T>& query,
                                     const BasicTensor<T>& support);

template <typename T>
void cosine_similarity_map_backward(const BasicTensor<T>& query,
                                    const BasicTensor<T>& support,
                                    const BasicTensor<T>& grad_out,
                                    BasicTensor<T>* grad_query,
                                    BasicTensor<T>* grad_support);

// ---------------------------------------------------------------------------
// Center-pivot 4D convolution.
//
// input [ci, h, w, hs, ws], query kernel wq [co, ci, 3, 3], support kernel
// ws [co, ci, 3, 3], bias [co]. Zero padding 1 on all four spatial dims,
// `support_stride` (1 or 2) on the support dims only. The query kernel slides
// over (h, w) with the support coordinate pinned at the kernel center; the
// support kernel slides over (hs, ws) with the query coordinate pinned. Both
// contribute at the joint center tap.
//
// Output [co, h, w, ceil(hs/stride), ceil(ws/stride)].
template <typename T>
BasicTensor<T> cp4d_conv(const BasicTensor<T>& input, const BasicTensor<T>& wq,
                         const BasicTensor<T>& ws, const BasicTensor<T>& bias,
                         int support_stride);

template <typename T>
void cp4d_conv_backward(const BasicTensor<T>& input, const BasicTensor<T>& wq,
                        const BasicTensor<T>& ws, int support_stride,
                        const BasicTensor<T>& grad_out,
                        BasicTensor<T>* grad_input, BasicTensor<T>* grad_wq,
                        BasicTensor<T>* grad_ws, BasicTensor<T>* grad_bias);

// Depth-wise center-pivot 4D convolution: stride 1, no bias, channel k of the
// output depends only on channel k of the input.
// input [c, h, w, hs, ws], wq/ws [c, 3, 3].
template <typename T>
BasicTensor<T> dw4d_conv(const BasicTensor<T>& input, const BasicTensor<T>& wq,
                         const BasicTensor<T>& ws);

template <typename T>
void dw4d_conv_backward(const BasicTensor<T>& input, const BasicTensor<T>& wq,
                        const BasicTensor<T>& ws, const BasicTensor<T>& grad_out,
                        BasicTensor<T>* grad_input, BasicTensor<T>* grad_wq,
                        BasicTensor<T>* grad_ws);

// Point-wise (1x1x1x1) channel mixing: out[:, p] = weight * in[:, p] + bias.
// Works for any rank >= 2 input whose leading dim is the channel axis.
template <typename T>
BasicTensor<T> pw4d_conv(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                         const BasicTensor<T>& bias);

template <typename T>
void pw4d_conv_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                        const BasicTensor<T>& grad_out, BasicTensor<T>* grad_input,
                        BasicTensor<T>* grad_weight, BasicTensor<T>* grad_bias);

// ---------------------------------------------------------------------------
// Group normalization over [c, ...spatial...].

template <typename T>
struct GroupNormStats {
  std::vector<T> mean;  // per group
  std::vector<T> rstd;  // per group, 1 / sqrt(var + eps)
};

template <typename T>
BasicTensor<T> group_norm(const BasicTensor<T>& input, std::size_t groups,
                          const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          double eps, GroupNormStats<T>* stats = nullptr);

template <typename T>
void group_norm_backward(const BasicTensor<T>& input, std::size_t groups,
                         const BasicTensor<T>& gamma,
                         const GroupNormStats<T>& stats,
                         const BasicTensor<T>& grad_out,
                         BasicTensor<T>* grad_input, BasicTensor<T>* grad_gamma,
                         BasicTensor<T>* grad_beta);

// ---------------------------------------------------------------------------
// Elementwise.

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input);

// Uses the forward output: d/dx relu = [out > 0].
template <typename T>
void relu_backward(const BasicTensor<T>& output, const BasicTensor<T>& grad_out,
                   BasicTensor<T>* grad_input);

// ---------------------------------------------------------------------------
// 2D convolution, [ci, H, W] -> [co, H, W]. Kernel 1x1 or 3x3, "same" zero
// padding, stride 1.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias);

template <typename T>
void conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                     const BasicTensor<T>& grad_out, BasicTensor<T>* grad_input,
                     BasicTensor<T>* grad_weight, BasicTensor<T>* grad_bias);

// Bilinear resize of [c, H, W] to [c, out_h, out_w], half-pixel centers
// (align_corners = false), source coordinates clamped at the border.
template <typename T>
BasicTensor<T> bilinear_resize(const BasicTensor<T>& input, std::size_t out_h,
                               std::size_t out_w);

template <typename T>
void bilinear_resize_backward(const Shape& input_dims,
                              const BasicTensor<T>& grad_out,
                              BasicTensor<T>* grad_input);

// Nearest-neighbour resize of a 2D map, sampling at pixel centers. Not
// differentiable; used for label maps.
template <typename T>
BasicTensor<T> nearest_resize(const BasicTensor<T>& input, std::size_t out_h,
                              std::size_t out_w);

// Arithmetic mean over the last two dims: [..., hs, ws] -> [...].
template <typename T>
BasicTensor<T> avg_over_support_dims(const BasicTensor<T>& input);

template <typename T>
void avg_over_support_dims_backward(const Shape& input_dims,
                                    const BasicTensor<T>& grad_out,
                                    BasicTensor<T>* grad_input);

// Two-class softmax cross-entropy, averaged over pixels.
// logits [2, H, W], target [H, W] with values in {0, 1}.
template <typename T>
T softmax_cross_entropy(const BasicTensor<T>& logits, const BasicTensor<T>& target);

template <typename T>
void softmax_cross_entropy_backward(const BasicTensor<T>& logits,
                                    const BasicTensor<T>& target, T grad_loss,
                                    BasicTensor<T>* grad_logits);

// Throws DataError unless every value is exactly 0 or 1.
template <typename T>
void expect_binary(const BasicTensor<T>& t, const char* what);

}  // namespace fss::kernels
