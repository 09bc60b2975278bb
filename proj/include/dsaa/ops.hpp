#pragma once

#include <cstddef>
#include <vector>

#include "dsaa/tensor.hpp"

// Differentiable primitives. Every function records a node on the active
// Tape when any input requires a gradient. Matrices are rank 2 and row-major;
// "last axis" operations treat a vector as a single row.
namespace dsaa::ops {

enum class GeluForm { Exact, Tanh };
/// Form used by gelu(). Exact is x * Phi(x) with the error function.
inline constexpr GeluForm kGeluForm = GeluForm::Exact;

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

/// x [m x n] + v [n] on every row.
Tensor add_row(const Tensor& x, const Tensor& v);
/// x [m x n] * v [n] elementwise on every row.
Tensor mul_row(const Tensor& x, const Tensor& v);
/// x * s where s has exactly one element.
Tensor mul_scalar(const Tensor& x, const Tensor& s);
/// x / s where s has exactly one element.
Tensor div_scalar(const Tensor& x, const Tensor& s);

Tensor gelu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor abs(const Tensor& x);
/// Elementwise clamp into [lo, hi]; the gradient passes only where x is inside.
Tensor clamp(const Tensor& x, double lo, double hi);

/// Sum / mean of all elements, returned as a one-element vector.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Mean over the rows of a matrix, [m x n] -> [n].
Tensor mean_rows(const Tensor& x);
/// Euclidean norm of all elements, one-element vector.
Tensor l2_norm(const Tensor& x);

/// Layer normalization over the last axis with affine gamma/beta of size D.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
/// Layer normalization with unit scale and zero shift.
Tensor layer_norm(const Tensor& x, double eps);

Tensor softmax_lastaxis(const Tensor& x);
Tensor log_softmax_lastaxis(const Tensor& x);

/// Stacks matrices (or vectors, as single rows) along the sequence axis.
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows);
/// Row r of a matrix as a vector [n].
Tensor row(const Tensor& x, std::size_t r);

/// Returns x with the listed rows multiplied elementwise by s [n]; all other
/// rows pass through untouched.
Tensor modulate_rows(const Tensor& x, const std::vector<std::size_t>& rows, const Tensor& s);

/// Mean binary cross-entropy with logits, in the log-sum-exp stable form.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

// Composites.
Tensor dot(const Tensor& a, const Tensor& b);
/// Cosine similarity of two equally shaped tensors; eps guards the norms.
Tensor cosine(const Tensor& a, const Tensor& b, double eps = 1e-12);

}  // namespace dsaa::ops
