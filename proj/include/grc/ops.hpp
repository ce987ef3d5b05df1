#pragma once

#include <span>
#include <vector>

#include "grc/tensor.hpp"

namespace grc::ad {

/// Additive mask value for blocked attention entries.
inline constexpr double kMaskedOut = -1e9;

// Elementwise. `add` also broadcasts `b` when its shape is a suffix of `a`'s.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor clip(const Tensor& a, double lo, double hi);
Tensor minimum(const Tensor& a, const Tensor& b);

// [..., m, k] x [k, n], or batched [B..., m, k] x [B..., k, n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose_last2(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

/// Rows of `table` ([V, d]) at `ids`; result shape is `lead` + [d].
Tensor embedding(const Tensor& table, std::span<const int> ids, Shape lead);

Tensor softmax(const Tensor& a);      // last axis
Tensor log_softmax(const Tensor& a);  // last axis
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
/// Rows of the leading axis at `rows`, in order.
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);

/// Adds a constant mask (entries 0 or kMaskedOut) broadcast over `a`.
/// Mask dims align to the right of `a` and must equal the matching dim or 1.
Tensor masked_fill(const Tensor& a, const Tensor& mask);

/// Value at index `idx[r]` of every last-axis row; negative index yields 0.
Tensor pick(const Tensor& a, std::span<const int> idx);
/// Mean negative log-likelihood of `targets` under softmax(logits [N, V]).
/// Negative targets are ignored.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_last(const Tensor& a);

}  // namespace grc::ad
