// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor operations. Every op takes the tape it records on;
// nothing is recorded when no input requires grad or the tape is paused.
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "vexpert/tensor.hpp"

namespace vexpert::ops {

/// Batched matrix product over the last two dimensions. Leading dimensions
/// must be equal, or one operand must have none (or all ones), in which case
/// it is shared across the other's batch.
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);

Tensor transpose_last2(Tape& tape, const Tensor& x);

/// [A, B, C, D] -> [A, C, B, D]; converts between [batch, seq, heads, dim]
/// and [batch, heads, seq, dim].
Tensor swap_axes12(Tape& tape, const Tensor& x);

Tensor reshape(Tape& tape, const Tensor& x, Shape shape);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, double factor);

/// Adds a vector of length dim(-1) to every row.
Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias);

Tensor silu(Tape& tape, const Tensor& x);

/// x / sqrt(mean(x^2) + eps) * gain along the last dimension.
Tensor rmsnorm(Tape& tape, const Tensor& x, const Tensor& gain, double eps);

/// Softmax over the last dimension. Accepts -inf entries; a row that is
/// entirely -inf raises DomainError.
Tensor softmax_lastdim(Tape& tape, const Tensor& x);

/// Which key columns each query row of each sequence may attend to.
struct AttentionMask {
  std::int64_t batch = 0;
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<std::uint8_t> allowed;  // [batch, rows, cols]

  bool at(std::int64_t b, std::int64_t i, std::int64_t j) const {
    return allowed[static_cast<std::size_t>((b * rows + i) * cols + j)] != 0;
  }
};

/// Softmax of scores [batch, heads, rows, cols] restricted to the allowed
/// entries of `mask` (shared across heads). Disallowed entries get exactly
/// zero probability; equivalent to adding -inf before softmax_lastdim.
Tensor masked_softmax(Tape& tape, const Tensor& scores, const AttentionMask& mask);

/// Rows of `table` [V, D] selected by `ids`, shape [ids.size(), D].
Tensor embed(Tape& tape, const Tensor& table, std::span<const std::int64_t> ids);

/// Mean over rows of -log softmax(logits)[target]. `logits` is [N, V] (or
/// [V] with one target).
Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const std::int64_t> targets);

/// Concatenation along the sequence dimension (dim -2).
Tensor concat_seq(Tape& tape, const Tensor& a, const Tensor& b);

/// Inverse of concat_seq: rows [0, at) and [at, L) of dim -2.
std::pair<Tensor, Tensor> split_seq(Tape& tape, const Tensor& x, std::int64_t at);

/// Rows of x along dim 0.
Tensor gather_rows(Tape& tape, const Tensor& x, std::span<const std::int64_t> rows);

struct RowGroup {
  Tensor rows;                       // [n, ...]
  std::vector<std::int64_t> target;  // destination row of each input row
};

/// Scatters the groups into a tensor of `n_rows` rows. Every destination row
/// must be written exactly once.
Tensor interleave_rows(Tape& tape, std::span<const RowGroup> groups, std::int64_t n_rows);

/// Rotary embedding of x [..., L, head_dim]: each (even, odd) pair of the
/// head dimension is rotated by position * theta^(-2i/head_dim).
/// `positions` has L entries (shared by every leading index) or, for rank-4
/// x [B, H, L, hd], B*L entries.
Tensor rope(Tape& tape, const Tensor& x, std::span<const std::int64_t> positions, double theta);

/// Rotary embedding applied per head to flat rows x [N, heads * head_dim],
/// one position per row. Same rotation as rope() on the split-head layout.
Tensor rope_rows(Tape& tape, const Tensor& x, std::span<const std::int64_t> positions, std::int64_t heads,
                 double theta);

/// Multi-head scaled dot-product attention on flat rows. q, k, v are
/// [batch * length, heads * head_dim] with sequence b on rows b*length ..
/// b*length + length - 1; per head the result is
/// masked_softmax(q k^T / sqrt(head_dim)) v, merged back to the flat layout.
/// Equivalent to the split-head composition of matmul, scale and
/// masked_softmax, in one recorded op.
Tensor attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v, std::int64_t heads,
                 const AttentionMask& mask);

/// silu(a) * b, the SwiGLU gate.
Tensor silu_mul(Tape& tape, const Tensor& a, const Tensor& b);

Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);

/// Inverted dropout; identity when p == 0.
Tensor dropout(Tape& tape, const Tensor& x, double p, std::mt19937_64& rng);

}  // namespace vexpert::ops
