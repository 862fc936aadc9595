#pragma once

// Differentiable operators used by the two networks. Image tensors are
// single HWC images ([H, W, C]); point tensors are [N, C]. Channel-wise ops
// act on the last axis and treat all leading axes as rows.

#include <cstddef>
#include <span>
#include <vector>

#include "bevis/tensor.hpp"

namespace bevis::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// x[..., C]·w[C, C'] + b[C'].  `b` may be undefined.
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b);
/// Stride-1, same-padded 3×3 convolution. w is [3, 3, C, C'].
Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor relu(const Tensor& x);

struct BatchNormBuffers {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel normalization. Training mode uses batch statistics over all
/// leading rows and (unless update_running is false) updates the running
/// buffers; eval mode uses the frozen running statistics.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormBuffers& buffers, bool training, bool update_running = true);

Tensor maxpool2x2(const Tensor& x);
Tensor upsample2x2(const Tensor& x);
/// Concatenate along the last axis; leading axes must agree.
Tensor concat(const std::vector<Tensor>& parts);
Tensor softmax(const Tensor& x);

/// e is [N·k, C] grouped by row; returns [N, C] with the max over each group.
Tensor max_over_neighbors(const Tensor& e, std::size_t k);
/// x is [N, C]; every output row holds the column-wise max of x.
Tensor broadcast_row_max(const Tensor& x);
/// Edge pre-activations for a linear layer on concat(x_i, x_j − x_i):
/// out[i·k + m] = p_i − q_i + q_{nbr(i, m)}, where p = x·W_self, q = x·W_diff.
Tensor edge_combine(const Tensor& p, const Tensor& q, std::span<const std::size_t> neighbors,
                    std::size_t k);
/// Explicit [N·k, 2C] edge features concat(x_i, x_j − x_i).
Tensor edge_concat(const Tensor& x, std::span<const std::size_t> neighbors, std::size_t k);

}  // namespace bevis::ops
