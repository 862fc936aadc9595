#include "bevis/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>

#include "bevis/kernels.hpp"

namespace bevis::ops {

namespace {

using detail::Node;
using Index = std::int64_t;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

std::size_t channels_of(const Tensor& x, const char* op) {
  if (x.rank() == 0) throw ShapeError(std::string(op) + ": scalar input");
  return x.shape().back();
}

void require_image(const Tensor& x, const char* op) {
  if (x.rank() != 3) {
    throw ShapeError(std::string(op) + ": expected [H, W, C] image, got " +
                     shape_string(x.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_op_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_op_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const double sign[2] = {1.0, -1.0};
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = *self.parents[k];
      if (!p.requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += sign[k] * self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_op_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i] * pb.value[i];
      if (pb.requires_grad) pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return make_op_result(a.shape(), std::move(out), {a}, [factor](Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += factor * self.grad[i];
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_op_result({1}, {s}, {a}, [](Node& self) {
    auto& p = *self.parents[0];
    for (auto& g : p.grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t c_in = channels_of(x, "dense");
  if (w.rank() != 2 || w.dim(0) != c_in) {
    throw ShapeError("dense: weight " + shape_string(w.shape()) + " incompatible with input " +
                     shape_string(x.shape()));
  }
  const std::size_t c_out = w.dim(1);
  if (b.defined() && (b.rank() != 1 || b.dim(0) != c_out)) {
    throw ShapeError("dense: bias " + shape_string(b.shape()) + " expected [" +
                     std::to_string(c_out) + "]");
  }
  const std::size_t rows = x.size() / c_in;
  std::vector<double> out(rows * c_out);
  kernels::gemm_nn(rows, c_out, c_in, x.data(), w.data(), out);
  if (b.defined()) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c_out; ++j) out[r * c_out + j] += b.data()[j];
  }
  Shape shape = x.shape();
  shape.back() = c_out;
  std::vector<Tensor> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return make_op_result(std::move(shape), std::move(out), inputs,
                        [rows, c_in, c_out](Node& self) {
                          auto& px = *self.parents[0];
                          auto& pw = *self.parents[1];
                          if (px.requires_grad)
                            kernels::gemm_nt(rows, c_in, c_out, self.grad, pw.value, px.grad, true);
                          if (pw.requires_grad)
                            kernels::gemm_tn(c_in, c_out, rows, px.value, self.grad, pw.grad, true);
                          if (self.parents.size() > 2 && self.parents[2]->requires_grad)
                            kernels::column_sums(self.grad, rows, c_out, self.parents[2]->grad);
                        });
}

Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_image(x, "conv3x3");
  const std::size_t h = x.dim(0), wd = x.dim(1), c_in = x.dim(2);
  if (w.shape() != Shape{3, 3, c_in, w.rank() == 4 ? w.dim(3) : 0}) {
    throw ShapeError("conv3x3: kernel " + shape_string(w.shape()) + " incompatible with input " +
                     shape_string(x.shape()));
  }
  const std::size_t c_out = w.dim(3);
  if (b.defined() && (b.rank() != 1 || b.dim(0) != c_out)) {
    throw ShapeError("conv3x3: bias " + shape_string(b.shape()) + " expected [" +
                     std::to_string(c_out) + "]");
  }
  const std::size_t pixels = h * wd;
  const std::size_t patch = 9 * c_in;
  auto col = std::make_shared<std::vector<double>>(pixels * patch);
  kernels::im2col3x3(x.data(), h, wd, c_in, *col);
  std::vector<double> out(pixels * c_out);
  kernels::gemm_nn(pixels, c_out, patch, *col, w.data(), out);
  if (b.defined()) {
    for (std::size_t r = 0; r < pixels; ++r)
      for (std::size_t j = 0; j < c_out; ++j) out[r * c_out + j] += b.data()[j];
  }
  std::vector<Tensor> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return make_op_result(
      {h, wd, c_out}, std::move(out), inputs, [col, h, wd, c_in, c_out, pixels, patch](Node& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        if (pw.requires_grad) kernels::gemm_tn(patch, c_out, pixels, *col, self.grad, pw.grad, true);
        if (self.parents.size() > 2 && self.parents[2]->requires_grad)
          kernels::column_sums(self.grad, pixels, c_out, self.parents[2]->grad);
        if (px.requires_grad) {
          std::vector<double> dcol(pixels * patch);
          kernels::gemm_nt(pixels, patch, c_out, self.grad, pw.value, dcol);
          kernels::col2im3x3(dcol, h, wd, c_in, px.grad);
        }
      });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, x.data()[i]);
  return make_op_result(x.shape(), std::move(out), {x}, [](Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (p.value[i] > 0.0) p.grad[i] += self.grad[i];
  });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormBuffers& buffers, bool training, bool update_running) {
  const std::size_t c = channels_of(x, "batch_norm");
  for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma, &beta, &buffers.running_mean, &buffers.running_var}) {
    if (t->shape() != Shape{c}) {
      throw ShapeError("batch_norm: parameter " + shape_string(t->shape()) + " expected [" +
                       std::to_string(c) + "]");
    }
  }
  const std::size_t rows = x.size() / c;
  if (training && rows == 0) throw ShapeError("batch_norm: empty batch in training mode");

  std::vector<double> mu(c, 0.0), inv_std(c);
  if (training) {
    std::vector<double> var(c, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) mu[j] += x.data()[r * c + j];
    for (auto& m : mu) m /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        const double d = x.data()[r * c + j] - mu[j];
        var[j] += d * d;
      }
    auto rm = buffers.running_mean.mutable_data();
    auto rv = buffers.running_var.mutable_data();
    for (std::size_t j = 0; j < c; ++j) {
      var[j] /= static_cast<double>(rows);
      inv_std[j] = 1.0 / std::sqrt(var[j] + buffers.eps);
      if (!update_running) continue;
      rm[j] = (1.0 - buffers.momentum) * rm[j] + buffers.momentum * mu[j];
      rv[j] = (1.0 - buffers.momentum) * rv[j] + buffers.momentum * var[j];
    }
  } else {
    for (std::size_t j = 0; j < c; ++j) {
      mu[j] = buffers.running_mean.data()[j];
      inv_std[j] = 1.0 / std::sqrt(buffers.running_var.data()[j] + buffers.eps);
    }
  }

  auto xhat = std::make_shared<std::vector<double>>(x.size());
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t i = r * c + j;
      (*xhat)[i] = (x.data()[i] - mu[j]) * inv_std[j];
      out[i] = gamma.data()[j] * (*xhat)[i] + beta.data()[j];
    }

  return make_op_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [xhat, inv_std = std::move(inv_std), rows, c, training](Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            const std::size_t i = r * c + j;
            sum_dy[j] += self.grad[i];
            sum_dy_xhat[j] += self.grad[i] * (*xhat)[i];
          }
        if (pg.requires_grad)
          for (std::size_t j = 0; j < c; ++j) pg.grad[j] += sum_dy_xhat[j];
        if (pb.requires_grad)
          for (std::size_t j = 0; j < c; ++j) pb.grad[j] += sum_dy[j];
        if (!px.requires_grad) return;
        const double n = static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            const std::size_t i = r * c + j;
            const double scale_j = pg.value[j] * inv_std[j];
            if (training) {
              px.grad[i] += scale_j * (self.grad[i] - sum_dy[j] / n -
                                       (*xhat)[i] * sum_dy_xhat[j] / n);
            } else {
              px.grad[i] += scale_j * self.grad[i];
            }
          }
      });
}

Tensor maxpool2x2(const Tensor& x) {
  require_image(x, "maxpool2x2");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (h % 2 || w % 2) {
    throw ShapeError("maxpool2x2: spatial dims must be even, got " + shape_string(x.shape()));
  }
  const std::size_t ho = h / 2, wo = w / 2;
  auto argmax = std::make_shared<std::vector<std::size_t>>(ho * wo * c);
  std::vector<double> out(ho * wo * c);
  for (std::size_t y = 0; y < ho; ++y)
    for (std::size_t xx = 0; xx < wo; ++xx)
      for (std::size_t ch = 0; ch < c; ++ch) {
        std::size_t best = ((2 * y) * w + 2 * xx) * c + ch;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t i = ((2 * y + dy) * w + 2 * xx + dx) * c + ch;
            if (x.data()[i] > x.data()[best]) best = i;
          }
        const std::size_t o = (y * wo + xx) * c + ch;
        (*argmax)[o] = best;
        out[o] = x.data()[best];
      }
  return make_op_result({ho, wo, c}, std::move(out), {x}, [argmax](Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t o = 0; o < self.grad.size(); ++o) p.grad[(*argmax)[o]] += self.grad[o];
  });
}

Tensor upsample2x2(const Tensor& x) {
  require_image(x, "upsample2x2");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const std::size_t ho = 2 * h, wo = 2 * w;
  std::vector<double> out(ho * wo * c);
  for (std::size_t y = 0; y < ho; ++y)
    for (std::size_t xx = 0; xx < wo; ++xx)
      for (std::size_t ch = 0; ch < c; ++ch)
        out[(y * wo + xx) * c + ch] = x.data()[((y / 2) * w + xx / 2) * c + ch];
  return make_op_result({ho, wo, c}, std::move(out), {x}, [w, c, ho, wo](Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xx = 0; xx < wo; ++xx)
        for (std::size_t ch = 0; ch < c; ++ch)
          p.grad[((y / 2) * w + xx / 2) * c + ch] += self.grad[(y * wo + xx) * c + ch];
  });
}

Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape lead = parts[0].shape();
  lead.pop_back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& t : parts) {
    Shape l = t.shape();
    const std::size_t cw = channels_of(t, "concat");
    l.pop_back();
    if (l != lead) {
      throw ShapeError("concat: leading dims " + shape_string(t.shape()) + " vs " +
                       shape_string(parts[0].shape()));
    }
    widths.push_back(cw);
    total += cw;
  }
  const std::size_t rows = shape_numel(lead);
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto src = parts[k].data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(r * widths[k]), widths[k],
                  out.begin() + static_cast<std::ptrdiff_t>(r * total + offset));
    offset += widths[k];
  }
  Shape shape = lead;
  shape.push_back(total);
  return make_op_result(std::move(shape), std::move(out), parts,
                        [widths, rows, total](Node& self) {
                          std::size_t off = 0;
                          for (std::size_t k = 0; k < widths.size(); ++k) {
                            auto& p = *self.parents[k];
                            if (p.requires_grad) {
                              for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t j = 0; j < widths[k]; ++j)
                                  p.grad[r * widths[k] + j] += self.grad[r * total + off + j];
                            }
                            off += widths[k];
                          }
                        });
}

Tensor softmax(const Tensor& x) {
  const std::size_t c = channels_of(x, "softmax");
  const std::size_t rows = x.size() / c;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * c;
    const double mx = *std::max_element(in, in + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (out[r * c + j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] /= z;
  }
  return make_op_result(x.shape(), std::move(out), {x}, [rows, c](Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += self.grad[r * c + j] * self.value[r * c + j];
      for (std::size_t j = 0; j < c; ++j)
        p.grad[r * c + j] += self.value[r * c + j] * (self.grad[r * c + j] - dot);
    }
  });
}

Tensor max_over_neighbors(const Tensor& e, std::size_t k) {
  const std::size_t c = channels_of(e, "max_over_neighbors");
  if (k == 0 || e.rank() != 2 || e.dim(0) % k) {
    throw ShapeError("max_over_neighbors: " + shape_string(e.shape()) +
                     " is not a whole number of groups of " + std::to_string(k));
  }
  const std::size_t n = e.dim(0) / k;
  auto argmax = std::make_shared<std::vector<std::size_t>>(n * c);
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      std::size_t best = (i * k) * c + j;
      for (std::size_t m = 1; m < k; ++m) {
        const std::size_t idx = (i * k + m) * c + j;
        if (e.data()[idx] > e.data()[best]) best = idx;
      }
      (*argmax)[i * c + j] = best;
      out[i * c + j] = e.data()[best];
    }
  return make_op_result({n, c}, std::move(out), {e}, [argmax](Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t o = 0; o < self.grad.size(); ++o) p.grad[(*argmax)[o]] += self.grad[o];
  });
}

Tensor broadcast_row_max(const Tensor& x) {
  const std::size_t c = channels_of(x, "broadcast_row_max");
  if (x.rank() != 2 || x.dim(0) == 0) {
    throw ShapeError("broadcast_row_max: expected non-empty [N, C], got " + shape_string(x.shape()));
  }
  const std::size_t n = x.dim(0);
  auto argmax = std::make_shared<std::vector<std::size_t>>(c);
  for (std::size_t j = 0; j < c; ++j) {
    std::size_t best = j;
    for (std::size_t i = 1; i < n; ++i)
      if (x.data()[i * c + j] > x.data()[best]) best = i * c + j;
    (*argmax)[j] = best;
  }
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x.data()[(*argmax)[j]];
  return make_op_result({n, c}, std::move(out), {x}, [argmax, n, c](Node& self) {
    auto& p = *self.parents[0];
    for (std::size_t j = 0; j < c; ++j) {
      double g = 0.0;
      for (std::size_t i = 0; i < n; ++i) g += self.grad[i * c + j];
      p.grad[(*argmax)[j]] += g;
    }
  });
}

Tensor edge_combine(const Tensor& p, const Tensor& q, std::span<const std::size_t> neighbors,
                    std::size_t k) {
  if (p.rank() != 2 || p.shape() != q.shape()) {
    throw ShapeError("edge_combine: " + shape_string(p.shape()) + " vs " +
                     shape_string(q.shape()));
  }
  const std::size_t n = p.dim(0), c = p.dim(1);
  if (neighbors.size() != n * k) {
    throw ShapeError("edge_combine: graph has " + std::to_string(neighbors.size()) +
                     " entries, expected " + std::to_string(n * k));
  }
  std::vector<double> out(n * k * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t m = 0; m < k; ++m) {
      const std::size_t j = neighbors[i * k + m];
      if (j >= n) throw ShapeError("edge_combine: neighbor index out of range");
      double* dst = out.data() + (i * k + m) * c;
      for (std::size_t t = 0; t < c; ++t)
        dst[t] = p.data()[i * c + t] - q.data()[i * c + t] + q.data()[j * c + t];
    }
  std::vector<std::size_t> nbrs(neighbors.begin(), neighbors.end());
  return make_op_result({n * k, c}, std::move(out), {p, q},
                        [nbrs = std::move(nbrs), n, k, c](Node& self) {
                          auto& pp = *self.parents[0];
                          auto& pq = *self.parents[1];
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t m = 0; m < k; ++m) {
                              const double* g = self.grad.data() + (i * k + m) * c;
                              const std::size_t j = nbrs[i * k + m];
                              for (std::size_t t = 0; t < c; ++t) {
                                if (pp.requires_grad) pp.grad[i * c + t] += g[t];
                                if (pq.requires_grad) {
                                  pq.grad[i * c + t] -= g[t];
                                  pq.grad[j * c + t] += g[t];
                                }
                              }
                            }
                        });
}

Tensor edge_concat(const Tensor& x, std::span<const std::size_t> neighbors, std::size_t k) {
  if (x.rank() != 2) throw ShapeError("edge_concat: expected [N, C], got " + shape_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (neighbors.size() != n * k) throw ShapeError("edge_concat: graph size mismatch");
  std::vector<double> out(n * k * 2 * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t m = 0; m < k; ++m) {
      const std::size_t j = neighbors[i * k + m];
      if (j >= n) throw ShapeError("edge_concat: neighbor index out of range");
      double* dst = out.data() + (i * k + m) * 2 * c;
      for (std::size_t t = 0; t < c; ++t) {
        dst[t] = x.data()[i * c + t];
        dst[c + t] = x.data()[j * c + t] - x.data()[i * c + t];
      }
    }
  std::vector<std::size_t> nbrs(neighbors.begin(), neighbors.end());
  return make_op_result({n * k, 2 * c}, std::move(out), {x},
                        [nbrs = std::move(nbrs), n, k, c](Node& self) {
                          auto& px = *self.parents[0];
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t m = 0; m < k; ++m) {
                              const double* g = self.grad.data() + (i * k + m) * 2 * c;
                              const std::size_t j = nbrs[i * k + m];
                              for (std::size_t t = 0; t < c; ++t) {
                                px.grad[i * c + t] += g[t] - g[c + t];
                                px.grad[j * c + t] += g[c + t];
                              }
                            }
                        });
}

}  // namespace bevis::ops
