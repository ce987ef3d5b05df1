#include "grc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include <cblas.h>

namespace grc::ad {

using detail::make_result;

namespace {

#define REQUIRE(cond, what)                   \
  do {                                        \
    if (!(cond)) throw ContractViolation(what); \
  } while (false)

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  REQUIRE(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

std::size_t last_dim(const Tensor& a) { return a.shape().back(); }

// Accumulates into parent `i` if it participates in the graph.
Node* grad_target(Node& self, std::size_t i) {
  Node* p = self.parents[i].get();
  if (!p->requires_grad) return nullptr;
  p->ensure_grad();
  return p;
}

template <typename Fwd, typename Dfdx>
Tensor unary(const char* op, const Tensor& a, Fwd f, Dfdx dfdx) {
  std::vector<double> out(a.numel());
  auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_result(op, a.shape(), std::move(out), {a}, [dfdx](Node& self) {
    Node* pa = grad_target(self, 0);
    if (!pa) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      pa->grad[i] += self.grad[i] * dfdx(pa->data[i], self.data[i]);
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return make_result("add", a.shape(), std::move(out), {a, b}, [](Node& self) {
      for (std::size_t k = 0; k < 2; ++k) {
        if (Node* p = grad_target(self, k)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        }
      }
    });
  }
  REQUIRE(is_suffix(b.shape(), a.shape()),
          "add: cannot broadcast " + shape_str(b.shape()) + " onto " + shape_str(a.shape()));
  const std::size_t inner = b.numel();
  std::vector<double> out(a.numel());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t r = 0; r < out.size(); r += inner)
    for (std::size_t j = 0; j < inner; ++j) out[r + j] = ad[r + j] + bd[j];
  return make_result("broadcast_add", a.shape(), std::move(out), {a, b}, [inner](Node& self) {
    if (Node* pa = grad_target(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    }
    if (Node* pb = grad_target(self, 1)) {
      for (std::size_t r = 0; r < self.grad.size(); r += inner)
        for (std::size_t j = 0; j < inner; ++j) pb->grad[j] += self.grad[r + j];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result("sub", a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (Node* pa = grad_target(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    }
    if (Node* pb = grad_target(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result("mul", a.shape(), std::move(out), {a, b}, [](Node& self) {
    Node* pa = self.parents[0].get();
    Node* pb = self.parents[1].get();
    if (Node* ga = grad_target(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga->grad[i] += self.grad[i] * pb->data[i];
    }
    if (Node* gb = grad_target(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb->grad[i] += self.grad[i] * pa->data[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  return unary("scale", a, [factor](double x) { return x * factor; },
               [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary("add_scalar", a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0)) throw NumericalFault("log: non-positive input");
  }
  return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor tanh(const Tensor& a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor gelu(const Tensor& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return unary(
      "gelu", a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
      [](double x, double) {
        const double u = c * (x + k * x * x * x);
        const double t = std::tanh(u);
        const double du = c * (1.0 + 3.0 * k * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

Tensor clip(const Tensor& a, double lo, double hi) {
  REQUIRE(lo <= hi, "clip: lo > hi");
  return unary("clip", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "minimum");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(a[i], b[i]);
  // Ties route the gradient to `a`.
  return make_result("minimum", a.shape(), std::move(out), {a, b}, [](Node& self) {
    const Node* pa = self.parents[0].get();
    const Node* pb = self.parents[1].get();
    Node* ga = grad_target(self, 0);
    Node* gb = grad_target(self, 1);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const bool take_a = pa->data[i] <= pb->data[i];
      if (take_a && ga) ga->grad[i] += self.grad[i];
      if (!take_a && gb) gb->grad[i] += self.grad[i];
    }
  });
}

namespace {

bool use_blas(std::size_t m, std::size_t k, std::size_t n) {
  static const bool single = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  return single && m * k * n >= 4096;
}

int as_int(std::size_t v) { return static_cast<int>(v); }

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
  if (use_blas(m, k, n)) {
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, as_int(m), as_int(n), as_int(k), 1.0, A, as_int(k), B,
                as_int(n), 1.0, C, as_int(n));
    return;
  }
  for (std::size_t i = 0; i < m; ++i) {
    double* c = C + i * n;
    const double* arow = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m,k] += A[m,n] * B[k,n]^T
void gemm_nt(const double* A, const double* B, double* C, std::size_t m, std::size_t n, std::size_t k) {
  if (use_blas(m, n, k)) {
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, as_int(m), as_int(k), as_int(n), 1.0, A, as_int(n), B,
                as_int(n), 1.0, C, as_int(k));
    return;
  }
  for (std::size_t i = 0; i < m; ++i) {
    const double* a = A + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* b = B + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += a[j] * b[j];
      C[i * k + p] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
void gemm_tn(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
  if (use_blas(m, k, n)) {
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, as_int(k), as_int(n), as_int(m), 1.0, A, as_int(k), B,
                as_int(n), 1.0, C, as_int(n));
    return;
  }
  for (std::size_t i = 0; i < m; ++i) {
    const double* a = A + i * k;
    const double* b = B + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[p];
      double* c = C + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  REQUIRE(a.rank() >= 2 && b.rank() >= 2, "matmul: operands must have rank >= 2");
  const std::size_t m = a.dim(a.rank() - 2);
  const std::size_t k = a.dim(a.rank() - 1);
  if (b.dim(b.rank() - 2) != k)
    throw ContractViolation("matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t n = b.dim(b.rank() - 1);

  if (b.rank() == 2) {
    // Shared right operand: fold all leading axes of `a` into rows.
    const std::size_t rows = a.numel() / k;
    Shape out_shape = a.shape();
    out_shape.back() = n;
    std::vector<double> out(rows * n, 0.0);
    gemm_nn(a.data().data(), b.data().data(), out.data(), rows, k, n);
    return make_result("matmul", std::move(out_shape), std::move(out), {a, b}, [rows, k, n](Node& self) {
      const Node* pa = self.parents[0].get();
      const Node* pb = self.parents[1].get();
      if (Node* ga = grad_target(self, 0)) gemm_nt(self.grad.data(), pb->data.data(), ga->grad.data(), rows, n, k);
      if (Node* gb = grad_target(self, 1)) gemm_tn(pa->data.data(), self.grad.data(), gb->grad.data(), rows, k, n);
    });
  }

  if (a.rank() != b.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
    throw ContractViolation("matmul: batch dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t batch = a.numel() / (m * k);
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t s = 0; s < batch; ++s) {
    gemm_nn(a.data().data() + s * m * k, b.data().data() + s * k * n, out.data() + s * m * n, m, k, n);
  }
  return make_result("batched_matmul", std::move(out_shape), std::move(out), {a, b},
                     [batch, m, k, n](Node& self) {
                       const Node* pa = self.parents[0].get();
                       const Node* pb = self.parents[1].get();
                       Node* ga = grad_target(self, 0);
                       Node* gb = grad_target(self, 1);
                       for (std::size_t s = 0; s < batch; ++s) {
                         const double* g = self.grad.data() + s * m * n;
                         if (ga) gemm_nt(g, pb->data.data() + s * k * n, ga->grad.data() + s * m * k, m, n, k);
                         if (gb) gemm_tn(pa->data.data() + s * m * k, g, gb->grad.data() + s * k * n, m, k, n);
                       }
                     });
}

Tensor transpose_last2(const Tensor& a) {
  REQUIRE(a.rank() >= 2, "transpose_last2: rank < 2");
  const std::size_t m = a.dim(a.rank() - 2);
  const std::size_t n = a.dim(a.rank() - 1);
  const std::size_t batch = a.numel() / (m * n);
  Shape out_shape = a.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  std::vector<double> out(a.numel());
  auto in = a.data();
  for (std::size_t s = 0; s < batch; ++s) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) out[s * m * n + j * m + i] = in[s * m * n + i * n + j];
    }
  }
  return make_result("transpose", std::move(out_shape), std::move(out), {a}, [batch, m, n](Node& self) {
    Node* pa = grad_target(self, 0);
    if (!pa) return;
    for (std::size_t s = 0; s < batch; ++s) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) pa->grad[s * m * n + i * n + j] += self.grad[s * m * n + j * m + i];
      }
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  REQUIRE(numel_of(shape) == a.numel(), "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {a}, [](Node& self) {
    if (Node* pa = grad_target(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    }
  });
}

Tensor embedding(const Tensor& table, std::span<const int> ids, Shape lead) {
  REQUIRE(table.rank() == 2, "embedding: table must be [V, d]");
  REQUIRE(numel_of(lead) == ids.size(), "embedding: id count does not match lead shape " + shape_str(lead));
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  for (int id : ids) {
    REQUIRE(id >= 0 && static_cast<std::size_t>(id) < vocab,
            "embedding: id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
  }
  std::vector<double> out(ids.size() * d);
  auto t = table.data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    std::copy_n(t.begin() + static_cast<std::ptrdiff_t>(ids[r] * d), d, out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  Shape out_shape = std::move(lead);
  out_shape.push_back(d);
  std::vector<int> id_copy(ids.begin(), ids.end());
  return make_result("embedding", std::move(out_shape), std::move(out), {table},
                     [id_copy = std::move(id_copy), d](Node& self) {
                       Node* pt = grad_target(self, 0);
                       if (!pt) return;
                       for (std::size_t r = 0; r < id_copy.size(); ++r) {
                         double* g = pt->grad.data() + static_cast<std::size_t>(id_copy[r]) * d;
                         const double* s = self.grad.data() + r * d;
                         for (std::size_t j = 0; j < d; ++j) g[j] += s[j];
                       }
                     });
}

Tensor softmax(const Tensor& a) {
  const std::size_t n = last_dim(a);
  const std::size_t rows = a.numel() / n;
  std::vector<double> out(a.numel());
  auto in = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * n;
    double* y = out.data() + r * n;
    const double mx = *std::max_element(x, x + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= total;
  }
  return make_result("softmax", a.shape(), std::move(out), {a}, [rows, n](Node& self) {
    Node* pa = grad_target(self, 0);
    if (!pa) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * n;
      const double* g = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) pa->grad[r * n + j] += y[j] * (g[j] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& a) {
  const std::size_t n = last_dim(a);
  const std::size_t rows = a.numel() / n;
  std::vector<double> out(a.numel());
  auto in = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * n;
    double* y = out.data() + r * n;
    const double mx = *std::max_element(x, x + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(x[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j) y[j] = x[j] - lse;
  }
  return make_result("log_softmax", a.shape(), std::move(out), {a}, [rows, n](Node& self) {
    Node* pa = grad_target(self, 0);
    if (!pa) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * n;
      const double* g = self.grad.data() + r * n;
      double gsum = 0.0;
      for (std::size_t j = 0; j < n; ++j) gsum += g[j];
      for (std::size_t j = 0; j < n; ++j) pa->grad[r * n + j] += g[j] - std::exp(y[j]) * gsum;
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t n = last_dim(x);
  REQUIRE(gamma.rank() == 1 && gamma.dim(0) == n && beta.shape() == gamma.shape(),
          "layer_norm: gamma/beta must be [" + std::to_string(n) + "]");
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  auto in = x.data();
  auto g = gamma.data();
  auto b = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = in.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (xr[j] - mu) * inv_std[r];
      out[r * n + j] = xhat[r * n + j] * g[j] + b[j];
    }
  }
  return make_result(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        const Node* pg = self.parents[1].get();
        Node* gx = grad_target(self, 0);
        Node* gg = grad_target(self, 1);
        Node* gb = grad_target(self, 2);
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* dy = self.grad.data() + r * n;
          const double* xh = xhat.data() + r * n;
          if (gg || gb) {
            for (std::size_t j = 0; j < n; ++j) {
              if (gg) gg->grad[j] += dy[j] * xh[j];
              if (gb) gb->grad[j] += dy[j];
            }
          }
          if (!gx) continue;
          double sum_dxh = 0.0;
          double sum_dxh_xh = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double dxh = dy[j] * pg->data[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j];
          }
          for (std::size_t j = 0; j < n; ++j) {
            const double dxh = dy[j] * pg->data[j];
            gx->grad[r * n + j] += inv_std[r] * (dxh - inv_n * sum_dxh - xh[j] * inv_n * sum_dxh_xh);
          }
        }
      });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  REQUIRE(!parts.empty(), "concat: no inputs");
  const Shape& first = parts.front().shape();
  REQUIRE(axis < first.size(), "concat: axis out of range");
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  std::vector<std::size_t> widths;
  std::size_t total_axis = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    REQUIRE(s.size() == first.size(), "concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      REQUIRE(i == axis || s[i] == first[i], "concat: shape mismatch " + shape_str(s) + " vs " + shape_str(first));
    }
    widths.push_back(s[axis] * inner);
    total_axis += s[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = total_axis;
  const std::size_t row = total_axis * inner;
  std::vector<double> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto src = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * widths[k]), widths[k],
                  out.begin() + static_cast<std::ptrdiff_t>(o * row + offset));
    }
    offset += widths[k];
  }
  return make_result("concat", std::move(out_shape), std::move(out), parts, [outer, row, widths](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (Node* p = grad_target(self, k)) {
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t j = 0; j < widths[k]; ++j) p->grad[o * widths[k] + j] += self.grad[o * row + off + j];
        }
      }
      off += widths[k];
    }
  });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  REQUIRE(axis < a.rank(), "slice: axis out of range");
  REQUIRE(length > 0 && start + length <= a.dim(axis),
          "slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) + ") outside axis of " +
              std::to_string(a.dim(axis)));
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const std::size_t src_row = a.dim(axis) * inner;
  const std::size_t dst_row = length * inner;
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  std::vector<double> out(outer * dst_row);
  auto in = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(o * src_row + start * inner), dst_row,
                out.begin() + static_cast<std::ptrdiff_t>(o * dst_row));
  }
  return make_result("slice", std::move(out_shape), std::move(out), {a},
                     [outer, src_row, dst_row, offset = start * inner](Node& self) {
                       Node* pa = grad_target(self, 0);
                       if (!pa) return;
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t j = 0; j < dst_row; ++j) {
                           pa->grad[o * src_row + offset + j] += self.grad[o * dst_row + j];
                         }
                       }
                     });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  REQUIRE(a.rank() >= 1 && !rows.empty(), "gather_rows: empty selection");
  const std::size_t width = a.numel() / a.dim(0);
  for (auto r : rows) REQUIRE(r < a.dim(0), "gather_rows: row index out of range");
  Shape out_shape = a.shape();
  out_shape[0] = rows.size();
  std::vector<double> out(rows.size() * width);
  auto in = a.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(rows[i] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result("gather_rows", std::move(out_shape), std::move(out), {a}, [idx = std::move(idx), width](Node& self) {
    Node* pa = grad_target(self, 0);
    if (!pa) return;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t j = 0; j < width; ++j) pa->grad[idx[i] * width + j] += self.grad[i * width + j];
    }
  });
}

Tensor masked_fill(const Tensor& a, const Tensor& mask) {
  REQUIRE(mask.rank() <= a.rank(), "masked_fill: mask rank exceeds input rank");
  for (double v : mask.data()) {
    REQUIRE(v == 0.0 || v == kMaskedOut, "masked_fill: mask entries must be 0 or the masked-out constant");
  }
  const std::size_t rank = a.rank();
  const std::size_t pad = rank - mask.rank();
  // Strides of the mask expressed on `a`'s axes (0 where broadcast).
  std::vector<std::size_t> mstride(rank, 0);
  {
    std::size_t s = 1;
    for (std::size_t i = mask.rank(); i-- > 0;) {
      const std::size_t md = mask.dim(i);
      const std::size_t ad = a.dim(i + pad);
      REQUIRE(md == ad || md == 1, "masked_fill: cannot broadcast mask " + shape_str(mask.shape()) + " onto " +
                                       shape_str(a.shape()));
      mstride[i + pad] = (md == 1) ? 0 : s;
      s *= md;
    }
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  std::vector<std::size_t> counter(rank, 0);
  auto m = mask.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::size_t mi = 0;
    for (std::size_t ax = 0; ax < rank; ++ax) mi += counter[ax] * mstride[ax];
    out[i] += m[mi];
    for (std::size_t ax = rank; ax-- > 0;) {
      if (++counter[ax] < a.dim(ax)) break;
      counter[ax] = 0;
    }
  }
  return make_result("masked_fill", a.shape(), std::move(out), {a}, [](Node& self) {
    if (Node* pa = grad_target(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    }
  });
}

Tensor pick(const Tensor& a, std::span<const int> idx) {
  const std::size_t n = last_dim(a);
  const std::size_t rows = a.numel() / n;
  REQUIRE(idx.size() == rows, "pick: expected " + std::to_string(rows) + " indices, got " + std::to_string(idx.size()));
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (idx[r] < 0) continue;
    REQUIRE(static_cast<std::size_t>(idx[r]) < n, "pick: index " + std::to_string(idx[r]) + " outside row of " +
                                                      std::to_string(n));
    out[r] = a[r * n + static_cast<std::size_t>(idx[r])];
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<int> ids(idx.begin(), idx.end());
  return make_result("pick", std::move(out_shape), std::move(out), {a}, [ids = std::move(ids), n](Node& self) {
    Node* pa = grad_target(self, 0);
    if (!pa) return;
    for (std::size_t r = 0; r < ids.size(); ++r) {
      if (ids[r] >= 0) pa->grad[r * n + static_cast<std::size_t>(ids[r])] += self.grad[r];
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  REQUIRE(logits.rank() == 2, "cross_entropy: logits must be [N, V]");
  const std::size_t rows = logits.dim(0);
  const std::size_t n = logits.dim(1);
  REQUIRE(targets.size() == rows, "cross_entropy: target count mismatch");
  std::vector<double> probs(logits.numel());
  double total = 0.0;
  std::size_t counted = 0;
  auto in = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * n;
    double* p = probs.data() + r * n;
    const double mx = *std::max_element(x, x + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (p[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) p[j] /= z;
    if (targets[r] < 0) continue;
    REQUIRE(static_cast<std::size_t>(targets[r]) < n, "cross_entropy: target outside vocabulary");
    total += -(x[targets[r]] - mx - std::log(z));
    ++counted;
  }
  REQUIRE(counted > 0, "cross_entropy: every target is ignored");
  const double inv = 1.0 / static_cast<double>(counted);
  std::vector<int> tg(targets.begin(), targets.end());
  return make_result("cross_entropy", {1}, {total * inv}, {logits},
                     [probs = std::move(probs), tg = std::move(tg), n, inv](Node& self) {
                       Node* pl = grad_target(self, 0);
                       if (!pl) return;
                       const double g = self.grad[0] * inv;
                       for (std::size_t r = 0; r < tg.size(); ++r) {
                         if (tg[r] < 0) continue;
                         for (std::size_t j = 0; j < n; ++j) {
                           const double onehot = (static_cast<int>(j) == tg[r]) ? 1.0 : 0.0;
                           pl->grad[r * n + j] += g * (probs[r * n + j] - onehot);
                         }
                       }
                     });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return make_result("sum", {1}, {total}, {a}, [](Node& self) {
    if (Node* pa = grad_target(self, 0)) {
      for (double& g : pa->grad) g += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum_last(const Tensor& a) {
  const std::size_t n = last_dim(a);
  const std::size_t rows = a.numel() / n;
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r] += a[r * n + j];
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  if (out_shape.empty()) out_shape.push_back(1);
  return make_result("sum_last", std::move(out_shape), std::move(out), {a}, [n](Node& self) {
    Node* pa = grad_target(self, 0);
    if (!pa) return;
    for (std::size_t r = 0; r < self.grad.size(); ++r) {
      for (std::size_t j = 0; j < n; ++j) pa->grad[r * n + j] += self.grad[r];
    }
  });
}

}  // namespace grc::ad
