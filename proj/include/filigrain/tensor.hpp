#pragma once

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "filigrain/error.hpp"

namespace filigrain {

// ---------------------------------------------------------------------------
// Tensor: dense row-major doubles with an optional gradient buffer.
//
// A Tensor is a cheap handle onto shared storage. Values are treated as
// immutable once the tensor has entered a Tape op; only the gradient buffer
// accumulates afterwards. All math runs in 64-bit floats.
// ---------------------------------------------------------------------------
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape, double fill = 0.0,
                  bool requires_grad = false) {
    impl_ = std::make_shared<Impl>();
    impl_->shape = std::move(shape);
    impl_->values.assign(count(impl_->shape), fill);
    impl_->requires_grad = requires_grad;
  }

  static Tensor from_values(std::vector<int> shape, std::vector<double> values,
                            bool requires_grad = false) {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    check(count(shape) == static_cast<std::int64_t>(values.size()),
          Error::Kind::dimension, "tensor shape does not match value count");
    t.impl_->shape = std::move(shape);
    t.impl_->values = std::move(values);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_values({1}, {v}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  int size() const { return static_cast<int>(impl_->values.size()); }
  int rows() const { return dim(0); }
  int cols() const { return dim(1); }

  std::span<const double> values() const { return impl_->values; }
  // For filling fresh tensors (initializers, loaders) before any op sees them.
  std::span<double> mutable_values() { return impl_->values; }

  double scalar_value() const {
    check(size() == 1, Error::Kind::rank, "tensor is not a scalar");
    return impl_->values[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool b) { impl_->requires_grad = b; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const {
    ensure_grad();
    return impl_->grad;
  }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }
  void accumulate_grad(std::span<const double> g) {
    ensure_grad();
    check(g.size() == impl_->grad.size(), Error::Kind::dimension,
          "gradient size mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) impl_->grad[i] += g[i];
  }

  // Stable identity for gradient bookkeeping.
  const void* id() const { return impl_.get(); }

  bool all_finite() const {
    for (double v : impl_->values)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  struct Impl {
    std::vector<int> shape;
    std::vector<double> values;
    mutable std::vector<double> grad;  // lazily sized
    bool requires_grad = false;
  };

  static std::int64_t count(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
      check(d >= 0, Error::Kind::dimension, "negative dimension");
      n *= d;
    }
    return n;
  }

  void ensure_grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
  }

  std::shared_ptr<Impl> impl_;
};

// Nearest IEEE binary16 value (round-to-nearest-even), returned at full
// width. Models the fp32->fp16 cast applied to features before simulated
// node communication.
inline double half_round_value(double x) {
  if (x == 0.0 || std::isnan(x)) {
    check(!std::isnan(x), Error::Kind::numeric, "half_round: NaN input");
    return x;  // preserves signed zero
  }
  const double ax = std::fabs(x);
  check(ax <= 65504.0, Error::Kind::overflow,
        "half_round: magnitude exceeds binary16 range");
  int e = 0;
  std::frexp(ax, &e);        // ax = m * 2^e with m in [0.5, 1)
  e -= 1;                    // exponent with m in [1, 2)
  if (e < -14) e = -14;      // subnormal half values share the 2^-24 quantum
  const double quantum = std::ldexp(1.0, e - 10);
  // nearbyint rounds half-to-even under the default FP environment.
  const double q = std::nearbyint(ax / quantum) * quantum;
  return std::copysign(q, x);
}

struct MaxRowsResult {
  Tensor values;            // shape {m}
  std::vector<int> argmax;  // per-row column index, ties -> lowest index
};

// ---------------------------------------------------------------------------
// Tape: reverse-mode autodiff over recorded ops.
//
// Ops compute values eagerly and, when recording and some input requires a
// gradient, push a backward closure. Gradients live in tape-local buffers so
// distinct tapes can run on distinct threads with no shared mutable state;
// backward(loss) additionally flushes leaf gradients into the tensors'
// own grad buffers, accumulating additively across calls.
// ---------------------------------------------------------------------------
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }

  // --- elementwise -----------------------------------------------------

  Tensor add(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), Error::Kind::dimension, "add: shape mismatch");
    Tensor out(a.shape());
    auto ov = out.mutable_values();
    auto av = a.values(), bv = b.values();
    for (int i = 0; i < a.size(); ++i) ov[i] = av[i] + bv[i];
    if (track(out, {&a, &b})) {
      push([a, b, out](Tape& t) {
        const auto* g = t.local_grad(out);
        if (!g) return;
        if (a.requires_grad()) t.add_to_grad(a, *g);
        if (b.requires_grad()) t.add_to_grad(b, *g);
      });
    }
    return out;
  }

  // x[m x n] + row[n], broadcast over rows (the one broadcast encoders need).
  Tensor add_row(const Tensor& x, const Tensor& row) {
    check(x.rank() == 2 && row.rank() == 1 && x.cols() == row.dim(0),
          Error::Kind::dimension, "add_row: shape mismatch");
    const int m = x.rows(), n = x.cols();
    Tensor out({m, n});
    auto ov = out.mutable_values();
    auto xv = x.values(), rv = row.values();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) ov[i * n + j] = xv[i * n + j] + rv[j];
    if (track(out, {&x, &row})) {
      push([x, row, out, m, n](Tape& t) {
        const auto* g = t.local_grad(out);
        if (!g) return;
        if (x.requires_grad()) t.add_to_grad(x, *g);
        if (row.requires_grad()) {
          auto& rg = t.grad_buffer(row);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) rg[j] += (*g)[i * n + j];
        }
      });
    }
    return out;
  }

  Tensor mul(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), Error::Kind::dimension, "mul: shape mismatch");
    Tensor out(a.shape());
    auto ov = out.mutable_values();
    auto av = a.values(), bv = b.values();
    for (int i = 0; i < a.size(); ++i) ov[i] = av[i] * bv[i];
    if (track(out, {&a, &b})) {
      push([a, b, out](Tape& t) {
        const auto* g = t.local_grad(out);
        if (!g) return;
        if (a.requires_grad()) {
          auto& ag = t.grad_buffer(a);
          auto bv2 = b.values();
          for (int i = 0; i < a.size(); ++i) ag[i] += (*g)[i] * bv2[i];
        }
        if (b.requires_grad()) {
          auto& bg = t.grad_buffer(b);
          auto av2 = a.values();
          for (int i = 0; i < b.size(); ++i) bg[i] += (*g)[i] * av2[i];
        }
      });
    }
    return out;
  }

  Tensor scale(const Tensor& x, double c) {
    Tensor out(x.shape());
    auto ov = out.mutable_values();
    auto xv = x.values();
    for (int i = 0; i < x.size(); ++i) ov[i] = xv[i] * c;
    if (track(out, {&x})) {
      push([x, out, c](Tape& t) {
        const auto* g = t.local_grad(out);
        if (!g) return;
        auto& xg = t.grad_buffer(x);
        for (int i = 0; i < x.size(); ++i) xg[i] += (*g)[i] * c;
      });
    }
    return out;
  }

  // out = x / s with s a learnable scalar (shape {1}).
  Tensor div_scalar(const Tensor& x, const Tensor& s) {
    check(s.size() == 1, Error::Kind::rank, "div_scalar: divisor must be scalar");
    const double sv = s.values()[0];
    check(sv != 0.0, Error::Kind::numeric, "div_scalar: zero divisor");
    Tensor out(x.shape());
    auto ov = out.mutable_values();
    auto xv = x.values();
    for (int i = 0; i < x.size(); ++i) ov[i] = xv[i] / sv;
    if (track(out, {&x, &s})) {
      push([x, s, out, sv](Tape& t) {
        const auto* g = t.local_grad(out);
        if (!g) return;
        if (x.requires_grad()) {
          auto& xg = t.grad_buffer(x);
          for (int i = 0; i < x.size(); ++i) xg[i] += (*g)[i] / sv;
        }
        if (s.requires_grad()) {
          auto xv2 = x.values();
          double acc = 0.0;
          for (int i = 0; i < x.size(); ++i) acc += (*g)[i] * xv2[i];
          t.grad_buffer(s)[0] += -acc / (sv * sv);
        }
      });
    }
    return out;
  }

  Tensor gelu(const Tensor& x) {
    static constexpr double inv_sqrt2 = 0.70710678118654752440;
    static constexpr double inv_sqrt2pi = 0.39894228040143267794;
    Tensor out(x.shape());
    auto ov = out.mutable_values();
    auto xv = x.values();
    for (int i = 0; i < x.size(); ++i)
      ov[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * inv_sqrt2));
    if (track(out, {&x})) {
      push([x, out](Tape& t) {
        const auto* g = t.local_grad(out);
        if (!g) return;
        auto& xg = t.grad_buffer(x);
        auto xv2 = x.values();
        for (int i = 0; i < x.size(); ++i) {
          const double v = xv2[i];
          const double phi = inv_sqrt2pi * std::exp(-0.5 * v * v);
          const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
          xg[i] += (*g)[i] * (cdf + v * phi);
        }
      });
    }
    return out;
  }

  Tensor half_round(const Tensor& x) {
    Tensor out(x.shape());
    auto ov = out.mutable_values();
    auto xv = x.values();
    for (int i = 0; i < x.size(); ++i) ov[i] = half_round_value(xv[i]);
    // Straight-through: the cast is treated as identity in backward, the
    // same convention real mixed-precision training uses.
    if (track(out, {&x})) {
      push([x, out](Tape& t) {
        const auto* g = t.local_grad(out);
        if (!g) return;
        t.add_to_grad(x, *g);
      });
    }
    return out;
  }

  // --- matrix ops -------------------------------------------------------

  Tensor matmul(const Tensor& a, const Tensor& b) {
    check(a.rank() == 2 && b.rank() == 2, Error::Kind::rank,
          "matmul: rank-2 tensors required");
    check(a.cols() == b.rows(), Error::Kind::dimension,
          "matmul: inner dimensions differ");
    const int m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out({m, n});
    matmul_into(out.mutable_values(), a.values(), b.values(), m, k, n);
    if (track(out, {&a, &b})) {
      push([a, b, out, m, k, n](Tape& t) {
        const auto* g = t.local_grad(out);
        if (!g) return;
        if (a.requires_grad()) {  // dA = dC . B^T
          auto& ag = t.grad_buffer(a);
          auto bv = b.values();
          for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
              double acc = 0.0;
              for (int j = 0; j < n; ++j) acc += (*g)[i * n + j] * bv[p * n + j];
              ag[i * k + p] += acc;
            }
        }
        if (b.requires_grad()) {  // dB = A^T . dC
          auto& bg = t.grad_buffer(b);
          auto av = a.values();
          for (int i = 0; i < m; ++i) {
            const double* grow = g->data() + static_cast<std::size_t>(i) * n;
            for (int p = 0; p < k; ++p) {
              const double aval = av[i * k + p];
              if (aval == 0.0) continue;
              double* brow = bg.data() + static_cast<std::size_t>(p) * n;
              for (int j = 0; j < n; ++j) brow[j] += aval * grow[j];
            }
          }
        }
      });
    }
    return out;
  }

  Tensor transpose(const Tensor& x) {
    check(x.rank() == 2, Error::Kind::rank, "transpose: rank-2 required");
    const int m = x.rows(), n = x.cols();
    Tensor out({n, m});
    auto ov = out.mutable_values();
    auto xv = x.values();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) ov[j * m + i] = xv[i * n + j];
    if (track(out, {&x})) {
      push([x, out, m, n](Tape& t) {
        const auto* g = t.local_grad(out);
        if (!g) return;
        auto& xg = t.grad_buffer(x);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) xg[i * n + j] += (*g)[j * m + i];
      });
    }
    return out;
  }

  // --- row-structured ops ------------------------------------------------

  Tensor softmax_rows(const Tensor& x) {
    check(x.rank() == 2, Error::Kind::rank, "softmax_rows: rank-2 required");
    const int m = x.rows(), n = x.cols();
    Tensor out({m, n});
    auto ov = out.mutable_values();
    auto xv = x.values();
    for (int i = 0; i < m; ++i) {
      double mx = xv[i * n];
      for (int j = 1; j < n; ++j) mx = std::max(mx, xv[i * n + j]);
      double denom = 0.0;
      for (int j = 0; j < n; ++j) {
        const double e = std::exp(xv[i * n + j] - mx);
        ov[i * n + j] = e;
        denom += e;
      }
      for (int j = 0; j < n; ++j) ov[i * n + j] /= denom;
    }
    if (track(out, {&x})) {
      push([x, out, m, n](Tape& t) {
        const auto* g = t.local_grad(out);
        if (!g) return;
        auto& xg = t.grad_buffer(x);
        auto yv = out.values();
        for (int i = 0; i < m; ++i) {
          double dot = 0.0;
          for (int j = 0; j < n; ++j) dot += (*g)[i * n + j] * yv[i * n + j];
          for (int j = 0; j < n; ++j)
            xg[i * n + j] += yv[i * n + j] * ((*g)[i * n + j] - dot);
        }
      });
    }
    return out;
  }

  Tensor log_softmax_rows(const Tensor& x) {
    check(x.rank() == 2, Error::Kind::rank, "log_softmax_rows: rank-2 required");
    const int m = x.rows(), n = x.cols();
    Tensor out({m, n});
    auto ov = out.mutable_values();
    auto xv = x.values();
    for (int i = 0; i < m; ++i) {
      double mx = xv[i * n];
      for (int j = 1; j < n; ++j) mx = std::max(mx, xv[i * n + j]);
      double denom = 0.0;
      for (int j = 0; j < n; ++j) denom += std::exp(xv[i * n + j] - mx);
      const double lse = mx + std::log(denom);
      for (int j = 0; j < n; ++j) ov[i * n + j] = xv[i * n + j] - lse;
    }
    if (track(out, {&x})) {
      push([x, out, m, n](Tape& t) {
        const auto* g = t.local_grad(out);
        if (!g) return;
        auto& xg = t.grad_buffer(x);
        auto lv = out.values();
        for (int i = 0; i < m; ++i) {
          double gsum = 0.0;
          for (int j = 0; j < n; ++j) gsum += (*g)[i * n + j];
          for (int j = 0; j < n; ++j)
            xg[i * n + j] += (*g)[i * n + j] - std::exp(lv[i * n + j]) * gsum;
        }
      });
    }
    return out;
  }

  Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-8) {
    check(x.rank() == 2, Error::Kind::rank, "l2_normalize_rows: rank-2 required");
    const int m = x.rows(), n = x.cols();
    Tensor out({m, n});
    auto ov = out.mutable_values();
    auto xv = x.values();
    std::vector<double> norms(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
      double ss = 0.0;
      for (int j = 0; j < n; ++j) ss += xv[i * n + j] * xv[i * n + j];
      const double norm = std::max(std::sqrt(ss), eps);
      norms[static_cast<std::size_t>(i)] = norm;
      for (int j = 0; j < n; ++j) ov[i * n + j] = xv[i * n + j] / norm;
    }
    if (track(out, {&x})) {
      push([x, out, m, n, norms = std::move(norms), eps](Tape& t) {
        const auto* g = t.local_grad(out);
        if (!g) return;
        auto& xg = t.grad_buffer(x);
        auto yv = out.values();
        for (int i = 0; i < m; ++i) {
          const double norm = norms[static_cast<std::size_t>(i)];
          if (norm <= eps) {  // floored: out = x / eps, a plain scaling
            for (int j = 0; j < n; ++j) xg[i * n + j] += (*g)[i * n + j] / eps;
            continue;
          }
          double dot = 0.0;
          for (int j = 0; j < n; ++j) dot += (*g)[i * n + j] * yv[i * n + j];
          for (int j = 0; j < n; ++j)
            xg[i * n + j] += ((*g)[i * n + j] - yv[i * n + j] * dot) / norm;
        }
      });
    }
    return out;
  }

  Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
    check(x.rank() == 2, Error::Kind::rank, "layer_norm_rows: rank-2 required");
    const int m = x.rows(), n = x.cols();
    check(gain.rank() == 1 && gain.dim(0) == n && bias.rank() == 1 &&
              bias.dim(0) == n,
          Error::Kind::dimension, "layer_norm_rows: gain/bias shape mismatch");
    Tensor out({m, n});
    Tensor xhat({m, n});  // cached for backward
    auto ov = out.mutable_values();
    auto hv = xhat.mutable_values();
    auto xv = x.values(), gv = gain.values(), bv = bias.values();
    std::vector<double> inv_std(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
      double mean = 0.0;
      for (int j = 0; j < n; ++j) mean += xv[i * n + j];
      mean /= n;
      double var = 0.0;
      for (int j = 0; j < n; ++j) {
        const double d = xv[i * n + j] - mean;
        var += d * d;
      }
      var /= n;
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(i)] = is;
      for (int j = 0; j < n; ++j) {
        const double h = (xv[i * n + j] - mean) * is;
        hv[i * n + j] = h;
        ov[i * n + j] = h * gv[j] + bv[j];
      }
    }
    if (track(out, {&x, &gain, &bias})) {
      push([x, gain, bias, out, xhat, m, n,
            inv_std = std::move(inv_std)](Tape& t) {
        const auto* g = t.local_grad(out);
        if (!g) return;
        auto hv2 = xhat.values();
        auto gv2 = gain.values();
        if (gain.requires_grad()) {
          auto& gg = t.grad_buffer(gain);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) gg[j] += (*g)[i * n + j] * hv2[i * n + j];
        }
        if (bias.requires_grad()) {
          auto& bg = t.grad_buffer(bias);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) bg[j] += (*g)[i * n + j];
        }
        if (x.requires_grad()) {
          auto& xg = t.grad_buffer(x);
          for (int i = 0; i < m; ++i) {
            double sum_gy = 0.0, sum_gyh = 0.0;
            for (int j = 0; j < n; ++j) {
              const double gy = (*g)[i * n + j] * gv2[j];
              sum_gy += gy;
              sum_gyh += gy * hv2[i * n + j];
            }
            const double is = inv_std[static_cast<std::size_t>(i)];
            for (int j = 0; j < n; ++j) {
              const double gy = (*g)[i * n + j] * gv2[j];
              xg[i * n + j] +=
                  is * (gy - sum_gy / n - hv2[i * n + j] * sum_gyh / n);
            }
          }
        }
      });
    }
    return out;
  }

  // Per-row maximum over columns where mask[j] is true. Ties break to the
  // lowest index; backward routes the whole gradient to the argmax entry.
  MaxRowsResult masked_max_rows(const Tensor& x,
                                const std::vector<std::uint8_t>& mask) {
    check(x.rank() == 2, Error::Kind::rank, "masked_max_rows: rank-2 required");
    const int m = x.rows(), n = x.cols();
    check(static_cast<int>(mask.size()) == n, Error::Kind::dimension,
          "masked_max_rows: mask length mismatch");
    bool any = false;
    for (std::uint8_t b : mask) any = any || (b != 0);
    check(any, Error::Kind::empty_candidates,
          "masked_max_rows: mask has no true entry");
    Tensor out({m});
    std::vector<int> arg(static_cast<std::size_t>(m), -1);
    auto ov = out.mutable_values();
    auto xv = x.values();
    for (int i = 0; i < m; ++i) {
      double best = 0.0;
      int best_j = -1;
      for (int j = 0; j < n; ++j) {
        if (!mask[static_cast<std::size_t>(j)]) continue;
        const double v = xv[i * n + j];
        if (best_j < 0 || v > best) {
          best = v;
          best_j = j;
        }
      }
      ov[i] = best;
      arg[static_cast<std::size_t>(i)] = best_j;
    }
    MaxRowsResult res{out, std::move(arg)};
    if (track(res.values, {&x})) {
      push([x, out = res.values, arg = res.argmax, m, n](Tape& t) {
        const auto* g = t.local_grad(out);
        if (!g) return;
        auto& xg = t.grad_buffer(x);
        for (int i = 0; i < m; ++i)
          xg[i * n + arg[static_cast<std::size_t>(i)]] += (*g)[i];
      });
    }
    return res;
  }

  // Mean of the entries of a vector where mask is true -> scalar.
  Tensor masked_mean(const Tensor& v, const std::vector<std::uint8_t>& mask) {
    check(v.rank() == 1, Error::Kind::rank, "masked_mean: rank-1 required");
    const int n = v.dim(0);
    check(static_cast<int>(mask.size()) == n, Error::Kind::dimension,
          "masked_mean: mask length mismatch");
    int cnt = 0;
    for (std::uint8_t b : mask) cnt += (b != 0);
    check(cnt > 0, Error::Kind::empty_candidates, "masked_mean: empty mask");
    double acc = 0.0;
    auto vv = v.values();
    for (int i = 0; i < n; ++i)
      if (mask[static_cast<std::size_t>(i)]) acc += vv[i];
    Tensor out = Tensor::scalar(acc / cnt);
    if (track(out, {&v})) {
      push([v, out, mask, n, cnt](Tape& t) {
        const auto* g = t.local_grad(out);
        if (!g) return;
        auto& vg = t.grad_buffer(v);
        const double share = (*g)[0] / cnt;
        for (int i = 0; i < n; ++i)
          if (mask[static_cast<std::size_t>(i)]) vg[i] += share;
      });
    }
    return out;
  }

  // Mean over the rows selected by mask -> {1 x n}.
  Tensor masked_mean_rows(const Tensor& x, const std::vector<std::uint8_t>& mask) {
    check(x.rank() == 2, Error::Kind::rank, "masked_mean_rows: rank-2 required");
    const int m = x.rows(), n = x.cols();
    check(static_cast<int>(mask.size()) == m, Error::Kind::dimension,
          "masked_mean_rows: mask length mismatch");
    int cnt = 0;
    for (std::uint8_t b : mask) cnt += (b != 0);
    check(cnt > 0, Error::Kind::empty_candidates, "masked_mean_rows: empty mask");
    Tensor out({1, n});
    auto ov = out.mutable_values();
    auto xv = x.values();
    for (int i = 0; i < m; ++i) {
      if (!mask[static_cast<std::size_t>(i)]) continue;
      for (int j = 0; j < n; ++j) ov[j] += xv[i * n + j];
    }
    for (int j = 0; j < n; ++j) ov[j] /= cnt;
    if (track(out, {&x})) {
      push([x, out, mask, m, n, cnt](Tape& t) {
        const auto* g = t.local_grad(out);
        if (!g) return;
        auto& xg = t.grad_buffer(x);
        for (int i = 0; i < m; ++i) {
          if (!mask[static_cast<std::size_t>(i)]) continue;
          for (int j = 0; j < n; ++j) xg[i * n + j] += (*g)[j] / cnt;
        }
      });
    }
    return out;
  }

  Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    Tensor out = Tensor::scalar(acc);
    if (track(out, {&x})) {
      push([x, out](Tape& t) {
        const auto* g = t.local_grad(out);
        if (!g) return;
        auto& xg = t.grad_buffer(x);
        for (int i = 0; i < x.size(); ++i) xg[i] += (*g)[0];
      });
    }
    return out;
  }

  // --- reshaping / gathering ---------------------------------------------

  Tensor take_rows(const Tensor& x, const std::vector<int>& rows) {
    check(x.rank() == 2, Error::Kind::rank, "take_rows: rank-2 required");
    const int m = x.rows(), n = x.cols();
    Tensor out({static_cast<int>(rows.size()), n});
    auto ov = out.mutable_values();
    auto xv = x.values();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      check(rows[r] >= 0 && rows[r] < m, Error::Kind::dimension,
            "take_rows: row index out of range");
      std::copy_n(xv.data() + static_cast<std::size_t>(rows[r]) * n, n,
                  ov.data() + r * static_cast<std::size_t>(n));
    }
    if (track(out, {&x})) {
      push([x, out, rows, n](Tape& t) {
        const auto* g = t.local_grad(out);
        if (!g) return;
        auto& xg = t.grad_buffer(x);
        for (std::size_t r = 0; r < rows.size(); ++r)
          for (int j = 0; j < n; ++j)
            xg[static_cast<std::size_t>(rows[r]) * n + j] +=
                (*g)[r * static_cast<std::size_t>(n) + j];
      });
    }
    return out;
  }

  Tensor slice_cols(const Tensor& x, int start, int width) {
    check(x.rank() == 2, Error::Kind::rank, "slice_cols: rank-2 required");
    const int m = x.rows(), n = x.cols();
    check(start >= 0 && width > 0 && start + width <= n, Error::Kind::dimension,
          "slice_cols: range out of bounds");
    Tensor out({m, width});
    auto ov = out.mutable_values();
    auto xv = x.values();
    for (int i = 0; i < m; ++i)
      std::copy_n(xv.data() + static_cast<std::size_t>(i) * n + start, width,
                  ov.data() + static_cast<std::size_t>(i) * width);
    if (track(out, {&x})) {
      push([x, out, start, width, m, n](Tape& t) {
        const auto* g = t.local_grad(out);
        if (!g) return;
        auto& xg = t.grad_buffer(x);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < width; ++j)
            xg[i * n + start + j] += (*g)[i * width + j];
      });
    }
    return out;
  }

  Tensor concat_rows(const std::vector<Tensor>& parts) {
    check(!parts.empty(), Error::Kind::empty_candidates, "concat_rows: no parts");
    const int n = parts.front().cols();
    int m = 0;
    for (const Tensor& p : parts) {
      check(p.rank() == 2 && p.cols() == n, Error::Kind::dimension,
            "concat_rows: column mismatch");
      m += p.rows();
    }
    Tensor out({m, n});
    auto ov = out.mutable_values();
    int row = 0;
    for (const Tensor& p : parts) {
      std::copy_n(p.values().data(), p.size(),
                  ov.data() + static_cast<std::size_t>(row) * n);
      row += p.rows();
    }
    std::vector<const Tensor*> ins;
    for (const Tensor& p : parts) ins.push_back(&p);
    if (track(out, ins)) {
      push([parts, out, n](Tape& t) {
        const auto* g = t.local_grad(out);
        if (!g) return;
        int row = 0;
        for (const Tensor& p : parts) {
          if (p.requires_grad()) {
            auto& pg = t.grad_buffer(p);
            for (int i = 0; i < p.size(); ++i)
              pg[i] += (*g)[static_cast<std::size_t>(row) * n + i];
          }
          row += p.rows();
        }
      });
    }
    return out;
  }

  Tensor concat_cols(const std::vector<Tensor>& parts) {
    check(!parts.empty(), Error::Kind::empty_candidates, "concat_cols: no parts");
    const int m = parts.front().rows();
    int n = 0;
    for (const Tensor& p : parts) {
      check(p.rank() == 2 && p.rows() == m, Error::Kind::dimension,
            "concat_cols: row mismatch");
      n += p.cols();
    }
    Tensor out({m, n});
    auto ov = out.mutable_values();
    int col = 0;
    for (const Tensor& p : parts) {
      const int w = p.cols();
      auto pv = p.values();
      for (int i = 0; i < m; ++i)
        std::copy_n(pv.data() + static_cast<std::size_t>(i) * w, w,
                    ov.data() + static_cast<std::size_t>(i) * n + col);
      col += w;
    }
    std::vector<const Tensor*> ins;
    for (const Tensor& p : parts) ins.push_back(&p);
    if (track(out, ins)) {
      push([parts, out, m, n](Tape& t) {
        const auto* g = t.local_grad(out);
        if (!g) return;
        int col = 0;
        for (const Tensor& p : parts) {
          const int w = p.cols();
          if (p.requires_grad()) {
            auto& pg = t.grad_buffer(p);
            for (int i = 0; i < m; ++i)
              for (int j = 0; j < w; ++j)
                pg[i * w + j] += (*g)[static_cast<std::size_t>(i) * n + col + j];
          }
          col += w;
        }
      });
    }
    return out;
  }

  Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
    check(table.rank() == 2, Error::Kind::rank, "embedding_lookup: rank-2 table");
    const int v = table.rows(), w = table.cols();
    for (int id : ids)
      check(id >= 0 && id < v, Error::Kind::vocabulary,
            "embedding_lookup: id outside vocabulary");
    Tensor out({static_cast<int>(ids.size()), w});
    auto ov = out.mutable_values();
    auto tv = table.values();
    for (std::size_t i = 0; i < ids.size(); ++i)
      std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * w, w,
                  ov.data() + i * static_cast<std::size_t>(w));
    if (track(out, {&table})) {
      push([table, out, ids, w](Tape& t) {
        const auto* g = t.local_grad(out);
        if (!g) return;
        auto& tg = t.grad_buffer(table);
        for (std::size_t i = 0; i < ids.size(); ++i)
          for (int j = 0; j < w; ++j)
            tg[static_cast<std::size_t>(ids[i]) * w + j] +=
                (*g)[i * static_cast<std::size_t>(w) + j];
      });
    }
    return out;
  }

  // Assemble scalars (each shape {1}) into a rows x cols matrix, row-major.
  Tensor stack_scalars(const std::vector<Tensor>& cells, int rows, int cols) {
    check(static_cast<int>(cells.size()) == rows * cols, Error::Kind::dimension,
          "stack_scalars: cell count mismatch");
    Tensor out({rows, cols});
    auto ov = out.mutable_values();
    for (std::size_t i = 0; i < cells.size(); ++i) {
      check(cells[i].size() == 1, Error::Kind::rank,
            "stack_scalars: non-scalar cell");
      ov[i] = cells[i].values()[0];
    }
    std::vector<const Tensor*> ins;
    for (const Tensor& c : cells) ins.push_back(&c);
    if (track(out, ins)) {
      push([cells, out](Tape& t) {
        const auto* g = t.local_grad(out);
        if (!g) return;
        for (std::size_t i = 0; i < cells.size(); ++i)
          if (cells[i].requires_grad()) t.grad_buffer(cells[i])[0] += (*g)[i];
      });
    }
    return out;
  }

  // --- autodiff ----------------------------------------------------------

  // Backward from a scalar loss. Flushes leaf gradients (tensors fed into
  // this tape but not produced by it) into their grad buffers, accumulating
  // additively across calls.
  void backward(const Tensor& loss) {
    check(loss.size() == 1, Error::Kind::rank, "backward: loss must be scalar");
    const double one = 1.0;
    seed_grad(loss, std::span<const double>(&one, 1));
    backward_seeded();
    flush_leaf_grads();
  }

  void seed_grad(const Tensor& t, std::span<const double> g) {
    auto& buf = grad_buffer(t);
    check(buf.size() == g.size(), Error::Kind::dimension,
          "seed_grad: size mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
  }

  // Runs the recorded nodes in reverse using whatever seeds are present.
  // Does not flush into tensors; use grad_of / flush_leaf_grads.
  void backward_seeded() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)(*this);
  }

  // Tape-local gradient of any tensor this tape touched (null if none).
  const std::vector<double>* grad_of(const Tensor& t) const {
    auto it = grads_.find(t.id());
    return it == grads_.end() ? nullptr : &it->second;
  }

  void flush_leaf_grads() {
    for (Tensor& leaf : leaves_) {
      auto it = grads_.find(leaf.id());
      if (it != grads_.end()) leaf.accumulate_grad(it->second);
    }
  }

  void clear_grads() { grads_.clear(); }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  // Returns true when a backward node should be recorded; marks the output.
  bool track(Tensor& out, const std::vector<const Tensor*>& inputs) {
    if (!recording_) return false;
    bool any = false;
    for (const Tensor* in : inputs) any = any || in->requires_grad();
    if (!any) return false;
    out.set_requires_grad(true);
    for (const Tensor* in : inputs) {
      if (in->requires_grad() && !produced_.contains(in->id()) &&
          !leaf_ids_.contains(in->id())) {
        leaf_ids_.insert(in->id());
        leaves_.push_back(*in);
      }
    }
    produced_.insert(out.id());
    return true;
  }

  void push(std::function<void(Tape&)> fn) { nodes_.push_back(std::move(fn)); }

  const std::vector<double>* local_grad(const Tensor& t) const {
    return grad_of(t);
  }

  std::vector<double>& grad_buffer(const Tensor& t) {
    auto it = grads_.find(t.id());
    if (it == grads_.end())
      it = grads_.emplace(t.id(), std::vector<double>(t.size(), 0.0)).first;
    return it->second;
  }

  void add_to_grad(const Tensor& t, const std::vector<double>& g) {
    auto& buf = grad_buffer(t);
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
  }

  static void matmul_into(std::span<double> out, std::span<const double> a,
                          std::span<const double> b, int m, int k, int n) {
    // ikj order: streams rows of b, auto-vectorizes cleanly.
    for (int i = 0; i < m; ++i) {
      double* orow = out.data() + static_cast<std::size_t>(i) * n;
      std::fill_n(orow, n, 0.0);
      for (int p = 0; p < k; ++p) {
        const double aval = a[static_cast<std::size_t>(i) * k + p];
        if (aval == 0.0) continue;
        const double* brow = b.data() + static_cast<std::size_t>(p) * n;
        for (int j = 0; j < n; ++j) orow[j] += aval * brow[j];
      }
    }
  }

  bool recording_;
  std::vector<std::function<void(Tape&)>> nodes_;
  std::unordered_map<const void*, std::vector<double>> grads_;
  std::unordered_set<const void*> produced_;
  std::unordered_set<const void*> leaf_ids_;
  std::vector<Tensor> leaves_;
};

}  // namespace filigrain
