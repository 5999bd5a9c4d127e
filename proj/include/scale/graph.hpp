#pragma once

// Reverse-mode autodiff on a tape of tensor nodes. Nodes are appended in
// forward order, which is a valid reverse topological order for backward().
// Gradients accumulate additively into Parameter::grad; callers zero them
// between steps.

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "scale/tensor.hpp"

namespace scale {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor<T>::zeros(value.shape)) {}

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), T(0)); }
  i64 numel() const { return value.numel(); }
};

struct Var {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

template <class T>
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  const Tensor<T>& value(Var v) const { return nodes_[check(v)].value; }

  // ---- graph construction ----

  Var constant(Tensor<T> t) { return push(std::move(t), false, nullptr); }

  Var leaf(Parameter<T>& p) {
    auto it = leaf_cache_.find(&p);
    if (it != leaf_cache_.end()) return it->second;
    Tensor<T> copy = p.value;
    Var v = push(std::move(copy), grad_enabled_, &p);
    leaf_cache_.emplace(&p, v);
    return v;
  }

  Var matmul(Var a, Var b, bool trans_b = false) {
    const Tensor<T>& av = nodes_[check(a)].value;
    const Tensor<T>& bv = nodes_[check(b)].value;
    Tensor<T> out = scale::matmul(av, bv, trans_b);
    return make(std::move(out), {a, b}, [a, b, trans_b](Graph& g, int self) {
      const Tensor<T>& gout = g.nodes_[self].grad;
      const Tensor<T>& av = g.nodes_[a.idx].value;
      const Tensor<T>& bv = g.nodes_[b.idx].value;
      i64 m = av.rows(), k = av.cols(), n = gout.cols();
      if (g.wants_grad(a)) {
        Tensor<T>& ga = g.grad_buf(a);
        // d/dA: g * B^T (no trans_b) or g * B (trans_b)
        detail::gemm(false, !trans_b, m, k, n, gout.data.data(), bv.data.data(),
                     ga.data.data(), true);
      }
      if (g.wants_grad(b)) {
        Tensor<T>& gb = g.grad_buf(b);
        if (!trans_b)  // d/dB: A^T * g
          detail::gemm(true, false, k, n, m, av.data.data(), gout.data.data(),
                       gb.data.data(), true);
        else  // value = A * B^T, B is n x k: d/dB = g^T * A
          detail::gemm(true, false, n, k, m, gout.data.data(), av.data.data(),
                       gb.data.data(), true);
      }
    });
  }

  Var add(Var a, Var b) {
    const Tensor<T>& av = nodes_[check(a)].value;
    const Tensor<T>& bv = nodes_[check(b)].value;
    if (!av.same_shape(bv))
      throw std::invalid_argument("add: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    Tensor<T> out = av;
    for (i64 i = 0; i < out.numel(); ++i) out.data[i] += bv.data[i];
    return make(std::move(out), {a, b}, [a, b](Graph& g, int self) {
      const Tensor<T>& gout = g.nodes_[self].grad;
      for (Var p : {a, b})
        if (g.wants_grad(p)) {
          Tensor<T>& gp = g.grad_buf(p);
          for (i64 i = 0; i < gout.numel(); ++i) gp.data[i] += gout.data[i];
        }
    });
  }

  Var sub(Var a, Var b) {
    const Tensor<T>& av = nodes_[check(a)].value;
    const Tensor<T>& bv = nodes_[check(b)].value;
    if (!av.same_shape(bv))
      throw std::invalid_argument("sub: shape mismatch");
    Tensor<T> out = av;
    for (i64 i = 0; i < out.numel(); ++i) out.data[i] -= bv.data[i];
    return make(std::move(out), {a, b}, [a, b](Graph& g, int self) {
      const Tensor<T>& gout = g.nodes_[self].grad;
      if (g.wants_grad(a)) {
        Tensor<T>& ga = g.grad_buf(a);
        for (i64 i = 0; i < gout.numel(); ++i) ga.data[i] += gout.data[i];
      }
      if (g.wants_grad(b)) {
        Tensor<T>& gb = g.grad_buf(b);
        for (i64 i = 0; i < gout.numel(); ++i) gb.data[i] -= gout.data[i];
      }
    });
  }

  // x (m x n) + row (broadcast across rows)
  Var add_row(Var x, Var row) {
    const Tensor<T>& xv = nodes_[check(x)].value;
    const Tensor<T>& rv = nodes_[check(row)].value;
    i64 m = xv.rows(), n = xv.cols();
    if (rv.numel() != n) throw std::invalid_argument("add_row: width mismatch");
    Tensor<T> out = xv;
    for (i64 i = 0; i < m; ++i) {
      T* o = out.row_ptr(i);
      for (i64 j = 0; j < n; ++j) o[j] += rv.data[static_cast<size_t>(j)];
    }
    return make(std::move(out), {x, row}, [x, row, m, n](Graph& g, int self) {
      const Tensor<T>& gout = g.nodes_[self].grad;
      if (g.wants_grad(x)) {
        Tensor<T>& gx = g.grad_buf(x);
        for (i64 i = 0; i < gout.numel(); ++i) gx.data[i] += gout.data[i];
      }
      if (g.wants_grad(row)) {
        Tensor<T>& gr = g.grad_buf(row);
        for (i64 i = 0; i < m; ++i) {
          const T* go = gout.row_ptr(i);
          for (i64 j = 0; j < n; ++j) gr.data[static_cast<size_t>(j)] += go[j];
        }
      }
    });
  }

  Var scale_by(Var x, T c) {
    Tensor<T> out = nodes_[check(x)].value;
    for (T& v : out.data) v *= c;
    return make(std::move(out), {x}, [x, c](Graph& g, int self) {
      const Tensor<T>& gout = g.nodes_[self].grad;
      if (!g.wants_grad(x)) return;
      Tensor<T>& gx = g.grad_buf(x);
      for (i64 i = 0; i < gout.numel(); ++i) gx.data[i] += c * gout.data[i];
    });
  }

  Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
    i64 n = nodes_[check(parts[0])].value.cols();
    i64 m = 0;
    for (Var p : parts) {
      const Tensor<T>& v = nodes_[check(p)].value;
      if (v.cols() != n) throw std::invalid_argument("concat_rows: width mismatch");
      m += v.rows();
    }
    Tensor<T> out = Tensor<T>::zeros({m, n});
    i64 r = 0;
    for (Var p : parts) {
      const Tensor<T>& v = nodes_[p.idx].value;
      std::copy(v.data.begin(), v.data.end(), out.data.begin() + r * n);
      r += v.rows();
    }
    std::vector<Var> own(parts.begin(), parts.end());
    return make(std::move(out), own, [own, n](Graph& g, int self) {
      const Tensor<T>& gout = g.nodes_[self].grad;
      i64 r = 0;
      for (Var p : own) {
        i64 rows = g.nodes_[p.idx].value.rows();
        if (g.wants_grad(p)) {
          Tensor<T>& gp = g.grad_buf(p);
          const T* src = gout.data.data() + r * n;
          for (i64 i = 0; i < rows * n; ++i) gp.data[i] += src[i];
        }
        r += rows;
      }
    });
  }

  Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    i64 m = nodes_[check(parts[0])].value.rows();
    i64 n = 0;
    for (Var p : parts) {
      const Tensor<T>& v = nodes_[check(p)].value;
      if (v.rows() != m) throw std::invalid_argument("concat_cols: height mismatch");
      n += v.cols();
    }
    Tensor<T> out = Tensor<T>::zeros({m, n});
    i64 c = 0;
    for (Var p : parts) {
      const Tensor<T>& v = nodes_[p.idx].value;
      i64 vc = v.cols();
      for (i64 i = 0; i < m; ++i)
        std::copy(v.row_ptr(i), v.row_ptr(i) + vc, out.row_ptr(i) + c);
      c += vc;
    }
    std::vector<Var> own(parts.begin(), parts.end());
    return make(std::move(out), own, [own, m](Graph& g, int self) {
      const Tensor<T>& gout = g.nodes_[self].grad;
      i64 c = 0;
      for (Var p : own) {
        i64 vc = g.nodes_[p.idx].value.cols();
        if (g.wants_grad(p)) {
          Tensor<T>& gp = g.grad_buf(p);
          for (i64 i = 0; i < m; ++i) {
            const T* src = gout.row_ptr(i) + c;
            T* dst = gp.row_ptr(i);
            for (i64 j = 0; j < vc; ++j) dst[j] += src[j];
          }
        }
        c += vc;
      }
    });
  }

  Var slice_rows(Var x, i64 begin, i64 count) {
    const Tensor<T>& xv = nodes_[check(x)].value;
    i64 n = xv.cols();
    if (begin < 0 || count <= 0 || begin + count > xv.rows())
      throw std::invalid_argument("slice_rows: out of range");
    Tensor<T> out = Tensor<T>::zeros({count, n});
    std::copy(xv.data.begin() + begin * n, xv.data.begin() + (begin + count) * n, out.data.begin());
    return make(std::move(out), {x}, [x, begin, count, n](Graph& g, int self) {
      if (!g.wants_grad(x)) return;
      const Tensor<T>& gout = g.nodes_[self].grad;
      Tensor<T>& gx = g.grad_buf(x);
      T* dst = gx.data.data() + begin * n;
      for (i64 i = 0; i < count * n; ++i) dst[i] += gout.data[i];
    });
  }

  Var slice_cols(Var x, i64 begin, i64 count) {
    const Tensor<T>& xv = nodes_[check(x)].value;
    i64 m = xv.rows(), n = xv.cols();
    if (begin < 0 || count <= 0 || begin + count > n)
      throw std::invalid_argument("slice_cols: out of range");
    Tensor<T> out = Tensor<T>::zeros({m, count});
    for (i64 i = 0; i < m; ++i)
      std::copy(xv.row_ptr(i) + begin, xv.row_ptr(i) + begin + count, out.row_ptr(i));
    return make(std::move(out), {x}, [x, begin, count, m](Graph& g, int self) {
      if (!g.wants_grad(x)) return;
      const Tensor<T>& gout = g.nodes_[self].grad;
      Tensor<T>& gx = g.grad_buf(x);
      for (i64 i = 0; i < m; ++i) {
        const T* src = gout.row_ptr(i);
        T* dst = gx.row_ptr(i) + begin;
        for (i64 j = 0; j < count; ++j) dst[j] += src[j];
      }
    });
  }

  // Embedding-style row lookup; duplicate indices accumulate on backward.
  Var gather_rows(Var x, std::vector<i64> idx) {
    const Tensor<T>& xv = nodes_[check(x)].value;
    i64 n = xv.cols(), m = static_cast<i64>(idx.size());
    if (m == 0) throw std::invalid_argument("gather_rows: empty index list");
    for (i64 r : idx)
      if (r < 0 || r >= xv.rows()) throw std::invalid_argument("gather_rows: index out of range");
    Tensor<T> out = Tensor<T>::zeros({m, n});
    for (i64 i = 0; i < m; ++i)
      std::copy(xv.row_ptr(idx[static_cast<size_t>(i)]),
                xv.row_ptr(idx[static_cast<size_t>(i)]) + n, out.row_ptr(i));
    return make(std::move(out), {x}, [x, idx = std::move(idx), n](Graph& g, int self) {
      if (!g.wants_grad(x)) return;
      const Tensor<T>& gout = g.nodes_[self].grad;
      Tensor<T>& gx = g.grad_buf(x);
      for (size_t i = 0; i < idx.size(); ++i) {
        const T* src = gout.row_ptr(static_cast<i64>(i));
        T* dst = gx.row_ptr(idx[i]);
        for (i64 j = 0; j < n; ++j) dst[j] += src[j];
      }
    });
  }

  // m x n -> m x 1, entry i = x[i, cols[i]]
  Var pick_per_row(Var x, std::vector<i64> cols) {
    const Tensor<T>& xv = nodes_[check(x)].value;
    i64 m = xv.rows(), n = xv.cols();
    if (static_cast<i64>(cols.size()) != m)
      throw std::invalid_argument("pick_per_row: index count must equal rows");
    for (i64 c : cols)
      if (c < 0 || c >= n) throw std::invalid_argument("pick_per_row: column out of range");
    Tensor<T> out = Tensor<T>::zeros({m, 1});
    for (i64 i = 0; i < m; ++i) out.data[static_cast<size_t>(i)] = xv.at(i, cols[static_cast<size_t>(i)]);
    return make(std::move(out), {x}, [x, cols = std::move(cols)](Graph& g, int self) {
      if (!g.wants_grad(x)) return;
      const Tensor<T>& gout = g.nodes_[self].grad;
      Tensor<T>& gx = g.grad_buf(x);
      for (size_t i = 0; i < cols.size(); ++i)
        gx.at(static_cast<i64>(i), cols[i]) += gout.data[i];
    });
  }

  Var mean_all(Var x) {
    const Tensor<T>& xv = nodes_[check(x)].value;
    i64 n = xv.numel();
    T sum = T(0);
    for (T v : xv.data) sum += v;
    Tensor<T> out = Tensor<T>::full({1, 1}, sum / static_cast<T>(n));
    return make(std::move(out), {x}, [x, n](Graph& g, int self) {
      if (!g.wants_grad(x)) return;
      T go = g.nodes_[self].grad.data[0] / static_cast<T>(n);
      Tensor<T>& gx = g.grad_buf(x);
      for (T& v : gx.data) v += go;
    });
  }

  Var gelu(Var x) {
    const Tensor<T>& xv = nodes_[check(x)].value;
    Tensor<T> out = xv;
    // cdf = 0.5 * (1 + erf(x / sqrt(2))), reused by backward
    auto cdf = std::make_shared<std::vector<T>>(xv.data.size());
    for (size_t i = 0; i < xv.data.size(); ++i) {
      T c = T(0.5) * (T(1) + std::erf(xv.data[i] * T(0.7071067811865475)));
      (*cdf)[i] = c;
      out.data[i] = xv.data[i] * c;
    }
    return make(std::move(out), {x}, [x, cdf](Graph& g, int self) {
      if (!g.wants_grad(x)) return;
      const Tensor<T>& gout = g.nodes_[self].grad;
      const Tensor<T>& xv = g.nodes_[x.idx].value;
      Tensor<T>& gx = g.grad_buf(x);
      constexpr T inv_sqrt_2pi = T(0.3989422804014327);
      for (size_t i = 0; i < gout.data.size(); ++i) {
        T xi = xv.data[i];
        T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * xi * xi);
        gx.data[i] += gout.data[i] * ((*cdf)[i] + xi * pdf);
      }
    });
  }

  Var layer_norm(Var x, Var gain, Var bias, T eps) {
    const Tensor<T>& xv = nodes_[check(x)].value;
    const Tensor<T>& gv = nodes_[check(gain)].value;
    const Tensor<T>& bv = nodes_[check(bias)].value;
    i64 m = xv.rows(), n = xv.cols();
    if (gv.numel() != n || bv.numel() != n)
      throw std::invalid_argument("layer_norm: gain/bias length must match row width");
    Tensor<T> out = Tensor<T>::zeros({m, n});
    auto xhat = std::make_shared<Tensor<T>>(Tensor<T>::zeros({m, n}));
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(m));
    for (i64 i = 0; i < m; ++i) {
      const T* in = xv.row_ptr(i);
      T mean = T(0);
      for (i64 j = 0; j < n; ++j) mean += in[j];
      mean /= static_cast<T>(n);
      T var = T(0);
      for (i64 j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
      var /= static_cast<T>(n);
      T inv = T(1) / std::sqrt(var + eps);
      (*inv_std)[static_cast<size_t>(i)] = inv;
      T* xh = xhat->row_ptr(i);
      T* o = out.row_ptr(i);
      for (i64 j = 0; j < n; ++j) {
        xh[j] = (in[j] - mean) * inv;
        o[j] = gv.data[static_cast<size_t>(j)] * xh[j] + bv.data[static_cast<size_t>(j)];
      }
    }
    return make(std::move(out), {x, gain, bias},
                [x, gain, bias, xhat, inv_std, m, n](Graph& g, int self) {
      const Tensor<T>& gout = g.nodes_[self].grad;
      const Tensor<T>& gv = g.nodes_[gain.idx].value;
      if (g.wants_grad(gain)) {
        Tensor<T>& gg = g.grad_buf(gain);
        for (i64 i = 0; i < m; ++i) {
          const T* go = gout.row_ptr(i);
          const T* xh = xhat->row_ptr(i);
          for (i64 j = 0; j < n; ++j) gg.data[static_cast<size_t>(j)] += go[j] * xh[j];
        }
      }
      if (g.wants_grad(bias)) {
        Tensor<T>& gb = g.grad_buf(bias);
        for (i64 i = 0; i < m; ++i) {
          const T* go = gout.row_ptr(i);
          for (i64 j = 0; j < n; ++j) gb.data[static_cast<size_t>(j)] += go[j];
        }
      }
      if (g.wants_grad(x)) {
        Tensor<T>& gx = g.grad_buf(x);
        for (i64 i = 0; i < m; ++i) {
          const T* go = gout.row_ptr(i);
          const T* xh = xhat->row_ptr(i);
          T inv = (*inv_std)[static_cast<size_t>(i)];
          T mean_gg = T(0), mean_ggx = T(0);
          for (i64 j = 0; j < n; ++j) {
            T w = go[j] * gv.data[static_cast<size_t>(j)];
            mean_gg += w;
            mean_ggx += w * xh[j];
          }
          mean_gg /= static_cast<T>(n);
          mean_ggx /= static_cast<T>(n);
          T* dst = gx.row_ptr(i);
          for (i64 j = 0; j < n; ++j) {
            T w = go[j] * gv.data[static_cast<size_t>(j)];
            dst[j] += inv * (w - mean_gg - xh[j] * mean_ggx);
          }
        }
      }
    });
  }

  Var l2_normalize_rows(Var x) {
    const Tensor<T>& xv = nodes_[check(x)].value;
    i64 m = xv.rows(), n = xv.cols();
    Tensor<T> out = Tensor<T>::zeros({m, n});
    auto norms = std::make_shared<std::vector<T>>(static_cast<size_t>(m));
    for (i64 i = 0; i < m; ++i) {
      const T* in = xv.row_ptr(i);
      T sq = T(0);
      for (i64 j = 0; j < n; ++j) sq += in[j] * in[j];
      T norm = std::sqrt(sq);
      if (norm == T(0)) throw std::domain_error("l2_normalize_rows: zero-norm row");
      (*norms)[static_cast<size_t>(i)] = norm;
      T* o = out.row_ptr(i);
      for (i64 j = 0; j < n; ++j) o[j] = in[j] / norm;
    }
    return make(std::move(out), {x}, [x, norms, m, n](Graph& g, int self) {
      if (!g.wants_grad(x)) return;
      const Tensor<T>& gout = g.nodes_[self].grad;
      const Tensor<T>& yv = g.nodes_[self].value;
      Tensor<T>& gx = g.grad_buf(x);
      for (i64 i = 0; i < m; ++i) {
        const T* go = gout.row_ptr(i);
        const T* y = yv.row_ptr(i);
        T dot = T(0);
        for (i64 j = 0; j < n; ++j) dot += go[j] * y[j];
        T inv = T(1) / (*norms)[static_cast<size_t>(i)];
        T* dst = gx.row_ptr(i);
        for (i64 j = 0; j < n; ++j) dst[j] += (go[j] - y[j] * dot) * inv;
      }
    });
  }

  // softmax(x / temperature) per row.
  Var row_softmax(Var x, T temperature) {
    const Tensor<T>& xv = nodes_[check(x)].value;
    Tensor<T> out = scale::row_softmax(xv, temperature);
    i64 m = xv.rows(), n = xv.cols();
    return make(std::move(out), {x}, [x, temperature, m, n](Graph& g, int self) {
      if (!g.wants_grad(x)) return;
      const Tensor<T>& gout = g.nodes_[self].grad;
      const Tensor<T>& y = g.nodes_[self].value;
      Tensor<T>& gx = g.grad_buf(x);
      for (i64 i = 0; i < m; ++i) {
        const T* go = gout.row_ptr(i);
        const T* yr = y.row_ptr(i);
        T dot = T(0);
        for (i64 j = 0; j < n; ++j) dot += go[j] * yr[j];
        T* dst = gx.row_ptr(i);
        for (i64 j = 0; j < n; ++j) dst[j] += yr[j] * (go[j] - dot) / temperature;
      }
    });
  }

  // m x n -> m x 1, log sum exp per row with max-subtraction.
  Var row_logsumexp(Var x) {
    const Tensor<T>& xv = nodes_[check(x)].value;
    i64 m = xv.rows(), n = xv.cols();
    Tensor<T> out = Tensor<T>::zeros({m, 1});
    for (i64 i = 0; i < m; ++i) {
      const T* in = xv.row_ptr(i);
      T mx = in[0];
      for (i64 j = 1; j < n; ++j) mx = std::max(mx, in[j]);
      T sum = T(0);
      for (i64 j = 0; j < n; ++j) sum += std::exp(in[j] - mx);
      out.data[static_cast<size_t>(i)] = mx + std::log(sum);
    }
    return make(std::move(out), {x}, [x, m, n](Graph& g, int self) {
      if (!g.wants_grad(x)) return;
      const Tensor<T>& gout = g.nodes_[self].grad;
      const Tensor<T>& xv = g.nodes_[x.idx].value;
      const Tensor<T>& lse = g.nodes_[self].value;
      Tensor<T>& gx = g.grad_buf(x);
      for (i64 i = 0; i < m; ++i) {
        const T* in = xv.row_ptr(i);
        T go = gout.data[static_cast<size_t>(i)];
        T l = lse.data[static_cast<size_t>(i)];
        T* dst = gx.row_ptr(i);
        for (i64 j = 0; j < n; ++j) dst[j] += go * std::exp(in[j] - l);
      }
    });
  }

  // ---- backward ----

  void backward(Var loss) {
    int li = check(loss);
    if (nodes_[li].value.numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar");
    if (!grad_enabled_) throw std::logic_error("backward: graph built with grads disabled");
    grad_buf(loss).data[0] = T(1);
    for (int i = li; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.grad.numel() == 0) continue;  // never reached from loss
      if (n.param) {
        for (i64 j = 0; j < n.grad.numel(); ++j) n.param->grad.data[j] += n.grad.data[j];
      } else if (n.back) {
        n.back(*this, i);
      }
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // lazily allocated in backward
    bool needs_grad = false;
    Parameter<T>* param = nullptr;
    std::function<void(Graph&, int)> back;
  };

  int check(Var v) const {
    if (!v.valid() || v.idx >= static_cast<int>(nodes_.size()))
      throw std::invalid_argument("graph: invalid var");
    return v.idx;
  }

  bool wants_grad(Var v) const { return nodes_[static_cast<size_t>(v.idx)].needs_grad; }

  Tensor<T>& grad_buf(Var v) {
    Node& n = nodes_[static_cast<size_t>(v.idx)];
    if (n.grad.numel() == 0) n.grad = Tensor<T>::zeros(n.value.shape);
    return n.grad;
  }

  Var push(Tensor<T> value, bool needs_grad, Parameter<T>* param) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.param = param;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
  }

  template <class Fn>
  Var make(Tensor<T> value, std::span<const Var> parents, Fn&& back) {
    bool needs = false;
    if (grad_enabled_)
      for (Var p : parents)
        if (nodes_[static_cast<size_t>(check(p))].needs_grad) needs = true;
    Var v = push(std::move(value), needs, nullptr);
    if (needs) nodes_[static_cast<size_t>(v.idx)].back = std::forward<Fn>(back);
    return v;
  }

  template <class Fn>
  Var make(Tensor<T> value, std::initializer_list<Var> parents, Fn&& back) {
    return make(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::forward<Fn>(back));
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::unordered_map<Parameter<T>*, Var> leaf_cache_;
};

// x * W + b
template <class T>
Var affine(Graph<T>& g, Var x, Parameter<T>& w, Parameter<T>& b) {
  return g.add_row(g.matmul(x, g.leaf(w)), g.leaf(b));
}

}  // namespace scale
