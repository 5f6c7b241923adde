#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tqs/common.hpp"
#include "tqs/tensor.hpp"

namespace tqs {

// C += op(A) * op(B). Loop orders keep the inner loop contiguous for each
// transpose combination.
template <typename T>
void gemm(bool ta, bool tb, int64_t M, int64_t N, int64_t K, const T* A,
          const T* B, T* C) {
  if (!ta && !tb) {  // A MxK, B KxN
    for (int64_t m = 0; m < M; ++m) {
      T* crow = C + m * N;
      const T* arow = A + m * K;
      for (int64_t k = 0; k < K; ++k) {
        T a = arow[k];
        const T* brow = B + k * N;
        for (int64_t n = 0; n < N; ++n) crow[n] += a * brow[n];
      }
    }
  } else if (!ta && tb) {  // A MxK, B NxK
    for (int64_t m = 0; m < M; ++m) {
      const T* arow = A + m * K;
      for (int64_t n = 0; n < N; ++n) {
        const T* brow = B + n * K;
        T acc = 0;
        for (int64_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
        C[m * N + n] += acc;
      }
    }
  } else if (ta && !tb) {  // A KxM, B KxN
    for (int64_t k = 0; k < K; ++k) {
      const T* arow = A + k * M;
      const T* brow = B + k * N;
      for (int64_t m = 0; m < M; ++m) {
        T a = arow[m];
        T* crow = C + m * N;
        for (int64_t n = 0; n < N; ++n) crow[n] += a * brow[n];
      }
    }
  } else {  // A KxM, B NxK
    for (int64_t m = 0; m < M; ++m) {
      for (int64_t n = 0; n < N; ++n) {
        const T* brow = B + n * K;
        T acc = 0;
        for (int64_t k = 0; k < K; ++k) acc += A[k * M + m] * brow[k];
        C[m * N + n] += acc;
      }
    }
  }
}

// Reverse-mode tape over a closed operator set. Nodes are appended in
// execution order, so backward() is a single reverse sweep. Ops that do not
// reach a parameter skip gradient storage and closures entirely, which makes
// inference passes allocation-light.
template <typename T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  void set_grads_enabled(bool on) { grads_enabled_ = on; }

  int input(Tensor<T> t) { return push(std::move(t), false); }
  int param(Tensor<T> t) { return push(std::move(t), grads_enabled_); }

  const Tensor<T>& val(int id) const { return nodes_[id].val; }
  const Tensor<T>& grad(int id) const { return nodes_[id].grad; }
  bool needs_grad(int id) const { return nodes_[id].req; }
  int size() const { return static_cast<int>(nodes_.size()); }

  void backward(int root) {
    TQS_REQUIRE(nodes_[root].val.numel() == 1, "backward root must be scalar");
    TQS_REQUIRE(nodes_[root].req, "backward root does not reach a parameter");
    nodes_[root].grad[0] = T(1);
    for (int i = root; i >= 0; --i)
      if (nodes_[i].req && nodes_[i].back) nodes_[i].back();
  }

  // ---- elementwise ----

  int add(int a, int b) {
    TQS_REQUIRE(val(a).same_shape(val(b)), "add shape mismatch");
    Tensor<T> out = val(a);
    const Tensor<T>& bv = val(b);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
    return unary_or_binary(std::move(out), a, b, [this](int id, int pa, int pb) {
      const Tensor<T>& g = nodes_[id].grad;
      accumulate(pa, g);
      accumulate(pb, g);
    });
  }

  int sub(int a, int b) {
    TQS_REQUIRE(val(a).same_shape(val(b)), "sub shape mismatch");
    Tensor<T> out = val(a);
    const Tensor<T>& bv = val(b);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
    return unary_or_binary(std::move(out), a, b, [this](int id, int pa, int pb) {
      const Tensor<T>& g = nodes_[id].grad;
      accumulate(pa, g);
      if (nodes_[pb].req) {
        Tensor<T>& d = nodes_[pb].grad;
        for (int64_t i = 0; i < g.numel(); ++i) d[i] -= g[i];
      }
    });
  }

  int mul(int a, int b) {
    TQS_REQUIRE(val(a).same_shape(val(b)), "mul shape mismatch");
    Tensor<T> out = val(a);
    const Tensor<T>& bv = val(b);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    return unary_or_binary(std::move(out), a, b, [this](int id, int pa, int pb) {
      const Tensor<T>& g = nodes_[id].grad;
      if (nodes_[pa].req) {
        Tensor<T>& d = nodes_[pa].grad;
        const Tensor<T>& other = nodes_[pb].val;
        for (int64_t i = 0; i < g.numel(); ++i) d[i] += g[i] * other[i];
      }
      if (nodes_[pb].req) {
        Tensor<T>& d = nodes_[pb].grad;
        const Tensor<T>& other = nodes_[pa].val;
        for (int64_t i = 0; i < g.numel(); ++i) d[i] += g[i] * other[i];
      }
    });
  }

  int scale(int a, double c) {
    Tensor<T> out = val(a);
    for (auto& x : out.v) x = static_cast<T>(x * c);
    int id = push_op(std::move(out), {a});
    attach(id, [this, id, a, c] {
      const Tensor<T>& g = nodes_[id].grad;
      Tensor<T>& d = nodes_[a].grad;
      for (int64_t i = 0; i < g.numel(); ++i) d[i] += static_cast<T>(g[i] * c);
    });
    return id;
  }

  // out = a * s where s is a one-element tensor node (learnable scalar gain).
  int scale_by(int a, int s) {
    TQS_REQUIRE(val(s).numel() == 1, "scale_by expects scalar node");
    T sv = val(s)[0];
    Tensor<T> out = val(a);
    for (auto& x : out.v) x *= sv;
    int id = push_op(std::move(out), {a, s});
    attach(id, [this, id, a, s] {
      const Tensor<T>& g = nodes_[id].grad;
      if (nodes_[a].req) {
        T sv2 = nodes_[s].val[0];
        Tensor<T>& d = nodes_[a].grad;
        for (int64_t i = 0; i < g.numel(); ++i) d[i] += g[i] * sv2;
      }
      if (nodes_[s].req) {
        const Tensor<T>& av = nodes_[a].val;
        T acc = 0;
        for (int64_t i = 0; i < g.numel(); ++i) acc += g[i] * av[i];
        nodes_[s].grad[0] += acc;
      }
    });
    return id;
  }

  // a + b with b.shape a suffix of a.shape (broadcast over leading axes).
  int add_bcast(int a, int b) {
    const Tensor<T>& av = val(a);
    const Tensor<T>& bv = val(b);
    TQS_REQUIRE(bv.rank() <= av.rank(), "add_bcast rank");
    for (int i = 0; i < bv.rank(); ++i)
      TQS_REQUIRE(bv.shape[bv.rank() - 1 - i] == av.shape[av.rank() - 1 - i],
                  "add_bcast suffix mismatch");
    int64_t inner = bv.numel();
    int64_t reps = av.numel() / std::max<int64_t>(inner, 1);
    Tensor<T> out = av;
    for (int64_t r = 0; r < reps; ++r)
      for (int64_t i = 0; i < inner; ++i) out[r * inner + i] += bv[i];
    int id = push_op(std::move(out), {a, b});
    attach(id, [this, id, a, b, reps, inner] {
      const Tensor<T>& g = nodes_[id].grad;
      accumulate(a, g);
      if (nodes_[b].req) {
        Tensor<T>& d = nodes_[b].grad;
        for (int64_t r = 0; r < reps; ++r)
          for (int64_t i = 0; i < inner; ++i) d[i] += g[r * inner + i];
      }
    });
    return id;
  }

  // ---- matrix products ----

  int matmul(int a, int b, bool ta = false, bool tb = false) {
    const Tensor<T>& A = val(a);
    const Tensor<T>& B = val(b);
    TQS_REQUIRE(A.rank() == 2 && B.rank() == 2, "matmul expects rank-2");
    int64_t M = ta ? A.shape[1] : A.shape[0];
    int64_t K = ta ? A.shape[0] : A.shape[1];
    int64_t Kb = tb ? B.shape[1] : B.shape[0];
    int64_t N = tb ? B.shape[0] : B.shape[1];
    TQS_REQUIRE(K == Kb, "matmul inner dim mismatch");
    Tensor<T> out({M, N}, T(0));
    gemm(ta, tb, M, N, K, A.data(), B.data(), out.data());
    int id = push_op(std::move(out), {a, b});
    attach(id, [this, id, a, b, ta, tb, M, N, K] {
      const T* G = nodes_[id].grad.data();
      const T* Av = nodes_[a].val.data();
      const T* Bv = nodes_[b].val.data();
      if (nodes_[a].req) {
        T* dA = nodes_[a].grad.data();
        if (!ta && !tb) gemm<T>(false, true, M, K, N, G, Bv, dA);
        else if (!ta && tb) gemm<T>(false, false, M, K, N, G, Bv, dA);
        else if (ta && !tb) gemm<T>(false, true, K, M, N, Bv, G, dA);
        else gemm<T>(true, true, K, M, N, Bv, G, dA);
      }
      if (nodes_[b].req) {
        T* dB = nodes_[b].grad.data();
        if (!ta && !tb) gemm<T>(true, false, K, N, M, Av, G, dB);
        else if (!ta && tb) gemm<T>(true, false, N, K, M, G, Av, dB);
        else if (ta && !tb) gemm<T>(false, false, K, N, M, Av, G, dB);
        else gemm<T>(true, true, N, K, M, G, Av, dB);
      }
    });
    return id;
  }

  // Batched matmul: a (B, M, K) x b (B, K, N) or (B, N, K) when tb.
  int bmm(int a, int b, bool tb = false) {
    const Tensor<T>& A = val(a);
    const Tensor<T>& B = val(b);
    TQS_REQUIRE(A.rank() == 3 && B.rank() == 3, "bmm expects rank-3");
    TQS_REQUIRE(A.shape[0] == B.shape[0], "bmm batch mismatch");
    int64_t Bn = A.shape[0], M = A.shape[1], K = A.shape[2];
    int64_t N = tb ? B.shape[1] : B.shape[2];
    TQS_REQUIRE((tb ? B.shape[2] : B.shape[1]) == K, "bmm inner dim mismatch");
    Tensor<T> out({Bn, M, N}, T(0));
    for (int64_t i = 0; i < Bn; ++i)
      gemm(false, tb, M, N, K, A.data() + i * M * K,
           B.data() + i * (tb ? N * K : K * N), out.data() + i * M * N);
    int id = push_op(std::move(out), {a, b});
    attach(id, [this, id, a, b, tb, Bn, M, N, K] {
      const Tensor<T>& G = nodes_[id].grad;
      const Tensor<T>& Av = nodes_[a].val;
      const Tensor<T>& Bv = nodes_[b].val;
      int64_t bstride = tb ? N * K : K * N;
      for (int64_t i = 0; i < Bn; ++i) {
        const T* g = G.data() + i * M * N;
        const T* av = Av.data() + i * M * K;
        const T* bv = Bv.data() + i * bstride;
        if (nodes_[a].req) {
          T* dA = nodes_[a].grad.data() + i * M * K;
          if (!tb) gemm<T>(false, true, M, K, N, g, bv, dA);
          else gemm<T>(false, false, M, K, N, g, bv, dA);
        }
        if (nodes_[b].req) {
          T* dB = nodes_[b].grad.data() + i * bstride;
          if (!tb) gemm<T>(true, false, K, N, M, av, g, dB);
          else gemm<T>(true, false, N, K, M, g, av, dB);
        }
      }
    });
    return id;
  }

  // ---- shape ----

  int reshape(int a, std::vector<int64_t> shape) {
    Tensor<T> out = val(a);
    TQS_REQUIRE(Tensor<T>::count(shape) == out.numel(), "reshape numel mismatch");
    out.shape = std::move(shape);
    int id = push_op(std::move(out), {a});
    attach(id, [this, id, a] { accumulate(a, nodes_[id].grad); });
    return id;
  }

  int permute(int a, std::vector<int> perm) {
    const Tensor<T>& A = val(a);
    int r = A.rank();
    TQS_REQUIRE(static_cast<int>(perm.size()) == r, "permute rank mismatch");
    std::vector<int64_t> oshape(r);
    for (int i = 0; i < r; ++i) oshape[i] = A.shape[perm[i]];
    std::vector<int64_t> astride(r, 1);
    for (int i = r - 2; i >= 0; --i) astride[i] = astride[i + 1] * A.shape[i + 1];
    std::vector<int64_t> gather(r);
    for (int i = 0; i < r; ++i) gather[i] = astride[perm[i]];
    Tensor<T> out(oshape);
    std::vector<int64_t> idx(r, 0);
    for (int64_t o = 0; o < out.numel(); ++o) {
      int64_t src = 0;
      for (int i = 0; i < r; ++i) src += idx[i] * gather[i];
      out[o] = A[src];
      for (int i = r - 1; i >= 0; --i) {
        if (++idx[i] < oshape[i]) break;
        idx[i] = 0;
      }
    }
    int id = push_op(std::move(out), {a});
    attach(id, [this, id, a, oshape, gather, r] {
      const Tensor<T>& g = nodes_[id].grad;
      Tensor<T>& d = nodes_[a].grad;
      std::vector<int64_t> ix(r, 0);
      for (int64_t o = 0; o < g.numel(); ++o) {
        int64_t src = 0;
        for (int i = 0; i < r; ++i) src += ix[i] * gather[i];
        d[src] += g[o];
        for (int i = r - 1; i >= 0; --i) {
          if (++ix[i] < oshape[i]) break;
          ix[i] = 0;
        }
      }
    });
    return id;
  }

  // Concatenate along axis 0; all inputs share trailing dims.
  int concat0(const std::vector<int>& parts) {
    TQS_REQUIRE(!parts.empty(), "concat0 of nothing");
    const Tensor<T>& first = val(parts[0]);
    std::vector<int64_t> oshape = first.shape;
    int64_t total0 = 0;
    for (int p : parts) {
      const Tensor<T>& t = val(p);
      TQS_REQUIRE(t.rank() == first.rank(), "concat0 rank mismatch");
      for (int i = 1; i < first.rank(); ++i)
        TQS_REQUIRE(t.shape[i] == first.shape[i], "concat0 trailing mismatch");
      total0 += t.shape[0];
    }
    oshape[0] = total0;
    Tensor<T> out(oshape);
    int64_t off = 0;
    for (int p : parts) {
      const Tensor<T>& t = val(p);
      for (int64_t i = 0; i < t.numel(); ++i) out[off + i] = t[i];
      off += t.numel();
    }
    bool req = false;
    for (int p : parts) req = req || nodes_[p].req;
    int id = push(std::move(out), req);
    if (req) {
      std::vector<int> ps = parts;
      nodes_[id].back = [this, id, ps] {
        const Tensor<T>& g = nodes_[id].grad;
        int64_t off2 = 0;
        for (int p : ps) {
          int64_t n = nodes_[p].val.numel();
          if (nodes_[p].req) {
            Tensor<T>& d = nodes_[p].grad;
            for (int64_t i = 0; i < n; ++i) d[i] += g[off2 + i];
          }
          off2 += n;
        }
      };
    }
    return id;
  }

  int slice0(int a, int64_t start, int64_t len) {
    const Tensor<T>& A = val(a);
    TQS_REQUIRE(start >= 0 && start + len <= A.shape[0], "slice0 out of range");
    std::vector<int64_t> oshape = A.shape;
    oshape[0] = len;
    int64_t inner = A.numel() / A.shape[0];
    Tensor<T> out(oshape);
    for (int64_t i = 0; i < len * inner; ++i) out[i] = A[start * inner + i];
    int id = push_op(std::move(out), {a});
    attach(id, [this, id, a, start, inner] {
      const Tensor<T>& g = nodes_[id].grad;
      Tensor<T>& d = nodes_[a].grad;
      for (int64_t i = 0; i < g.numel(); ++i) d[start * inner + i] += g[i];
    });
    return id;
  }

  // Select axis-0 slices by index (channel gather); may repeat indices.
  int gather0(int a, std::vector<int64_t> idxs) {
    const Tensor<T>& A = val(a);
    int64_t inner = A.numel() / A.shape[0];
    std::vector<int64_t> oshape = A.shape;
    oshape[0] = static_cast<int64_t>(idxs.size());
    Tensor<T> out(oshape);
    for (size_t k = 0; k < idxs.size(); ++k) {
      TQS_REQUIRE(idxs[k] >= 0 && idxs[k] < A.shape[0], "gather0 index");
      for (int64_t i = 0; i < inner; ++i)
        out[static_cast<int64_t>(k) * inner + i] = A[idxs[k] * inner + i];
    }
    int id = push_op(std::move(out), {a});
    attach(id, [this, id, a, idxs, inner] {
      const Tensor<T>& g = nodes_[id].grad;
      Tensor<T>& d = nodes_[a].grad;
      for (size_t k = 0; k < idxs.size(); ++k)
        for (int64_t i = 0; i < inner; ++i)
          d[idxs[k] * inner + i] += g[static_cast<int64_t>(k) * inner + i];
    });
    return id;
  }

  // ---- nonlinearities ----

  int softmax_last(int a) {
    const Tensor<T>& A = val(a);
    int64_t d = A.shape.back();
    int64_t rows = A.numel() / d;
    Tensor<T> out = A;
    for (int64_t r = 0; r < rows; ++r) {
      T* row = out.data() + r * d;
      T m = row[0];
      for (int64_t i = 1; i < d; ++i) m = std::max(m, row[i]);
      T s = 0;
      for (int64_t i = 0; i < d; ++i) {
        row[i] = std::exp(row[i] - m);
        s += row[i];
      }
      for (int64_t i = 0; i < d; ++i) row[i] /= s;
    }
    int id = push_op(std::move(out), {a});
    attach(id, [this, id, a, rows, d] {
      const Tensor<T>& g = nodes_[id].grad;
      const Tensor<T>& y = nodes_[id].val;
      Tensor<T>& da = nodes_[a].grad;
      for (int64_t r = 0; r < rows; ++r) {
        const T* gr = g.data() + r * d;
        const T* yr = y.data() + r * d;
        T dot = 0;
        for (int64_t i = 0; i < d; ++i) dot += gr[i] * yr[i];
        T* dr = da.data() + r * d;
        for (int64_t i = 0; i < d; ++i) dr[i] += yr[i] * (gr[i] - dot);
      }
    });
    return id;
  }

  // Layer norm over the last axis; gamma/beta are rank-1 of that length.
  int layer_norm(int a, int gamma, int beta, double eps) {
    const Tensor<T>& A = val(a);
    int64_t d = A.shape.back();
    TQS_REQUIRE(val(gamma).numel() == d && val(beta).numel() == d, "layer_norm affine dims");
    int64_t rows = A.numel() / d;
    Tensor<T> out(A.shape);
    Tensor<T> xhat(A.shape);
    Tensor<T> inv({rows});
    const Tensor<T>& gv = val(gamma);
    const Tensor<T>& bv = val(beta);
    for (int64_t r = 0; r < rows; ++r) {
      const T* row = A.data() + r * d;
      T mu = 0;
      for (int64_t i = 0; i < d; ++i) mu += row[i];
      mu /= static_cast<T>(d);
      T var = 0;
      for (int64_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
      var /= static_cast<T>(d);
      T is = T(1) / std::sqrt(var + static_cast<T>(eps));
      inv[r] = is;
      for (int64_t i = 0; i < d; ++i) {
        T xh = (row[i] - mu) * is;
        xhat[r * d + i] = xh;
        out[r * d + i] = xh * gv[i] + bv[i];
      }
    }
    int id = push_op_3(std::move(out), a, gamma, beta);
    attach(id, [this, id, a, gamma, beta, rows, d, xhat = std::move(xhat),
                inv = std::move(inv)] {
      const Tensor<T>& g = nodes_[id].grad;
      const Tensor<T>& gv2 = nodes_[gamma].val;
      if (nodes_[gamma].req) {
        Tensor<T>& dg = nodes_[gamma].grad;
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t i = 0; i < d; ++i) dg[i] += g[r * d + i] * xhat[r * d + i];
      }
      if (nodes_[beta].req) {
        Tensor<T>& db = nodes_[beta].grad;
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t i = 0; i < d; ++i) db[i] += g[r * d + i];
      }
      if (nodes_[a].req) {
        Tensor<T>& da = nodes_[a].grad;
        for (int64_t r = 0; r < rows; ++r) {
          T m1 = 0, m2 = 0;
          for (int64_t i = 0; i < d; ++i) {
            T dxh = g[r * d + i] * gv2[i];
            m1 += dxh;
            m2 += dxh * xhat[r * d + i];
          }
          m1 /= static_cast<T>(d);
          m2 /= static_cast<T>(d);
          for (int64_t i = 0; i < d; ++i) {
            T dxh = g[r * d + i] * gv2[i];
            da[r * d + i] += inv[r] * (dxh - m1 - xhat[r * d + i] * m2);
          }
        }
      }
    });
    return id;
  }

  int gelu(int a) {
    const Tensor<T>& A = val(a);
    Tensor<T> out(A.shape);
    for (int64_t i = 0; i < A.numel(); ++i) {
      double x = static_cast<double>(A[i]);
      out[i] = static_cast<T>(0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))));
    }
    int id = push_op(std::move(out), {a});
    attach(id, [this, id, a] {
      const Tensor<T>& g = nodes_[id].grad;
      const Tensor<T>& x = nodes_[a].val;
      Tensor<T>& d = nodes_[a].grad;
      constexpr double inv_sqrt2pi = 0.3989422804014327;
      for (int64_t i = 0; i < g.numel(); ++i) {
        double xv = static_cast<double>(x[i]);
        double cdf = 0.5 * (1.0 + std::erf(xv / std::sqrt(2.0)));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * xv * xv);
        d[i] += static_cast<T>(g[i] * (cdf + xv * pdf));
      }
    });
    return id;
  }

  int sigmoid(int a) {
    const Tensor<T>& A = val(a);
    Tensor<T> out(A.shape);
    for (int64_t i = 0; i < A.numel(); ++i) {
      T x = A[i];
      out[i] = x >= 0 ? T(1) / (T(1) + std::exp(-x))
                      : std::exp(x) / (T(1) + std::exp(x));
    }
    int id = push_op(std::move(out), {a});
    attach(id, [this, id, a] {
      const Tensor<T>& g = nodes_[id].grad;
      const Tensor<T>& y = nodes_[id].val;
      Tensor<T>& d = nodes_[a].grad;
      for (int64_t i = 0; i < g.numel(); ++i) d[i] += g[i] * y[i] * (T(1) - y[i]);
    });
    return id;
  }

  int softplus(int a) {
    const Tensor<T>& A = val(a);
    Tensor<T> out(A.shape);
    for (int64_t i = 0; i < A.numel(); ++i) {
      T x = A[i];
      out[i] = x > T(20) ? x : std::log1p(std::exp(x));
    }
    int id = push_op(std::move(out), {a});
    attach(id, [this, id, a] {
      const Tensor<T>& g = nodes_[id].grad;
      const Tensor<T>& x = nodes_[a].val;
      Tensor<T>& d = nodes_[a].grad;
      for (int64_t i = 0; i < g.numel(); ++i) {
        T xv = x[i];
        T s = xv >= 0 ? T(1) / (T(1) + std::exp(-xv))
                      : std::exp(xv) / (T(1) + std::exp(xv));
        d[i] += g[i] * s;
      }
    });
    return id;
  }

  // ---- reductions ----

  int mean_all(int a) {
    const Tensor<T>& A = val(a);
    int64_t n = A.numel();
    T acc = 0;
    for (int64_t i = 0; i < n; ++i) acc += A[i];
    Tensor<T> out({1});
    out[0] = acc / static_cast<T>(n);
    int id = push_op(std::move(out), {a});
    attach(id, [this, id, a, n] {
      T g = nodes_[id].grad[0] / static_cast<T>(n);
      Tensor<T>& d = nodes_[a].grad;
      for (int64_t i = 0; i < n; ++i) d[i] += g;
    });
    return id;
  }

  // ---- grid ops (channel-first maps, circular longitude, replicate latitude) ----

  int conv3x3(int x, int w, int b) {
    const Tensor<T>& X = val(x);
    const Tensor<T>& W = val(w);
    const Tensor<T>& B = val(b);
    TQS_REQUIRE(X.rank() == 3 && W.rank() == 4, "conv3x3 ranks");
    int64_t Cin = X.shape[0], H = X.shape[1], Wd = X.shape[2];
    int64_t Cout = W.shape[0];
    TQS_REQUIRE(W.shape[1] == Cin && W.shape[2] == 3 && W.shape[3] == 3, "conv3x3 kernel");
    TQS_REQUIRE(B.numel() == Cout, "conv3x3 bias");
    Tensor<T> out({Cout, H, Wd});
    auto clampi = [H](int64_t i) { return i < 0 ? 0 : (i >= H ? H - 1 : i); };
    auto wrapj = [Wd](int64_t j) { return (j + Wd) % Wd; };
    for (int64_t co = 0; co < Cout; ++co)
      for (int64_t i = 0; i < H; ++i)
        for (int64_t j = 0; j < Wd; ++j) {
          T acc = B[co];
          for (int64_t ci = 0; ci < Cin; ++ci)
            for (int64_t di = 0; di < 3; ++di)
              for (int64_t dj = 0; dj < 3; ++dj)
                acc += W.at4(co, ci, di, dj) *
                       X.at3(ci, clampi(i + di - 1), wrapj(j + dj - 1));
          out.at3(co, i, j) = acc;
        }
    int id = push_op_3(std::move(out), x, w, b);
    attach(id, [this, id, x, w, b, Cin, Cout, H, Wd] {
      const Tensor<T>& G = nodes_[id].grad;
      const Tensor<T>& X2 = nodes_[x].val;
      const Tensor<T>& W2 = nodes_[w].val;
      auto clampi = [H](int64_t i) { return i < 0 ? 0 : (i >= H ? H - 1 : i); };
      auto wrapj = [Wd](int64_t j) { return (j + Wd) % Wd; };
      bool needx = nodes_[x].req, needw = nodes_[w].req, needb = nodes_[b].req;
      for (int64_t co = 0; co < Cout; ++co)
        for (int64_t i = 0; i < H; ++i)
          for (int64_t j = 0; j < Wd; ++j) {
            T g = G.at3(co, i, j);
            if (needb) nodes_[b].grad[co] += g;
            for (int64_t ci = 0; ci < Cin; ++ci)
              for (int64_t di = 0; di < 3; ++di)
                for (int64_t dj = 0; dj < 3; ++dj) {
                  int64_t si = clampi(i + di - 1), sj = wrapj(j + dj - 1);
                  if (needw)
                    nodes_[w].grad.at4(co, ci, di, dj) += g * X2.at3(ci, si, sj);
                  if (needx)
                    nodes_[x].grad.at3(ci, si, sj) += g * W2.at4(co, ci, di, dj);
                }
          }
    });
    return id;
  }

  int conv1x1(int x, int w, int b) {
    const Tensor<T>& X = val(x);
    const Tensor<T>& W = val(w);
    const Tensor<T>& B = val(b);
    TQS_REQUIRE(X.rank() == 3 && W.rank() == 2, "conv1x1 ranks");
    int64_t Cin = X.shape[0], H = X.shape[1], Wd = X.shape[2];
    int64_t Cout = W.shape[0];
    TQS_REQUIRE(W.shape[1] == Cin && B.numel() == Cout, "conv1x1 dims");
    int64_t P = H * Wd;
    Tensor<T> out({Cout, H, Wd}, T(0));
    gemm<T>(false, false, Cout, P, Cin, W.data(), X.data(), out.data());
    for (int64_t co = 0; co < Cout; ++co)
      for (int64_t p = 0; p < P; ++p) out[co * P + p] += B[co];
    int id = push_op_3(std::move(out), x, w, b);
    attach(id, [this, id, x, w, b, Cin, Cout, P] {
      const Tensor<T>& G = nodes_[id].grad;
      if (nodes_[x].req)
        gemm<T>(true, false, Cin, P, Cout, nodes_[w].val.data(), G.data(),
                nodes_[x].grad.data());
      if (nodes_[w].req)
        gemm<T>(false, true, Cout, Cin, P, G.data(), nodes_[x].val.data(),
                nodes_[w].grad.data());
      if (nodes_[b].req)
        for (int64_t co = 0; co < Cout; ++co) {
          T acc = 0;
          for (int64_t p = 0; p < P; ++p) acc += G[co * P + p];
          nodes_[b].grad[co] += acc;
        }
    });
    return id;
  }

  // Mean over channels: (C, H, W) -> (1, H, W).
  int channel_mean(int x) {
    const Tensor<T>& X = val(x);
    int64_t C = X.shape[0], P = X.numel() / C;
    Tensor<T> out({1, X.shape[1], X.shape[2]}, T(0));
    for (int64_t c = 0; c < C; ++c)
      for (int64_t p = 0; p < P; ++p) out[p] += X[c * P + p];
    for (int64_t p = 0; p < P; ++p) out[p] /= static_cast<T>(C);
    int id = push_op(std::move(out), {x});
    attach(id, [this, id, x, C, P] {
      const Tensor<T>& g = nodes_[id].grad;
      Tensor<T>& d = nodes_[x].grad;
      for (int64_t c = 0; c < C; ++c)
        for (int64_t p = 0; p < P; ++p) d[c * P + p] += g[p] / static_cast<T>(C);
    });
    return id;
  }

  // Max over channels: (C, H, W) -> (1, H, W); subgradient to the argmax.
  int channel_max(int x) {
    const Tensor<T>& X = val(x);
    int64_t C = X.shape[0], P = X.numel() / C;
    Tensor<T> out({1, X.shape[1], X.shape[2]});
    std::vector<int64_t> arg(P, 0);
    for (int64_t p = 0; p < P; ++p) {
      T best = X[p];
      int64_t bc = 0;
      for (int64_t c = 1; c < C; ++c)
        if (X[c * P + p] > best) {
          best = X[c * P + p];
          bc = c;
        }
      out[p] = best;
      arg[p] = bc;
    }
    int id = push_op(std::move(out), {x});
    attach(id, [this, id, x, P, arg = std::move(arg)] {
      const Tensor<T>& g = nodes_[id].grad;
      Tensor<T>& d = nodes_[x].grad;
      for (int64_t p = 0; p < P; ++p) d[arg[p] * P + p] += g[p];
    });
    return id;
  }

  // Per-channel mean over PxP windows, broadcast back to full resolution.
  int block_mean_up(int x, int p) {
    const Tensor<T>& X = val(x);
    int64_t C = X.shape[0], H = X.shape[1], Wd = X.shape[2];
    TQS_REQUIRE(H % p == 0 && Wd % p == 0, "block_mean_up divisibility");
    Tensor<T> out(X.shape);
    int64_t bh = H / p, bw = Wd / p;
    double inv = 1.0 / (p * p);
    for (int64_t c = 0; c < C; ++c)
      for (int64_t bi = 0; bi < bh; ++bi)
        for (int64_t bj = 0; bj < bw; ++bj) {
          T acc = 0;
          for (int64_t u = 0; u < p; ++u)
            for (int64_t v2 = 0; v2 < p; ++v2)
              acc += X.at3(c, bi * p + u, bj * p + v2);
          acc = static_cast<T>(acc * inv);
          for (int64_t u = 0; u < p; ++u)
            for (int64_t v2 = 0; v2 < p; ++v2)
              out.at3(c, bi * p + u, bj * p + v2) = acc;
        }
    int id = push_op(std::move(out), {x});
    attach(id, [this, id, x, C, H, Wd, p, bh, bw, inv] {
      const Tensor<T>& g = nodes_[id].grad;
      Tensor<T>& d = nodes_[x].grad;
      for (int64_t c = 0; c < C; ++c)
        for (int64_t bi = 0; bi < bh; ++bi)
          for (int64_t bj = 0; bj < bw; ++bj) {
            T acc = 0;
            for (int64_t u = 0; u < p; ++u)
              for (int64_t v2 = 0; v2 < p; ++v2)
                acc += g[(c * H + bi * p + u) * Wd + bj * p + v2];
            acc = static_cast<T>(acc * inv);
            for (int64_t u = 0; u < p; ++u)
              for (int64_t v2 = 0; v2 < p; ++v2)
                d[(c * H + bi * p + u) * Wd + bj * p + v2] += acc;
          }
    });
    return id;
  }

  // Central differences per channel: (C, H, W) -> (4C, H, W) ordered
  // [horizontal, vertical, diag down-right, diag down-left] per channel.
  int diff4(int x) {
    const Tensor<T>& X = val(x);
    int64_t C = X.shape[0], H = X.shape[1], Wd = X.shape[2];
    Tensor<T> out({4 * C, H, Wd});
    auto clampi = [H](int64_t i) { return i < 0 ? 0 : (i >= H ? H - 1 : i); };
    auto wrapj = [Wd](int64_t j) { return (j + Wd) % Wd; };
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < H; ++i)
        for (int64_t j = 0; j < Wd; ++j) {
          T e = X.at3(c, i, wrapj(j + 1)), w2 = X.at3(c, i, wrapj(j - 1));
          T s = X.at3(c, clampi(i + 1), j), n = X.at3(c, clampi(i - 1), j);
          T se = X.at3(c, clampi(i + 1), wrapj(j + 1));
          T nw = X.at3(c, clampi(i - 1), wrapj(j - 1));
          T sw = X.at3(c, clampi(i + 1), wrapj(j - 1));
          T ne = X.at3(c, clampi(i - 1), wrapj(j + 1));
          out.at3(4 * c + 0, i, j) = (e - w2) / T(2);
          out.at3(4 * c + 1, i, j) = (s - n) / T(2);
          out.at3(4 * c + 2, i, j) = (se - nw) / T(2);
          out.at3(4 * c + 3, i, j) = (sw - ne) / T(2);
        }
    int id = push_op(std::move(out), {x});
    attach(id, [this, id, x, C, H, Wd] {
      const Tensor<T>& g = nodes_[id].grad;
      Tensor<T>& d = nodes_[x].grad;
      auto clampi = [H](int64_t i) { return i < 0 ? 0 : (i >= H ? H - 1 : i); };
      auto wrapj = [Wd](int64_t j) { return (j + Wd) % Wd; };
      auto dref = [&](int64_t c, int64_t i, int64_t j) -> T& {
        return d[(c * H + i) * Wd + j];
      };
      for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < H; ++i)
          for (int64_t j = 0; j < Wd; ++j) {
            T gh = g[((4 * c + 0) * H + i) * Wd + j] / T(2);
            T gv = g[((4 * c + 1) * H + i) * Wd + j] / T(2);
            T g1 = g[((4 * c + 2) * H + i) * Wd + j] / T(2);
            T g2 = g[((4 * c + 3) * H + i) * Wd + j] / T(2);
            dref(c, i, wrapj(j + 1)) += gh;
            dref(c, i, wrapj(j - 1)) -= gh;
            dref(c, clampi(i + 1), j) += gv;
            dref(c, clampi(i - 1), j) -= gv;
            dref(c, clampi(i + 1), wrapj(j + 1)) += g1;
            dref(c, clampi(i - 1), wrapj(j - 1)) -= g1;
            dref(c, clampi(i + 1), wrapj(j - 1)) += g2;
            dref(c, clampi(i - 1), wrapj(j + 1)) -= g2;
          }
    });
    return id;
  }

  // (C, H, W) -> (L, C*P*P) with L = (H/P)*(W/P); patches row-major, columns
  // channel-major then row-major within the patch.
  int im2patches(int x, int p) {
    const Tensor<T>& X = val(x);
    int64_t C = X.shape[0], H = X.shape[1], Wd = X.shape[2];
    TQS_REQUIRE(H % p == 0 && Wd % p == 0, "im2patches divisibility");
    int64_t bh = H / p, bw = Wd / p, L = bh * bw;
    Tensor<T> out({L, C * p * p});
    for (int64_t bi = 0; bi < bh; ++bi)
      for (int64_t bj = 0; bj < bw; ++bj) {
        int64_t l = bi * bw + bj;
        for (int64_t c = 0; c < C; ++c)
          for (int64_t u = 0; u < p; ++u)
            for (int64_t v2 = 0; v2 < p; ++v2)
              out.at2(l, (c * p + u) * p + v2) = X.at3(c, bi * p + u, bj * p + v2);
      }
    int id = push_op(std::move(out), {x});
    attach(id, [this, id, x, C, H, Wd, p, bh, bw] {
      const Tensor<T>& g = nodes_[id].grad;
      Tensor<T>& d = nodes_[x].grad;
      int64_t cols = C * p * p;
      for (int64_t bi = 0; bi < bh; ++bi)
        for (int64_t bj = 0; bj < bw; ++bj) {
          int64_t l = bi * bw + bj;
          for (int64_t c = 0; c < C; ++c)
            for (int64_t u = 0; u < p; ++u)
              for (int64_t v2 = 0; v2 < p; ++v2)
                d[(c * H + bi * p + u) * Wd + bj * p + v2] +=
                    g[l * cols + (c * p + u) * p + v2];
        }
    });
    return id;
  }

  // Inverse of im2patches: (L, C*P*P) -> (C, H, W).
  int patches2im(int t, int p, int64_t C, int64_t H, int64_t Wd) {
    const Tensor<T>& Tt = val(t);
    int64_t bh = H / p, bw = Wd / p, L = bh * bw;
    TQS_REQUIRE(Tt.rank() == 2 && Tt.shape[0] == L && Tt.shape[1] == C * p * p,
                "patches2im dims");
    Tensor<T> out({C, H, Wd});
    int64_t cols = C * p * p;
    for (int64_t bi = 0; bi < bh; ++bi)
      for (int64_t bj = 0; bj < bw; ++bj) {
        int64_t l = bi * bw + bj;
        for (int64_t c = 0; c < C; ++c)
          for (int64_t u = 0; u < p; ++u)
            for (int64_t v2 = 0; v2 < p; ++v2)
              out.at3(c, bi * p + u, bj * p + v2) = Tt[l * cols + (c * p + u) * p + v2];
      }
    int id = push_op(std::move(out), {t});
    attach(id, [this, id, t, p, C, H, Wd, bh, bw] {
      const Tensor<T>& g = nodes_[id].grad;
      Tensor<T>& d = nodes_[t].grad;
      int64_t cols = C * p * p;
      for (int64_t bi = 0; bi < bh; ++bi)
        for (int64_t bj = 0; bj < bw; ++bj) {
          int64_t l = bi * bw + bj;
          for (int64_t c = 0; c < C; ++c)
            for (int64_t u = 0; u < p; ++u)
              for (int64_t v2 = 0; v2 < p; ++v2)
                d[l * cols + (c * p + u) * p + v2] +=
                    g[(c * H + bi * p + u) * Wd + bj * p + v2];
        }
    });
    return id;
  }

 private:
  struct Node {
    Tensor<T> val;
    Tensor<T> grad;
    bool req = false;
    std::function<void()> back;
  };

  std::vector<Node> nodes_;
  bool grads_enabled_ = true;

  int push(Tensor<T> t, bool req) {
    Node n;
    n.val = std::move(t);
    n.req = req;
    if (req) n.grad = Tensor<T>(n.val.shape, T(0));
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int push_op(Tensor<T> out, std::initializer_list<int> parents) {
    bool req = false;
    for (int p : parents) req = req || nodes_[p].req;
    return push(std::move(out), req);
  }

  int push_op_3(Tensor<T> out, int a, int b, int c) {
    bool req = nodes_[a].req || nodes_[b].req || nodes_[c].req;
    return push(std::move(out), req);
  }

  template <typename Fn>
  void attach(int id, Fn&& fn) {
    if (nodes_[id].req) nodes_[id].back = std::forward<Fn>(fn);
  }

  // For binary ops whose backward treats both parents through one closure.
  template <typename Fn>
  int unary_or_binary(Tensor<T> out, int a, int b, Fn&& fn) {
    int id = push_op(std::move(out), {a, b});
    if (nodes_[id].req)
      nodes_[id].back = [fn = std::forward<Fn>(fn), id, a, b] { fn(id, a, b); };
    return id;
  }

  void accumulate(int p, const Tensor<T>& g) {
    if (!nodes_[p].req) return;
    Tensor<T>& d = nodes_[p].grad;
    for (int64_t i = 0; i < g.numel(); ++i) d[i] += g[i];
  }
};

// Named parameter collection with optimizer state. Order is creation order
// and is part of the determinism contract.
template <typename T>
struct ParamStore {
  struct Entry {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    Tensor<T> m, v;  // first/second moment state
    bool decay = true;
  };

  std::vector<Entry> entries;

  int add(std::string name, Tensor<T> value, bool decay = true) {
    Entry e;
    e.name = std::move(name);
    e.grad = Tensor<T>(value.shape, T(0));
    e.m = Tensor<T>(value.shape, T(0));
    e.v = Tensor<T>(value.shape, T(0));
    e.value = std::move(value);
    e.decay = decay;
    entries.push_back(std::move(e));
    return static_cast<int>(entries.size()) - 1;
  }

  Entry& by_name(const std::string& name) {
    for (auto& e : entries)
      if (e.name == name) return e;
    throw std::logic_error("no parameter named " + name);
  }

  int64_t count() const {
    int64_t n = 0;
    for (const auto& e : entries) n += e.value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries) e.grad.fill(T(0));
  }
};

// Registers every parameter on a graph; returns node ids aligned with
// ParamStore order.
template <typename T>
std::vector<int> attach_params(Graph<T>& g, const ParamStore<T>& ps) {
  std::vector<int> ids;
  ids.reserve(ps.entries.size());
  for (const auto& e : ps.entries) ids.push_back(g.param(e.value));
  return ids;
}

template <typename T>
void collect_grads(const Graph<T>& g, const std::vector<int>& ids, ParamStore<T>& ps) {
  for (size_t k = 0; k < ids.size(); ++k) {
    const Tensor<T>& src = g.grad(ids[k]);
    Tensor<T>& dst = ps.entries[k].grad;
    for (int64_t i = 0; i < src.numel(); ++i) dst[i] += src[i];
  }
}

}  // namespace tqs
