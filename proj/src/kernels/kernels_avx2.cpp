// AVX2+FMA variants of the dispatched kernels. Compiled with -mavx2 -mfma;
// only reachable through the dispatch table once cpuid confirms support.

#include "omnidet/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <immintrin.h>

namespace omnidet::kern {

namespace {

struct GemmJob {
  int M, N, K;
  const float* A;
  const float* B;
  float* C;
  bool add;
};

// One output row: accumulate over k in order, 32 columns at a time.
void avx2_sgemm_nn_one_row(const float* a, const float* B, float* c, int N,
                           int K) {
  int n = 0;
  for (; n + 32 <= N; n += 32) {
    __m256 c0 = _mm256_loadu_ps(c + n);
    __m256 c1 = _mm256_loadu_ps(c + n + 8);
    __m256 c2 = _mm256_loadu_ps(c + n + 16);
    __m256 c3 = _mm256_loadu_ps(c + n + 24);
    for (int k = 0; k < K; ++k) {
      const __m256 av = _mm256_set1_ps(a[k]);
      const float* b = B + static_cast<std::size_t>(k) * N + n;
      c0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b), c0);
      c1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b + 8), c1);
      c2 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b + 16), c2);
      c3 = _mm256_fmadd_ps(av, _mm256_loadu_ps(b + 24), c3);
    }
    _mm256_storeu_ps(c + n, c0);
    _mm256_storeu_ps(c + n + 8, c1);
    _mm256_storeu_ps(c + n + 16, c2);
    _mm256_storeu_ps(c + n + 24, c3);
  }
  for (; n + 8 <= N; n += 8) {
    __m256 c0 = _mm256_loadu_ps(c + n);
    for (int k = 0; k < K; ++k) {
      const __m256 av = _mm256_set1_ps(a[k]);
      c0 = _mm256_fmadd_ps(
          av, _mm256_loadu_ps(B + static_cast<std::size_t>(k) * N + n), c0);
    }
    _mm256_storeu_ps(c + n, c0);
  }
  if (n < N) {
    for (int k = 0; k < K; ++k) {
      const float av = a[k];
      const float* b = B + static_cast<std::size_t>(k) * N;
      for (int t = n; t < N; ++t) c[t] = std::fma(av, b[t], c[t]);
    }
  }
}

// Register-blocked 4x24 microkernel (12 accumulators), parallel over fixed
// 4-row blocks so the instruction schedule of every output element is
// independent of the thread partition; each element reduces over k serially.
void avx2_sgemm_nn_blocks(int block_lo, int block_hi, void* p) {
  const GemmJob& j = *static_cast<GemmJob*>(p);
  const int N = j.N, K = j.K;
  const int row_lo = block_lo * 4;
  const int row_hi = std::min(j.M, block_hi * 4);
  if (!j.add)
    for (int i = row_lo; i < row_hi; ++i)
      std::memset(j.C + static_cast<std::size_t>(i) * N, 0, sizeof(float) * N);

  int i = row_lo;
  for (; i + 4 <= row_hi; i += 4) {
    const float* a0 = j.A + static_cast<std::size_t>(i) * K;
    const float* a1 = a0 + K;
    const float* a2 = a1 + K;
    const float* a3 = a2 + K;
    float* c0 = j.C + static_cast<std::size_t>(i) * N;
    float* c1 = c0 + N;
    float* c2 = c1 + N;
    float* c3 = c2 + N;
    int n = 0;
    for (; n + 24 <= N; n += 24) {
      __m256 acc[4][3];
      acc[0][0] = _mm256_loadu_ps(c0 + n);
      acc[0][1] = _mm256_loadu_ps(c0 + n + 8);
      acc[0][2] = _mm256_loadu_ps(c0 + n + 16);
      acc[1][0] = _mm256_loadu_ps(c1 + n);
      acc[1][1] = _mm256_loadu_ps(c1 + n + 8);
      acc[1][2] = _mm256_loadu_ps(c1 + n + 16);
      acc[2][0] = _mm256_loadu_ps(c2 + n);
      acc[2][1] = _mm256_loadu_ps(c2 + n + 8);
      acc[2][2] = _mm256_loadu_ps(c2 + n + 16);
      acc[3][0] = _mm256_loadu_ps(c3 + n);
      acc[3][1] = _mm256_loadu_ps(c3 + n + 8);
      acc[3][2] = _mm256_loadu_ps(c3 + n + 16);
      for (int k = 0; k < K; ++k) {
        const float* b = j.B + static_cast<std::size_t>(k) * N + n;
        const __m256 b0 = _mm256_loadu_ps(b);
        const __m256 b1 = _mm256_loadu_ps(b + 8);
        const __m256 b2 = _mm256_loadu_ps(b + 16);
        __m256 av = _mm256_set1_ps(a0[k]);
        acc[0][0] = _mm256_fmadd_ps(av, b0, acc[0][0]);
        acc[0][1] = _mm256_fmadd_ps(av, b1, acc[0][1]);
        acc[0][2] = _mm256_fmadd_ps(av, b2, acc[0][2]);
        av = _mm256_set1_ps(a1[k]);
        acc[1][0] = _mm256_fmadd_ps(av, b0, acc[1][0]);
        acc[1][1] = _mm256_fmadd_ps(av, b1, acc[1][1]);
        acc[1][2] = _mm256_fmadd_ps(av, b2, acc[1][2]);
        av = _mm256_set1_ps(a2[k]);
        acc[2][0] = _mm256_fmadd_ps(av, b0, acc[2][0]);
        acc[2][1] = _mm256_fmadd_ps(av, b1, acc[2][1]);
        acc[2][2] = _mm256_fmadd_ps(av, b2, acc[2][2]);
        av = _mm256_set1_ps(a3[k]);
        acc[3][0] = _mm256_fmadd_ps(av, b0, acc[3][0]);
        acc[3][1] = _mm256_fmadd_ps(av, b1, acc[3][1]);
        acc[3][2] = _mm256_fmadd_ps(av, b2, acc[3][2]);
      }
      _mm256_storeu_ps(c0 + n, acc[0][0]);
      _mm256_storeu_ps(c0 + n + 8, acc[0][1]);
      _mm256_storeu_ps(c0 + n + 16, acc[0][2]);
      _mm256_storeu_ps(c1 + n, acc[1][0]);
      _mm256_storeu_ps(c1 + n + 8, acc[1][1]);
      _mm256_storeu_ps(c1 + n + 16, acc[1][2]);
      _mm256_storeu_ps(c2 + n, acc[2][0]);
      _mm256_storeu_ps(c2 + n + 8, acc[2][1]);
      _mm256_storeu_ps(c2 + n + 16, acc[2][2]);
      _mm256_storeu_ps(c3 + n, acc[3][0]);
      _mm256_storeu_ps(c3 + n + 8, acc[3][1]);
      _mm256_storeu_ps(c3 + n + 16, acc[3][2]);
    }
    if (n < N) {
      // Column tail, scalar.
      for (int r = 0; r < 4; ++r) {
        const float* a = j.A + static_cast<std::size_t>(i + r) * K;
        float* c = j.C + static_cast<std::size_t>(i + r) * N;
        for (int k = 0; k < K; ++k) {
          const float av = a[k];
          const float* b = j.B + static_cast<std::size_t>(k) * N;
          for (int t = n; t < N; ++t) c[t] = std::fma(av, b[t], c[t]);
        }
      }
    }
  }
  for (; i < row_hi; ++i) {
    avx2_sgemm_nn_one_row(j.A + static_cast<std::size_t>(i) * K,
                          j.B, j.C + static_cast<std::size_t>(i) * N, N, K);
  }
}

void avx2_sgemm_nn(int M, int N, int K, const float* A, const float* B,
                   float* C, bool add) {
  GemmJob j{M, N, K, A, B, C, add};
  parallel_for(0, (M + 3) / 4, avx2_sgemm_nn_blocks, &j);
}

inline float hsum8(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 sh = _mm_movehl_ps(lo, lo);
  lo = _mm_add_ps(lo, sh);
  sh = _mm_shuffle_ps(lo, lo, 0x1);
  lo = _mm_add_ss(lo, sh);
  return _mm_cvtss_f32(lo);
}

// One (row of A) x (row of B) dot product over n.
inline float avx2_dot(const float* a, const float* b, int N) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  int n = 0;
  for (; n + 16 <= N; n += 16) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + n), _mm256_loadu_ps(b + n),
                           acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + n + 8),
                           _mm256_loadu_ps(b + n + 8), acc1);
  }
  for (; n + 8 <= N; n += 8)
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + n), _mm256_loadu_ps(b + n),
                           acc0);
  float acc = hsum8(_mm256_add_ps(acc0, acc1));
  for (; n < N; ++n) acc = std::fma(a[n], b[n], acc);
  return acc;
}

// 2x4 blocked dot kernel, parallel over fixed 2-row blocks of A.
void avx2_sgemm_nt_blocks(int block_lo, int block_hi, void* p) {
  const GemmJob& j = *static_cast<GemmJob*>(p);
  const int N = j.N, J = j.K;
  const int row_lo = block_lo * 2;
  const int row_hi = std::min(j.M, block_hi * 2);
  int i = row_lo;
  for (; i + 2 <= row_hi; i += 2) {
    const float* a0 = j.A + static_cast<std::size_t>(i) * N;
    const float* a1 = a0 + N;
    float* c0 = j.C + static_cast<std::size_t>(i) * J;
    float* c1 = c0 + J;
    int r = 0;
    for (; r + 4 <= J; r += 4) {
      const float* b0 = j.B + static_cast<std::size_t>(r) * N;
      const float* b1 = b0 + N;
      const float* b2 = b1 + N;
      const float* b3 = b2 + N;
      __m256 acc[2][4];
      for (int u = 0; u < 2; ++u)
        for (int v = 0; v < 4; ++v) acc[u][v] = _mm256_setzero_ps();
      int n = 0;
      for (; n + 8 <= N; n += 8) {
        const __m256 va0 = _mm256_loadu_ps(a0 + n);
        const __m256 va1 = _mm256_loadu_ps(a1 + n);
        __m256 vb = _mm256_loadu_ps(b0 + n);
        acc[0][0] = _mm256_fmadd_ps(va0, vb, acc[0][0]);
        acc[1][0] = _mm256_fmadd_ps(va1, vb, acc[1][0]);
        vb = _mm256_loadu_ps(b1 + n);
        acc[0][1] = _mm256_fmadd_ps(va0, vb, acc[0][1]);
        acc[1][1] = _mm256_fmadd_ps(va1, vb, acc[1][1]);
        vb = _mm256_loadu_ps(b2 + n);
        acc[0][2] = _mm256_fmadd_ps(va0, vb, acc[0][2]);
        acc[1][2] = _mm256_fmadd_ps(va1, vb, acc[1][2]);
        vb = _mm256_loadu_ps(b3 + n);
        acc[0][3] = _mm256_fmadd_ps(va0, vb, acc[0][3]);
        acc[1][3] = _mm256_fmadd_ps(va1, vb, acc[1][3]);
      }
      const float* bs[4] = {b0, b1, b2, b3};
      for (int u = 0; u < 2; ++u) {
        const float* a = u ? a1 : a0;
        float* c = u ? c1 : c0;
        for (int v = 0; v < 4; ++v) {
          float s = hsum8(acc[u][v]);
          for (int t = n; t < N; ++t) s = std::fma(a[t], bs[v][t], s);
          c[r + v] = j.add ? c[r + v] + s : s;
        }
      }
    }
    for (; r < J; ++r) {
      const float* b = j.B + static_cast<std::size_t>(r) * N;
      const float s0 = avx2_dot(a0, b, N);
      const float s1 = avx2_dot(a1, b, N);
      c0[r] = j.add ? c0[r] + s0 : s0;
      c1[r] = j.add ? c1[r] + s1 : s1;
    }
  }
  for (; i < row_hi; ++i) {
    const float* a = j.A + static_cast<std::size_t>(i) * N;
    float* c = j.C + static_cast<std::size_t>(i) * J;
    for (int r = 0; r < J; ++r) {
      const float s = avx2_dot(a, j.B + static_cast<std::size_t>(r) * N, N);
      c[r] = j.add ? c[r] + s : s;
    }
  }
}

void avx2_sgemm_nt(int M, int N, int J, const float* A, const float* B,
                   float* C, bool add) {
  GemmJob j{M, N, J, A, B, C, add};
  parallel_for(0, (M + 1) / 2, avx2_sgemm_nt_blocks, &j);
}

void avx2_add_bias_rows(float* x, const float* bias, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    float* p = x + static_cast<std::size_t>(r) * cols;
    const __m256 bv = _mm256_set1_ps(bias[r]);
    int c = 0;
    for (; c + 8 <= cols; c += 8)
      _mm256_storeu_ps(p + c, _mm256_add_ps(_mm256_loadu_ps(p + c), bv));
    for (; c < cols; ++c) p[c] += bias[r];
  }
}

void avx2_relu_forward(float* x, std::size_t n) {
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(x + i, _mm256_max_ps(_mm256_loadu_ps(x + i), zero));
  for (; i < n; ++i)
    if (x[i] < 0.0f) x[i] = 0.0f;
}

void avx2_relu_backward(const float* y, float* dy, std::size_t n) {
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(y + i), zero, _CMP_GT_OQ);
    _mm256_storeu_ps(dy + i, _mm256_and_ps(_mm256_loadu_ps(dy + i), mask));
  }
  for (; i < n; ++i)
    if (y[i] <= 0.0f) dy[i] = 0.0f;
}

void avx2_sgd_momentum_update(float* w, float* v, const float* g,
                              std::size_t n, float lr, float momentum) {
  const __m256 mv = _mm256_set1_ps(momentum);
  const __m256 lv = _mm256_set1_ps(lr);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 vel = _mm256_fmadd_ps(mv, _mm256_loadu_ps(v + i),
                                 _mm256_loadu_ps(g + i));
    _mm256_storeu_ps(v + i, vel);
    _mm256_storeu_ps(w + i,
                     _mm256_fnmadd_ps(lv, vel, _mm256_loadu_ps(w + i)));
  }
  for (; i < n; ++i) {
    v[i] = momentum * v[i] + g[i];
    w[i] -= lr * v[i];
  }
}

void avx2_axpy(float a, const float* x, float* y, std::size_t n) {
  const __m256 av = _mm256_set1_ps(a);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(
        y + i, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] += a * x[i];
}

}  // namespace

const KernelTable& avx2_table() {
  static const KernelTable t{avx2_sgemm_nn,    avx2_sgemm_nt,
                             avx2_add_bias_rows, avx2_relu_forward,
                             avx2_relu_backward, avx2_sgd_momentum_update,
                             avx2_axpy};
  return t;
}

}  // namespace omnidet::kern
