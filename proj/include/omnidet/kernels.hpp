#pragma once

// Arithmetic kernels behind the detector's hot loops (convolution GEMMs,
// activations, optimizer updates). Every dispatched kernel has a scalar
// reference implementation and an AVX2 variant; the variant is picked once
// at startup from cpuid and can be forced for equivalence testing.
//
// Determinism: each output element is computed by exactly one thread with a
// fixed serial reduction order, so results are bit-identical for any thread
// count on a given backend.

#include <cstddef>

namespace omnidet::kern {

enum class Backend { scalar, avx2 };

// Best backend the running CPU supports.
Backend preferred_backend();
Backend active_backend();
// Throws std::runtime_error if the CPU lacks the requested backend.
void force_backend(Backend b);
const char* backend_name(Backend b);

void set_num_threads(int n);
int num_threads();

// Runs fn over a fixed partition of [begin, end) across the worker pool.
// fn(lo, hi) must only write to elements it owns.
void parallel_for(int begin, int end, void (*fn)(int, int, void*), void* ctx);

// C[M,N] = A[M,K] * B[K,N], row-major; accumulates into C when add is true.
void sgemm_nn(int M, int N, int K, const float* A, const float* B, float* C,
              bool add);

// C[M,J] = A[M,N] * B[J,N]^T (rows of A dotted with rows of B).
void sgemm_nt(int M, int N, int J, const float* A, const float* B, float* C,
              bool add);

// x[r,c] += bias[r] over a row-major [rows, cols] map.
void add_bias_rows(float* x, const float* bias, int rows, int cols);

void relu_forward(float* x, std::size_t n);
// dy *= (y > 0), with y the post-activation values.
void relu_backward(const float* y, float* dy, std::size_t n);

// v = momentum * v + g;  w -= lr * v
void sgd_momentum_update(float* w, float* v, const float* g, std::size_t n,
                         float lr, float momentum);

// y += a * x
void axpy(float a, const float* x, float* y, std::size_t n);

// Undispatched helpers (negligible share of runtime).
void sigmoid_forward(const float* z, float* p, std::size_t n);
// dz = dp * p * (1 - p)
void sigmoid_backward(const float* p, const float* dp, float* dz,
                      std::size_t n);
void softplus_forward(const float* z, float* y, std::size_t n);
// dz = dy * sigmoid(z)
void softplus_backward(const float* z, const float* dy, float* dz,
                       std::size_t n);

// im2col for a [ch, h, w] image, square kernel k, zero padding `pad`.
// cols is [(ch*k*k), (oh*ow)] row-major.
int conv_out_size(int in, int k, int stride, int pad);
void im2col(const float* img, int ch, int h, int w, int k, int stride, int pad,
            float* cols);
// Scatter-add of cols back into a [ch, h, w] image (gradient wrt input).
void col2im(const float* cols, int ch, int h, int w, int k, int stride,
            int pad, float* img);

// Internal: tables of dispatched entry points, one per backend.
struct KernelTable {
  void (*sgemm_nn)(int, int, int, const float*, const float*, float*, bool);
  void (*sgemm_nt)(int, int, int, const float*, const float*, float*, bool);
  void (*add_bias_rows)(float*, const float*, int, int);
  void (*relu_forward)(float*, std::size_t);
  void (*relu_backward)(const float*, float*, std::size_t);
  void (*sgd_momentum_update)(float*, float*, const float*, std::size_t, float,
                              float);
  void (*axpy)(float, const float*, float*, std::size_t);
};

const KernelTable& scalar_table();
const KernelTable& avx2_table();  // only valid if preferred_backend()==avx2

}  // namespace omnidet::kern
