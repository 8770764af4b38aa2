#include "omnidet/kernels.hpp"

#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <thread>
#include <vector>

namespace omnidet::kern {

// ---------------------------------------------------------------------------
// Thread pool: persistent workers, fixed [lo, hi) partition per worker.
// ---------------------------------------------------------------------------

namespace {

class Pool {
 public:
  static Pool& instance() {
    static Pool p;
    return p;
  }

  void resize(int n) {
    if (n < 1) n = 1;
    std::lock_guard<std::mutex> api_lock(api_mu_);
    if (n == threads_) return;
    stop_workers();
    threads_ = n;
    start_workers();
  }

  int size() {
    std::lock_guard<std::mutex> api_lock(api_mu_);
    return threads_;
  }

  void run(int begin, int end, void (*fn)(int, int, void*), void* ctx) {
    if (end <= begin) return;
    std::unique_lock<std::mutex> api_lock(api_mu_);
    const int total = end - begin;
    const int workers = static_cast<int>(workers_.size()) + 1;
    if (workers == 1 || total == 1) {
      fn(begin, end, ctx);
      return;
    }
    {
      std::lock_guard<std::mutex> lk(mu_);
      job_fn_ = fn;
      job_ctx_ = ctx;
      job_begin_ = begin;
      job_end_ = end;
      pending_ = static_cast<int>(workers_.size());
      ++generation_;
    }
    cv_.notify_all();
    // This thread takes the first chunk.
    run_chunk(0, workers, begin, end, fn, ctx);
    std::unique_lock<std::mutex> lk(mu_);
    done_cv_.wait(lk, [&] { return pending_ == 0; });
  }

 private:
  Pool() : threads_(1) {}
  ~Pool() { stop_workers(); }

  static void run_chunk(int idx, int workers, int begin, int end,
                        void (*fn)(int, int, void*), void* ctx) {
    const long total = end - begin;
    const int lo = begin + static_cast<int>(total * idx / workers);
    const int hi = begin + static_cast<int>(total * (idx + 1) / workers);
    if (hi > lo) fn(lo, hi, ctx);
  }

  void start_workers() {
    stop_ = false;
    for (int i = 1; i < threads_; ++i) {
      workers_.emplace_back([this, i] { worker_loop(i); });
    }
  }

  void stop_workers() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
      ++generation_;
    }
    cv_.notify_all();
    for (auto& t : workers_) t.join();
    workers_.clear();
  }

  void worker_loop(int idx) {
    std::uint64_t seen = 0;
    for (;;) {
      void (*fn)(int, int, void*) = nullptr;
      void* ctx = nullptr;
      int begin = 0, end = 0, workers = 0;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return generation_ != seen; });
        seen = generation_;
        if (stop_) return;
        fn = job_fn_;
        ctx = job_ctx_;
        begin = job_begin_;
        end = job_end_;
        workers = static_cast<int>(workers_.size()) + 1;
      }
      run_chunk(idx, workers, begin, end, fn, ctx);
      {
        std::lock_guard<std::mutex> lk(mu_);
        if (--pending_ == 0) done_cv_.notify_all();
      }
    }
  }

  std::mutex api_mu_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  std::vector<std::thread> workers_;
  int threads_;
  bool stop_ = false;
  std::uint64_t generation_ = 0;
  int pending_ = 0;
  void (*job_fn_)(int, int, void*) = nullptr;
  void* job_ctx_ = nullptr;
  int job_begin_ = 0;
  int job_end_ = 0;
};

}  // namespace

void set_num_threads(int n) { Pool::instance().resize(n); }
int num_threads() { return Pool::instance().size(); }
void parallel_for(int begin, int end, void (*fn)(int, int, void*), void* ctx) {
  Pool::instance().run(begin, end, fn, ctx);
}

// ---------------------------------------------------------------------------
// Scalar reference kernels.
// ---------------------------------------------------------------------------

namespace {

struct GemmJob {
  int M, N, K;
  const float* A;
  const float* B;
  float* C;
  bool add;
};

void scalar_sgemm_nn_rows(int lo, int hi, void* p) {
  const GemmJob& j = *static_cast<GemmJob*>(p);
  for (int i = lo; i < hi; ++i) {
    const float* a = j.A + static_cast<std::size_t>(i) * j.K;
    float* c = j.C + static_cast<std::size_t>(i) * j.N;
    if (!j.add) std::memset(c, 0, sizeof(float) * j.N);
    for (int k = 0; k < j.K; ++k) {
      const float av = a[k];
      if (av == 0.0f) continue;
      const float* b = j.B + static_cast<std::size_t>(k) * j.N;
      for (int n = 0; n < j.N; ++n) c[n] += av * b[n];
    }
  }
}

void scalar_sgemm_nn(int M, int N, int K, const float* A, const float* B,
                     float* C, bool add) {
  GemmJob j{M, N, K, A, B, C, add};
  parallel_for(0, M, scalar_sgemm_nn_rows, &j);
}

void scalar_sgemm_nt_rows(int lo, int hi, void* p) {
  const GemmJob& j = *static_cast<GemmJob*>(p);
  // Here N is the reduced dimension and K the number of B rows.
  for (int i = lo; i < hi; ++i) {
    const float* a = j.A + static_cast<std::size_t>(i) * j.N;
    float* c = j.C + static_cast<std::size_t>(i) * j.K;
    for (int r = 0; r < j.K; ++r) {
      const float* b = j.B + static_cast<std::size_t>(r) * j.N;
      float acc = 0.0f;
      for (int n = 0; n < j.N; ++n) acc += a[n] * b[n];
      c[r] = j.add ? c[r] + acc : acc;
    }
  }
}

void scalar_sgemm_nt(int M, int N, int J, const float* A, const float* B,
                     float* C, bool add) {
  GemmJob j{M, N, J, A, B, C, add};
  parallel_for(0, M, scalar_sgemm_nt_rows, &j);
}

void scalar_add_bias_rows(float* x, const float* bias, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    float* p = x + static_cast<std::size_t>(r) * cols;
    const float b = bias[r];
    for (int c = 0; c < cols; ++c) p[c] += b;
  }
}

void scalar_relu_forward(float* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (x[i] < 0.0f) x[i] = 0.0f;
}

void scalar_relu_backward(const float* y, float* dy, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (y[i] <= 0.0f) dy[i] = 0.0f;
}

void scalar_sgd_momentum_update(float* w, float* v, const float* g,
                                std::size_t n, float lr, float momentum) {
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = momentum * v[i] + g[i];
    w[i] -= lr * v[i];
  }
}

void scalar_axpy(float a, const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable t{scalar_sgemm_nn,    scalar_sgemm_nt,
                             scalar_add_bias_rows, scalar_relu_forward,
                             scalar_relu_backward, scalar_sgd_momentum_update,
                             scalar_axpy};
  return t;
}

// ---------------------------------------------------------------------------
// Dispatch.
// ---------------------------------------------------------------------------

namespace {

bool cpu_has_avx2_fma() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

std::atomic<const KernelTable*> g_table{nullptr};
std::atomic<Backend> g_backend{Backend::scalar};

const KernelTable* init_table() {
  Backend b = preferred_backend();
  if (const char* env = std::getenv("OMNIDET_BACKEND")) {
    if (std::string(env) == "scalar") b = Backend::scalar;
  }
  const KernelTable* t =
      (b == Backend::avx2) ? &avx2_table() : &scalar_table();
  g_backend.store(b);
  g_table.store(t);
  return t;
}

inline const KernelTable& table() {
  const KernelTable* t = g_table.load(std::memory_order_acquire);
  return t ? *t : *init_table();
}

}  // namespace

Backend preferred_backend() {
  return cpu_has_avx2_fma() ? Backend::avx2 : Backend::scalar;
}

Backend active_backend() {
  table();
  return g_backend.load();
}

void force_backend(Backend b) {
  if (b == Backend::avx2 && preferred_backend() != Backend::avx2)
    throw std::runtime_error("avx2 backend not supported on this CPU");
  g_backend.store(b);
  g_table.store(b == Backend::avx2 ? &avx2_table() : &scalar_table());
}

const char* backend_name(Backend b) {
  return b == Backend::avx2 ? "avx2" : "scalar";
}

void sgemm_nn(int M, int N, int K, const float* A, const float* B, float* C,
              bool add) {
  table().sgemm_nn(M, N, K, A, B, C, add);
}
void sgemm_nt(int M, int N, int J, const float* A, const float* B, float* C,
              bool add) {
  table().sgemm_nt(M, N, J, A, B, C, add);
}
void add_bias_rows(float* x, const float* bias, int rows, int cols) {
  table().add_bias_rows(x, bias, rows, cols);
}
void relu_forward(float* x, std::size_t n) { table().relu_forward(x, n); }
void relu_backward(const float* y, float* dy, std::size_t n) {
  table().relu_backward(y, dy, n);
}
void sgd_momentum_update(float* w, float* v, const float* g, std::size_t n,
                         float lr, float momentum) {
  table().sgd_momentum_update(w, v, g, n, lr, momentum);
}
void axpy(float a, const float* x, float* y, std::size_t n) {
  table().axpy(a, x, y, n);
}

// ---------------------------------------------------------------------------
// Shared (undispatched) helpers.
// ---------------------------------------------------------------------------

void sigmoid_forward(const float* z, float* p, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const float x = z[i];
    if (x >= 0.0f) {
      p[i] = 1.0f / (1.0f + std::exp(-x));
    } else {
      const float e = std::exp(x);
      p[i] = e / (1.0f + e);
    }
  }
}

void sigmoid_backward(const float* p, const float* dp, float* dz,
                      std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dz[i] = dp[i] * p[i] * (1.0f - p[i]);
}

void softplus_forward(const float* z, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const float x = z[i];
    if (x > 20.0f)
      y[i] = x;
    else if (x < -20.0f)
      y[i] = std::exp(x);
    else
      y[i] = std::log1p(std::exp(x));
  }
}

void softplus_backward(const float* z, const float* dy, float* dz,
                       std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const float x = z[i];
    float s;
    if (x >= 0.0f) {
      s = 1.0f / (1.0f + std::exp(-x));
    } else {
      const float e = std::exp(x);
      s = e / (1.0f + e);
    }
    dz[i] = dy[i] * s;
  }
}

int conv_out_size(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

void im2col(const float* img, int ch, int h, int w, int k, int stride, int pad,
            float* cols) {
  const int oh = conv_out_size(h, k, stride, pad);
  const int ow = conv_out_size(w, k, stride, pad);
  const std::size_t plane = static_cast<std::size_t>(oh) * ow;
  for (int c = 0; c < ch; ++c) {
    const float* src = img + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        float* dst = cols + ((static_cast<std::size_t>(c) * k + ky) * k + kx) *
                                plane;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          float* drow = dst + static_cast<std::size_t>(oy) * ow;
          if (iy < 0 || iy >= h) {
            std::memset(drow, 0, sizeof(float) * ow);
            continue;
          }
          const float* srow = src + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            drow[ox] = (ix >= 0 && ix < w) ? srow[ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im(const float* cols, int ch, int h, int w, int k, int stride,
            int pad, float* img) {
  const int oh = conv_out_size(h, k, stride, pad);
  const int ow = conv_out_size(w, k, stride, pad);
  const std::size_t plane = static_cast<std::size_t>(oh) * ow;
  for (int c = 0; c < ch; ++c) {
    float* dst = img + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const float* src =
            cols + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * plane;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const float* srow = src + static_cast<std::size_t>(oy) * ow;
          float* drow = dst + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

}  // namespace omnidet::kern
