#pragma once

// Dense inner loops used by the model. Each routine has a portable scalar
// reference and an AVX2+FMA variant; the variant is chosen once at runtime
// from CPUID and can be overridden (tests pin each backend to compare them).

#include <cstddef>
#include <string_view>

namespace f3r::kernels {

enum class Backend { Scalar, Avx2 };

bool avx2_available();
Backend best_backend();
Backend active_backend();
std::string_view backend_name(Backend b);
/// Throws Error(Config) when the CPU cannot run the requested backend.
void set_backend(Backend b);

class ScopedBackend {
 public:
  explicit ScopedBackend(Backend b) : previous_(active_backend()) { set_backend(b); }
  ~ScopedBackend() { set_backend(previous_); }
  ScopedBackend(const ScopedBackend&) = delete;
  ScopedBackend& operator=(const ScopedBackend&) = delete;

 private:
  Backend previous_;
};

// Row-major matrices throughout. `accumulate` adds into c instead of
// overwriting it.

/// c[m x n] = a[m x k] * b[n x k]^T
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
             bool accumulate);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate);

/// c[m x n] = a[m x k] * b[k x n]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
             bool accumulate);
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate);

/// c[m x n] = a[k x m]^T * b[k x n]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
             bool accumulate);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate);

float dot(const float* a, const float* b, std::size_t n);
double dot(const double* a, const double* b, std::size_t n);

/// y += alpha * x
void axpy(float alpha, const float* x, float* y, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);

}  // namespace f3r::kernels
