#include "kernel_table.hpp"

#include <algorithm>

namespace f3r::kernels::detail {

namespace {

template <typename T>
void gemm_nt_scalar(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
                    bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T s = 0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

// c[i, j] (+)= sum_p a(i, p) * b[p, j] with a(i, p) = a[i * rs + p * cs].
template <typename T>
void gemm_broadcast_scalar(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t rs,
                           std::size_t cs, const T* b, T* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    if (!accumulate) std::fill(ci, ci + n, T(0));
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * rs + p * cs];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

template <typename T>
void gemm_nn_scalar(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
                    bool accumulate) {
  gemm_broadcast_scalar(m, n, k, a, k, 1, b, c, accumulate);
}

template <typename T>
void gemm_tn_scalar(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
                    bool accumulate) {
  gemm_broadcast_scalar(m, n, k, a, 1, m, b, c, accumulate);
}

template <typename T>
T dot_scalar(const T* a, const T* b, std::size_t n) {
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
void axpy_scalar(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

const KernelTable<float> kScalarF32 = {&gemm_nt_scalar<float>, &gemm_nn_scalar<float>,
                                       &gemm_tn_scalar<float>, &dot_scalar<float>,
                                       &axpy_scalar<float>};
const KernelTable<double> kScalarF64 = {&gemm_nt_scalar<double>, &gemm_nn_scalar<double>,
                                        &gemm_tn_scalar<double>, &dot_scalar<double>,
                                        &axpy_scalar<double>};

}  // namespace f3r::kernels::detail
