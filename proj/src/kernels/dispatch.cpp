#include <atomic>

#include "f3r/error.hpp"
#include "f3r/kernels.hpp"
#include "kernel_table.hpp"

namespace f3r::kernels {

namespace {

std::atomic<Backend>& active() {
  static std::atomic<Backend> backend{best_backend()};
  return backend;
}

template <typename T>
const detail::KernelTable<T>& table();

template <>
const detail::KernelTable<float>& table<float>() {
#if F3R_HAVE_AVX2_KERNELS
  if (active().load(std::memory_order_relaxed) == Backend::Avx2) return detail::kAvx2F32;
#endif
  return detail::kScalarF32;
}

template <>
const detail::KernelTable<double>& table<double>() {
#if F3R_HAVE_AVX2_KERNELS
  if (active().load(std::memory_order_relaxed) == Backend::Avx2) return detail::kAvx2F64;
#endif
  return detail::kScalarF64;
}

}  // namespace

bool avx2_available() {
#if F3R_HAVE_AVX2_KERNELS
  static const bool ok = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return ok;
#else
  return false;
#endif
}

Backend best_backend() { return avx2_available() ? Backend::Avx2 : Backend::Scalar; }

Backend active_backend() { return active().load(std::memory_order_relaxed); }

std::string_view backend_name(Backend b) { return b == Backend::Avx2 ? "avx2" : "scalar"; }

void set_backend(Backend b) {
  if (b == Backend::Avx2 && !avx2_available()) {
    throw Error(ErrorKind::Config, "AVX2/FMA kernels not supported on this CPU");
  }
  active().store(b, std::memory_order_relaxed);
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
             bool accumulate) {
  table<float>().gemm_nt(m, n, k, a, b, c, accumulate);
}
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate) {
  table<double>().gemm_nt(m, n, k, a, b, c, accumulate);
}
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
             bool accumulate) {
  table<float>().gemm_nn(m, n, k, a, b, c, accumulate);
}
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate) {
  table<double>().gemm_nn(m, n, k, a, b, c, accumulate);
}
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
             bool accumulate) {
  table<float>().gemm_tn(m, n, k, a, b, c, accumulate);
}
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate) {
  table<double>().gemm_tn(m, n, k, a, b, c, accumulate);
}
float dot(const float* a, const float* b, std::size_t n) { return table<float>().dot(a, b, n); }
double dot(const double* a, const double* b, std::size_t n) { return table<double>().dot(a, b, n); }
void axpy(float alpha, const float* x, float* y, std::size_t n) { table<float>().axpy(alpha, x, y, n); }
void axpy(double alpha, const double* x, double* y, std::size_t n) {
  table<double>().axpy(alpha, x, y, n);
}

}  // namespace f3r::kernels
