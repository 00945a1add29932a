#pragma once

#include <cstddef>

namespace f3r::kernels::detail {

template <typename T>
struct KernelTable {
  void (*gemm_nt)(std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool);
  void (*gemm_nn)(std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool);
  void (*gemm_tn)(std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool);
  T (*dot)(const T*, const T*, std::size_t);
  void (*axpy)(T, const T*, T*, std::size_t);
};

extern const KernelTable<float> kScalarF32;
extern const KernelTable<double> kScalarF64;

#if defined(__x86_64__) || defined(__i386__)
#define F3R_HAVE_AVX2_KERNELS 1
extern const KernelTable<float> kAvx2F32;
extern const KernelTable<double> kAvx2F64;
#else
#define F3R_HAVE_AVX2_KERNELS 0
#endif

}  // namespace f3r::kernels::detail
