#include "disdat/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

#include <atomic>

namespace disdat::kernels {

namespace {
std::atomic<Backend> g_backend{
#ifdef _OPENMP
    Backend::openmp
#else
    Backend::serial
#endif
};
}  // namespace

Backend backend() { return g_backend.load(std::memory_order_relaxed); }

void set_backend(Backend b) {
#ifndef _OPENMP
  b = Backend::serial;
#endif
  g_backend.store(b, std::memory_order_relaxed);
}

bool openmp_available() {
#ifdef _OPENMP
  return true;
#else
  return false;
#endif
}

int thread_count() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

template <typename T>
void conv2d_forward(const T* x, const T* k, const T* bias, T* y, const ConvGeom& g) {
  if (backend() == Backend::openmp) {
    omp::conv2d_forward(x, k, bias, y, g);
  } else {
    serial::conv2d_forward(x, k, bias, y, g);
  }
}

template <typename T>
void conv2d_grad_input(const T* dy, const T* k, T* dx, const ConvGeom& g) {
  if (backend() == Backend::openmp) {
    omp::conv2d_grad_input(dy, k, dx, g);
  } else {
    serial::conv2d_grad_input(dy, k, dx, g);
  }
}

template <typename T>
void conv2d_grad_kernel(const T* dy, const T* x, T* dk, const ConvGeom& g) {
  if (backend() == Backend::openmp) {
    omp::conv2d_grad_kernel(dy, x, dk, g);
  } else {
    serial::conv2d_grad_kernel(dy, x, dk, g);
  }
}

template <typename T>
void dense_forward(const T* x, const T* w, const T* b, T* y, std::int64_t n, std::int64_t din,
                   std::int64_t dout) {
  if (backend() == Backend::openmp) {
    omp::dense_forward(x, w, b, y, n, din, dout);
  } else {
    serial::dense_forward(x, w, b, y, n, din, dout);
  }
}

template <typename T>
void dense_grad_input(const T* dy, const T* w, T* dx, std::int64_t n, std::int64_t din,
                      std::int64_t dout) {
  if (backend() == Backend::openmp) {
    omp::dense_grad_input(dy, w, dx, n, din, dout);
  } else {
    serial::dense_grad_input(dy, w, dx, n, din, dout);
  }
}

template <typename T>
void dense_grad_weight(const T* dy, const T* x, T* dw, std::int64_t n, std::int64_t din,
                       std::int64_t dout) {
  if (backend() == Backend::openmp) {
    omp::dense_grad_weight(dy, x, dw, n, din, dout);
  } else {
    serial::dense_grad_weight(dy, x, dw, n, din, dout);
  }
}

template <typename T>
T bregman_value(const T* src, std::int64_t ns, const T* tgt, std::int64_t nt, std::int64_t d,
                const T* inv_ss, const T* inv_tt, const T* inv_st) {
  if (backend() == Backend::openmp) {
    return omp::bregman_value(src, ns, tgt, nt, d, inv_ss, inv_tt, inv_st);
  }
  return serial::bregman_value(src, ns, tgt, nt, d, inv_ss, inv_tt, inv_st);
}

template <typename T>
void bregman_grad(const T* src, std::int64_t ns, const T* tgt, std::int64_t nt, std::int64_t d,
                  const T* inv_ss, const T* inv_tt, const T* inv_st, T* gs, T* gt) {
  if (backend() == Backend::openmp) {
    omp::bregman_grad(src, ns, tgt, nt, d, inv_ss, inv_tt, inv_st, gs, gt);
  } else {
    serial::bregman_grad(src, ns, tgt, nt, d, inv_ss, inv_tt, inv_st, gs, gt);
  }
}

template void conv2d_forward<float>(const float*, const float*, const float*, float*,
                                    const ConvGeom&);
template void conv2d_forward<double>(const double*, const double*, const double*, double*,
                                     const ConvGeom&);
template void conv2d_grad_input<float>(const float*, const float*, float*, const ConvGeom&);
template void conv2d_grad_input<double>(const double*, const double*, double*, const ConvGeom&);
template void conv2d_grad_kernel<float>(const float*, const float*, float*, const ConvGeom&);
template void conv2d_grad_kernel<double>(const double*, const double*, double*, const ConvGeom&);
template void dense_forward<float>(const float*, const float*, const float*, float*, std::int64_t,
                                   std::int64_t, std::int64_t);
template void dense_forward<double>(const double*, const double*, const double*, double*,
                                    std::int64_t, std::int64_t, std::int64_t);
template void dense_grad_input<float>(const float*, const float*, float*, std::int64_t,
                                      std::int64_t, std::int64_t);
template void dense_grad_input<double>(const double*, const double*, double*, std::int64_t,
                                       std::int64_t, std::int64_t);
template void dense_grad_weight<float>(const float*, const float*, float*, std::int64_t,
                                       std::int64_t, std::int64_t);
template void dense_grad_weight<double>(const double*, const double*, double*, std::int64_t,
                                        std::int64_t, std::int64_t);
template float bregman_value<float>(const float*, std::int64_t, const float*, std::int64_t,
                                    std::int64_t, const float*, const float*, const float*);
template double bregman_value<double>(const double*, std::int64_t, const double*, std::int64_t,
                                      std::int64_t, const double*, const double*, const double*);
template void bregman_grad<float>(const float*, std::int64_t, const float*, std::int64_t,
                                  std::int64_t, const float*, const float*, const float*, float*,
                                  float*);
template void bregman_grad<double>(const double*, std::int64_t, const double*, std::int64_t,
                                   std::int64_t, const double*, const double*, const double*,
                                   double*, double*);

}  // namespace disdat::kernels
