#pragma once

#include <cstdint>

namespace disdat::kernels {

// Compute-heavy inner loops exist twice: a plain serial reference and an
// OpenMP version. Both produce bitwise-identical output for any thread count;
// every output element (or partial-sum slot) is owned by one iteration and
// summed in a fixed order. The serial versions are retained for testing and
// benchmarking, the dispatchers below pick the active backend.
enum class Backend { serial, openmp };

Backend backend();
void set_backend(Backend b);
bool openmp_available();
int thread_count();

// Geometry shared by conv2d and its adjoint (which doubles as the transposed
// convolution). h,w is always the larger spatial side, oh,ow the smaller:
//   oh = (h + 2*pad - kh) / stride + 1.
struct ConvGeom {
  std::int64_t n = 0;
  std::int64_t cin = 0;   // channels on the h,w side
  std::int64_t h = 0, w = 0;
  std::int64_t cout = 0;  // channels on the oh,ow side
  std::int64_t kh = 0, kw = 0;
  std::int64_t stride = 1;
  std::int64_t pad = 0;
  std::int64_t oh = 0, ow = 0;
};

namespace serial {

// y[n,co,oh,ow] = sum_{ci,kh,kw} x[n,ci,oh*s+kh-p,ow*s+kw-p] * k[co,ci,kh,kw] (+ bias[co])
// bias may be null.
template <typename T>
void conv2d_forward(const T* x, const T* k, const T* bias, T* y, const ConvGeom& g);

// dx[n,ci,ih,iw] += sum over contributing (co,kh,kw); the adjoint of
// conv2d_forward, also used as the transposed-convolution forward map.
template <typename T>
void conv2d_grad_input(const T* dy, const T* k, T* dx, const ConvGeom& g);

// dk[co,ci,kh,kw] += sum_{n,oh,ow} dy[n,co,oh,ow] * x[n,ci,oh*s+kh-p,ow*s+kw-p]
template <typename T>
void conv2d_grad_kernel(const T* dy, const T* x, T* dk, const ConvGeom& g);

// y[n,o] = sum_i x[n,i]*w[o,i] + b[o]; b may be null.
template <typename T>
void dense_forward(const T* x, const T* w, const T* b, T* y, std::int64_t n, std::int64_t din,
                   std::int64_t dout);

template <typename T>
void dense_grad_input(const T* dy, const T* w, T* dx, std::int64_t n, std::int64_t din,
                      std::int64_t dout);

template <typename T>
void dense_grad_weight(const T* dy, const T* x, T* dw, std::int64_t n, std::int64_t din,
                       std::int64_t dout);

// Three-term pairwise Gaussian kernel sum over embedded batches:
//   (1/ns^2)  sum_jk exp(-.5 |ys_k - ys_j|^2_inv_ss)
// + (1/nt^2)  sum_jk exp(-.5 |yt_k - yt_j|^2_inv_tt)
// - (2/ns nt) sum_jk exp(-.5 |yt_k - ys_j|^2_inv_st)
// inv_* are entrywise inverses of the summed diagonal covariances (length d).
template <typename T>
T bregman_value(const T* src, std::int64_t ns, const T* tgt, std::int64_t nt, std::int64_t d,
                const T* inv_ss, const T* inv_tt, const T* inv_st);

// Analytic per-point derivatives of bregman_value; gs is [ns,d], gt is [nt,d],
// both overwritten (not accumulated).
template <typename T>
void bregman_grad(const T* src, std::int64_t ns, const T* tgt, std::int64_t nt, std::int64_t d,
                  const T* inv_ss, const T* inv_tt, const T* inv_st, T* gs, T* gt);

}  // namespace serial

namespace omp {

template <typename T>
void conv2d_forward(const T* x, const T* k, const T* bias, T* y, const ConvGeom& g);
template <typename T>
void conv2d_grad_input(const T* dy, const T* k, T* dx, const ConvGeom& g);
template <typename T>
void conv2d_grad_kernel(const T* dy, const T* x, T* dk, const ConvGeom& g);
template <typename T>
void dense_forward(const T* x, const T* w, const T* b, T* y, std::int64_t n, std::int64_t din,
                   std::int64_t dout);
template <typename T>
void dense_grad_input(const T* dy, const T* w, T* dx, std::int64_t n, std::int64_t din,
                      std::int64_t dout);
template <typename T>
void dense_grad_weight(const T* dy, const T* x, T* dw, std::int64_t n, std::int64_t din,
                       std::int64_t dout);
template <typename T>
T bregman_value(const T* src, std::int64_t ns, const T* tgt, std::int64_t nt, std::int64_t d,
                const T* inv_ss, const T* inv_tt, const T* inv_st);
template <typename T>
void bregman_grad(const T* src, std::int64_t ns, const T* tgt, std::int64_t nt, std::int64_t d,
                  const T* inv_ss, const T* inv_tt, const T* inv_st, T* gs, T* gt);

}  // namespace omp

// Backend dispatchers.
template <typename T>
void conv2d_forward(const T* x, const T* k, const T* bias, T* y, const ConvGeom& g);
template <typename T>
void conv2d_grad_input(const T* dy, const T* k, T* dx, const ConvGeom& g);
template <typename T>
void conv2d_grad_kernel(const T* dy, const T* x, T* dk, const ConvGeom& g);
template <typename T>
void dense_forward(const T* x, const T* w, const T* b, T* y, std::int64_t n, std::int64_t din,
                   std::int64_t dout);
template <typename T>
void dense_grad_input(const T* dy, const T* w, T* dx, std::int64_t n, std::int64_t din,
                      std::int64_t dout);
template <typename T>
void dense_grad_weight(const T* dy, const T* x, T* dw, std::int64_t n, std::int64_t din,
                       std::int64_t dout);
template <typename T>
T bregman_value(const T* src, std::int64_t ns, const T* tgt, std::int64_t nt, std::int64_t d,
                const T* inv_ss, const T* inv_tt, const T* inv_st);
template <typename T>
void bregman_grad(const T* src, std::int64_t ns, const T* tgt, std::int64_t nt, std::int64_t d,
                  const T* inv_ss, const T* inv_tt, const T* inv_st, T* gs, T* gt);

}  // namespace disdat::kernels
