#include <cmath>
#include <vector>

#include "disdat/kernels.hpp"

namespace disdat::kernels::serial {

template <typename T>
void conv2d_forward(const T* x, const T* k, const T* bias, T* y, const ConvGeom& g) {
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t co = 0; co < g.cout; ++co) {
      const T b = bias ? bias[co] : T(0);
      T* yp = y + ((n * g.cout + co) * g.oh) * g.ow;
      for (std::int64_t oh = 0; oh < g.oh; ++oh) {
        for (std::int64_t ow = 0; ow < g.ow; ++ow) {
          T acc = b;
          for (std::int64_t ci = 0; ci < g.cin; ++ci) {
            const T* xp = x + ((n * g.cin + ci) * g.h) * g.w;
            const T* kp = k + ((co * g.cin + ci) * g.kh) * g.kw;
            for (std::int64_t r = 0; r < g.kh; ++r) {
              const std::int64_t ih = oh * g.stride + r - g.pad;
              if (ih < 0 || ih >= g.h) continue;
              for (std::int64_t c = 0; c < g.kw; ++c) {
                const std::int64_t iw = ow * g.stride + c - g.pad;
                if (iw < 0 || iw >= g.w) continue;
                acc += xp[ih * g.w + iw] * kp[r * g.kw + c];
              }
            }
          }
          yp[oh * g.ow + ow] = acc;
        }
      }
    }
  }
}

template <typename T>
void conv2d_grad_input(const T* dy, const T* k, T* dx, const ConvGeom& g) {
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t ci = 0; ci < g.cin; ++ci) {
      T* dxp = dx + ((n * g.cin + ci) * g.h) * g.w;
      for (std::int64_t ih = 0; ih < g.h; ++ih) {
        for (std::int64_t iw = 0; iw < g.w; ++iw) {
          T acc = T(0);
          for (std::int64_t co = 0; co < g.cout; ++co) {
            const T* dyp = dy + ((n * g.cout + co) * g.oh) * g.ow;
            const T* kp = k + ((co * g.cin + ci) * g.kh) * g.kw;
            for (std::int64_t r = 0; r < g.kh; ++r) {
              const std::int64_t num = ih + g.pad - r;
              if (num < 0 || num % g.stride != 0) continue;
              const std::int64_t oh = num / g.stride;
              if (oh >= g.oh) continue;
              for (std::int64_t c = 0; c < g.kw; ++c) {
                const std::int64_t numw = iw + g.pad - c;
                if (numw < 0 || numw % g.stride != 0) continue;
                const std::int64_t ow = numw / g.stride;
                if (ow >= g.ow) continue;
                acc += dyp[oh * g.ow + ow] * kp[r * g.kw + c];
              }
            }
          }
          dxp[ih * g.w + iw] += acc;
        }
      }
    }
  }
}

template <typename T>
void conv2d_grad_kernel(const T* dy, const T* x, T* dk, const ConvGeom& g) {
  for (std::int64_t co = 0; co < g.cout; ++co) {
    for (std::int64_t ci = 0; ci < g.cin; ++ci) {
      T* dkp = dk + ((co * g.cin + ci) * g.kh) * g.kw;
      for (std::int64_t r = 0; r < g.kh; ++r) {
        for (std::int64_t c = 0; c < g.kw; ++c) {
          T acc = T(0);
          for (std::int64_t n = 0; n < g.n; ++n) {
            const T* dyp = dy + ((n * g.cout + co) * g.oh) * g.ow;
            const T* xp = x + ((n * g.cin + ci) * g.h) * g.w;
            for (std::int64_t oh = 0; oh < g.oh; ++oh) {
              const std::int64_t ih = oh * g.stride + r - g.pad;
              if (ih < 0 || ih >= g.h) continue;
              for (std::int64_t ow = 0; ow < g.ow; ++ow) {
                const std::int64_t iw = ow * g.stride + c - g.pad;
                if (iw < 0 || iw >= g.w) continue;
                acc += dyp[oh * g.ow + ow] * xp[ih * g.w + iw];
              }
            }
          }
          dkp[r * g.kw + c] += acc;
        }
      }
    }
  }
}

template <typename T>
void dense_forward(const T* x, const T* w, const T* b, T* y, std::int64_t n, std::int64_t din,
                   std::int64_t dout) {
  for (std::int64_t i = 0; i < n; ++i) {
    const T* xp = x + i * din;
    for (std::int64_t o = 0; o < dout; ++o) {
      T acc = b ? b[o] : T(0);
      const T* wp = w + o * din;
      for (std::int64_t j = 0; j < din; ++j) acc += xp[j] * wp[j];
      y[i * dout + o] = acc;
    }
  }
}

template <typename T>
void dense_grad_input(const T* dy, const T* w, T* dx, std::int64_t n, std::int64_t din,
                      std::int64_t dout) {
  for (std::int64_t i = 0; i < n; ++i) {
    const T* dyp = dy + i * dout;
    T* dxp = dx + i * din;
    for (std::int64_t j = 0; j < din; ++j) {
      T acc = T(0);
      for (std::int64_t o = 0; o < dout; ++o) acc += dyp[o] * w[o * din + j];
      dxp[j] += acc;
    }
  }
}

template <typename T>
void dense_grad_weight(const T* dy, const T* x, T* dw, std::int64_t n, std::int64_t din,
                       std::int64_t dout) {
  for (std::int64_t o = 0; o < dout; ++o) {
    for (std::int64_t j = 0; j < din; ++j) {
      T acc = T(0);
      for (std::int64_t i = 0; i < n; ++i) acc += dy[i * dout + o] * x[i * din + j];
      dw[o * din + j] += acc;
    }
  }
}

namespace {

template <typename T>
inline T kernel_at(const T* a, const T* b, const T* inv, std::int64_t d) {
  T q = T(0);
  for (std::int64_t j = 0; j < d; ++j) {
    const T delta = a[j] - b[j];
    q += delta * delta * inv[j];
  }
  return std::exp(T(-0.5) * q);
}

}  // namespace

// Row partials are stored and reduced in index order so the serial and OpenMP
// versions agree bitwise.
template <typename T>
T bregman_value(const T* src, std::int64_t ns, const T* tgt, std::int64_t nt, std::int64_t d,
                const T* inv_ss, const T* inv_tt, const T* inv_st) {
  std::vector<T> row_ss(static_cast<std::size_t>(ns));
  std::vector<T> row_tt(static_cast<std::size_t>(nt));
  std::vector<T> row_st(static_cast<std::size_t>(ns));
  for (std::int64_t j = 0; j < ns; ++j) {
    T acc = T(0);
    for (std::int64_t k = 0; k < ns; ++k) acc += kernel_at(src + k * d, src + j * d, inv_ss, d);
    row_ss[static_cast<std::size_t>(j)] = acc;
  }
  for (std::int64_t j = 0; j < nt; ++j) {
    T acc = T(0);
    for (std::int64_t k = 0; k < nt; ++k) acc += kernel_at(tgt + k * d, tgt + j * d, inv_tt, d);
    row_tt[static_cast<std::size_t>(j)] = acc;
  }
  for (std::int64_t j = 0; j < ns; ++j) {
    T acc = T(0);
    for (std::int64_t k = 0; k < nt; ++k) acc += kernel_at(tgt + k * d, src + j * d, inv_st, d);
    row_st[static_cast<std::size_t>(j)] = acc;
  }
  T term_ss = T(0), term_tt = T(0), term_st = T(0);
  for (std::int64_t j = 0; j < ns; ++j) term_ss += row_ss[static_cast<std::size_t>(j)];
  for (std::int64_t j = 0; j < nt; ++j) term_tt += row_tt[static_cast<std::size_t>(j)];
  for (std::int64_t j = 0; j < ns; ++j) term_st += row_st[static_cast<std::size_t>(j)];
  const T inv_ns = T(1) / static_cast<T>(ns);
  const T inv_nt = T(1) / static_cast<T>(nt);
  return term_ss * inv_ns * inv_ns + term_tt * inv_nt * inv_nt - T(2) * term_st * inv_ns * inv_nt;
}

template <typename T>
void bregman_grad(const T* src, std::int64_t ns, const T* tgt, std::int64_t nt, std::int64_t d,
                  const T* inv_ss, const T* inv_tt, const T* inv_st, T* gs, T* gt) {
  const T cs = T(2) / (static_cast<T>(ns) * static_cast<T>(ns));
  const T ct = T(2) / (static_cast<T>(nt) * static_cast<T>(nt));
  const T cx = T(2) / (static_cast<T>(ns) * static_cast<T>(nt));
  for (std::int64_t i = 0; i < ns; ++i) {
    const T* yi = src + i * d;
    T* gi = gs + i * d;
    for (std::int64_t j = 0; j < d; ++j) gi[j] = T(0);
    for (std::int64_t k = 0; k < ns; ++k) {
      const T* yk = src + k * d;
      const T gk = kernel_at(yk, yi, inv_ss, d);
      for (std::int64_t j = 0; j < d; ++j) gi[j] += cs * gk * inv_ss[j] * (yk[j] - yi[j]);
    }
    for (std::int64_t k = 0; k < nt; ++k) {
      const T* yk = tgt + k * d;
      const T gk = kernel_at(yk, yi, inv_st, d);
      for (std::int64_t j = 0; j < d; ++j) gi[j] -= cx * gk * inv_st[j] * (yk[j] - yi[j]);
    }
  }
  for (std::int64_t i = 0; i < nt; ++i) {
    const T* yi = tgt + i * d;
    T* gi = gt + i * d;
    for (std::int64_t j = 0; j < d; ++j) gi[j] = T(0);
    for (std::int64_t k = 0; k < nt; ++k) {
      const T* yk = tgt + k * d;
      const T gk = kernel_at(yk, yi, inv_tt, d);
      for (std::int64_t j = 0; j < d; ++j) gi[j] += ct * gk * inv_tt[j] * (yk[j] - yi[j]);
    }
    for (std::int64_t k = 0; k < ns; ++k) {
      const T* yk = src + k * d;
      const T gk = kernel_at(yk, yi, inv_st, d);
      for (std::int64_t j = 0; j < d; ++j) gi[j] -= cx * gk * inv_st[j] * (yk[j] - yi[j]);
    }
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

}  // namespace disdat::kernels::serial
