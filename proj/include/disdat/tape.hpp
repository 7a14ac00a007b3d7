#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "disdat/error.hpp"
#include "disdat/kernels.hpp"
#include "disdat/tensor.hpp"

namespace disdat {

// Handle to a node on a Tape.
struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

enum class ActKind { relu, tanh };

// Running statistics owned by a batch-norm layer; the tape op updates them in
// train mode as a side effect and never differentiates through them.
template <typename T>
struct BnState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

// Reverse-mode tape. Nodes are recorded in execution order, which is a
// topological order by construction; backward() walks them in reverse.
// Single-owner: a Tape is built, differentiated and discarded by one thread.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::int64_t size() const { return static_cast<std::int64_t>(nodes_.size()); }

  Var leaf(Tensor<T> value, bool requires_grad) {
    return push(std::move(value), requires_grad, {});
  }

  // Leaf registration keyed by the parameter's storage; a second bind of the
  // same key on this tape returns the existing node so gradients from every
  // use accumulate in one place (needed when an encoder is shared).
  Var bind(const void* key, const Tensor<T>& value) {
    auto it = bound_.find(key);
    if (it != bound_.end()) return Var{it->second};
    Var v = leaf(value, true);
    bound_.emplace(key, v.id);
    return v;
  }

  const Tensor<T>& value(Var v) const { return nodes_[check(v)].value; }

  // Gradient of the backward() root w.r.t. this node; zeros when the node is
  // not reachable from the root.
  const Tensor<T>& grad(Var v) {
    Node& n = nodes_[check(v)];
    ensure_grad(n);
    return n.grad;
  }

  void backward(Var root) {
    Node& r = nodes_[check(root)];
    if (r.value.size() != 1) {
      throw Error("backward root must be scalar, got shape " + shape_str(r.value.shape()));
    }
    ensure_grad(r);
    r.grad[0] = T(1);
    for (std::int32_t i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && n.grad_live) n.backward();
    }
  }

  // ---- recorded operations -------------------------------------------------

  Var conv2d(Var x, Var k, Var b, std::int64_t stride, std::int64_t pad) {
    const Tensor<T>& xv = value(x);
    const Tensor<T>& kv = value(k);
    const Tensor<T>& bv = value(b);
    require(xv.rank() == 4, "conv2d input must be 4-d, got " + shape_str(xv.shape()));
    require(kv.rank() == 4, "conv2d kernel must be 4-d, got " + shape_str(kv.shape()));
    require(stride >= 1, "conv2d stride must be >= 1");
    require(xv.dim(1) == kv.dim(1), "conv2d channel mismatch: input " + shape_str(xv.shape()) +
                                        " vs kernel " + shape_str(kv.shape()));
    require(bv.rank() == 1 && bv.dim(0) == kv.dim(0),
            "conv2d bias must be [" + std::to_string(kv.dim(0)) + "], got " +
                shape_str(bv.shape()));
    kernels::ConvGeom g;
    g.n = xv.dim(0);
    g.cin = xv.dim(1);
    g.h = xv.dim(2);
    g.w = xv.dim(3);
    g.cout = kv.dim(0);
    g.kh = kv.dim(2);
    g.kw = kv.dim(3);
    g.stride = stride;
    g.pad = pad;
    require(g.h + 2 * pad >= g.kh && g.w + 2 * pad >= g.kw,
            "conv2d kernel " + shape_str(kv.shape()) + " larger than padded input " +
                shape_str(xv.shape()));
    g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
    g.ow = (g.w + 2 * pad - g.kw) / stride + 1;

    Tensor<T> y({g.n, g.cout, g.oh, g.ow});
    kernels::conv2d_forward(xv.data(), kv.data(), bv.data(), y.data(), g);
    Var out = push(std::move(y), any_requires({x, k, b}), {x, k, b});
    if (nodes_[static_cast<std::size_t>(out.id)].requires_grad) {
      set_backward(out, [this, out, x, k, b, g]() {
        const Tensor<T>& dy = nodes_[static_cast<std::size_t>(out.id)].grad;
        if (requires(x)) {
          kernels::conv2d_grad_input(dy.data(), value(k).data(), grad_buf(x), g);
        }
        if (requires(k)) {
          kernels::conv2d_grad_kernel(dy.data(), value(x).data(), grad_buf(k), g);
        }
        if (requires(b)) {
          T* db = grad_buf(b);
          for (std::int64_t n = 0; n < g.n; ++n) {
            for (std::int64_t co = 0; co < g.cout; ++co) {
              const T* dyp = dy.data() + ((n * g.cout + co) * g.oh) * g.ow;
              T acc = T(0);
              for (std::int64_t i = 0; i < g.oh * g.ow; ++i) acc += dyp[i];
              db[co] += acc;
            }
          }
        }
      });
    }
    return out;
  }

  // Transposed convolution; the forward map is the adjoint of conv2d with the
  // same geometry. Kernel layout is [cin, cout, kh, kw].
  Var conv_transpose2d(Var x, Var k, Var b, std::int64_t stride, std::int64_t pad) {
    const Tensor<T>& xv = value(x);
    const Tensor<T>& kv = value(k);
    const Tensor<T>& bv = value(b);
    require(xv.rank() == 4, "conv_transpose2d input must be 4-d, got " + shape_str(xv.shape()));
    require(kv.rank() == 4, "conv_transpose2d kernel must be 4-d, got " + shape_str(kv.shape()));
    require(stride >= 1, "conv_transpose2d stride must be >= 1");
    require(xv.dim(1) == kv.dim(0), "conv_transpose2d channel mismatch: input " +
                                        shape_str(xv.shape()) + " vs kernel " +
                                        shape_str(kv.shape()));
    require(bv.rank() == 1 && bv.dim(0) == kv.dim(1),
            "conv_transpose2d bias must be [" + std::to_string(kv.dim(1)) + "], got " +
                shape_str(bv.shape()));
    // ConvGeom names the large side h,w: here that is the output.
    kernels::ConvGeom g;
    g.n = xv.dim(0);
    g.cout = kv.dim(0);  // tape-input channels sit on the small side
    g.oh = xv.dim(2);
    g.ow = xv.dim(3);
    g.cin = kv.dim(1);
    g.kh = kv.dim(2);
    g.kw = kv.dim(3);
    g.stride = stride;
    g.pad = pad;
    g.h = (g.oh - 1) * stride + g.kh - 2 * pad;
    g.w = (g.ow - 1) * stride + g.kw - 2 * pad;
    require(g.h >= 1 && g.w >= 1, "conv_transpose2d output collapses to zero for input " +
                                      shape_str(xv.shape()) + " kernel " + shape_str(kv.shape()));

    Tensor<T> y({g.n, g.cin, g.h, g.w});
    kernels::conv2d_grad_input(xv.data(), kv.data(), y.data(), g);
    for (std::int64_t n = 0; n < g.n; ++n) {
      for (std::int64_t c = 0; c < g.cin; ++c) {
        T* yp = y.data() + ((n * g.cin + c) * g.h) * g.w;
        const T add = bv[c];
        for (std::int64_t i = 0; i < g.h * g.w; ++i) yp[i] += add;
      }
    }
    Var out = push(std::move(y), any_requires({x, k, b}), {x, k, b});
    if (nodes_[static_cast<std::size_t>(out.id)].requires_grad) {
      set_backward(out, [this, out, x, k, b, g]() {
        const Tensor<T>& dy = nodes_[static_cast<std::size_t>(out.id)].grad;
        if (requires(x)) {
          // Adjoint of the adjoint is the plain convolution.
          Tensor<T> dx({g.n, g.cout, g.oh, g.ow});
          kernels::conv2d_forward(dy.data(), value(k).data(), static_cast<const T*>(nullptr),
                                  dx.data(), g);
          accumulate(x, dx);
        }
        if (requires(k)) {
          kernels::conv2d_grad_kernel(value(x).data(), dy.data(), grad_buf(k), g);
        }
        if (requires(b)) {
          T* db = grad_buf(b);
          for (std::int64_t n = 0; n < g.n; ++n) {
            for (std::int64_t c = 0; c < g.cin; ++c) {
              const T* dyp = dy.data() + ((n * g.cin + c) * g.h) * g.w;
              T acc = T(0);
              for (std::int64_t i = 0; i < g.h * g.w; ++i) acc += dyp[i];
              db[c] += acc;
            }
          }
        }
      });
    }
    return out;
  }

  Var batchnorm2d(Var x, Var gamma, Var beta, BnState<T>* state, bool train, T eps = T(1e-5),
                  T momentum = T(0.1)) {
    const Tensor<T>& xv = value(x);
    require(xv.rank() == 4, "batchnorm2d input must be 4-d, got " + shape_str(xv.shape()));
    const std::int64_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    const Tensor<T>& gv = value(gamma);
    const Tensor<T>& bv = value(beta);
    require(gv.rank() == 1 && gv.dim(0) == c && bv.rank() == 1 && bv.dim(0) == c,
            "batchnorm2d affine params must be [" + std::to_string(c) + "]");
    const std::int64_t cnt = n * h * w;
    require(cnt >= 1, "batchnorm2d needs at least one value per channel");

    Tensor<T> y(xv.shape());
    Tensor<T> xhat(xv.shape());
    Tensor<T> istd({c});
    if (train) {
      for (std::int64_t ch = 0; ch < c; ++ch) {
        T mean = T(0);
        for (std::int64_t i = 0; i < n; ++i) {
          const T* xp = xv.data() + ((i * c + ch) * h) * w;
          for (std::int64_t s = 0; s < h * w; ++s) mean += xp[s];
        }
        mean /= static_cast<T>(cnt);
        T var = T(0);
        for (std::int64_t i = 0; i < n; ++i) {
          const T* xp = xv.data() + ((i * c + ch) * h) * w;
          for (std::int64_t s = 0; s < h * w; ++s) {
            const T dlt = xp[s] - mean;
            var += dlt * dlt;
          }
        }
        var /= static_cast<T>(cnt);
        const T is = T(1) / std::sqrt(var + eps);
        istd[ch] = is;
        for (std::int64_t i = 0; i < n; ++i) {
          const T* xp = xv.data() + ((i * c + ch) * h) * w;
          T* hp = xhat.data() + ((i * c + ch) * h) * w;
          T* yp = y.data() + ((i * c + ch) * h) * w;
          for (std::int64_t s = 0; s < h * w; ++s) {
            hp[s] = (xp[s] - mean) * is;
            yp[s] = gv[ch] * hp[s] + bv[ch];
          }
        }
        if (state) {
          const T unbiased = cnt > 1 ? var * static_cast<T>(cnt) / static_cast<T>(cnt - 1) : var;
          state->running_mean[ch] = (T(1) - momentum) * state->running_mean[ch] + momentum * mean;
          state->running_var[ch] = (T(1) - momentum) * state->running_var[ch] + momentum * unbiased;
        }
      }
    } else {
      require(state != nullptr, "batchnorm2d eval mode needs running stats");
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const T is = T(1) / std::sqrt(state->running_var[ch] + eps);
        istd[ch] = is;
        const T mean = state->running_mean[ch];
        for (std::int64_t i = 0; i < n; ++i) {
          const T* xp = xv.data() + ((i * c + ch) * h) * w;
          T* hp = xhat.data() + ((i * c + ch) * h) * w;
          T* yp = y.data() + ((i * c + ch) * h) * w;
          for (std::int64_t s = 0; s < h * w; ++s) {
            hp[s] = (xp[s] - mean) * is;
            yp[s] = gv[ch] * hp[s] + bv[ch];
          }
        }
      }
    }

    Var out = push(std::move(y), any_requires({x, gamma, beta}), {x, gamma, beta});
    if (nodes_[static_cast<std::size_t>(out.id)].requires_grad) {
      set_backward(out, [this, out, x, gamma, beta, xhat = std::move(xhat),
                         istd = std::move(istd), n, c, h, w, train]() {
        const Tensor<T>& dy = nodes_[static_cast<std::size_t>(out.id)].grad;
        const Tensor<T>& gv = value(gamma);
        const std::int64_t cnt = n * h * w;
        for (std::int64_t ch = 0; ch < c; ++ch) {
          T sum_dy = T(0), sum_dy_xhat = T(0);
          for (std::int64_t i = 0; i < n; ++i) {
            const T* dp = dy.data() + ((i * c + ch) * h) * w;
            const T* hp = xhat.data() + ((i * c + ch) * h) * w;
            for (std::int64_t s = 0; s < h * w; ++s) {
              sum_dy += dp[s];
              sum_dy_xhat += dp[s] * hp[s];
            }
          }
          if (requires(gamma)) grad_buf(gamma)[ch] += sum_dy_xhat;
          if (requires(beta)) grad_buf(beta)[ch] += sum_dy;
          if (requires(x)) {
            T* dxb = grad_buf(x);
            const T scale = gv[ch] * istd[ch];
            for (std::int64_t i = 0; i < n; ++i) {
              const T* dp = dy.data() + ((i * c + ch) * h) * w;
              const T* hp = xhat.data() + ((i * c + ch) * h) * w;
              T* xg = dxb + ((i * c + ch) * h) * w;
              for (std::int64_t s = 0; s < h * w; ++s) {
                if (train) {
                  // Batch statistics couple every element of the channel.
                  xg[s] += scale * (dp[s] - sum_dy / static_cast<T>(cnt) -
                                    hp[s] * sum_dy_xhat / static_cast<T>(cnt));
                } else {
                  xg[s] += scale * dp[s];
                }
              }
            }
          }
        }
      });
    }
    return out;
  }

  Var maxpool2d(Var x, std::int64_t kernel, std::int64_t stride) {
    const Tensor<T>& xv = value(x);
    require(xv.rank() == 4, "maxpool2d input must be 4-d, got " + shape_str(xv.shape()));
    const std::int64_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    require(kernel <= h && kernel <= w, "maxpool2d kernel " + std::to_string(kernel) +
                                            " exceeds input " + shape_str(xv.shape()));
    require(stride >= 1, "maxpool2d stride must be >= 1");
    const std::int64_t oh = (h - kernel) / stride + 1;
    const std::int64_t ow = (w - kernel) / stride + 1;
    Tensor<T> y({n, c, oh, ow});
    std::vector<std::int64_t> argmax(static_cast<std::size_t>(y.size()));
    std::int64_t oi = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const T* xp = xv.data() + ((i * c + ch) * h) * w;
        for (std::int64_t r = 0; r < oh; ++r) {
          for (std::int64_t col = 0; col < ow; ++col, ++oi) {
            // First maximum in row-major scan wins ties.
            std::int64_t best = -1;
            T bv = T(0);
            for (std::int64_t kr = 0; kr < kernel; ++kr) {
              for (std::int64_t kc = 0; kc < kernel; ++kc) {
                const std::int64_t idx = (r * stride + kr) * w + (col * stride + kc);
                if (best < 0 || xp[idx] > bv) {
                  best = idx;
                  bv = xp[idx];
                }
              }
            }
            y[oi] = bv;
            argmax[static_cast<std::size_t>(oi)] = ((i * c + ch) * h) * w + best;
          }
        }
      }
    }
    return pool_node(std::move(y), x, std::move(argmax));
  }

  Var adaptive_maxpool2d(Var x, std::int64_t out_h, std::int64_t out_w) {
    const Tensor<T>& xv = value(x);
    require(xv.rank() == 4, "adaptive_maxpool2d input must be 4-d, got " + shape_str(xv.shape()));
    const std::int64_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    require(out_h >= 1 && out_h <= h && out_w >= 1 && out_w <= w,
            "adaptive_maxpool2d output " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                " exceeds input " + shape_str(xv.shape()));
    Tensor<T> y({n, c, out_h, out_w});
    std::vector<std::int64_t> argmax(static_cast<std::size_t>(y.size()));
    std::int64_t oi = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const T* xp = xv.data() + ((i * c + ch) * h) * w;
        for (std::int64_t r = 0; r < out_h; ++r) {
          // floor/ceil bin edges: [floor(r*h/oh), ceil((r+1)*h/oh))
          const std::int64_t r0 = r * h / out_h;
          const std::int64_t r1 = ((r + 1) * h + out_h - 1) / out_h;
          for (std::int64_t col = 0; col < out_w; ++col, ++oi) {
            const std::int64_t c0 = col * w / out_w;
            const std::int64_t c1 = ((col + 1) * w + out_w - 1) / out_w;
            std::int64_t best = -1;
            T bv = T(0);
            for (std::int64_t rr = r0; rr < r1; ++rr) {
              for (std::int64_t cc = c0; cc < c1; ++cc) {
                const std::int64_t idx = rr * w + cc;
                if (best < 0 || xp[idx] > bv) {
                  best = idx;
                  bv = xp[idx];
                }
              }
            }
            y[oi] = bv;
            argmax[static_cast<std::size_t>(oi)] = ((i * c + ch) * h) * w + best;
          }
        }
      }
    }
    return pool_node(std::move(y), x, std::move(argmax));
  }

  Var dense(Var x, Var w, Var b) {
    const Tensor<T>& xv = value(x);
    const Tensor<T>& wv = value(w);
    const Tensor<T>& bv = value(b);
    require(xv.rank() == 2, "dense input must be 2-d, got " + shape_str(xv.shape()));
    require(wv.rank() == 2, "dense weight must be 2-d, got " + shape_str(wv.shape()));
    require(xv.dim(1) == wv.dim(1), "dense inner dimensions disagree: input " +
                                        shape_str(xv.shape()) + " vs weight " +
                                        shape_str(wv.shape()));
    require(bv.rank() == 1 && bv.dim(0) == wv.dim(0),
            "dense bias must be [" + std::to_string(wv.dim(0)) + "], got " + shape_str(bv.shape()));
    const std::int64_t n = xv.dim(0), din = xv.dim(1), dout = wv.dim(0);
    Tensor<T> y({n, dout});
    kernels::dense_forward(xv.data(), wv.data(), bv.data(), y.data(), n, din, dout);
    Var out = push(std::move(y), any_requires({x, w, b}), {x, w, b});
    if (nodes_[static_cast<std::size_t>(out.id)].requires_grad) {
      set_backward(out, [this, out, x, w, b, n, din, dout]() {
        const Tensor<T>& dy = nodes_[static_cast<std::size_t>(out.id)].grad;
        if (requires(x)) kernels::dense_grad_input(dy.data(), value(w).data(), grad_buf(x), n, din, dout);
        if (requires(w)) kernels::dense_grad_weight(dy.data(), value(x).data(), grad_buf(w), n, din, dout);
        if (requires(b)) {
          T* db = grad_buf(b);
          for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t o = 0; o < dout; ++o) db[o] += dy[i * dout + o];
          }
        }
      });
    }
    return out;
  }

  Var activation(Var x, ActKind kind) { return kind == ActKind::relu ? relu(x) : tanh_act(x); }

  Var relu(Var x) {
    const Tensor<T>& xv = value(x);
    Tensor<T> y(xv.shape());
    for (std::int64_t i = 0; i < xv.size(); ++i) y[i] = xv[i] > T(0) ? xv[i] : T(0);
    Var out = push(std::move(y), requires(x), {x});
    if (requires(x)) {
      set_backward(out, [this, out, x]() {
        const Tensor<T>& dy = nodes_[static_cast<std::size_t>(out.id)].grad;
        const Tensor<T>& xv = value(x);
        T* dx = grad_buf(x);
        // Subgradient 0 at exactly 0.
        for (std::int64_t i = 0; i < xv.size(); ++i) {
          if (xv[i] > T(0)) dx[i] += dy[i];
        }
      });
    }
    return out;
  }

  Var tanh_act(Var x) {
    const Tensor<T>& xv = value(x);
    Tensor<T> y(xv.shape());
    for (std::int64_t i = 0; i < xv.size(); ++i) y[i] = std::tanh(xv[i]);
    Var out = push(std::move(y), requires(x), {x});
    if (requires(x)) {
      set_backward(out, [this, out, x]() {
        const Tensor<T>& dy = nodes_[static_cast<std::size_t>(out.id)].grad;
        const Tensor<T>& yv = value(out);
        T* dx = grad_buf(x);
        for (std::int64_t i = 0; i < yv.size(); ++i) dx[i] += dy[i] * (T(1) - yv[i] * yv[i]);
      });
    }
    return out;
  }

  Var reshape(Var x, Shape shape) {
    const Tensor<T>& xv = value(x);
    Tensor<T> y = xv.reshaped(std::move(shape));
    Var out = push(std::move(y), requires(x), {x});
    if (requires(x)) {
      set_backward(out, [this, out, x]() {
        const Tensor<T>& dy = nodes_[static_cast<std::size_t>(out.id)].grad;
        T* dx = grad_buf(x);
        for (std::int64_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
      });
    }
    return out;
  }

  // Identity forward, -alpha scaled gradient backward (gradient reversal).
  Var grl(Var x, T alpha) {
    Tensor<T> y = value(x);
    Var out = push(std::move(y), requires(x), {x});
    if (requires(x)) {
      set_backward(out, [this, out, x, alpha]() {
        const Tensor<T>& dy = nodes_[static_cast<std::size_t>(out.id)].grad;
        T* dx = grad_buf(x);
        for (std::int64_t i = 0; i < dy.size(); ++i) dx[i] += -alpha * dy[i];
      });
    }
    return out;
  }

  // Mean over the batch of -log softmax(logits)[label], stabilized by row-max
  // subtraction.
  Var softmax_cross_entropy(Var logits, const std::vector<int>& labels) {
    const Tensor<T>& lv = value(logits);
    require(lv.rank() == 2, "cross entropy logits must be 2-d, got " + shape_str(lv.shape()));
    const std::int64_t n = lv.dim(0), k = lv.dim(1);
    require(static_cast<std::int64_t>(labels.size()) == n,
            "cross entropy labels length " + std::to_string(labels.size()) + " != batch " +
                std::to_string(n));
    Tensor<T> probs({n, k});
    T loss = T(0);
    for (std::int64_t i = 0; i < n; ++i) {
      const int lab = labels[static_cast<std::size_t>(i)];
      if (lab < 0 || lab >= k) {
        throw IndexError("cross entropy label " + std::to_string(lab) + " out of range [0," +
                         std::to_string(k) + ") at row " + std::to_string(i));
      }
      const T* row = lv.data() + i * k;
      T mx = row[0];
      for (std::int64_t j = 1; j < k; ++j) mx = row[j] > mx ? row[j] : mx;
      T denom = T(0);
      for (std::int64_t j = 0; j < k; ++j) denom += std::exp(row[j] - mx);
      for (std::int64_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - mx) / denom;
      loss += std::log(denom) - (row[lab] - mx);
    }
    loss /= static_cast<T>(n);
    Var out = push(Tensor<T>::scalar(loss), requires(logits), {logits});
    if (requires(logits)) {
      set_backward(out, [this, out, logits, labels, probs = std::move(probs), n, k]() {
        const T dy = nodes_[static_cast<std::size_t>(out.id)].grad[0];
        T* dl = grad_buf(logits);
        const T scale = dy / static_cast<T>(n);
        for (std::int64_t i = 0; i < n; ++i) {
          const int lab = labels[static_cast<std::size_t>(i)];
          for (std::int64_t j = 0; j < k; ++j) {
            dl[i * k + j] += scale * (probs[i * k + j] - (j == lab ? T(1) : T(0)));
          }
        }
      });
    }
    return out;
  }

  Var mse(Var a, Var b) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    require(av.shape() == bv.shape(), "mse shape mismatch: " + shape_str(av.shape()) + " vs " +
                                          shape_str(bv.shape()));
    const std::int64_t m = av.size();
    T loss = T(0);
    for (std::int64_t i = 0; i < m; ++i) {
      const T d = av[i] - bv[i];
      loss += d * d;
    }
    loss /= static_cast<T>(m);
    Var out = push(Tensor<T>::scalar(loss), any_requires({a, b}), {a, b});
    if (nodes_[static_cast<std::size_t>(out.id)].requires_grad) {
      set_backward(out, [this, out, a, b, m]() {
        const T dy = nodes_[static_cast<std::size_t>(out.id)].grad[0];
        const Tensor<T>& av = value(a);
        const Tensor<T>& bv = value(b);
        const T scale = dy * T(2) / static_cast<T>(m);
        if (requires(a)) {
          T* da = grad_buf(a);
          for (std::int64_t i = 0; i < m; ++i) da[i] += scale * (av[i] - bv[i]);
        }
        if (requires(b)) {
          T* db = grad_buf(b);
          for (std::int64_t i = 0; i < m; ++i) db[i] -= scale * (av[i] - bv[i]);
        }
      });
    }
    return out;
  }

  Var reduce_sum(Var x) {
    const Tensor<T>& xv = value(x);
    T s = T(0);
    for (std::int64_t i = 0; i < xv.size(); ++i) s += xv[i];
    Var out = push(Tensor<T>::scalar(s), requires(x), {x});
    if (requires(x)) {
      set_backward(out, [this, out, x]() {
        const T dy = nodes_[static_cast<std::size_t>(out.id)].grad[0];
        T* dx = grad_buf(x);
        const std::int64_t m = value(x).size();
        for (std::int64_t i = 0; i < m; ++i) dx[i] += dy;
      });
    }
    return out;
  }

  // Weighted sum of scalar terms; the composite loss node.
  Var weighted_sum(const std::vector<std::pair<Var, T>>& terms) {
    T total = T(0);
    bool req = false;
    std::vector<Var> inputs;
    inputs.reserve(terms.size());
    for (const auto& [v, c] : terms) {
      const Tensor<T>& tv = value(v);
      require(tv.size() == 1, "weighted_sum term must be scalar, got " + shape_str(tv.shape()));
      total += c * tv[0];
      req = req || requires(v);
      inputs.push_back(v);
    }
    Var out = push(Tensor<T>::scalar(total), req, inputs);
    if (req) {
      set_backward(out, [this, out, terms]() {
        const T dy = nodes_[static_cast<std::size_t>(out.id)].grad[0];
        for (const auto& [v, c] : terms) {
          if (requires(v)) grad_buf(v)[0] += c * dy;
        }
      });
    }
    return out;
  }

  // Three-term pairwise kernel divergence between embedded batches. The
  // covariance inverses are constants; the backward rule is the analytic
  // derivative w.r.t. the points only.
  Var bregman(Var src, Var tgt, std::vector<T> inv_ss, std::vector<T> inv_tt,
              std::vector<T> inv_st) {
    const Tensor<T>& sv = value(src);
    const Tensor<T>& tv = value(tgt);
    require(sv.rank() == 2 && tv.rank() == 2, "bregman batches must be 2-d");
    require(sv.dim(1) == tv.dim(1), "bregman dimension mismatch: " + shape_str(sv.shape()) +
                                        " vs " + shape_str(tv.shape()));
    const std::int64_t ns = sv.dim(0), nt = tv.dim(0), d = sv.dim(1);
    require(static_cast<std::int64_t>(inv_ss.size()) == d &&
                static_cast<std::int64_t>(inv_tt.size()) == d &&
                static_cast<std::int64_t>(inv_st.size()) == d,
            "bregman covariance length must equal latent dim " + std::to_string(d));
    const T val = kernels::bregman_value(sv.data(), ns, tv.data(), nt, d, inv_ss.data(),
                                         inv_tt.data(), inv_st.data());
    Var out = push(Tensor<T>::scalar(val), any_requires({src, tgt}), {src, tgt});
    if (nodes_[static_cast<std::size_t>(out.id)].requires_grad) {
      set_backward(out, [this, out, src, tgt, inv_ss = std::move(inv_ss),
                         inv_tt = std::move(inv_tt), inv_st = std::move(inv_st), ns, nt, d]() {
        const T dy = nodes_[static_cast<std::size_t>(out.id)].grad[0];
        Tensor<T> gs({ns, d});
        Tensor<T> gt({nt, d});
        kernels::bregman_grad(value(src).data(), ns, value(tgt).data(), nt, d, inv_ss.data(),
                              inv_tt.data(), inv_st.data(), gs.data(), gt.data());
        if (requires(src)) {
          T* p = grad_buf(src);
          for (std::int64_t i = 0; i < gs.size(); ++i) p[i] += dy * gs[i];
        }
        if (requires(tgt)) {
          T* p = grad_buf(tgt);
          for (std::int64_t i = 0; i < gt.size(); ++i) p[i] += dy * gt[i];
        }
      });
    }
    return out;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool grad_live = false;
    bool requires_grad = false;
    std::function<void()> backward;
  };

  std::size_t check(Var v) const {
    if (!v.valid() || v.id >= static_cast<std::int32_t>(nodes_.size())) {
      throw Error("invalid tape variable id " + std::to_string(v.id));
    }
    return static_cast<std::size_t>(v.id);
  }

  static void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
  }

  bool requires(Var v) const { return nodes_[check(v)].requires_grad; }

  bool any_requires(std::initializer_list<Var> vs) const {
    for (Var v : vs) {
      if (requires(v)) return true;
    }
    return false;
  }

  Var push(Tensor<T> value, bool requires_grad, const std::vector<Var>& /*inputs*/) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  void set_backward(Var v, std::function<void()> fn) {
    nodes_[check(v)].backward = std::move(fn);
  }

  void ensure_grad(Node& n) {
    if (!n.grad_live) {
      n.grad = Tensor<T>(n.value.shape());
      n.grad_live = true;
    }
  }

  T* grad_buf(Var v) {
    Node& n = nodes_[check(v)];
    ensure_grad(n);
    return n.grad.data();
  }

  void accumulate(Var v, const Tensor<T>& contribution) {
    T* p = grad_buf(v);
    for (std::int64_t i = 0; i < contribution.size(); ++i) p[i] += contribution[i];
  }

  Var pool_node(Tensor<T> y, Var x, std::vector<std::int64_t> argmax) {
    Var out = push(std::move(y), requires(x), {x});
    if (requires(x)) {
      set_backward(out, [this, out, x, argmax = std::move(argmax)]() {
        const Tensor<T>& dy = nodes_[static_cast<std::size_t>(out.id)].grad;
        T* dx = grad_buf(x);
        for (std::int64_t i = 0; i < dy.size(); ++i) {
          dx[argmax[static_cast<std::size_t>(i)]] += dy[i];
        }
      });
    }
    return out;
  }

  std::vector<Node> nodes_;
  std::unordered_map<const void*, std::int32_t> bound_;
};

}  // namespace disdat
