#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "msnas/tensor.hpp"

namespace msnas::ops {

enum class PoolKind { max, avg };

// ---------------------------------------------------------------------------
// Op tracing. When a trace is installed every primitive appends one record of
// the loop bounds it ran with. Tests replay those records as bare counting
// loop nests to cross-check the closed-form FLOPs accounting.
// ---------------------------------------------------------------------------

struct OpCall {
  enum class Kind { conv, dense, pool, norm, relu, add, gap } kind;
  // conv: n, cout, hout, wout, cin_per_group, kh, kw
  // dense: n, features, classes
  // pool: n, c, hout, wout, kernel
  // norm/relu/add: numel
  // gap: n, c, h, w
  int64_t a = 0, b = 0, c = 0, d = 0, e = 0, f = 0, g = 0;
};

inline thread_local std::vector<OpCall>* g_op_trace = nullptr;

struct ScopedOpTrace {
  explicit ScopedOpTrace(std::vector<OpCall>& sink) { g_op_trace = &sink; }
  ~ScopedOpTrace() { g_op_trace = nullptr; }
};

inline void trace(OpCall call) {
  if (g_op_trace) g_op_trace->push_back(call);
}

// ---------------------------------------------------------------------------
// Shape helpers
// ---------------------------------------------------------------------------

inline int conv_out_extent(int in, int kernel, int stride, int padding, int dilation) {
  return (in + 2 * padding - dilation * (kernel - 1) - 1) / stride + 1;
}

// ---------------------------------------------------------------------------
// conv2d: NCHW input, [Cout, Cin/groups, kh, kw] weight, no bias.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(GradTape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, int stride,
                 int padding, int dilation = 1, int groups = 1) {
  check_arg(stride >= 1, "conv2d: stride must be >= 1, got ", stride);
  check_arg(dilation >= 1, "conv2d: dilation must be >= 1, got ", dilation);
  check_arg(padding >= 0, "conv2d: padding must be >= 0, got ", padding);
  check_arg(groups >= 1, "conv2d: groups must be >= 1, got ", groups);
  check_arg(x.rank() == 4, "conv2d: input must be NCHW, got rank ", x.rank());
  check_arg(w.rank() == 4, "conv2d: weight must be [Cout,Cin/groups,kh,kw], got rank ", w.rank());

  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(0), wcin = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  check_arg(cin % groups == 0, "conv2d: input channels ", cin, " not divisible by groups ",
            groups);
  check_arg(cout % groups == 0, "conv2d: output channels ", cout, " not divisible by groups ",
            groups);
  check_arg(wcin == cin / groups, "conv2d: weight expects ", wcin,
            " input channels per group but input has ", cin / groups);

  const int hout = conv_out_extent(h, kh, stride, padding, dilation);
  const int wout = conv_out_extent(wd, kw, stride, padding, dilation);
  check_arg(hout >= 1 && wout >= 1, "conv2d: kernel ", kh, "x", kw, " with stride ", stride,
            " does not fit padded input ", h, "x", wd);

  const int cin_g = cin / groups, cout_g = cout / groups;
  Tensor<T> y = Tensor<T>::zeros({n, cout, hout, wout});
  const T* xp = x.data();
  const T* wp = w.data();
  T* yp = y.data();

  for (int in = 0; in < n; ++in) {
    for (int g = 0; g < groups; ++g) {
      for (int oc = 0; oc < cout_g; ++oc) {
        const int co = g * cout_g + oc;
        for (int oh = 0; oh < hout; ++oh) {
          for (int ow = 0; ow < wout; ++ow) {
            T acc = 0;
            for (int ic = 0; ic < cin_g; ++ic) {
              const int ci = g * cin_g + ic;
              const T* xrow = xp + ((static_cast<int64_t>(in) * cin + ci) * h) * wd;
              const T* wrow = wp + ((static_cast<int64_t>(co) * cin_g + ic) * kh) * kw;
              for (int fh = 0; fh < kh; ++fh) {
                const int ih = oh * stride - padding + fh * dilation;
                if (ih < 0 || ih >= h) continue;
                for (int fw = 0; fw < kw; ++fw) {
                  const int iw = ow * stride - padding + fw * dilation;
                  if (iw < 0 || iw >= wd) continue;
                  acc += xrow[ih * wd + iw] * wrow[fh * kw + fw];
                }
              }
            }
            yp[((static_cast<int64_t>(in) * cout + co) * hout + oh) * wout + ow] = acc;
          }
        }
      }
    }
  }

  trace({OpCall::Kind::conv, n, cout, hout, wout, cin_g, kh, kw});

  const bool need = tape.recording() && (x.requires_grad() || w.requires_grad());
  if (need) {
    Tensor<T> yc = y;
    yc.set_requires_grad(true);
    Tensor<T> xc = x, wc = w;
    tape.record([xc, wc, yc, stride, padding, dilation, groups]() mutable {
      const int n = xc.dim(0), cin = xc.dim(1), h = xc.dim(2), wd = xc.dim(3);
      const int cout = wc.dim(0), kh = wc.dim(2), kw = wc.dim(3);
      const int hout = yc.dim(2), wout = yc.dim(3);
      const int cin_g = cin / groups, cout_g = cout / groups;
      const T* gy = yc.grad_data();
      const T* xp = xc.data();
      const T* wp = wc.data();
      T* gx = xc.requires_grad() ? xc.grad_data() : nullptr;
      T* gw = wc.requires_grad() ? wc.grad_data() : nullptr;
      for (int in = 0; in < n; ++in) {
        for (int g = 0; g < groups; ++g) {
          for (int oc = 0; oc < cout_g; ++oc) {
            const int co = g * cout_g + oc;
            for (int oh = 0; oh < hout; ++oh) {
              for (int ow = 0; ow < wout; ++ow) {
                const T gout =
                    gy[((static_cast<int64_t>(in) * cout + co) * hout + oh) * wout + ow];
                if (gout == T(0)) continue;
                for (int ic = 0; ic < cin_g; ++ic) {
                  const int ci = g * cin_g + ic;
                  const int64_t xbase = ((static_cast<int64_t>(in) * cin + ci) * h) * wd;
                  const int64_t wbase = ((static_cast<int64_t>(co) * cin_g + ic) * kh) * kw;
                  for (int fh = 0; fh < kh; ++fh) {
                    const int ih = oh * stride - padding + fh * dilation;
                    if (ih < 0 || ih >= h) continue;
                    for (int fw = 0; fw < kw; ++fw) {
                      const int iw = ow * stride - padding + fw * dilation;
                      if (iw < 0 || iw >= wd) continue;
                      if (gx) gx[xbase + ih * wd + iw] += gout * wp[wbase + fh * kw + fw];
                      if (gw) gw[wbase + fh * kw + fw] += gout * xp[xbase + ih * wd + iw];
                    }
                  }
                }
              }
            }
          }
        }
      }
    });
    return yc;
  }
  return y;
}

// ---------------------------------------------------------------------------
// pool2d. Average pooling divides by the number of in-bounds window cells
// (padding is excluded from the count); max pooling routes gradient to the
// first-seen argmax of each window.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> pool2d(GradTape<T>& tape, const Tensor<T>& x, PoolKind kind, int kernel, int stride,
                 int padding) {
  check_arg(kernel >= 1, "pool2d: kernel must be >= 1, got ", kernel);
  check_arg(stride >= 1, "pool2d: stride must be >= 1, got ", stride);
  check_arg(padding >= 0, "pool2d: padding must be >= 0, got ", padding);
  check_arg(x.rank() == 4, "pool2d: input must be NCHW, got rank ", x.rank());
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  check_arg(kernel <= h + 2 * padding && kernel <= wd + 2 * padding, "pool2d: kernel ", kernel,
            " larger than padded input ", h + 2 * padding, "x", wd + 2 * padding);

  const int hout = conv_out_extent(h, kernel, stride, padding, 1);
  const int wout = conv_out_extent(wd, kernel, stride, padding, 1);
  Tensor<T> y = Tensor<T>::zeros({n, c, hout, wout});
  const T* xp = x.data();
  T* yp = y.data();

  auto window = [&](int in, int ic, int oh, int ow, auto&& fn) {
    const T* xplane = xp + (static_cast<int64_t>(in) * c + ic) * h * wd;
    for (int fh = 0; fh < kernel; ++fh) {
      const int ih = oh * stride - padding + fh;
      if (ih < 0 || ih >= h) continue;
      for (int fw = 0; fw < kernel; ++fw) {
        const int iw = ow * stride - padding + fw;
        if (iw < 0 || iw >= wd) continue;
        fn(xplane[ih * wd + iw], ih * wd + iw);
      }
    }
  };

  for (int in = 0; in < n; ++in) {
    for (int ic = 0; ic < c; ++ic) {
      for (int oh = 0; oh < hout; ++oh) {
        for (int ow = 0; ow < wout; ++ow) {
          T out;
          if (kind == PoolKind::max) {
            T best = -std::numeric_limits<T>::infinity();
            window(in, ic, oh, ow, [&](T v, int64_t) { best = std::max(best, v); });
            out = best;
          } else {
            T sum = 0;
            int cnt = 0;
            window(in, ic, oh, ow, [&](T v, int64_t) {
              sum += v;
              ++cnt;
            });
            out = sum / static_cast<T>(cnt);
          }
          yp[((static_cast<int64_t>(in) * c + ic) * hout + oh) * wout + ow] = out;
        }
      }
    }
  }

  trace({OpCall::Kind::pool, n, c, hout, wout, kernel});

  if (tape.recording() && x.requires_grad()) {
    Tensor<T> yc = y;
    yc.set_requires_grad(true);
    Tensor<T> xc = x;
    tape.record([xc, yc, kind, kernel, stride, padding]() mutable {
      const int n = xc.dim(0), c = xc.dim(1), h = xc.dim(2), wd = xc.dim(3);
      const int hout = yc.dim(2), wout = yc.dim(3);
      const T* gy = yc.grad_data();
      const T* xp = xc.data();
      T* gx = xc.grad_data();
      for (int in = 0; in < n; ++in) {
        for (int ic = 0; ic < c; ++ic) {
          const int64_t plane = (static_cast<int64_t>(in) * c + ic) * h * wd;
          for (int oh = 0; oh < hout; ++oh) {
            for (int ow = 0; ow < wout; ++ow) {
              const T gout = gy[((static_cast<int64_t>(in) * c + ic) * hout + oh) * wout + ow];
              if (gout == T(0)) continue;
              if (kind == PoolKind::max) {
                T best = -std::numeric_limits<T>::infinity();
                int64_t arg = -1;
                for (int fh = 0; fh < kernel; ++fh) {
                  const int ih = oh * stride - padding + fh;
                  if (ih < 0 || ih >= h) continue;
                  for (int fw = 0; fw < kernel; ++fw) {
                    const int iw = ow * stride - padding + fw;
                    if (iw < 0 || iw >= wd) continue;
                    const T v = xp[plane + ih * wd + iw];
                    if (v > best) {
                      best = v;
                      arg = plane + ih * wd + iw;
                    }
                  }
                }
                if (arg >= 0) gx[arg] += gout;
              } else {
                int cnt = 0;
                for (int fh = 0; fh < kernel; ++fh) {
                  const int ih = oh * stride - padding + fh;
                  if (ih < 0 || ih >= h) continue;
                  for (int fw = 0; fw < kernel; ++fw) {
                    const int iw = ow * stride - padding + fw;
                    if (iw >= 0 && iw < wd) ++cnt;
                  }
                }
                const T share = gout / static_cast<T>(cnt);
                for (int fh = 0; fh < kernel; ++fh) {
                  const int ih = oh * stride - padding + fh;
                  if (ih < 0 || ih >= h) continue;
                  for (int fw = 0; fw < kernel; ++fw) {
                    const int iw = ow * stride - padding + fw;
                    if (iw < 0 || iw >= wd) continue;
                    gx[plane + ih * wd + iw] += share;
                  }
                }
              }
            }
          }
        }
      }
    });
    return yc;
  }
  return y;
}

// ---------------------------------------------------------------------------
// affine_norm: per-channel batch normalization over N*H*W with running stats.
// ---------------------------------------------------------------------------

template <typename T>
struct NormStats {
  Tensor<T> running_mean;  // [C]
  Tensor<T> running_var;   // [C]
  static NormStats make(int channels) {
    return {Tensor<T>::zeros({channels}), Tensor<T>::full({channels}, T(1))};
  }
};

template <typename T>
Tensor<T> affine_norm(GradTape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                      const Tensor<T>& beta, NormStats<T>& stats, bool train_mode,
                      bool update_stats, T eps = T(1e-5), T momentum = T(0.1)) {
  check_arg(x.rank() == 4, "affine_norm: input must be NCHW, got rank ", x.rank());
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  check_arg(n >= 1, "affine_norm: zero-size batch");
  check_arg(gamma.numel() == c && beta.numel() == c, "affine_norm: gamma/beta length ",
            gamma.numel(), "/", beta.numel(), " does not match channel count ", c);

  const int64_t cnt = static_cast<int64_t>(n) * h * wd;
  const int64_t plane = static_cast<int64_t>(h) * wd;
  std::vector<T> mean(c, T(0)), var(c, T(0));

  if (train_mode) {
    const T* xp = x.data();
    for (int ic = 0; ic < c; ++ic) {
      T s = 0;
      for (int in = 0; in < n; ++in) {
        const T* p = xp + (static_cast<int64_t>(in) * c + ic) * plane;
        for (int64_t i = 0; i < plane; ++i) s += p[i];
      }
      mean[ic] = s / static_cast<T>(cnt);
      T v = 0;
      for (int in = 0; in < n; ++in) {
        const T* p = xp + (static_cast<int64_t>(in) * c + ic) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          const T d = p[i] - mean[ic];
          v += d * d;
        }
      }
      var[ic] = v / static_cast<T>(cnt);
    }
    if (update_stats) {
      T* rm = stats.running_mean.data();
      T* rv = stats.running_var.data();
      for (int ic = 0; ic < c; ++ic) {
        rm[ic] = (T(1) - momentum) * rm[ic] + momentum * mean[ic];
        const T unbiased =
            cnt > 1 ? var[ic] * static_cast<T>(cnt) / static_cast<T>(cnt - 1) : var[ic];
        rv[ic] = (T(1) - momentum) * rv[ic] + momentum * unbiased;
      }
    }
  } else {
    for (int ic = 0; ic < c; ++ic) {
      mean[ic] = stats.running_mean.data()[ic];
      var[ic] = stats.running_var.data()[ic];
    }
  }

  Tensor<T> y = Tensor<T>::zeros(x.shape());
  {
    const T* xp = x.data();
    const T* gm = gamma.data();
    const T* bt = beta.data();
    T* yp = y.data();
    for (int in = 0; in < n; ++in) {
      for (int ic = 0; ic < c; ++ic) {
        const T inv = T(1) / std::sqrt(var[ic] + eps);
        const int64_t base = (static_cast<int64_t>(in) * c + ic) * plane;
        for (int64_t i = 0; i < plane; ++i)
          yp[base + i] = gm[ic] * (xp[base + i] - mean[ic]) * inv + bt[ic];
      }
    }
  }

  trace({OpCall::Kind::norm, x.numel()});

  const bool need = tape.recording() &&
                    (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
  if (need) {
    Tensor<T> yc = y;
    yc.set_requires_grad(true);
    Tensor<T> xc = x, gc = gamma, bc = beta;
    tape.record([xc, gc, bc, yc, mean, var, train_mode, eps]() mutable {
      const int n = xc.dim(0), c = xc.dim(1), h = xc.dim(2), wd = xc.dim(3);
      const int64_t plane = static_cast<int64_t>(h) * wd;
      const int64_t cnt = static_cast<int64_t>(n) * plane;
      const T* gy = yc.grad_data();
      const T* xp = xc.data();
      const T* gm = gc.data();
      T* gx = xc.requires_grad() ? xc.grad_data() : nullptr;
      T* gg = gc.requires_grad() ? gc.grad_data() : nullptr;
      T* gb = bc.requires_grad() ? bc.grad_data() : nullptr;
      for (int ic = 0; ic < c; ++ic) {
        const T inv = T(1) / std::sqrt(var[static_cast<size_t>(ic)] + eps);
        const T mu = mean[static_cast<size_t>(ic)];
        // Channel-wise reductions of dy and dy*xhat.
        T sum_dy = 0, sum_dy_xhat = 0;
        for (int in = 0; in < n; ++in) {
          const int64_t base = (static_cast<int64_t>(in) * c + ic) * plane;
          for (int64_t i = 0; i < plane; ++i) {
            const T dy = gy[base + i];
            sum_dy += dy;
            sum_dy_xhat += dy * (xp[base + i] - mu) * inv;
          }
        }
        if (gg) gg[ic] += sum_dy_xhat;
        if (gb) gb[ic] += sum_dy;
        if (gx) {
          if (train_mode) {
            const T scale = gm[ic] * inv;
            const T m_dy = sum_dy / static_cast<T>(cnt);
            const T m_dy_xhat = sum_dy_xhat / static_cast<T>(cnt);
            for (int in = 0; in < n; ++in) {
              const int64_t base = (static_cast<int64_t>(in) * c + ic) * plane;
              for (int64_t i = 0; i < plane; ++i) {
                const T xhat = (xp[base + i] - mu) * inv;
                gx[base + i] += scale * (gy[base + i] - m_dy - xhat * m_dy_xhat);
              }
            }
          } else {
            const T scale = gm[ic] * inv;
            for (int in = 0; in < n; ++in) {
              const int64_t base = (static_cast<int64_t>(in) * c + ic) * plane;
              for (int64_t i = 0; i < plane; ++i) gx[base + i] += scale * gy[base + i];
            }
          }
        }
      }
    });
    return yc;
  }
  return y;
}

// ---------------------------------------------------------------------------
// dense: y[N,C] = x[N,F] . w[F,C] + b[C]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> dense(GradTape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  check_arg(x.rank() == 2, "dense: input must be [N,F], got rank ", x.rank());
  check_arg(w.rank() == 2, "dense: weight must be [F,C], got rank ", w.rank());
  const int n = x.dim(0), f = x.dim(1), cf = w.dim(0), c = w.dim(1);
  check_arg(f == cf, "dense: input features ", f, " do not match weight rows ", cf);
  check_arg(b.numel() == c, "dense: bias length ", b.numel(), " does not match columns ", c);

  Tensor<T> y = Tensor<T>::zeros({n, c});
  const T* xp = x.data();
  const T* wp = w.data();
  const T* bp = b.data();
  T* yp = y.data();
  for (int in = 0; in < n; ++in) {
    for (int oc = 0; oc < c; ++oc) {
      T acc = bp[oc];
      for (int k = 0; k < f; ++k) acc += xp[in * f + k] * wp[k * c + oc];
      yp[in * c + oc] = acc;
    }
  }

  trace({OpCall::Kind::dense, n, f, c});

  const bool need =
      tape.recording() && (x.requires_grad() || w.requires_grad() || b.requires_grad());
  if (need) {
    Tensor<T> yc = y;
    yc.set_requires_grad(true);
    Tensor<T> xc = x, wc = w, bc = b;
    tape.record([xc, wc, bc, yc]() mutable {
      const int n = xc.dim(0), f = xc.dim(1), c = wc.dim(1);
      const T* gy = yc.grad_data();
      const T* xp = xc.data();
      const T* wp = wc.data();
      T* gx = xc.requires_grad() ? xc.grad_data() : nullptr;
      T* gw = wc.requires_grad() ? wc.grad_data() : nullptr;
      T* gb = bc.requires_grad() ? bc.grad_data() : nullptr;
      for (int in = 0; in < n; ++in) {
        for (int oc = 0; oc < c; ++oc) {
          const T g = gy[in * c + oc];
          if (g == T(0)) continue;
          if (gb) gb[oc] += g;
          for (int k = 0; k < f; ++k) {
            if (gx) gx[in * f + k] += g * wp[k * c + oc];
            if (gw) gw[k * c + oc] += g * xp[in * f + k];
          }
        }
      }
    });
    return yc;
  }
  return y;
}

// ---------------------------------------------------------------------------
// softmax_cross_entropy: mean over the batch of -log softmax(logits)[target].
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_cross_entropy(GradTape<T>& tape, const Tensor<T>& logits,
                                const std::vector<int>& targets) {
  check_arg(logits.rank() == 2, "softmax_cross_entropy: logits must be [N,C], got rank ",
            logits.rank());
  const int n = logits.dim(0), c = logits.dim(1);
  check_arg(static_cast<int>(targets.size()) == n, "softmax_cross_entropy: ", targets.size(),
            " targets for batch of ", n);
  for (int t : targets)
    check_arg(t >= 0 && t < c, "softmax_cross_entropy: target ", t, " out of range [0,", c, ")");

  const T* lp = logits.data();
  std::vector<T> probs(static_cast<size_t>(n) * c);
  T loss = 0;
  for (int in = 0; in < n; ++in) {
    const T* rowp = lp + static_cast<int64_t>(in) * c;
    T mx = rowp[0];
    for (int k = 1; k < c; ++k) mx = std::max(mx, rowp[k]);
    T denom = 0;
    for (int k = 0; k < c; ++k) {
      const T e = std::exp(rowp[k] - mx);
      probs[static_cast<size_t>(in) * c + k] = e;
      denom += e;
    }
    for (int k = 0; k < c; ++k) probs[static_cast<size_t>(in) * c + k] /= denom;
    loss -= std::log(probs[static_cast<size_t>(in) * c + targets[static_cast<size_t>(in)]]);
  }
  loss /= static_cast<T>(n);
  Tensor<T> out = Tensor<T>::scalar(loss);

  if (tape.recording() && logits.requires_grad()) {
    Tensor<T> oc = out;
    oc.set_requires_grad(true);
    Tensor<T> lc = logits;
    tape.record([lc, oc, probs, targets]() mutable {
      const int n = lc.dim(0), c = lc.dim(1);
      const T g = oc.grad_data()[0] / static_cast<T>(n);
      T* gl = lc.grad_data();
      for (int in = 0; in < n; ++in) {
        for (int k = 0; k < c; ++k) {
          T p = probs[static_cast<size_t>(in) * c + k];
          if (k == targets[static_cast<size_t>(in)]) p -= T(1);
          gl[static_cast<int64_t>(in) * c + k] += g * p;
        }
      }
    });
    return oc;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(GradTape<T>& tape, const Tensor<T>& x) {
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  const T* xp = x.data();
  T* yp = y.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) yp[i] = xp[i] > T(0) ? xp[i] : T(0);
  trace({OpCall::Kind::relu, n});
  if (tape.recording() && x.requires_grad()) {
    Tensor<T> yc = y;
    yc.set_requires_grad(true);
    Tensor<T> xc = x;
    tape.record([xc, yc]() mutable {
      const T* gy = yc.grad_data();
      const T* xp = xc.data();
      T* gx = xc.grad_data();
      const int64_t n = xc.numel();
      for (int64_t i = 0; i < n; ++i)
        if (xp[i] > T(0)) gx[i] += gy[i];
    });
    return yc;
  }
  return y;
}

template <typename T>
Tensor<T> add(GradTape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  check_arg(a.same_shape(b), "add: shape mismatch");
  Tensor<T> y = Tensor<T>::zeros(a.shape());
  const T* ap = a.data();
  const T* bp = b.data();
  T* yp = y.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) yp[i] = ap[i] + bp[i];
  trace({OpCall::Kind::add, n});
  if (tape.recording() && (a.requires_grad() || b.requires_grad())) {
    Tensor<T> yc = y;
    yc.set_requires_grad(true);
    Tensor<T> ac = a, bc = b;
    tape.record([ac, bc, yc]() mutable {
      const T* gy = yc.grad_data();
      const int64_t n = ac.numel();
      if (ac.requires_grad()) {
        T* ga = ac.grad_data();
        for (int64_t i = 0; i < n; ++i) ga[i] += gy[i];
      }
      if (bc.requires_grad()) {
        T* gb = bc.grad_data();
        for (int64_t i = 0; i < n; ++i) gb[i] += gy[i];
      }
    });
    return yc;
  }
  return y;
}

template <typename T>
Tensor<T> mul(GradTape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  check_arg(a.same_shape(b), "mul: shape mismatch");
  Tensor<T> y = Tensor<T>::zeros(a.shape());
  const T* ap = a.data();
  const T* bp = b.data();
  T* yp = y.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) yp[i] = ap[i] * bp[i];
  if (tape.recording() && (a.requires_grad() || b.requires_grad())) {
    Tensor<T> yc = y;
    yc.set_requires_grad(true);
    Tensor<T> ac = a, bc = b;
    tape.record([ac, bc, yc]() mutable {
      const T* gy = yc.grad_data();
      const int64_t n = ac.numel();
      if (ac.requires_grad()) {
        T* ga = ac.grad_data();
        const T* bp = bc.data();
        for (int64_t i = 0; i < n; ++i) ga[i] += gy[i] * bp[i];
      }
      if (bc.requires_grad()) {
        T* gb = bc.grad_data();
        const T* ap = ac.data();
        for (int64_t i = 0; i < n; ++i) gb[i] += gy[i] * ap[i];
      }
    });
    return yc;
  }
  return y;
}

template <typename T>
Tensor<T> scale(GradTape<T>& tape, const Tensor<T>& x, T factor) {
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  const T* xp = x.data();
  T* yp = y.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) yp[i] = factor * xp[i];
  if (tape.recording() && x.requires_grad()) {
    Tensor<T> yc = y;
    yc.set_requires_grad(true);
    Tensor<T> xc = x;
    tape.record([xc, yc, factor]() mutable {
      const T* gy = yc.grad_data();
      T* gx = xc.grad_data();
      const int64_t n = xc.numel();
      for (int64_t i = 0; i < n; ++i) gx[i] += factor * gy[i];
    });
    return yc;
  }
  return y;
}

template <typename T>
Tensor<T> sum_all(GradTape<T>& tape, const Tensor<T>& x) {
  T s = 0;
  const T* xp = x.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) s += xp[i];
  Tensor<T> y = Tensor<T>::scalar(s);
  if (tape.recording() && x.requires_grad()) {
    Tensor<T> yc = y;
    yc.set_requires_grad(true);
    Tensor<T> xc = x;
    tape.record([xc, yc]() mutable {
      const T g = yc.grad_data()[0];
      T* gx = xc.grad_data();
      const int64_t n = xc.numel();
      for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
    return yc;
  }
  return y;
}

template <typename T>
Tensor<T> concat_channels(GradTape<T>& tape, const std::vector<Tensor<T>>& xs) {
  check_arg(!xs.empty(), "concat_channels: empty input list");
  const int n = xs[0].dim(0), h = xs[0].dim(2), wd = xs[0].dim(3);
  int ctot = 0;
  bool any_grad = false;
  for (const auto& x : xs) {
    check_arg(x.rank() == 4, "concat_channels: inputs must be NCHW");
    check_arg(x.dim(0) == n && x.dim(2) == h && x.dim(3) == wd,
              "concat_channels: mismatched batch/spatial dims");
    ctot += x.dim(1);
    any_grad = any_grad || x.requires_grad();
  }
  Tensor<T> y = Tensor<T>::zeros({n, ctot, h, wd});
  T* yp = y.data();
  const int64_t plane = static_cast<int64_t>(h) * wd;
  int coff = 0;
  for (const auto& x : xs) {
    const int cx = x.dim(1);
    const T* xp = x.data();
    for (int in = 0; in < n; ++in) {
      std::copy(xp + static_cast<int64_t>(in) * cx * plane,
                xp + static_cast<int64_t>(in + 1) * cx * plane,
                yp + (static_cast<int64_t>(in) * ctot + coff) * plane);
    }
    coff += cx;
  }
  if (tape.recording() && any_grad) {
    Tensor<T> yc = y;
    yc.set_requires_grad(true);
    std::vector<Tensor<T>> xsc = xs;
    tape.record([xsc, yc, n, ctot, plane]() mutable {
      const T* gy = yc.grad_data();
      int coff = 0;
      for (auto& x : xsc) {
        const int cx = x.dim(1);
        if (x.requires_grad()) {
          T* gx = x.grad_data();
          for (int in = 0; in < n; ++in) {
            const T* src = gy + (static_cast<int64_t>(in) * ctot + coff) * plane;
            T* dst = gx + static_cast<int64_t>(in) * cx * plane;
            for (int64_t i = 0; i < cx * plane; ++i) dst[i] += src[i];
          }
        }
        coff += cx;
      }
    });
    return yc;
  }
  return y;
}

// NCHW -> [N, C] spatial mean.
template <typename T>
Tensor<T> global_avg_pool(GradTape<T>& tape, const Tensor<T>& x) {
  check_arg(x.rank() == 4, "global_avg_pool: input must be NCHW");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int64_t plane = static_cast<int64_t>(h) * wd;
  Tensor<T> y = Tensor<T>::zeros({n, c});
  const T* xp = x.data();
  T* yp = y.data();
  for (int in = 0; in < n; ++in) {
    for (int ic = 0; ic < c; ++ic) {
      T s = 0;
      const T* p = xp + (static_cast<int64_t>(in) * c + ic) * plane;
      for (int64_t i = 0; i < plane; ++i) s += p[i];
      yp[in * c + ic] = s / static_cast<T>(plane);
    }
  }
  trace({OpCall::Kind::gap, n, c, h, wd});
  if (tape.recording() && x.requires_grad()) {
    Tensor<T> yc = y;
    yc.set_requires_grad(true);
    Tensor<T> xc = x;
    tape.record([xc, yc, plane]() mutable {
      const int n = xc.dim(0), c = xc.dim(1);
      const T* gy = yc.grad_data();
      T* gx = xc.grad_data();
      for (int in = 0; in < n; ++in) {
        for (int ic = 0; ic < c; ++ic) {
          const T g = gy[in * c + ic] / static_cast<T>(plane);
          T* p = gx + (static_cast<int64_t>(in) * c + ic) * plane;
          for (int64_t i = 0; i < plane; ++i) p[i] += g;
        }
      }
    });
    return yc;
  }
  return y;
}

// Softmax over a 1-d vector (used for mixing weights).
template <typename T>
Tensor<T> softmax_vec(GradTape<T>& tape, const Tensor<T>& v) {
  check_arg(v.rank() == 1, "softmax_vec: input must be 1-d");
  const int k = v.dim(0);
  Tensor<T> y = Tensor<T>::zeros({k});
  const T* vp = v.data();
  T* yp = y.data();
  T mx = vp[0];
  for (int i = 1; i < k; ++i) mx = std::max(mx, vp[i]);
  T denom = 0;
  for (int i = 0; i < k; ++i) {
    yp[i] = std::exp(vp[i] - mx);
    denom += yp[i];
  }
  for (int i = 0; i < k; ++i) yp[i] /= denom;
  if (tape.recording() && v.requires_grad()) {
    Tensor<T> yc = y;
    yc.set_requires_grad(true);
    Tensor<T> vc = v;
    tape.record([vc, yc]() mutable {
      const int k = vc.dim(0);
      const T* gy = yc.grad_data();
      const T* s = yc.data();
      T* gv = vc.grad_data();
      T dot = 0;
      for (int i = 0; i < k; ++i) dot += gy[i] * s[i];
      for (int i = 0; i < k; ++i) gv[i] += s[i] * (gy[i] - dot);
    });
    return yc;
  }
  return y;
}

// y = sum_k w[k] * xs[k]. Weights differentiable, so gradient flows back into
// the architecture encoding through the mixing coefficients.
template <typename T>
Tensor<T> weighted_sum(GradTape<T>& tape, const std::vector<Tensor<T>>& xs, const Tensor<T>& w) {
  check_arg(!xs.empty(), "weighted_sum: empty input list");
  check_arg(w.numel() == static_cast<int64_t>(xs.size()), "weighted_sum: ", xs.size(),
            " inputs but ", w.numel(), " weights");
  for (const auto& x : xs)
    check_internal(x.same_shape(xs[0]), "weighted_sum: candidate output shapes drifted");

  Tensor<T> y = Tensor<T>::zeros(xs[0].shape());
  T* yp = y.data();
  const int64_t n = y.numel();
  const T* wp = w.data();
  bool any_grad = w.requires_grad();
  for (size_t k = 0; k < xs.size(); ++k) {
    const T* xp = xs[k].data();
    const T wk = wp[k];
    for (int64_t i = 0; i < n; ++i) yp[i] += wk * xp[i];
    any_grad = any_grad || xs[k].requires_grad();
  }
  if (tape.recording() && any_grad) {
    Tensor<T> yc = y;
    yc.set_requires_grad(true);
    std::vector<Tensor<T>> xsc = xs;
    Tensor<T> wc = w;
    tape.record([xsc, wc, yc]() mutable {
      const T* gy = yc.grad_data();
      const int64_t n = yc.numel();
      const T* wp = wc.data();
      T* gw = wc.requires_grad() ? wc.grad_data() : nullptr;
      for (size_t k = 0; k < xsc.size(); ++k) {
        const T* xp = xsc[k].data();
        if (gw) {
          T dot = 0;
          for (int64_t i = 0; i < n; ++i) dot += gy[i] * xp[i];
          gw[k] += dot;
        }
        if (xsc[k].requires_grad()) {
          T* gx = xsc[k].grad_data();
          const T wk = wp[k];
          for (int64_t i = 0; i < n; ++i) gx[i] += wk * gy[i];
        }
      }
    });
    return yc;
  }
  return y;
}

// Copy of row r of a [R,C] matrix, with gradient scattered back into the row.
template <typename T>
Tensor<T> row(GradTape<T>& tape, const Tensor<T>& m, int r) {
  check_arg(m.rank() == 2, "row: input must be 2-d");
  check_arg(r >= 0 && r < m.dim(0), "row: index ", r, " out of range [0,", m.dim(0), ")");
  const int c = m.dim(1);
  Tensor<T> y = Tensor<T>::zeros({c});
  std::copy(m.data() + static_cast<int64_t>(r) * c, m.data() + static_cast<int64_t>(r + 1) * c,
            y.data());
  if (tape.recording() && m.requires_grad()) {
    Tensor<T> yc = y;
    yc.set_requires_grad(true);
    Tensor<T> mc = m;
    tape.record([mc, yc, r, c]() mutable {
      const T* gy = yc.grad_data();
      T* gm = mc.grad_data();
      for (int i = 0; i < c; ++i) gm[static_cast<int64_t>(r) * c + i] += gy[i];
    });
    return yc;
  }
  return y;
}

// y[n,c,h,w] = x[n,c,h+1,w+1], zero-filled at the border. Feeds the offset
// branch of the factorized stride-2 skip connection.
template <typename T>
Tensor<T> shift_up_left(GradTape<T>& tape, const Tensor<T>& x) {
  check_arg(x.rank() == 4, "shift_up_left: input must be NCHW");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  const T* xp = x.data();
  T* yp = y.data();
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic) {
      const int64_t base = (static_cast<int64_t>(in) * c + ic) * h * wd;
      for (int ih = 0; ih + 1 < h; ++ih)
        for (int iw = 0; iw + 1 < wd; ++iw)
          yp[base + ih * wd + iw] = xp[base + (ih + 1) * wd + (iw + 1)];
    }
  if (tape.recording() && x.requires_grad()) {
    Tensor<T> yc = y;
    yc.set_requires_grad(true);
    Tensor<T> xc = x;
    tape.record([xc, yc]() mutable {
      const int n = xc.dim(0), c = xc.dim(1), h = xc.dim(2), wd = xc.dim(3);
      const T* gy = yc.grad_data();
      T* gx = xc.grad_data();
      for (int in = 0; in < n; ++in)
        for (int ic = 0; ic < c; ++ic) {
          const int64_t base = (static_cast<int64_t>(in) * c + ic) * h * wd;
          for (int ih = 0; ih + 1 < h; ++ih)
            for (int iw = 0; iw + 1 < wd; ++iw)
              gx[base + (ih + 1) * wd + (iw + 1)] += gy[base + ih * wd + iw];
        }
    });
    return yc;
  }
  return y;
}

// All-zero output with the spatial shape a stride-s candidate produces; the
// zero op carries no parameters and passes no gradient.
template <typename T>
Tensor<T> zeros_strided_like(const Tensor<T>& x, int stride) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int ho = (h - 1) / stride + 1, wo = (wd - 1) / stride + 1;
  return Tensor<T>::zeros({n, c, ho, wo});
}

}  // namespace msnas::ops
