#pragma once

#include <Eigen/Dense>

#include "focdec/autodiff.hpp"
#include "focdec/common.hpp"

namespace focdec {

template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using EMap = Eigen::Map<EMat<T>>;
template <class T>
using ECMap = Eigen::Map<const EMat<T>>;
template <class T>
using EStrideMap = Eigen::Map<EMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ECStrideMap = Eigen::Map<const EMat<T>, 0, Eigen::OuterStride<>>;

// ---------------------------------------------------------------------------
// linear: y = x W^T + b, x [n, din], W [dout, din], b [dout] (optional)
// ---------------------------------------------------------------------------

template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  if (x.val().rank() != 2 || w.val().rank() != 2 || x.dim(1) != w.dim(1))
    throw ShapeError("linear: incompatible shapes");
  int64_t n = x.dim(0), din = x.dim(1), dout = w.dim(0);
  Tensor<T> out({n, dout});
  {
    ECMap<T> X(x.val().data(), n, din);
    ECMap<T> W(w.val().data(), dout, din);
    EMap<T> Y(out.data(), n, dout);
    Y.noalias() = X * W.transpose();
    if (b.defined()) {
      ECMap<T> B(b.val().data(), 1, dout);
      Y.rowwise() += B.row(0);
    }
  }
  std::vector<Var<T>> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return make_op<T>(std::move(out), std::move(parents), [&x, &w, n, din, dout] {
    Tensor<T> xv = x.val(), wv = w.val();
    return [xv, wv, n, din, dout](Node<T>& self) {
      ECMap<T> G(self.grad.data(), n, dout);
      if (self.parents[0]->requires_grad) {
        EMap<T> DX(self.parents[0]->ensure_grad().data(), n, din);
        ECMap<T> W(wv.data(), dout, din);
        DX.noalias() += G * W;
      }
      if (self.parents[1]->requires_grad) {
        EMap<T> DW(self.parents[1]->ensure_grad().data(), dout, din);
        ECMap<T> X(xv.data(), n, din);
        DW.noalias() += G.transpose() * X;
      }
      if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
        EMap<T> DB(self.parents[2]->ensure_grad().data(), 1, dout);
        DB.row(0) += G.colwise().sum();
      }
    };
  });
}

// ---------------------------------------------------------------------------
// conv3d: direct padded convolution, kernel 3x3x3, padding 1, stride 1 or 2.
// x [Ci, D0, D1, D2], w [Co, Ci, 3, 3, 3], b [Co] (optional).
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
Tensor<T> pad1(const Tensor<T>& x) {
  int64_t ci = x.dim(0), d0 = x.dim(1), d1 = x.dim(2), d2 = x.dim(3);
  Tensor<T> p({ci, d0 + 2, d1 + 2, d2 + 2});
  const T* src = x.data();
  T* dst = p.data();
  int64_t p1 = d1 + 2, p2 = d2 + 2;
  for (int64_t c = 0; c < ci; ++c)
    for (int64_t i = 0; i < d0; ++i)
      for (int64_t j = 0; j < d1; ++j)
        std::copy(src + ((c * d0 + i) * d1 + j) * d2, src + ((c * d0 + i) * d1 + j + 1) * d2,
                  dst + ((c * (d0 + 2) + i + 1) * p1 + j + 1) * p2 + 1);
  return p;
}

inline int64_t conv_out_dim(int64_t d, int64_t stride) { return (d - 1) / stride + 1; }

// One output row [E2] accumulated in place from 27*Ci shifted input rows.
template <class T, int S>
void conv_row_accum(T* acc, const T* pin, const T* wk, int64_t ci, int64_t e2, int64_t pr1,
                    int64_t pr2, int64_t pstride_c) {
  for (int64_t c = 0; c < ci; ++c) {
    const T* base_c = pin + c * pstride_c;
    const T* wc = wk + c * 27;
    for (int k0 = 0; k0 < 3; ++k0)
      for (int k1 = 0; k1 < 3; ++k1) {
        const T* row = base_c + (k0 * pr1 + k1) * pr2;
        T w0 = wc[(k0 * 3 + k1) * 3 + 0];
        T w1 = wc[(k0 * 3 + k1) * 3 + 1];
        T w2 = wc[(k0 * 3 + k1) * 3 + 2];
        for (int64_t o = 0; o < e2; ++o)
          acc[o] += w0 * row[S * o] + w1 * row[S * o + 1] + w2 * row[S * o + 2];
      }
  }
}

}  // namespace detail

template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride) {
  if (x.val().rank() != 4 || w.val().rank() != 5 || x.dim(0) != w.dim(1) || w.dim(2) != 3)
    throw ShapeError("conv3d: incompatible shapes");
  if (stride != 1 && stride != 2) throw ShapeError("conv3d: stride must be 1 or 2");
  const int64_t ci = x.dim(0), d0 = x.dim(1), d1 = x.dim(2), d2 = x.dim(3);
  const int64_t co = w.dim(0);
  const int64_t e0 = detail::conv_out_dim(d0, stride), e1 = detail::conv_out_dim(d1, stride),
                e2 = detail::conv_out_dim(d2, stride);
  Tensor<T> out({co, e0, e1, e2});

  Tensor<T> padded = detail::pad1(x.val());
  const int64_t pr1 = d1 + 2, pr2 = d2 + 2;
  const int64_t pstride_c = (d0 + 2) * pr1 * pr2;
  const T* pin = padded.data();
  const T* wd = w.val().data();
  const T* bd = b.defined() ? b.val().data() : nullptr;
  T* od = out.data();

  parallel_for(co, [&](int64_t c) {
    const T* wk = wd + c * ci * 27;
    T bias = bd ? bd[c] : T(0);
    for (int64_t o0 = 0; o0 < e0; ++o0)
      for (int64_t o1 = 0; o1 < e1; ++o1) {
        T* acc = od + ((c * e0 + o0) * e1 + o1) * e2;
        std::fill(acc, acc + e2, bias);
        const T* base = pin + (o0 * stride) * pr1 * pr2 + (o1 * stride) * pr2;
        if (stride == 1)
          detail::conv_row_accum<T, 1>(acc, base, wk, ci, e2, pr1, pr2, pstride_c);
        else
          detail::conv_row_accum<T, 2>(acc, base, wk, ci, e2, pr1, pr2, pstride_c);
      }
  });

  std::vector<Var<T>> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return make_op<T>(std::move(out), std::move(parents),
                    [&x, &w, stride, ci, co, d0, d1, d2, e0, e1, e2] {
    Tensor<T> xv = x.val(), wv = w.val();
    return [xv, wv, stride, ci, co, d0, d1, d2, e0, e1, e2](Node<T>& self) {
      const int64_t pr1 = d1 + 2, pr2 = d2 + 2;
      const int64_t pstride_c = (d0 + 2) * pr1 * pr2;
      const T* g = self.grad.data();

      if (self.parents[1]->requires_grad) {  // dW and (optionally) db
        Tensor<T> padded = detail::pad1(xv);
        const T* pin = padded.data();
        T* dw = self.parents[1]->ensure_grad().data();
        parallel_for(co, [&](int64_t c) {
          T* dwc = dw + c * ci * 27;
          for (int64_t o0 = 0; o0 < e0; ++o0)
            for (int64_t o1 = 0; o1 < e1; ++o1) {
              const T* gr = g + ((c * e0 + o0) * e1 + o1) * e2;
              const T* base = pin + (o0 * stride) * pr1 * pr2 + (o1 * stride) * pr2;
              for (int64_t cc = 0; cc < ci; ++cc) {
                const T* base_c = base + cc * pstride_c;
                T* dwcc = dwc + cc * 27;
                for (int k0 = 0; k0 < 3; ++k0)
                  for (int k1 = 0; k1 < 3; ++k1) {
                    const T* row = base_c + (k0 * pr1 + k1) * pr2;
                    T s0 = T(0), s1 = T(0), s2 = T(0);
                    for (int64_t o = 0; o < e2; ++o) {
                      T gv = gr[o];
                      s0 += gv * row[stride * o];
                      s1 += gv * row[stride * o + 1];
                      s2 += gv * row[stride * o + 2];
                    }
                    T* wslot = dwcc + (k0 * 3 + k1) * 3;
                    wslot[0] += s0;
                    wslot[1] += s1;
                    wslot[2] += s2;
                  }
              }
            }
        });
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
          T* db = self.parents[2]->ensure_grad().data();
          for (int64_t c = 0; c < co; ++c) {
            T s = T(0);
            const T* gc = g + c * e0 * e1 * e2;
            for (int64_t i = 0, m = e0 * e1 * e2; i < m; ++i) s += gc[i];
            db[c] += s;
          }
        }
      }

      if (self.parents[0]->requires_grad) {  // dX via scatter into a padded buffer
        Tensor<T> pgrad({ci, d0 + 2, pr1, pr2});
        T* pg = pgrad.data();
        const T* wd2 = wv.data();
        parallel_for(ci, [&](int64_t cc) {
          T* pg_c = pg + cc * pstride_c;
          for (int64_t c = 0; c < co; ++c) {
            const T* wcc = wd2 + (c * ci + cc) * 27;
            for (int64_t o0 = 0; o0 < e0; ++o0)
              for (int64_t o1 = 0; o1 < e1; ++o1) {
                const T* gr = g + ((c * e0 + o0) * e1 + o1) * e2;
                T* base = pg_c + (o0 * stride) * pr1 * pr2 + (o1 * stride) * pr2;
                for (int k0 = 0; k0 < 3; ++k0)
                  for (int k1 = 0; k1 < 3; ++k1) {
                    T* row = base + (k0 * pr1 + k1) * pr2;
                    T w0 = wcc[(k0 * 3 + k1) * 3 + 0];
                    T w1 = wcc[(k0 * 3 + k1) * 3 + 1];
                    T w2 = wcc[(k0 * 3 + k1) * 3 + 2];
                    for (int64_t o = 0; o < e2; ++o) {
                      T gv = gr[o];
                      row[stride * o] += w0 * gv;
                      row[stride * o + 1] += w1 * gv;
                      row[stride * o + 2] += w2 * gv;
                    }
                  }
              }
          }
        });
        // crop the padded gradient back onto x
        T* dx = self.parents[0]->ensure_grad().data();
        for (int64_t cc = 0; cc < ci; ++cc)
          for (int64_t i = 0; i < d0; ++i)
            for (int64_t j = 0; j < d1; ++j) {
              const T* src = pg + ((cc * (d0 + 2) + i + 1) * pr1 + j + 1) * pr2 + 1;
              T* dst = dx + ((cc * d0 + i) * d1 + j) * d2;
              for (int64_t k = 0; k < d2; ++k) dst[k] += src[k];
            }
      }
    };
  });
}

// 1x1x1 convolution (channel mixing): x [Ci, ...spatial], w [Co, Ci], b [Co].
template <class T>
Var<T> conv1x1(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  if (x.val().rank() < 2 || w.val().rank() != 2 || x.dim(0) != w.dim(1))
    throw ShapeError("conv1x1: incompatible shapes");
  int64_t ci = x.dim(0), co = w.dim(0);
  int64_t s = x.val().size() / ci;
  std::vector<int64_t> out_shape = x.val().shape();
  out_shape[0] = co;
  Tensor<T> out(out_shape);
  {
    ECMap<T> X(x.val().data(), ci, s);
    ECMap<T> W(w.val().data(), co, ci);
    EMap<T> Y(out.data(), co, s);
    Y.noalias() = W * X;
    if (b.defined()) {
      ECMap<T> B(b.val().data(), co, 1);
      Y.colwise() += B.col(0);
    }
  }
  std::vector<Var<T>> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return make_op<T>(std::move(out), std::move(parents), [&x, &w, ci, co, s] {
    Tensor<T> xv = x.val(), wv = w.val();
    return [xv, wv, ci, co, s](Node<T>& self) {
      ECMap<T> G(self.grad.data(), co, s);
      if (self.parents[0]->requires_grad) {
        EMap<T> DX(self.parents[0]->ensure_grad().data(), ci, s);
        ECMap<T> W(wv.data(), co, ci);
        DX.noalias() += W.transpose() * G;
      }
      if (self.parents[1]->requires_grad) {
        EMap<T> DW(self.parents[1]->ensure_grad().data(), co, ci);
        ECMap<T> X(xv.data(), ci, s);
        DW.noalias() += G * X.transpose();
      }
      if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
        T* db = self.parents[2]->ensure_grad().data();
        for (int64_t c = 0; c < co; ++c) db[c] += G.row(c).sum();
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-channel normalization over the spatial extent of one sample.
template <class T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  int64_t c = x.dim(0);
  int64_t s = x.val().size() / c;
  if (gamma.val().size() != c || beta.val().size() != c)
    throw ShapeError("instance_norm: parameter size mismatch");
  Tensor<T> out(x.val().shape());
  Tensor<T> mean_t({c}), rstd_t({c});
  const T* px = x.val().data();
  const T* pg = gamma.val().data();
  const T* pb = beta.val().data();
  T* po = out.data();
  for (int64_t i = 0; i < c; ++i) {
    const T* row = px + i * s;
    T m = T(0);
    for (int64_t j = 0; j < s; ++j) m += row[j];
    m /= static_cast<T>(s);
    T v = T(0);
    for (int64_t j = 0; j < s; ++j) v += (row[j] - m) * (row[j] - m);
    v /= static_cast<T>(s);
    T r = T(1) / std::sqrt(v + eps);
    mean_t[i] = m;
    rstd_t[i] = r;
    T* orow = po + i * s;
    T a = pg[i] * r, d = pb[i] - pg[i] * r * m;
    for (int64_t j = 0; j < s; ++j) orow[j] = a * row[j] + d;
  }
  return make_op<T>(std::move(out), {x, gamma, beta}, [&x, &gamma, c, s, mean_t, rstd_t] {
    Tensor<T> xv = x.val(), gv = gamma.val();
    return [xv, gv, c, s, mean_t, rstd_t](Node<T>& self) {
      const T* px2 = xv.data();
      const T* pg2 = gv.data();
      const T* g = self.grad.data();
      T* dx = self.parents[0]->requires_grad ? self.parents[0]->ensure_grad().data() : nullptr;
      T* dgamma = self.parents[1]->requires_grad ? self.parents[1]->ensure_grad().data() : nullptr;
      T* dbeta = self.parents[2]->requires_grad ? self.parents[2]->ensure_grad().data() : nullptr;
      for (int64_t i = 0; i < c; ++i) {
        const T* row = px2 + i * s;
        const T* grow = g + i * s;
        T m = mean_t[i], r = rstd_t[i];
        T sum_g = T(0), sum_gx = T(0);
        for (int64_t j = 0; j < s; ++j) {
          sum_g += grow[j];
          sum_gx += grow[j] * (row[j] - m) * r;
        }
        if (dgamma) dgamma[i] += sum_gx;
        if (dbeta) dbeta[i] += sum_g;
        if (dx) {
          T* dxr = dx + i * s;
          T gm = pg2[i];
          T k1 = sum_g / static_cast<T>(s);
          T k2 = sum_gx / static_cast<T>(s);
          for (int64_t j = 0; j < s; ++j) {
            T xh = (row[j] - m) * r;
            dxr[j] += gm * r * (grow[j] - k1 - xh * k2);
          }
        }
      }
    };
  });
}

/// Row-wise layer normalization: x [n, d].
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  if (x.val().rank() != 2) throw ShapeError("layer_norm: rank-2 input required");
  int64_t n = x.dim(0), d = x.dim(1);
  if (gamma.val().size() != d || beta.val().size() != d)
    throw ShapeError("layer_norm: parameter size mismatch");
  Tensor<T> out({n, d});
  Tensor<T> mean_t({n}), rstd_t({n});
  const T* px = x.val().data();
  const T* pg = gamma.val().data();
  const T* pb = beta.val().data();
  T* po = out.data();
  for (int64_t i = 0; i < n; ++i) {
    const T* row = px + i * d;
    T m = T(0);
    for (int64_t j = 0; j < d; ++j) m += row[j];
    m /= static_cast<T>(d);
    T v = T(0);
    for (int64_t j = 0; j < d; ++j) v += (row[j] - m) * (row[j] - m);
    v /= static_cast<T>(d);
    T r = T(1) / std::sqrt(v + eps);
    mean_t[i] = m;
    rstd_t[i] = r;
    T* orow = po + i * d;
    for (int64_t j = 0; j < d; ++j) orow[j] = (row[j] - m) * r * pg[j] + pb[j];
  }
  return make_op<T>(std::move(out), {x, gamma, beta}, [&x, &gamma, n, d, mean_t, rstd_t] {
    Tensor<T> xv = x.val(), gv = gamma.val();
    return [xv, gv, n, d, mean_t, rstd_t](Node<T>& self) {
      const T* px2 = xv.data();
      const T* pg2 = gv.data();
      const T* g = self.grad.data();
      T* dx = self.parents[0]->requires_grad ? self.parents[0]->ensure_grad().data() : nullptr;
      T* dgamma = self.parents[1]->requires_grad ? self.parents[1]->ensure_grad().data() : nullptr;
      T* dbeta = self.parents[2]->requires_grad ? self.parents[2]->ensure_grad().data() : nullptr;
      for (int64_t i = 0; i < n; ++i) {
        const T* row = px2 + i * d;
        const T* grow = g + i * d;
        T m = mean_t[i], r = rstd_t[i];
        T sum_gg = T(0), sum_ggx = T(0);
        for (int64_t j = 0; j < d; ++j) {
          T gg = grow[j] * pg2[j];
          T xh = (row[j] - m) * r;
          sum_gg += gg;
          sum_ggx += gg * xh;
          if (dgamma) dgamma[j] += grow[j] * xh;
          if (dbeta) dbeta[j] += grow[j];
        }
        if (dx) {
          T* dxr = dx + i * d;
          T k1 = sum_gg / static_cast<T>(d);
          T k2 = sum_ggx / static_cast<T>(d);
          for (int64_t j = 0; j < d; ++j) {
            T gg = grow[j] * pg2[j];
            T xh = (row[j] - m) * r;
            dxr[j] += r * (gg - k1 - xh * k2);
          }
        }
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Masked multi-head attention (the focused cross-attention core).
// mask[q*nk + k] nonzero means key k is visible to query q; masked weights
// are exactly zero (the -inf of the additive formulation is applied by
// excluding masked keys from the softmax, so no overflow can occur).
// ---------------------------------------------------------------------------

template <class T>
struct AttentionOut {
  Var<T> out;                        // [nq, d]
  std::shared_ptr<Tensor<T>> probs;  // [heads, nq, nk] attention weights
};

template <class T>
AttentionOut<T> multihead_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads,
                                    T scale, const Tensor<uint8_t>* mask) {
  int64_t nq = q.dim(0), nk = k.dim(0), d = q.dim(1);
  if (k.dim(1) != d || v.dim(0) != nk || v.dim(1) != d)
    throw ShapeError("attention: incompatible shapes");
  if (d % heads != 0) throw ShapeError("attention: d_hidden not divisible by heads");
  if (mask && mask->size() != nq * nk) throw ShapeError("attention: mask shape mismatch");
  int64_t dh = d / heads;
  const uint8_t* mk = mask ? mask->data() : nullptr;
  if (mk) {
    for (int64_t r = 0; r < nq; ++r) {
      bool any = false;
      for (int64_t c = 0; c < nk && !any; ++c) any = mk[r * nk + c] != 0;
      if (!any) throw ContractError("attention: fully masked query row " + std::to_string(r));
    }
  }

  auto probs = std::make_shared<Tensor<T>>(std::vector<int64_t>{heads, nq, nk});
  Tensor<T> out({nq, d});

  parallel_for(heads, [&](int64_t h) {
    ECStrideMap<T> Qh(q.val().data() + h * dh, nq, dh, Eigen::OuterStride<>(d));
    ECStrideMap<T> Kh(k.val().data() + h * dh, nk, dh, Eigen::OuterStride<>(d));
    ECStrideMap<T> Vh(v.val().data() + h * dh, nk, dh, Eigen::OuterStride<>(d));
    EMap<T> P(probs->data() + h * nq * nk, nq, nk);
    P.noalias() = Qh * Kh.transpose();
    P *= scale;
    T* pd = probs->data() + h * nq * nk;
    for (int64_t r = 0; r < nq; ++r) {
      T* row = pd + r * nk;
      const uint8_t* mrow = mk ? mk + r * nk : nullptr;
      T mx = -std::numeric_limits<T>::infinity();
      for (int64_t c = 0; c < nk; ++c)
        if (!mrow || mrow[c]) mx = std::max(mx, row[c]);
      T z = T(0);
      for (int64_t c = 0; c < nk; ++c) {
        if (mrow && !mrow[c]) {
          row[c] = T(0);
        } else {
          row[c] = std::exp(row[c] - mx);
          z += row[c];
        }
      }
      T inv = T(1) / z;
      for (int64_t c = 0; c < nk; ++c) row[c] *= inv;
    }
    EStrideMap<T> Oh(out.data() + h * dh, nq, dh, Eigen::OuterStride<>(d));
    Oh.noalias() = P * Vh;
  });

  Var<T> out_var = make_op<T>(std::move(out), {q, k, v}, [&q, &k, &v, probs, heads, dh, d, nq, nk,
                                                          scale] {
    Tensor<T> qv = q.val(), kv = k.val(), vv = v.val();
    return [qv, kv, vv, probs, heads, dh, d, nq, nk, scale](Node<T>& self) {
      bool need_q = self.parents[0]->requires_grad;
      bool need_k = self.parents[1]->requires_grad;
      bool need_v = self.parents[2]->requires_grad;
      T* dq = need_q ? self.parents[0]->ensure_grad().data() : nullptr;
      T* dk = need_k ? self.parents[1]->ensure_grad().data() : nullptr;
      T* dv = need_v ? self.parents[2]->ensure_grad().data() : nullptr;
      parallel_for(heads, [&](int64_t h) {
        ECStrideMap<T> Qh(qv.data() + h * dh, nq, dh, Eigen::OuterStride<>(d));
        ECStrideMap<T> Kh(kv.data() + h * dh, nk, dh, Eigen::OuterStride<>(d));
        ECStrideMap<T> Vh(vv.data() + h * dh, nk, dh, Eigen::OuterStride<>(d));
        ECMap<T> P(probs->data() + h * nq * nk, nq, nk);
        ECStrideMap<T> GO(self.grad.data() + h * dh, nq, dh, Eigen::OuterStride<>(d));
        if (need_v) {
          EStrideMap<T> DV(dv + h * dh, nk, dh, Eigen::OuterStride<>(d));
          DV.noalias() += P.transpose() * GO;
        }
        if (need_q || need_k) {
          EMat<T> DS(nq, nk);
          DS.noalias() = GO * Vh.transpose();  // dL/dP
          // softmax jacobian: dS = P .* (dP - rowsum(dP .* P)); masked
          // entries have P == 0 and stay exactly zero.
          for (int64_t r = 0; r < nq; ++r) {
            T* ds = DS.data() + r * nk;
            const T* p = P.data() + r * nk;
            T dot = T(0);
            for (int64_t c = 0; c < nk; ++c) dot += ds[c] * p[c];
            for (int64_t c = 0; c < nk; ++c) ds[c] = p[c] * (ds[c] - dot);
          }
          DS *= scale;
          if (need_q) {
            EStrideMap<T> DQ(dq + h * dh, nq, dh, Eigen::OuterStride<>(d));
            DQ.noalias() += DS * Kh;
          }
          if (need_k) {
            EStrideMap<T> DK(dk + h * dh, nk, dh, Eigen::OuterStride<>(d));
            DK.noalias() += DS.transpose() * Qh;
          }
        }
      });
    };
  });
  return {out_var, probs};
}

// ---------------------------------------------------------------------------
// Nearest-neighbor 2x upsampling for the FPN top-down path. x [C, D0, D1, D2].
// ---------------------------------------------------------------------------

template <class T>
Var<T> upsample_nearest2(const Var<T>& x) {
  if (x.val().rank() != 4) throw ShapeError("upsample_nearest2: rank-4 input required");
  int64_t c = x.dim(0), d0 = x.dim(1), d1 = x.dim(2), d2 = x.dim(3);
  Tensor<T> out({c, 2 * d0, 2 * d1, 2 * d2});
  const T* px = x.val().data();
  T* po = out.data();
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t i = 0; i < 2 * d0; ++i)
      for (int64_t j = 0; j < 2 * d1; ++j) {
        const T* src = px + ((ch * d0 + i / 2) * d1 + j / 2) * d2;
        T* dst = po + ((ch * 2 * d0 + i) * 2 * d1 + j) * 2 * d2;
        for (int64_t k = 0; k < d2; ++k) {
          dst[2 * k] = src[k];
          dst[2 * k + 1] = src[k];
        }
      }
  return make_op<T>(std::move(out), {x}, [c, d0, d1, d2] {
    return [c, d0, d1, d2](Node<T>& self) {
      if (!self.parents[0]->requires_grad) return;
      T* dx = self.parents[0]->ensure_grad().data();
      const T* g = self.grad.data();
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < 2 * d0; ++i)
          for (int64_t j = 0; j < 2 * d1; ++j) {
            T* dst = dx + ((ch * d0 + i / 2) * d1 + j / 2) * d2;
            const T* src = g + ((ch * 2 * d0 + i) * 2 * d1 + j) * 2 * d2;
            for (int64_t k = 0; k < d2; ++k) dst[k] += src[2 * k] + src[2 * k + 1];
          }
    };
  });
}

}  // namespace focdec
