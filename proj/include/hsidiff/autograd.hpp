#pragma once

// Reverse-mode autodiff over Tensor<T>. The graph is a tape of shared nodes;
// each op captures what its backward pass needs by value or shared_ptr.
// Templated on the scalar so training runs in float while gradient checks
// instantiate double.

#include <functional>
#include <memory>
#include <unordered_set>

#include <Eigen/Dense>

#include "hsidiff/tensor.hpp"

namespace hsidiff {

template <class T>
using EigenRowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<EigenRowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const EigenRowMat<T>>;

template <class T>
struct VarNode {
    Tensor<T> val;
    Tensor<T> grad;
    bool requires_grad = false;
    bool grad_alloc = false;
    std::vector<std::shared_ptr<VarNode>> parents;
    std::function<void(VarNode&)> backfn;

    Tensor<T>& ensure_grad() {
        if (!grad_alloc) {
            grad = Tensor<T>::zeros(val.shape);
            grad_alloc = true;
        }
        return grad;
    }
};

template <class T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<VarNode<T>> n) : n_(std::move(n)) {}

    static Var constant(Tensor<T> t) {
        auto n = std::make_shared<VarNode<T>>();
        n->val = std::move(t);
        return Var(n);
    }
    static Var param(Tensor<T> t) {
        auto n = std::make_shared<VarNode<T>>();
        n->val = std::move(t);
        n->requires_grad = true;
        return Var(n);
    }

    bool defined() const { return n_ != nullptr; }
    const Tensor<T>& val() const { return n_->val; }
    Tensor<T>& mutable_val() { return n_->val; }
    Tensor<T>& grad() { return n_->ensure_grad(); }
    bool requires_grad() const { return n_ && n_->requires_grad; }
    void zero_grad() {
        if (n_ && n_->grad_alloc) std::fill(n_->grad.v.begin(), n_->grad.v.end(), T(0));
    }
    std::shared_ptr<VarNode<T>> node() const { return n_; }

private:
    std::shared_ptr<VarNode<T>> n_;
};

namespace detail {

template <class T>
inline std::shared_ptr<VarNode<T>> make_op(Tensor<T> value,
                                           std::vector<std::shared_ptr<VarNode<T>>> parents,
                                           std::function<void(VarNode<T>&)> backfn) {
    auto n = std::make_shared<VarNode<T>>();
    n->val = std::move(value);
    bool needs = false;
    for (auto& p : parents)
        if (p->requires_grad) needs = true;
    n->requires_grad = needs;
    if (needs) {
        n->parents = std::move(parents);
        n->backfn = std::move(backfn);
    }
    return n;
}

} // namespace detail

// Run backward from a scalar (or any) node; seeds with ones.
template <class T>
inline void backward(const Var<T>& root) {
    auto r = root.node();
    if (!r->requires_grad) return;
    // topological order by iterative DFS
    std::vector<VarNode<T>*> order;
    std::unordered_set<VarNode<T>*> seen;
    std::vector<std::pair<VarNode<T>*, size_t>> stack;
    stack.push_back({r.get(), 0});
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx == 0 && seen.count(node)) {
            stack.pop_back();
            continue;
        }
        if (idx < node->parents.size()) {
            auto* p = node->parents[idx].get();
            ++idx;
            if (!seen.count(p) && p->requires_grad) stack.push_back({p, 0});
        } else {
            seen.insert(node);
            order.push_back(node);
            stack.pop_back();
        }
    }
    auto& g = r->ensure_grad();
    std::fill(g.v.begin(), g.v.end(), T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backfn) (*it)->backfn(**it);
    }
}

// ----------------------------- elementwise -----------------------------

template <class T>
inline Var<T> add(const Var<T>& a, const Var<T>& b) {
    assert(a.val().same_shape(b.val()));
    Tensor<T> out = a.val();
    const auto& bv = b.val().v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += bv[i];
    auto an = a.node(), bn = b.node();
    return Var<T>(detail::make_op<T>(std::move(out), {an, bn}, [an, bn](VarNode<T>& self) {
        if (an->requires_grad) {
            auto& g = an->ensure_grad();
            for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += self.grad.v[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->ensure_grad();
            for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += self.grad.v[i];
        }
    }));
}

template <class T>
inline Var<T> sub(const Var<T>& a, const Var<T>& b) {
    assert(a.val().same_shape(b.val()));
    Tensor<T> out = a.val();
    const auto& bv = b.val().v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] -= bv[i];
    auto an = a.node(), bn = b.node();
    return Var<T>(detail::make_op<T>(std::move(out), {an, bn}, [an, bn](VarNode<T>& self) {
        if (an->requires_grad) {
            auto& g = an->ensure_grad();
            for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += self.grad.v[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->ensure_grad();
            for (size_t i = 0; i < g.v.size(); ++i) g.v[i] -= self.grad.v[i];
        }
    }));
}

template <class T>
inline Var<T> mul(const Var<T>& a, const Var<T>& b) {
    assert(a.val().same_shape(b.val()));
    Tensor<T> out = a.val();
    const auto& bv = b.val().v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= bv[i];
    auto an = a.node(), bn = b.node();
    return Var<T>(detail::make_op<T>(std::move(out), {an, bn}, [an, bn](VarNode<T>& self) {
        if (an->requires_grad) {
            auto& g = an->ensure_grad();
            for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += self.grad.v[i] * bn->val.v[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->ensure_grad();
            for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += self.grad.v[i] * an->val.v[i];
        }
    }));
}

template <class T>
inline Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> out = a.val();
    for (auto& x : out.v) x *= s;
    auto an = a.node();
    return Var<T>(detail::make_op<T>(std::move(out), {an}, [an, s](VarNode<T>& self) {
        auto& g = an->ensure_grad();
        for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += s * self.grad.v[i];
    }));
}

template <class T>
inline Var<T> add_scalar(const Var<T>& a, T s) {
    Tensor<T> out = a.val();
    for (auto& x : out.v) x += s;
    auto an = a.node();
    return Var<T>(detail::make_op<T>(std::move(out), {an}, [an](VarNode<T>& self) {
        auto& g = an->ensure_grad();
        for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += self.grad.v[i];
    }));
}

template <class T>
inline Var<T> square(const Var<T>& a) {
    Tensor<T> out = a.val();
    for (auto& x : out.v) x *= x;
    auto an = a.node();
    return Var<T>(detail::make_op<T>(std::move(out), {an}, [an](VarNode<T>& self) {
        auto& g = an->ensure_grad();
        for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += T(2) * an->val.v[i] * self.grad.v[i];
    }));
}

template <class T>
inline Var<T> exp_op(const Var<T>& a) {
    Tensor<T> out = a.val();
    for (auto& x : out.v) x = std::exp(x);
    auto an = a.node();
    auto n = detail::make_op<T>(std::move(out), {an}, nullptr);
    auto self_weak = std::weak_ptr<VarNode<T>>(n);
    n->backfn = [an, self_weak](VarNode<T>& self) {
        auto& g = an->ensure_grad();
        for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += self.val.v[i] * self.grad.v[i];
    };
    return Var<T>(n);
}

template <class T>
inline Var<T> relu(const Var<T>& a) {
    Tensor<T> out = a.val();
    for (auto& x : out.v) x = x > T(0) ? x : T(0);
    auto an = a.node();
    return Var<T>(detail::make_op<T>(std::move(out), {an}, [an](VarNode<T>& self) {
        auto& g = an->ensure_grad();
        for (size_t i = 0; i < g.v.size(); ++i)
            if (an->val.v[i] > T(0)) g.v[i] += self.grad.v[i];
    }));
}

template <class T>
inline Var<T> silu(const Var<T>& a) {
    Tensor<T> out = a.val();
    for (auto& x : out.v) {
        T s = T(1) / (T(1) + std::exp(-x));
        x = x * s;
    }
    auto an = a.node();
    return Var<T>(detail::make_op<T>(std::move(out), {an}, [an](VarNode<T>& self) {
        auto& g = an->ensure_grad();
        for (size_t i = 0; i < g.v.size(); ++i) {
            T x = an->val.v[i];
            T s = T(1) / (T(1) + std::exp(-x));
            g.v[i] += self.grad.v[i] * (s * (T(1) + x * (T(1) - s)));
        }
    }));
}

template <class T>
inline Var<T> detach(const Var<T>& a) {
    return Var<T>::constant(a.val());
}

template <class T>
inline Var<T> reshape(const Var<T>& a, std::vector<size_t> shape) {
    Tensor<T> out = a.val().reshaped(shape);
    auto an = a.node();
    return Var<T>(detail::make_op<T>(std::move(out), {an}, [an](VarNode<T>& self) {
        auto& g = an->ensure_grad();
        for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += self.grad.v[i];
    }));
}

// ----------------------------- reductions -----------------------------

template <class T>
inline Var<T> mean_all(const Var<T>& a) {
    double acc = 0;
    for (const T& x : a.val().v) acc += static_cast<double>(x);
    size_t n = a.val().size();
    Tensor<T> out({1});
    out.v[0] = static_cast<T>(acc / static_cast<double>(n));
    auto an = a.node();
    return Var<T>(detail::make_op<T>(std::move(out), {an}, [an, n](VarNode<T>& self) {
        auto& g = an->ensure_grad();
        T s = self.grad.v[0] / static_cast<T>(n);
        for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += s;
    }));
}

template <class T>
inline Var<T> sum_all(const Var<T>& a) {
    double acc = 0;
    for (const T& x : a.val().v) acc += static_cast<double>(x);
    Tensor<T> out({1});
    out.v[0] = static_cast<T>(acc);
    auto an = a.node();
    return Var<T>(detail::make_op<T>(std::move(out), {an}, [an](VarNode<T>& self) {
        auto& g = an->ensure_grad();
        T s = self.grad.v[0];
        for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += s;
    }));
}

// ----------------------------- linear algebra -----------------------------

// y[N,Fout] = x[N,Fin] * W[Fout,Fin]^T + b[Fout]
template <class T>
inline Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const auto& xs = x.val().shape;
    const auto& ws = w.val().shape;
    assert(xs.size() == 2 && ws.size() == 2 && xs[1] == ws[1]);
    size_t n = xs[0], fin = xs[1], fout = ws[0];
    assert(b.val().size() == fout);
    Tensor<T> out({n, fout});
    ConstMatMap<T> X(x.val().v.data(), n, fin);
    ConstMatMap<T> W(w.val().v.data(), fout, fin);
    MatMap<T> Y(out.v.data(), n, fout);
    Y.noalias() = X * W.transpose();
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < fout; ++j) out.v[i * fout + j] += b.val().v[j];
    auto xn = x.node(), wn = w.node(), bn = b.node();
    return Var<T>(detail::make_op<T>(std::move(out), {xn, wn, bn},
                                     [xn, wn, bn, n, fin, fout](VarNode<T>& self) {
        ConstMatMap<T> G(self.grad.v.data(), n, fout);
        if (xn->requires_grad) {
            auto& gx = xn->ensure_grad();
            MatMap<T> GX(gx.v.data(), n, fin);
            ConstMatMap<T> W(wn->val.v.data(), fout, fin);
            GX.noalias() += G * W;
        }
        if (wn->requires_grad) {
            auto& gw = wn->ensure_grad();
            MatMap<T> GW(gw.v.data(), fout, fin);
            ConstMatMap<T> X(xn->val.v.data(), n, fin);
            GW.noalias() += G.transpose() * X;
        }
        if (bn->requires_grad) {
            auto& gb = bn->ensure_grad();
            for (size_t i = 0; i < n; ++i)
                for (size_t j = 0; j < fout; ++j) gb.v[j] += self.grad.v[i * fout + j];
        }
    }));
}

// Batched matmul with optional transposes: out[b] = opA(A[b]) * opB(B[b]).
// A is [B, M, K] (or [B, K, M] when ta), B is [B, K, N] (or [B, N, K] when tb).
template <class T>
inline Var<T> bmm(const Var<T>& a, const Var<T>& b, bool ta = false, bool tb = false) {
    const auto& as = a.val().shape;
    const auto& bs = b.val().shape;
    assert(as.size() == 3 && bs.size() == 3 && as[0] == bs[0]);
    size_t batch = as[0];
    size_t m = ta ? as[2] : as[1];
    size_t k = ta ? as[1] : as[2];
    size_t k2 = tb ? bs[2] : bs[1];
    size_t nn = tb ? bs[1] : bs[2];
    assert(k == k2);
    (void)k2;
    Tensor<T> out({batch, m, nn});
    size_t astride = as[1] * as[2], bstride = bs[1] * bs[2], ostride = m * nn;
    for (size_t i = 0; i < batch; ++i) {
        ConstMatMap<T> A(a.val().v.data() + i * astride, as[1], as[2]);
        ConstMatMap<T> B(b.val().v.data() + i * bstride, bs[1], bs[2]);
        MatMap<T> Y(out.v.data() + i * ostride, m, nn);
        if (!ta && !tb) Y.noalias() = A * B;
        else if (ta && !tb) Y.noalias() = A.transpose() * B;
        else if (!ta && tb) Y.noalias() = A * B.transpose();
        else Y.noalias() = A.transpose() * B.transpose();
    }
    auto an = a.node(), bn = b.node();
    auto as_c = as, bs_c = bs;
    return Var<T>(detail::make_op<T>(std::move(out), {an, bn},
                                     [an, bn, ta, tb, batch, m, nn, as_c, bs_c, astride, bstride,
                                      ostride](VarNode<T>& self) {
        for (size_t i = 0; i < batch; ++i) {
            ConstMatMap<T> G(self.grad.v.data() + i * ostride, m, nn);
            ConstMatMap<T> A(an->val.v.data() + i * astride, as_c[1], as_c[2]);
            ConstMatMap<T> B(bn->val.v.data() + i * bstride, bs_c[1], bs_c[2]);
            if (an->requires_grad) {
                MatMap<T> GA(an->ensure_grad().v.data() + i * astride, as_c[1], as_c[2]);
                // dA for Y = opA(A)*opB(B): d(opA(A)) = G * opB(B)^T, undo the transpose
                if (!ta && !tb) GA.noalias() += G * B.transpose();
                else if (!ta && tb) GA.noalias() += G * B;
                else if (ta && !tb) GA.noalias() += B * G.transpose();
                else GA.noalias() += B.transpose() * G.transpose();
            }
            if (bn->requires_grad) {
                MatMap<T> GB(bn->ensure_grad().v.data() + i * bstride, bs_c[1], bs_c[2]);
                if (!ta && !tb) GB.noalias() += A.transpose() * G;
                else if (ta && !tb) GB.noalias() += A * G;
                else if (!ta && tb) GB.noalias() += G.transpose() * A;
                else GB.noalias() += G.transpose() * A.transpose();
            }
        }
    }));
}

// ----------------------------- convolution -----------------------------

namespace detail {

// col[(ci*kh+ky)*kw+kx, oy*wout+ox] = x[ci, oy*stride-pad+ky, ox*stride-pad+kx]
template <class T>
inline void im2col(const T* x, size_t ci, size_t h, size_t w, size_t kh, size_t kw, size_t stride,
                   size_t pad, size_t hout, size_t wout, T* col) {
    for (size_t c = 0; c < ci; ++c) {
        for (size_t ky = 0; ky < kh; ++ky) {
            for (size_t kx = 0; kx < kw; ++kx) {
                T* dst = col + ((c * kh + ky) * kw + kx) * (hout * wout);
                for (size_t oy = 0; oy < hout; ++oy) {
                    long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                    for (size_t ox = 0; ox < wout; ++ox) {
                        long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                        dst[oy * wout + ox] =
                            (iy >= 0 && iy < static_cast<long>(h) && ix >= 0 &&
                             ix < static_cast<long>(w))
                                ? x[(c * h + static_cast<size_t>(iy)) * w + static_cast<size_t>(ix)]
                                : T(0);
                    }
                }
            }
        }
    }
}

template <class T>
inline void col2im_accum(const T* col, size_t ci, size_t h, size_t w, size_t kh, size_t kw,
                         size_t stride, size_t pad, size_t hout, size_t wout, T* x) {
    for (size_t c = 0; c < ci; ++c) {
        for (size_t ky = 0; ky < kh; ++ky) {
            for (size_t kx = 0; kx < kw; ++kx) {
                const T* src = col + ((c * kh + ky) * kw + kx) * (hout * wout);
                for (size_t oy = 0; oy < hout; ++oy) {
                    long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    for (size_t ox = 0; ox < wout; ++ox) {
                        long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                        if (ix < 0 || ix >= static_cast<long>(w)) continue;
                        x[(c * h + static_cast<size_t>(iy)) * w + static_cast<size_t>(ix)] +=
                            src[oy * wout + ox];
                    }
                }
            }
        }
    }
}

} // namespace detail

// x [N,Ci,H,W], w [Co,Ci,kh,kw], b [Co]
template <class T>
inline Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, size_t stride = 1,
                     size_t pad = 1) {
    const auto& xs = x.val().shape;
    const auto& ws = w.val().shape;
    assert(xs.size() == 4 && ws.size() == 4 && xs[1] == ws[1]);
    size_t n = xs[0], ci = xs[1], h = xs[2], wd = xs[3];
    size_t co = ws[0], kh = ws[2], kw = ws[3];
    size_t hout = (h + 2 * pad - kh) / stride + 1;
    size_t wout = (wd + 2 * pad - kw) / stride + 1;
    size_t ck = ci * kh * kw, hw = hout * wout;

    Tensor<T> out({n, co, hout, wout});
    auto cols = std::make_shared<Tensor<T>>(std::vector<size_t>{n, ck, hw});
    ConstMatMap<T> W(w.val().v.data(), co, ck);
    for (size_t i = 0; i < n; ++i) {
        T* col = cols->v.data() + i * ck * hw;
        detail::im2col(x.val().v.data() + i * ci * h * wd, ci, h, wd, kh, kw, stride, pad, hout,
                       wout, col);
        MatMap<T> Y(out.v.data() + i * co * hw, co, hw);
        ConstMatMap<T> C(col, ck, hw);
        Y.noalias() = W * C;
    }
    for (size_t i = 0; i < n; ++i)
        for (size_t c = 0; c < co; ++c) {
            T bias = b.val().v[c];
            T* p = out.v.data() + (i * co + c) * hw;
            for (size_t j = 0; j < hw; ++j) p[j] += bias;
        }

    auto xn = x.node(), wn = w.node(), bn = b.node();
    return Var<T>(detail::make_op<T>(
        std::move(out), {xn, wn, bn},
        [xn, wn, bn, cols, n, ci, h, wd, co, kh, kw, stride, pad, hout, wout, ck,
         hw](VarNode<T>& self) {
            for (size_t i = 0; i < n; ++i) {
                ConstMatMap<T> G(self.grad.v.data() + i * co * hw, co, hw);
                ConstMatMap<T> C(cols->v.data() + i * ck * hw, ck, hw);
                if (wn->requires_grad) {
                    MatMap<T> GW(wn->ensure_grad().v.data(), co, ck);
                    GW.noalias() += G * C.transpose();
                }
                if (xn->requires_grad) {
                    ConstMatMap<T> W(wn->val.v.data(), co, ck);
                    Tensor<T> dcol({ck, hw});
                    MatMap<T> DC(dcol.v.data(), ck, hw);
                    DC.noalias() = W.transpose() * G;
                    detail::col2im_accum(dcol.v.data(), ci, h, wd, kh, kw, stride, pad, hout, wout,
                                         xn->ensure_grad().v.data() + i * ci * h * wd);
                }
            }
            if (bn->requires_grad) {
                auto& gb = bn->ensure_grad();
                for (size_t i = 0; i < n; ++i)
                    for (size_t c = 0; c < co; ++c) {
                        const T* p = self.grad.v.data() + (i * co + c) * hw;
                        double acc = 0;
                        for (size_t j = 0; j < hw; ++j) acc += static_cast<double>(p[j]);
                        gb.v[c] += static_cast<T>(acc);
                    }
            }
        }));
}

// Nearest-neighbour 2x spatial upsample of [N,C,H,W].
template <class T>
inline Var<T> upsample_nearest2x(const Var<T>& x) {
    const auto& s = x.val().shape;
    assert(s.size() == 4);
    size_t n = s[0], c = s[1], h = s[2], w = s[3];
    Tensor<T> out({n, c, 2 * h, 2 * w});
    for (size_t i = 0; i < n * c; ++i) {
        const T* src = x.val().v.data() + i * h * w;
        T* dst = out.v.data() + i * 4 * h * w;
        for (size_t y = 0; y < h; ++y)
            for (size_t xx = 0; xx < w; ++xx) {
                T v = src[y * w + xx];
                size_t base = (2 * y) * (2 * w) + 2 * xx;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + 2 * w] = v;
                dst[base + 2 * w + 1] = v;
            }
    }
    auto xn = x.node();
    return Var<T>(detail::make_op<T>(std::move(out), {xn}, [xn, n, c, h, w](VarNode<T>& self) {
        auto& g = xn->ensure_grad();
        for (size_t i = 0; i < n * c; ++i) {
            T* dst = g.v.data() + i * h * w;
            const T* src = self.grad.v.data() + i * 4 * h * w;
            for (size_t y = 0; y < h; ++y)
                for (size_t xx = 0; xx < w; ++xx) {
                    size_t base = (2 * y) * (2 * w) + 2 * xx;
                    dst[y * w + xx] +=
                        src[base] + src[base + 1] + src[base + 2 * w] + src[base + 2 * w + 1];
                }
        }
    }));
}

// ----------------------------- normalization -----------------------------

// GroupNorm over [N,C,H,W]: normalize within each (sample, group) slab, then
// per-channel affine. Biased variance, eps inside the sqrt.
template <class T>
inline Var<T> group_norm(const Var<T>& x, size_t groups, const Var<T>& gamma, const Var<T>& beta,
                         T eps = T(1e-5)) {
    const auto& s = x.val().shape;
    assert(s.size() == 4 && s[1] % groups == 0);
    size_t n = s[0], c = s[1], h = s[2], w = s[3];
    size_t cg = c / groups, slab = cg * h * w;
    Tensor<T> out({n, c, h, w});
    auto mean = std::make_shared<std::vector<T>>(n * groups);
    auto istd = std::make_shared<std::vector<T>>(n * groups);
    for (size_t i = 0; i < n; ++i)
        for (size_t g = 0; g < groups; ++g) {
            const T* src = x.val().v.data() + (i * c + g * cg) * h * w;
            double m = 0;
            for (size_t j = 0; j < slab; ++j) m += static_cast<double>(src[j]);
            m /= static_cast<double>(slab);
            double v = 0;
            for (size_t j = 0; j < slab; ++j) {
                double d = static_cast<double>(src[j]) - m;
                v += d * d;
            }
            v /= static_cast<double>(slab);
            T im = static_cast<T>(1.0 / std::sqrt(v + static_cast<double>(eps)));
            (*mean)[i * groups + g] = static_cast<T>(m);
            (*istd)[i * groups + g] = im;
            T* dst = out.v.data() + (i * c + g * cg) * h * w;
            for (size_t cc = 0; cc < cg; ++cc) {
                T ga = gamma.val().v[g * cg + cc];
                T be = beta.val().v[g * cg + cc];
                for (size_t j = 0; j < h * w; ++j) {
                    size_t idx = cc * h * w + j;
                    dst[idx] = (src[idx] - static_cast<T>(m)) * im * ga + be;
                }
            }
        }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return Var<T>(detail::make_op<T>(
        std::move(out), {xn, gn, bn},
        [xn, gn, bn, mean, istd, n, c, h, w, groups, cg, slab](VarNode<T>& self) {
            size_t hw = h * w;
            for (size_t i = 0; i < n; ++i)
                for (size_t g = 0; g < groups; ++g) {
                    const T* xp = xn->val.v.data() + (i * c + g * cg) * hw;
                    const T* gp = self.grad.v.data() + (i * c + g * cg) * hw;
                    T m = (*mean)[i * groups + g], im = (*istd)[i * groups + g];
                    // accumulate dgamma/dbeta and the two group means needed for dx
                    double sum_dxhat = 0, sum_dxhat_xhat = 0;
                    for (size_t cc = 0; cc < cg; ++cc) {
                        T ga = gn->val.v[g * cg + cc];
                        double dg = 0, db = 0;
                        for (size_t j = 0; j < hw; ++j) {
                            size_t idx = cc * hw + j;
                            T xhat = (xp[idx] - m) * im;
                            T dy = gp[idx];
                            dg += static_cast<double>(dy) * xhat;
                            db += static_cast<double>(dy);
                            double dxh = static_cast<double>(dy) * ga;
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat;
                        }
                        if (gn->requires_grad) gn->ensure_grad().v[g * cg + cc] += static_cast<T>(dg);
                        if (bn->requires_grad) bn->ensure_grad().v[g * cg + cc] += static_cast<T>(db);
                    }
                    if (xn->requires_grad) {
                        T* dxp = xn->ensure_grad().v.data() + (i * c + g * cg) * hw;
                        double inv = 1.0 / static_cast<double>(slab);
                        for (size_t cc = 0; cc < cg; ++cc) {
                            T ga = gn->val.v[g * cg + cc];
                            for (size_t j = 0; j < hw; ++j) {
                                size_t idx = cc * hw + j;
                                double xhat = static_cast<double>((xp[idx] - m) * im);
                                double dxh = static_cast<double>(gp[idx]) * ga;
                                dxp[idx] += static_cast<T>(
                                    im * (dxh - inv * sum_dxhat - xhat * inv * sum_dxhat_xhat));
                            }
                        }
                    }
                }
        }));
}

// Running statistics for 1-d batch norm.
template <class T>
struct BatchNormState {
    std::vector<T> running_mean;
    std::vector<T> running_var;
    T momentum = T(0.1);
    explicit BatchNormState(size_t features = 0)
        : running_mean(features, T(0)), running_var(features, T(1)) {}
};

// x [N,F]. Train mode normalizes with batch statistics and updates the
// running ones; eval mode uses the stored running statistics.
template <class T>
inline Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                         BatchNormState<T>& state, bool train, T eps = T(1e-5)) {
    const auto& s = x.val().shape;
    assert(s.size() == 2);
    size_t n = s[0], f = s[1];
    assert(state.running_mean.size() == f);
    Tensor<T> out({n, f});
    auto mean = std::make_shared<std::vector<T>>(f);
    auto istd = std::make_shared<std::vector<T>>(f);
    if (train) {
        for (size_t j = 0; j < f; ++j) {
            double m = 0;
            for (size_t i = 0; i < n; ++i) m += static_cast<double>(x.val().v[i * f + j]);
            m /= static_cast<double>(n);
            double v = 0;
            for (size_t i = 0; i < n; ++i) {
                double d = static_cast<double>(x.val().v[i * f + j]) - m;
                v += d * d;
            }
            double vb = v / static_cast<double>(n);
            double vu = n > 1 ? v / static_cast<double>(n - 1) : vb;
            (*mean)[j] = static_cast<T>(m);
            (*istd)[j] = static_cast<T>(1.0 / std::sqrt(vb + static_cast<double>(eps)));
            state.running_mean[j] =
                (T(1) - state.momentum) * state.running_mean[j] + state.momentum * static_cast<T>(m);
            state.running_var[j] =
                (T(1) - state.momentum) * state.running_var[j] + state.momentum * static_cast<T>(vu);
        }
    } else {
        for (size_t j = 0; j < f; ++j) {
            (*mean)[j] = state.running_mean[j];
            (*istd)[j] = static_cast<T>(
                1.0 / std::sqrt(static_cast<double>(state.running_var[j]) + static_cast<double>(eps)));
        }
    }
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < f; ++j)
            out.v[i * f + j] =
                (x.val().v[i * f + j] - (*mean)[j]) * (*istd)[j] * gamma.val().v[j] + beta.val().v[j];

    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return Var<T>(detail::make_op<T>(
        std::move(out), {xn, gn, bn}, [xn, gn, bn, mean, istd, n, f, train](VarNode<T>& self) {
            for (size_t j = 0; j < f; ++j) {
                T m = (*mean)[j], im = (*istd)[j], ga = gn->val.v[j];
                double sum_dy = 0, sum_dy_xhat = 0;
                for (size_t i = 0; i < n; ++i) {
                    double dy = static_cast<double>(self.grad.v[i * f + j]);
                    double xhat = static_cast<double>((xn->val.v[i * f + j] - m) * im);
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat;
                }
                if (gn->requires_grad) gn->ensure_grad().v[j] += static_cast<T>(sum_dy_xhat);
                if (bn->requires_grad) bn->ensure_grad().v[j] += static_cast<T>(sum_dy);
                if (xn->requires_grad) {
                    double inv = 1.0 / static_cast<double>(n);
                    for (size_t i = 0; i < n; ++i) {
                        double dy = static_cast<double>(self.grad.v[i * f + j]);
                        double xhat = static_cast<double>((xn->val.v[i * f + j] - m) * im);
                        double dx;
                        if (train) {
                            dx = static_cast<double>(ga) * im *
                                 (dy - inv * sum_dy - xhat * inv * sum_dy_xhat);
                        } else {
                            dx = static_cast<double>(ga) * im * dy;
                        }
                        xn->ensure_grad().v[i * f + j] += static_cast<T>(dx);
                    }
                }
            }
        }));
}

// ----------------------------- shape plumbing -----------------------------

template <class T>
inline Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    const auto& as = a.val().shape;
    const auto& bs = b.val().shape;
    assert(as.size() == 4 && bs.size() == 4 && as[0] == bs[0] && as[2] == bs[2] && as[3] == bs[3]);
    size_t n = as[0], ca = as[1], cb = bs[1], h = as[2], w = as[3], hw = h * w;
    Tensor<T> out({n, ca + cb, h, w});
    for (size_t i = 0; i < n; ++i) {
        std::copy_n(a.val().v.data() + i * ca * hw, ca * hw, out.v.data() + i * (ca + cb) * hw);
        std::copy_n(b.val().v.data() + i * cb * hw, cb * hw,
                    out.v.data() + i * (ca + cb) * hw + ca * hw);
    }
    auto an = a.node(), bn = b.node();
    return Var<T>(detail::make_op<T>(std::move(out), {an, bn},
                                     [an, bn, n, ca, cb, hw](VarNode<T>& self) {
        for (size_t i = 0; i < n; ++i) {
            const T* g = self.grad.v.data() + i * (ca + cb) * hw;
            if (an->requires_grad) {
                T* ga = an->ensure_grad().v.data() + i * ca * hw;
                for (size_t j = 0; j < ca * hw; ++j) ga[j] += g[j];
            }
            if (bn->requires_grad) {
                T* gb = bn->ensure_grad().v.data() + i * cb * hw;
                for (size_t j = 0; j < cb * hw; ++j) gb[j] += g[ca * hw + j];
            }
        }
    }));
}

template <class T>
inline Var<T> slice_channels(const Var<T>& x, size_t from, size_t to) {
    const auto& s = x.val().shape;
    assert(s.size() == 4 && from < to && to <= s[1]);
    size_t n = s[0], c = s[1], h = s[2], w = s[3], hw = h * w, cs = to - from;
    Tensor<T> out({n, cs, h, w});
    for (size_t i = 0; i < n; ++i)
        std::copy_n(x.val().v.data() + (i * c + from) * hw, cs * hw, out.v.data() + i * cs * hw);
    auto xn = x.node();
    return Var<T>(detail::make_op<T>(std::move(out), {xn}, [xn, n, c, hw, from, cs](VarNode<T>& self) {
        auto& g = xn->ensure_grad();
        for (size_t i = 0; i < n; ++i) {
            T* dst = g.v.data() + (i * c + from) * hw;
            const T* src = self.grad.v.data() + i * cs * hw;
            for (size_t j = 0; j < cs * hw; ++j) dst[j] += src[j];
        }
    }));
}

// Adds a per-(sample, channel) bias e[N,C] to x[N,C,H,W] (time conditioning).
template <class T>
inline Var<T> add_channel_bias_batched(const Var<T>& x, const Var<T>& e) {
    const auto& s = x.val().shape;
    const auto& es = e.val().shape;
    assert(s.size() == 4 && es.size() == 2 && s[0] == es[0] && s[1] == es[1]);
    size_t n = s[0], c = s[1], hw = s[2] * s[3];
    Tensor<T> out = x.val();
    for (size_t i = 0; i < n; ++i)
        for (size_t cc = 0; cc < c; ++cc) {
            T bias = e.val().v[i * c + cc];
            T* p = out.v.data() + (i * c + cc) * hw;
            for (size_t j = 0; j < hw; ++j) p[j] += bias;
        }
    auto xn = x.node(), en = e.node();
    return Var<T>(detail::make_op<T>(std::move(out), {xn, en}, [xn, en, n, c, hw](VarNode<T>& self) {
        if (xn->requires_grad) {
            auto& g = xn->ensure_grad();
            for (size_t j = 0; j < g.v.size(); ++j) g.v[j] += self.grad.v[j];
        }
        if (en->requires_grad) {
            auto& g = en->ensure_grad();
            for (size_t i = 0; i < n; ++i)
                for (size_t cc = 0; cc < c; ++cc) {
                    const T* p = self.grad.v.data() + (i * c + cc) * hw;
                    double acc = 0;
                    for (size_t j = 0; j < hw; ++j) acc += static_cast<double>(p[j]);
                    g.v[i * c + cc] += static_cast<T>(acc);
                }
        }
    }));
}

// ----------------------------- softmax family -----------------------------

// Softmax over the last axis of a 3-d tensor [B, M, N].
template <class T>
inline Var<T> softmax_lastdim(const Var<T>& x) {
    const auto& s = x.val().shape;
    assert(s.size() == 3);
    size_t rows = s[0] * s[1], n = s[2];
    Tensor<T> out = x.val();
    for (size_t r = 0; r < rows; ++r) {
        T* p = out.v.data() + r * n;
        T mx = p[0];
        for (size_t j = 1; j < n; ++j) mx = std::max(mx, p[j]);
        double sum = 0;
        for (size_t j = 0; j < n; ++j) {
            p[j] = std::exp(p[j] - mx);
            sum += static_cast<double>(p[j]);
        }
        T inv = static_cast<T>(1.0 / sum);
        for (size_t j = 0; j < n; ++j) p[j] *= inv;
    }
    auto xn = x.node();
    auto node = detail::make_op<T>(std::move(out), {xn}, nullptr);
    node->backfn = [xn, rows, n](VarNode<T>& self) {
        auto& g = xn->ensure_grad();
        for (size_t r = 0; r < rows; ++r) {
            const T* y = self.val.v.data() + r * n;
            const T* gy = self.grad.v.data() + r * n;
            double dot = 0;
            for (size_t j = 0; j < n; ++j) dot += static_cast<double>(gy[j]) * y[j];
            T* gx = g.v.data() + r * n;
            for (size_t j = 0; j < n; ++j)
                gx[j] += y[j] * (gy[j] - static_cast<T>(dot));
        }
    };
    return Var<T>(node);
}

// Softmax over the middle axis of [N, m, K]: weights across timesteps,
// independently per (sample, channel).
template <class T>
inline Var<T> softmax_axis1(const Var<T>& x) {
    const auto& s = x.val().shape;
    assert(s.size() == 3);
    size_t n = s[0], m = s[1], k = s[2];
    Tensor<T> out = x.val();
    for (size_t i = 0; i < n; ++i)
        for (size_t c = 0; c < k; ++c) {
            T mx = out.v[i * m * k + c];
            for (size_t j = 1; j < m; ++j) mx = std::max(mx, out.v[(i * m + j) * k + c]);
            double sum = 0;
            for (size_t j = 0; j < m; ++j) {
                T& e = out.v[(i * m + j) * k + c];
                e = std::exp(e - mx);
                sum += static_cast<double>(e);
            }
            T inv = static_cast<T>(1.0 / sum);
            for (size_t j = 0; j < m; ++j) out.v[(i * m + j) * k + c] *= inv;
        }
    auto xn = x.node();
    auto node = detail::make_op<T>(std::move(out), {xn}, nullptr);
    node->backfn = [xn, n, m, k](VarNode<T>& self) {
        auto& g = xn->ensure_grad();
        for (size_t i = 0; i < n; ++i)
            for (size_t c = 0; c < k; ++c) {
                double dot = 0;
                for (size_t j = 0; j < m; ++j) {
                    size_t idx = (i * m + j) * k + c;
                    dot += static_cast<double>(self.grad.v[idx]) * self.val.v[idx];
                }
                for (size_t j = 0; j < m; ++j) {
                    size_t idx = (i * m + j) * k + c;
                    g.v[idx] += self.val.v[idx] * (self.grad.v[idx] - static_cast<T>(dot));
                }
            }
    };
    return Var<T>(node);
}

// Stack m tensors of shape [N,K] into [N,m,K].
template <class T>
inline Var<T> stack_axis1(const std::vector<Var<T>>& xs) {
    assert(!xs.empty());
    size_t m = xs.size();
    size_t n = xs[0].val().shape[0], k = xs[0].val().shape[1];
    Tensor<T> out({n, m, k});
    std::vector<std::shared_ptr<VarNode<T>>> parents;
    for (size_t j = 0; j < m; ++j) {
        assert(xs[j].val().shape[0] == n && xs[j].val().shape[1] == k);
        for (size_t i = 0; i < n; ++i)
            std::copy_n(xs[j].val().v.data() + i * k, k, out.v.data() + (i * m + j) * k);
        parents.push_back(xs[j].node());
    }
    auto parents_copy = parents;
    return Var<T>(detail::make_op<T>(std::move(out), std::move(parents),
                                     [parents_copy, n, m, k](VarNode<T>& self) {
        for (size_t j = 0; j < m; ++j) {
            auto& p = parents_copy[j];
            if (!p->requires_grad) continue;
            auto& g = p->ensure_grad();
            for (size_t i = 0; i < n; ++i) {
                const T* src = self.grad.v.data() + (i * m + j) * k;
                T* dst = g.v.data() + i * k;
                for (size_t c = 0; c < k; ++c) dst[c] += src[c];
            }
        }
    }));
}

template <class T>
inline Var<T> slice_axis1(const Var<T>& x, size_t j) {
    const auto& s = x.val().shape;
    assert(s.size() == 3 && j < s[1]);
    size_t n = s[0], m = s[1], k = s[2];
    Tensor<T> out({n, k});
    for (size_t i = 0; i < n; ++i)
        std::copy_n(x.val().v.data() + (i * m + j) * k, k, out.v.data() + i * k);
    auto xn = x.node();
    return Var<T>(detail::make_op<T>(std::move(out), {xn}, [xn, n, m, k, j](VarNode<T>& self) {
        auto& g = xn->ensure_grad();
        for (size_t i = 0; i < n; ++i) {
            T* dst = g.v.data() + (i * m + j) * k;
            const T* src = self.grad.v.data() + i * k;
            for (size_t c = 0; c < k; ++c) dst[c] += src[c];
        }
    }));
}

// Sum [N,m,K] over the middle axis -> [N,K].
template <class T>
inline Var<T> sum_axis1(const Var<T>& x) {
    const auto& s = x.val().shape;
    assert(s.size() == 3);
    size_t n = s[0], m = s[1], k = s[2];
    Tensor<T> out({n, k});
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < m; ++j) {
            const T* src = x.val().v.data() + (i * m + j) * k;
            T* dst = out.v.data() + i * k;
            for (size_t c = 0; c < k; ++c) dst[c] += src[c];
        }
    auto xn = x.node();
    return Var<T>(detail::make_op<T>(std::move(out), {xn}, [xn, n, m, k](VarNode<T>& self) {
        auto& g = xn->ensure_grad();
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < m; ++j) {
                T* dst = g.v.data() + (i * m + j) * k;
                const T* src = self.grad.v.data() + i * k;
                for (size_t c = 0; c < k; ++c) dst[c] += src[c];
            }
    }));
}

// ----------------------------- losses -----------------------------

// Mean cross-entropy of logits [N,C] against labels in [0,C).
template <class T>
inline Var<T> cross_entropy(const Var<T>& logits, const std::vector<size_t>& labels) {
    const auto& s = logits.val().shape;
    assert(s.size() == 2 && labels.size() == s[0]);
    size_t n = s[0], c = s[1];
    double acc = 0;
    auto probs = std::make_shared<Tensor<T>>(std::vector<size_t>{n, c});
    for (size_t i = 0; i < n; ++i) {
        const T* p = logits.val().v.data() + i * c;
        T mx = p[0];
        for (size_t j = 1; j < c; ++j) mx = std::max(mx, p[j]);
        double sum = 0;
        for (size_t j = 0; j < c; ++j) sum += std::exp(static_cast<double>(p[j] - mx));
        double lse = std::log(sum) + static_cast<double>(mx);
        acc += lse - static_cast<double>(p[labels[i]]);
        for (size_t j = 0; j < c; ++j)
            probs->v[i * c + j] = static_cast<T>(std::exp(static_cast<double>(p[j]) - lse));
    }
    Tensor<T> out({1});
    out.v[0] = static_cast<T>(acc / static_cast<double>(n));
    auto ln = logits.node();
    auto labels_copy = labels;
    return Var<T>(detail::make_op<T>(std::move(out), {ln},
                                     [ln, probs, labels_copy, n, c](VarNode<T>& self) {
        auto& g = ln->ensure_grad();
        T scale = self.grad.v[0] / static_cast<T>(n);
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < c; ++j) {
                T p = probs->v[i * c + j];
                if (j == labels_copy[i]) p -= T(1);
                g.v[i * c + j] += scale * p;
            }
    }));
}

// mean((a-b)^2) over all elements
template <class T>
inline Var<T> mse(const Var<T>& a, const Var<T>& b) {
    return mean_all(square(sub(a, b)));
}

// ----------------------------- optimizer -----------------------------

template <class T>
struct Adam {
    T lr = T(1e-4);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    size_t step_count = 0;
    std::vector<Tensor<T>> m, v;

    void init(const std::vector<Var<T>>& params) {
        m.clear();
        v.clear();
        for (const auto& p : params) {
            m.push_back(Tensor<T>::zeros(p.val().shape));
            v.push_back(Tensor<T>::zeros(p.val().shape));
        }
        step_count = 0;
    }

    void step(std::vector<Var<T>>& params) {
        ++step_count;
        T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta1), double(step_count)));
        T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta2), double(step_count)));
        for (size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i].mutable_val();
            auto& g = params[i].grad();
            for (size_t j = 0; j < p.v.size(); ++j) {
                T gj = g.v[j];
                m[i].v[j] = beta1 * m[i].v[j] + (T(1) - beta1) * gj;
                v[i].v[j] = beta2 * v[i].v[j] + (T(1) - beta2) * gj * gj;
                T mhat = m[i].v[j] / bc1;
                T vhat = v[i].v[j] / bc2;
                p.v[j] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

    void zero_grad(std::vector<Var<T>>& params) {
        for (auto& p : params) p.zero_grad();
    }
};

// Cosine-annealed learning rate between lr0 and lr_min over total epochs.
template <class T>
inline T cosine_annealed_lr(T lr0, T lr_min, size_t epoch, size_t total_epochs) {
    if (total_epochs <= 1) return lr0;
    double phase = static_cast<double>(epoch) / static_cast<double>(total_epochs - 1);
    return lr_min + (lr0 - lr_min) * static_cast<T>(0.5 * (1.0 + std::cos(phase * M_PI)));
}

} // namespace hsidiff
