#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "gaitkit/tensor.hpp"

namespace gaitkit {

enum class Padding { Same, Valid };
enum class Reduce { Max, Min, Mean, Sum };

namespace detail {

inline int resolve_threads() {
    int n = thread_count();
#ifdef _OPENMP
    if (n <= 0) n = omp_get_max_threads();
#else
    if (n <= 0) n = 1;
#endif
    return n;
}

// --- broadcasting ------------------------------------------------------------

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (ea != eb && ea != 1 && eb != 1) {
            throw ShapeError(std::string(op) + ": axis " + std::to_string(i) +
                             " extents " + std::to_string(ea) + " vs " +
                             std::to_string(eb) + " are not broadcastable (" +
                             shape_str(a) + " vs " + shape_str(b) + ")");
        }
        out[i] = std::max(ea, eb);
    }
    return out;
}

// Strides of `in` aligned to the trailing axes of `out`; broadcast axes get 0.
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<std::size_t> strides(out.size(), 0);
    auto in_strides = row_major_strides(in);
    std::size_t off = out.size() - in.size();
    for (std::size_t i = 0; i < in.size(); ++i) {
        strides[off + i] = in[i] == 1 ? 0 : in_strides[i];
    }
    return strides;
}

// Walks all positions of `shape`, maintaining flat offsets for two aligned
// operands with possibly-zero strides.
template <typename Fn>
inline void for_each_broadcast(const Shape& shape,
                               const std::vector<std::size_t>& sa,
                               const std::vector<std::size_t>& sb, Fn&& fn) {
    std::size_t total = numel(shape);
    std::size_t rank = shape.size();
    if (rank == 0) {
        fn(0, 0, 0);
        return;
    }
    std::vector<std::size_t> idx(rank, 0);
    std::size_t pa = 0, pb = 0;
    for (std::size_t i = 0; i < total; ++i) {
        fn(i, pa, pb);
        for (std::size_t axis = rank; axis-- > 0;) {
            ++idx[axis];
            pa += sa[axis];
            pb += sb[axis];
            if (idx[axis] < shape[axis]) break;
            pa -= sa[axis] * shape[axis];
            pb -= sb[axis] * shape[axis];
            idx[axis] = 0;
        }
    }
}

enum class EwKind { Add, Sub, Mul };

inline Tensor ewise(const Tensor& a, const Tensor& b, EwKind kind, const char* name) {
    Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
    auto sa = broadcast_strides(a.shape(), out_shape);
    auto sb = broadcast_strides(b.shape(), out_shape);
    const double* av = a.values().data();
    const double* bv = b.values().data();
    std::vector<double> out(numel(out_shape));

    if (a.shape() == b.shape()) {  // fast path, no odometer
        for (std::size_t i = 0; i < out.size(); ++i) {
            switch (kind) {
                case EwKind::Add: out[i] = av[i] + bv[i]; break;
                case EwKind::Sub: out[i] = av[i] - bv[i]; break;
                case EwKind::Mul: out[i] = av[i] * bv[i]; break;
            }
        }
    } else {
        for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t pa, std::size_t pb) {
            switch (kind) {
                case EwKind::Add: out[i] = av[pa] + bv[pb]; break;
                case EwKind::Sub: out[i] = av[pa] - bv[pb]; break;
                case EwKind::Mul: out[i] = av[pa] * bv[pb]; break;
            }
        });
    }

    Shape shape_copy = out_shape;
    return make_op(
        std::move(out_shape), std::move(out), {a, b},
        [a, b, kind, shape = std::move(shape_copy), sa, sb](Node& self) {
            const double* g = self.grad_buf().data();
            Node* na = a.node();
            Node* nb = b.node();
            double* ga = a.requires_grad() ? na->grad_buf().data() : nullptr;
            double* gb = b.requires_grad() ? nb->grad_buf().data() : nullptr;
            const double* av = na->value.data();
            const double* bv = nb->value.data();
            for_each_broadcast(shape, sa, sb, [&](std::size_t i, std::size_t pa, std::size_t pb) {
                switch (kind) {
                    case EwKind::Add:
                        if (ga) ga[pa] += g[i];
                        if (gb) gb[pb] += g[i];
                        break;
                    case EwKind::Sub:
                        if (ga) ga[pa] += g[i];
                        if (gb) gb[pb] -= g[i];
                        break;
                    case EwKind::Mul:
                        if (ga) ga[pa] += g[i] * bv[pb];
                        if (gb) gb[pb] += g[i] * av[pa];
                        break;
                }
            });
        });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::ewise(a, b, detail::EwKind::Add, "add"); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::ewise(a, b, detail::EwKind::Sub, "sub"); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::ewise(a, b, detail::EwKind::Mul, "mul"); }

inline Tensor scale(const Tensor& x, double c) {
    std::vector<double> out(x.values().begin(), x.values().end());
    for (double& v : out) v *= c;
    return detail::make_op(x.shape(), std::move(out), {x}, [x, c](detail::Node& self) {
        const double* g = self.grad_buf().data();
        double* gx = x.node()->grad_buf().data();
        for (std::size_t i = 0; i < self.value.size(); ++i) gx[i] += c * g[i];
    });
}

// --- matmul ------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("matmul: expected rank-2 operands, got " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    std::size_t m = a.shape()[0], k = a.shape()[1];
    std::size_t k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2) {
        throw ShapeError("matmul: inner axis mismatch, axis 1 of lhs is " +
                         std::to_string(k) + " but axis 0 of rhs is " + std::to_string(k2));
    }
    const double* av = a.values().data();
    const double* bv = b.values().data();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
            double aik = av[i * k + kk];
            const double* brow = bv + kk * n;
            double* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
        }
    }
    return detail::make_op({m, n}, std::move(out), {a, b}, [a, b, m, k, n](detail::Node& self) {
        const double* g = self.grad_buf().data();
        const double* av = a.node()->value.data();
        const double* bv = b.node()->value.data();
        if (a.requires_grad()) {
            double* ga = a.node()->grad_buf().data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t kk = 0; kk < k; ++kk) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[kk * n + j];
                    ga[i * k + kk] += acc;
                }
        }
        if (b.requires_grad()) {
            double* gb = b.node()->grad_buf().data();
            for (std::size_t kk = 0; kk < k; ++kk)
                for (std::size_t j = 0; j < n; ++j) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < m; ++i) acc += av[i * k + kk] * g[i * n + j];
                    gb[kk * n + j] += acc;
                }
        }
    });
}

// --- pointwise nonlinearities --------------------------------------------------

inline Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.size());
    const double* xv = x.values().data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        double v = xv[i];
        if (v >= 0.0) {
            out[i] = 1.0 / (1.0 + std::exp(-v));
        } else {
            double e = std::exp(v);
            out[i] = e / (1.0 + e);
        }
    }
    return detail::make_op(x.shape(), std::move(out), {x}, [x](detail::Node& self) {
        const double* g = self.grad_buf().data();
        const double* s = self.value.data();
        double* gx = x.node()->grad_buf().data();
        for (std::size_t i = 0; i < self.value.size(); ++i) {
            gx[i] += g[i] * s[i] * (1.0 - s[i]);
        }
    });
}

inline Tensor leaky_relu(const Tensor& x, double slope = 0.01) {
    std::vector<double> out(x.size());
    const double* xv = x.values().data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = xv[i] > 0.0 ? xv[i] : slope * xv[i];
    }
    return detail::make_op(x.shape(), std::move(out), {x}, [x, slope](detail::Node& self) {
        const double* g = self.grad_buf().data();
        const double* xv = x.node()->value.data();
        double* gx = x.node()->grad_buf().data();
        for (std::size_t i = 0; i < self.value.size(); ++i) {
            gx[i] += g[i] * (xv[i] > 0.0 ? 1.0 : slope);
        }
    });
}

// --- reductions ----------------------------------------------------------------

inline Tensor reduce(const Tensor& x, std::vector<std::size_t> axes, Reduce mode,
                     bool keepdims = false) {
    if (axes.empty()) return x;  // identity
    std::sort(axes.begin(), axes.end());
    axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
    for (std::size_t a : axes) {
        if (a >= x.rank()) {
            throw ShapeError("reduce: axis " + std::to_string(a) +
                             " out of range for " + shape_str(x.shape()));
        }
    }
    const Shape& in_shape = x.shape();
    std::vector<bool> reduced(in_shape.size(), false);
    for (std::size_t a : axes) reduced[a] = true;

    Shape out_shape;
    std::size_t count = 1;
    for (std::size_t i = 0; i < in_shape.size(); ++i) {
        if (reduced[i]) {
            count *= in_shape[i];
            if (keepdims) out_shape.push_back(1);
        } else {
            out_shape.push_back(in_shape[i]);
        }
    }

    // Map each input position to its output offset: output strides with 0 on
    // reduced axes.
    Shape padded_out(in_shape.size(), 1);
    {
        std::size_t j = 0;
        for (std::size_t i = 0; i < in_shape.size(); ++i) {
            if (!reduced[i]) padded_out[i] = in_shape[i];
            (void)j;
        }
    }
    auto out_strides = detail::broadcast_strides(padded_out, in_shape);
    // broadcast_strides aligns padded_out inside in_shape; recompute directly:
    {
        auto full = row_major_strides(padded_out);
        for (std::size_t i = 0; i < in_shape.size(); ++i) {
            out_strides[i] = reduced[i] ? 0 : full[i];
        }
        // full strides are over padded_out, whose non-reduced extents match
        // out_shape's layout (size-1 axes collapse away in row-major order).
    }

    std::size_t out_count = numel(out_shape);
    const double* xv = x.values().data();
    std::vector<double> out(out_count, 0.0);
    std::vector<std::size_t> argsel;
    bool is_minmax = mode == Reduce::Max || mode == Reduce::Min;
    if (is_minmax) argsel.assign(out_count, static_cast<std::size_t>(-1));

    auto in_strides_all = row_major_strides(in_shape);
    std::vector<std::size_t> idx(in_shape.size(), 0);
    std::size_t pout = 0;
    std::size_t total = numel(in_shape);
    for (std::size_t i = 0; i < total; ++i) {
        double v = xv[i];
        switch (mode) {
            case Reduce::Max:
                if (argsel[pout] == static_cast<std::size_t>(-1) || v > out[pout]) {
                    out[pout] = v;
                    argsel[pout] = i;
                }
                break;
            case Reduce::Min:
                if (argsel[pout] == static_cast<std::size_t>(-1) || v < out[pout]) {
                    out[pout] = v;
                    argsel[pout] = i;
                }
                break;
            case Reduce::Mean:
            case Reduce::Sum:
                out[pout] += v;
                break;
        }
        for (std::size_t axis = in_shape.size(); axis-- > 0;) {
            ++idx[axis];
            pout += out_strides[axis];
            if (idx[axis] < in_shape[axis]) break;
            pout -= out_strides[axis] * in_shape[axis];
            idx[axis] = 0;
        }
    }
    if (mode == Reduce::Mean) {
        for (double& v : out) v /= static_cast<double>(count);
    }

    return detail::make_op(
        out_shape, std::move(out), {x},
        [x, mode, count, out_strides, argsel](detail::Node& self) {
            const double* g = self.grad_buf().data();
            double* gx = x.node()->grad_buf().data();
            if (mode == Reduce::Max || mode == Reduce::Min) {
                for (std::size_t o = 0; o < argsel.size(); ++o) gx[argsel[o]] += g[o];
                return;
            }
            const Shape& in_shape = x.shape();
            double inv = mode == Reduce::Mean ? 1.0 / static_cast<double>(count) : 1.0;
            std::vector<std::size_t> idx(in_shape.size(), 0);
            std::size_t pout = 0;
            std::size_t total = numel(in_shape);
            for (std::size_t i = 0; i < total; ++i) {
                gx[i] += g[pout] * inv;
                for (std::size_t axis = in_shape.size(); axis-- > 0;) {
                    ++idx[axis];
                    pout += out_strides[axis];
                    if (idx[axis] < in_shape[axis]) break;
                    pout -= out_strides[axis] * in_shape[axis];
                    idx[axis] = 0;
                }
            }
        });
}

inline Tensor reduce_max(const Tensor& x, std::vector<std::size_t> axes, bool keepdims = false) {
    return reduce(x, std::move(axes), Reduce::Max, keepdims);
}
inline Tensor reduce_min(const Tensor& x, std::vector<std::size_t> axes, bool keepdims = false) {
    return reduce(x, std::move(axes), Reduce::Min, keepdims);
}
inline Tensor reduce_mean(const Tensor& x, std::vector<std::size_t> axes, bool keepdims = false) {
    return reduce(x, std::move(axes), Reduce::Mean, keepdims);
}
inline Tensor reduce_sum(const Tensor& x, std::vector<std::size_t> axes, bool keepdims = false) {
    return reduce(x, std::move(axes), Reduce::Sum, keepdims);
}

inline std::vector<std::size_t> all_axes(const Tensor& x) {
    std::vector<std::size_t> axes(x.rank());
    for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
    return axes;
}

// --- generalized-mean pooling ---------------------------------------------------

// Pools the last axis: [.., C, S] -> [.., C]. p is a learnable scalar >= 1;
// elements are clamped to eps before the power.
inline Tensor gem_pool(const Tensor& x, const Tensor& p, double eps = 1e-6) {
    if (x.rank() < 1) throw ShapeError("gem_pool: input must have a pooled axis");
    if (p.size() != 1) throw ShapeError("gem_pool: p must be scalar, got " + shape_str(p.shape()));
    if (!(eps > 0.0)) throw Error("gem_pool: eps must be > 0");
    double pv = p.values()[0];
    if (!(pv >= 1.0)) throw Error("gem_pool: p must be >= 1, got " + std::to_string(pv));

    std::size_t s = x.shape().back();
    std::size_t rows = x.size() / s;
    Shape out_shape(x.shape().begin(), x.shape().end() - 1);

    const double* xv = x.values().data();
    std::vector<double> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        const double* row = xv + r * s;
        for (std::size_t i = 0; i < s; ++i) {
            acc += std::pow(std::max(row[i], eps), pv);
        }
        double mean = acc / static_cast<double>(s);
        out[r] = std::pow(mean, 1.0 / pv);
    }

    return detail::make_op(
        std::move(out_shape), std::move(out), {x, p},
        [x, p, eps, rows, s](detail::Node& self) {
            const double* g = self.grad_buf().data();
            const double* xv = x.node()->value.data();
            const double* y = self.value.data();
            double pv = p.node()->value[0];
            double* gx = x.requires_grad() ? x.node()->grad_buf().data() : nullptr;
            double* gp = p.requires_grad() ? p.node()->grad_buf().data() : nullptr;
            for (std::size_t r = 0; r < rows; ++r) {
                const double* row = xv + r * s;
                double mean = std::pow(y[r], pv);  // recovers (1/S) sum u^p
                double sum_logs = 0.0;
                if (gp) {
                    for (std::size_t i = 0; i < s; ++i) {
                        double u = std::max(row[i], eps);
                        sum_logs += std::pow(u, pv) * std::log(u);
                    }
                }
                if (gx) {
                    double front = std::pow(mean, 1.0 / pv - 1.0) / static_cast<double>(s);
                    for (std::size_t i = 0; i < s; ++i) {
                        if (row[i] > eps) {
                            gx[r * s + i] += g[r] * front * std::pow(row[i], pv - 1.0);
                        }
                    }
                }
                if (gp) {
                    double dy_dp = y[r] * (-std::log(mean) / (pv * pv) +
                                           sum_logs / (pv * static_cast<double>(s) * mean));
                    gp[0] += g[r] * dy_dp;
                }
            }
        });
}

// --- convolutions -----------------------------------------------------------------

struct ConvKernel {
    Tensor weight;  // [O,C,kh,kw] for 2D, [O,C,kt,kh,kw] for 3D
    Tensor bias;    // [O] or undefined
};

namespace detail {

struct ConvDims {
    std::size_t n, cin, t, h, w;      // input
    std::size_t cout, kt, kh, kw;     // kernel
    std::size_t pt, ph, pw;           // zero padding
    std::size_t to, ho, wo;           // output
};

inline void conv_forward(const double* x, const double* wgt, const double* bias,
                         double* y, const ConvDims& d) {
    const std::size_t in_t = d.h * d.w, in_c = d.t * in_t;
    const std::size_t out_t = d.ho * d.wo, out_c = d.to * out_t;
    const std::size_t jobs = d.n * d.cout;
    const bool big = jobs * out_c * d.cin * d.kt * d.kh * d.kw > 100000;
    const int nthreads = resolve_threads();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(nthreads) if (big && nthreads > 1)
#endif
    for (long long job = 0; job < static_cast<long long>(jobs); ++job) {
        const std::size_t n = static_cast<std::size_t>(job) / d.cout;
        const std::size_t oc = static_cast<std::size_t>(job) % d.cout;
        double* out = y + (n * d.cout + oc) * out_c;
        const double b = bias ? bias[oc] : 0.0;
        for (std::size_t i = 0; i < out_c; ++i) out[i] = b;
        for (std::size_t ic = 0; ic < d.cin; ++ic) {
            const double* in = x + (n * d.cin + ic) * in_c;
            for (std::size_t kt = 0; kt < d.kt; ++kt)
                for (std::size_t kh = 0; kh < d.kh; ++kh)
                    for (std::size_t kw = 0; kw < d.kw; ++kw) {
                        const double wv =
                            wgt[(((oc * d.cin + ic) * d.kt + kt) * d.kh + kh) * d.kw + kw];
                        const std::ptrdiff_t dt = static_cast<std::ptrdiff_t>(kt) - static_cast<std::ptrdiff_t>(d.pt);
                        const std::ptrdiff_t dh = static_cast<std::ptrdiff_t>(kh) - static_cast<std::ptrdiff_t>(d.ph);
                        const std::ptrdiff_t dw = static_cast<std::ptrdiff_t>(kw) - static_cast<std::ptrdiff_t>(d.pw);
                        const std::size_t w0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -dw));
                        const std::size_t w1 = static_cast<std::size_t>(std::min<std::ptrdiff_t>(
                            static_cast<std::ptrdiff_t>(d.wo), static_cast<std::ptrdiff_t>(d.w) - dw));
                        for (std::size_t to = 0; to < d.to; ++to) {
                            const std::ptrdiff_t ti = static_cast<std::ptrdiff_t>(to) + dt;
                            if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(d.t)) continue;
                            for (std::size_t ho = 0; ho < d.ho; ++ho) {
                                const std::ptrdiff_t hi = static_cast<std::ptrdiff_t>(ho) + dh;
                                if (hi < 0 || hi >= static_cast<std::ptrdiff_t>(d.h)) continue;
                                double* orow = out + to * out_t + ho * d.wo;
                                const double* irow = in + static_cast<std::size_t>(ti) * in_t +
                                                     static_cast<std::size_t>(hi) * d.w + dw;
                                for (std::size_t wo = w0; wo < w1; ++wo) {
                                    orow[wo] += wv * irow[wo];
                                }
                            }
                        }
                    }
        }
    }
}

inline void conv_dinput(const double* wgt, const double* gy, double* gx, const ConvDims& d) {
    const std::size_t in_t = d.h * d.w, in_c = d.t * in_t;
    const std::size_t out_t = d.ho * d.wo, out_c = d.to * out_t;
    const std::size_t jobs = d.n * d.cin;
    const bool big = jobs * out_c * d.cout * d.kt * d.kh * d.kw > 100000;
    const int nthreads = resolve_threads();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(nthreads) if (big && nthreads > 1)
#endif
    for (long long job = 0; job < static_cast<long long>(jobs); ++job) {
        const std::size_t n = static_cast<std::size_t>(job) / d.cin;
        const std::size_t ic = static_cast<std::size_t>(job) % d.cin;
        double* gin = gx + (n * d.cin + ic) * in_c;
        for (std::size_t oc = 0; oc < d.cout; ++oc) {
            const double* gout = gy + (n * d.cout + oc) * out_c;
            for (std::size_t kt = 0; kt < d.kt; ++kt)
                for (std::size_t kh = 0; kh < d.kh; ++kh)
                    for (std::size_t kw = 0; kw < d.kw; ++kw) {
                        const double wv =
                            wgt[(((oc * d.cin + ic) * d.kt + kt) * d.kh + kh) * d.kw + kw];
                        const std::ptrdiff_t dt = static_cast<std::ptrdiff_t>(kt) - static_cast<std::ptrdiff_t>(d.pt);
                        const std::ptrdiff_t dh = static_cast<std::ptrdiff_t>(kh) - static_cast<std::ptrdiff_t>(d.ph);
                        const std::ptrdiff_t dw = static_cast<std::ptrdiff_t>(kw) - static_cast<std::ptrdiff_t>(d.pw);
                        const std::size_t w0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -dw));
                        const std::size_t w1 = static_cast<std::size_t>(std::min<std::ptrdiff_t>(
                            static_cast<std::ptrdiff_t>(d.wo), static_cast<std::ptrdiff_t>(d.w) - dw));
                        for (std::size_t to = 0; to < d.to; ++to) {
                            const std::ptrdiff_t ti = static_cast<std::ptrdiff_t>(to) + dt;
                            if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(d.t)) continue;
                            for (std::size_t ho = 0; ho < d.ho; ++ho) {
                                const std::ptrdiff_t hi = static_cast<std::ptrdiff_t>(ho) + dh;
                                if (hi < 0 || hi >= static_cast<std::ptrdiff_t>(d.h)) continue;
                                const double* grow = gout + to * out_t + ho * d.wo;
                                double* irow = gin + static_cast<std::size_t>(ti) * in_t +
                                               static_cast<std::size_t>(hi) * d.w + dw;
                                for (std::size_t wo = w0; wo < w1; ++wo) {
                                    irow[wo] += wv * grow[wo];
                                }
                            }
                        }
                    }
        }
    }
}

inline void conv_dweight(const double* x, const double* gy, double* gw, const ConvDims& d) {
    const std::size_t in_t = d.h * d.w, in_c = d.t * in_t;
    const std::size_t out_t = d.ho * d.wo, out_c = d.to * out_t;
    const std::size_t jobs = d.cout * d.cin;
    const bool big = jobs * out_c * d.n * d.kt * d.kh * d.kw > 100000;
    const int nthreads = resolve_threads();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(nthreads) if (big && nthreads > 1)
#endif
    for (long long job = 0; job < static_cast<long long>(jobs); ++job) {
        const std::size_t oc = static_cast<std::size_t>(job) / d.cin;
        const std::size_t ic = static_cast<std::size_t>(job) % d.cin;
        for (std::size_t kt = 0; kt < d.kt; ++kt)
            for (std::size_t kh = 0; kh < d.kh; ++kh)
                for (std::size_t kw = 0; kw < d.kw; ++kw) {
                    const std::ptrdiff_t dt = static_cast<std::ptrdiff_t>(kt) - static_cast<std::ptrdiff_t>(d.pt);
                    const std::ptrdiff_t dh = static_cast<std::ptrdiff_t>(kh) - static_cast<std::ptrdiff_t>(d.ph);
                    const std::ptrdiff_t dw = static_cast<std::ptrdiff_t>(kw) - static_cast<std::ptrdiff_t>(d.pw);
                    const std::size_t w0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -dw));
                    const std::size_t w1 = static_cast<std::size_t>(std::min<std::ptrdiff_t>(
                        static_cast<std::ptrdiff_t>(d.wo), static_cast<std::ptrdiff_t>(d.w) - dw));
                    double acc = 0.0;
                    for (std::size_t n = 0; n < d.n; ++n) {
                        const double* in = x + (n * d.cin + ic) * in_c;
                        const double* gout = gy + (n * d.cout + oc) * out_c;
                        for (std::size_t to = 0; to < d.to; ++to) {
                            const std::ptrdiff_t ti = static_cast<std::ptrdiff_t>(to) + dt;
                            if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(d.t)) continue;
                            for (std::size_t ho = 0; ho < d.ho; ++ho) {
                                const std::ptrdiff_t hi = static_cast<std::ptrdiff_t>(ho) + dh;
                                if (hi < 0 || hi >= static_cast<std::ptrdiff_t>(d.h)) continue;
                                const double* grow = gout + to * out_t + ho * d.wo;
                                const double* irow = in + static_cast<std::size_t>(ti) * in_t +
                                                     static_cast<std::size_t>(hi) * d.w + dw;
                                for (std::size_t wo = w0; wo < w1; ++wo) {
                                    acc += irow[wo] * grow[wo];
                                }
                            }
                        }
                    }
                    gw[(((oc * d.cin + ic) * d.kt + kt) * d.kh + kh) * d.kw + kw] += acc;
                }
    }
}

inline void conv_dbias(const double* gy, double* gb, const ConvDims& d) {
    const std::size_t out_c = d.to * d.ho * d.wo;
    for (std::size_t n = 0; n < d.n; ++n) {
        for (std::size_t oc = 0; oc < d.cout; ++oc) {
            const double* gout = gy + (n * d.cout + oc) * out_c;
            double acc = 0.0;
            for (std::size_t i = 0; i < out_c; ++i) acc += gout[i];
            gb[oc] += acc;
        }
    }
}

inline std::size_t out_extent(std::size_t in, std::size_t k, Padding pad, const char* axis,
                              const char* op) {
    if (pad == Padding::Same) {
        if (k % 2 == 0) {
            throw ShapeError(std::string(op) + ": kernel extent " + std::to_string(k) +
                             " on " + axis + " axis must be odd for same padding");
        }
        return in;
    }
    if (in < k) {
        throw ShapeError(std::string(op) + ": input extent " + std::to_string(in) + " on " +
                         axis + " axis smaller than kernel " + std::to_string(k));
    }
    return in - k + 1;
}

inline Tensor conv_impl(const Tensor& x, const Tensor& w, const Tensor& bias, Padding pad,
                        bool three_d) {
    const char* op = three_d ? "conv3d" : "conv2d";
    std::size_t want = three_d ? 5 : 4;
    if (x.rank() != want) {
        throw ShapeError(std::string(op) + ": input must be rank-" + std::to_string(want) +
                         ", got " + shape_str(x.shape()));
    }
    if (w.rank() != want) {
        throw ShapeError(std::string(op) + ": kernel must be rank-" + std::to_string(want) +
                         ", got " + shape_str(w.shape()));
    }
    ConvDims d{};
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    d.n = xs[0];
    d.cin = xs[1];
    d.t = three_d ? xs[2] : 1;
    d.h = xs[want - 2];
    d.w = xs[want - 1];
    d.cout = ws[0];
    d.kt = three_d ? ws[2] : 1;
    d.kh = ws[want - 2];
    d.kw = ws[want - 1];
    if (ws[1] != d.cin) {
        throw ShapeError(std::string(op) + ": channel axis (1) extent " + std::to_string(d.cin) +
                         " does not match kernel in-channels " + std::to_string(ws[1]));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.shape()[0] != d.cout)) {
        throw ShapeError(std::string(op) + ": bias must be [" + std::to_string(d.cout) +
                         "], got " + shape_str(bias.shape()));
    }
    d.to = three_d ? out_extent(d.t, d.kt, pad, "time", op) : 1;
    d.ho = out_extent(d.h, d.kh, pad, "height", op);
    d.wo = out_extent(d.w, d.kw, pad, "width", op);
    if (pad == Padding::Same) {
        d.pt = (d.kt - 1) / 2;
        d.ph = (d.kh - 1) / 2;
        d.pw = (d.kw - 1) / 2;
    }

    Shape out_shape = three_d ? Shape{d.n, d.cout, d.to, d.ho, d.wo}
                              : Shape{d.n, d.cout, d.ho, d.wo};
    std::vector<double> out(numel(out_shape));
    conv_forward(x.values().data(), w.values().data(),
                 bias.defined() ? bias.values().data() : nullptr, out.data(), d);

    std::vector<Tensor> parents = {x, w};
    if (bias.defined()) parents.push_back(bias);
    return make_op(std::move(out_shape), std::move(out), std::move(parents),
                   [x, w, bias, d](Node& self) {
                       const double* g = self.grad_buf().data();
                       if (x.requires_grad()) {
                           conv_dinput(w.node()->value.data(), g, x.node()->grad_buf().data(), d);
                       }
                       if (w.requires_grad()) {
                           conv_dweight(x.node()->value.data(), g, w.node()->grad_buf().data(), d);
                       }
                       if (bias.defined() && bias.requires_grad()) {
                           conv_dbias(g, bias.node()->grad_buf().data(), d);
                       }
                   });
}

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor(),
                     Padding pad = Padding::Same) {
    return detail::conv_impl(x, w, bias, pad, false);
}

inline Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor(),
                     Padding pad = Padding::Same) {
    return detail::conv_impl(x, w, bias, pad, true);
}

inline Tensor conv2d(const Tensor& x, const ConvKernel& k, Padding pad = Padding::Same) {
    return conv2d(x, k.weight, k.bias, pad);
}

inline Tensor conv3d(const Tensor& x, const ConvKernel& k, Padding pad = Padding::Same) {
    return conv3d(x, k.weight, k.bias, pad);
}

// --- structural ops ---------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
    }
    std::vector<double> out(x.values().begin(), x.values().end());
    return detail::make_op(std::move(shape), std::move(out), {x}, [x](detail::Node& self) {
        const double* g = self.grad_buf().data();
        double* gx = x.node()->grad_buf().data();
        for (std::size_t i = 0; i < self.value.size(); ++i) gx[i] += g[i];
    });
}

inline Tensor transpose(const Tensor& x, std::size_t a0, std::size_t a1) {
    if (a0 >= x.rank() || a1 >= x.rank()) {
        throw ShapeError("transpose: axis out of range for " + shape_str(x.shape()));
    }
    Shape out_shape = x.shape();
    std::swap(out_shape[a0], out_shape[a1]);
    auto in_strides = row_major_strides(x.shape());
    std::swap(in_strides[a0], in_strides[a1]);  // stride of out axis i in the input

    const double* xv = x.values().data();
    std::vector<double> out(x.size());
    std::vector<std::size_t> idx(out_shape.size(), 0);
    std::size_t pin = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = xv[pin];
        for (std::size_t axis = out_shape.size(); axis-- > 0;) {
            ++idx[axis];
            pin += in_strides[axis];
            if (idx[axis] < out_shape[axis]) break;
            pin -= in_strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
    Shape shape_copy = out_shape;
    return detail::make_op(std::move(out_shape), std::move(out), {x},
                           [x, in_strides, shape = std::move(shape_copy)](detail::Node& self) {
                               const double* g = self.grad_buf().data();
                               double* gx = x.node()->grad_buf().data();
                               std::vector<std::size_t> idx(shape.size(), 0);
                               std::size_t pin = 0;
                               for (std::size_t i = 0; i < self.value.size(); ++i) {
                                   gx[pin] += g[i];
                                   for (std::size_t axis = shape.size(); axis-- > 0;) {
                                       ++idx[axis];
                                       pin += in_strides[axis];
                                       if (idx[axis] < shape[axis]) break;
                                       pin -= in_strides[axis] * shape[axis];
                                       idx[axis] = 0;
                                   }
                               }
                           });
}

inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len) {
    if (axis >= x.rank()) {
        throw ShapeError("slice: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(x.shape()));
    }
    if (len == 0 || start + len > x.shape()[axis]) {
        throw ShapeError("slice: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") invalid for axis " +
                         std::to_string(axis) + " of " + shape_str(x.shape()));
    }
    Shape out_shape = x.shape();
    out_shape[axis] = len;
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
    std::size_t outer = x.size() / (inner * x.shape()[axis]);
    std::size_t in_axis = x.shape()[axis];

    const double* xv = x.values().data();
    std::vector<double> out(numel(out_shape));
    for (std::size_t o = 0; o < outer; ++o) {
        const double* src = xv + (o * in_axis + start) * inner;
        double* dst = out.data() + o * len * inner;
        std::memcpy(dst, src, len * inner * sizeof(double));
    }
    return detail::make_op(std::move(out_shape), std::move(out), {x},
                           [x, outer, inner, in_axis, start, len](detail::Node& self) {
                               const double* g = self.grad_buf().data();
                               double* gx = x.node()->grad_buf().data();
                               for (std::size_t o = 0; o < outer; ++o) {
                                   double* dst = gx + (o * in_axis + start) * inner;
                                   const double* src = g + o * len * inner;
                                   for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                               }
                           });
}

inline Tensor concat(const std::vector<Tensor>& xs, std::size_t axis) {
    if (xs.empty()) throw ShapeError("concat: no inputs");
    const Shape& ref = xs[0].shape();
    if (axis >= ref.size()) {
        throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(ref));
    }
    std::size_t total_axis = 0;
    for (const Tensor& t : xs) {
        if (t.rank() != ref.size()) {
            throw ShapeError("concat: rank mismatch " + shape_str(t.shape()) + " vs " +
                             shape_str(ref));
        }
        for (std::size_t i = 0; i < ref.size(); ++i) {
            if (i != axis && t.shape()[i] != ref[i]) {
                throw ShapeError("concat: axis " + std::to_string(i) + " extent " +
                                 std::to_string(t.shape()[i]) + " differs from " +
                                 std::to_string(ref[i]));
            }
        }
        total_axis += t.shape()[axis];
    }
    Shape out_shape = ref;
    out_shape[axis] = total_axis;
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
    std::size_t outer = numel(out_shape) / (inner * total_axis);

    std::vector<double> out(numel(out_shape));
    std::size_t cursor = 0;
    for (const Tensor& t : xs) {
        std::size_t ext = t.shape()[axis];
        const double* src = t.values().data();
        for (std::size_t o = 0; o < outer; ++o) {
            std::memcpy(out.data() + (o * total_axis + cursor) * inner,
                        src + o * ext * inner, ext * inner * sizeof(double));
        }
        cursor += ext;
    }
    return detail::make_op(std::move(out_shape), std::move(out), xs,
                           [xs, outer, inner, total_axis, axis](detail::Node& self) {
                               const double* g = self.grad_buf().data();
                               std::size_t cursor = 0;
                               for (const Tensor& t : xs) {
                                   std::size_t ext = t.shape()[axis];
                                   if (t.requires_grad()) {
                                       double* gx = t.node()->grad_buf().data();
                                       for (std::size_t o = 0; o < outer; ++o) {
                                           const double* src = g + (o * total_axis + cursor) * inner;
                                           double* dst = gx + o * ext * inner;
                                           for (std::size_t i = 0; i < ext * inner; ++i) {
                                               dst[i] += src[i];
                                           }
                                       }
                                   }
                                   cursor += ext;
                               }
                           });
}

// Gathers slices along `axis` in the given order; indices may repeat.
inline Tensor take(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& indices) {
    if (axis >= x.rank()) {
        throw ShapeError("take: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(x.shape()));
    }
    if (indices.empty()) throw ShapeError("take: empty index list");
    std::size_t in_axis = x.shape()[axis];
    for (std::size_t i : indices) {
        if (i >= in_axis) {
            throw ShapeError("take: index " + std::to_string(i) + " out of range for axis " +
                             std::to_string(axis) + " of " + shape_str(x.shape()));
        }
    }
    Shape out_shape = x.shape();
    out_shape[axis] = indices.size();
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
    std::size_t outer = x.size() / (inner * in_axis);

    const double* xv = x.values().data();
    std::vector<double> out(numel(out_shape));
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < indices.size(); ++j) {
            std::memcpy(out.data() + (o * indices.size() + j) * inner,
                        xv + (o * in_axis + indices[j]) * inner, inner * sizeof(double));
        }
    }
    return detail::make_op(std::move(out_shape), std::move(out), {x},
                           [x, indices, outer, inner, in_axis](detail::Node& self) {
                               const double* g = self.grad_buf().data();
                               double* gx = x.node()->grad_buf().data();
                               for (std::size_t o = 0; o < outer; ++o) {
                                   for (std::size_t j = 0; j < indices.size(); ++j) {
                                       const double* src = g + (o * indices.size() + j) * inner;
                                       double* dst = gx + (o * in_axis + indices[j]) * inner;
                                       for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                                   }
                               }
                           });
}

// Non-overlapping max pooling over the last two axes (window k, stride k).
inline Tensor max_pool_hw(const Tensor& x, std::size_t k) {
    if (x.rank() < 2) throw ShapeError("max_pool_hw: input must have spatial axes");
    if (k == 0) throw ShapeError("max_pool_hw: window must be positive");
    std::size_t h = x.shape()[x.rank() - 2];
    std::size_t w = x.shape()[x.rank() - 1];
    if (h % k != 0) {
        throw ShapeError("max_pool_hw: height axis extent " + std::to_string(h) +
                         " not divisible by " + std::to_string(k));
    }
    if (w % k != 0) {
        throw ShapeError("max_pool_hw: width axis extent " + std::to_string(w) +
                         " not divisible by " + std::to_string(k));
    }
    std::size_t ho = h / k, wo = w / k;
    std::size_t batch = x.size() / (h * w);
    Shape out_shape = x.shape();
    out_shape[x.rank() - 2] = ho;
    out_shape[x.rank() - 1] = wo;

    const double* xv = x.values().data();
    std::vector<double> out(batch * ho * wo);
    std::vector<std::size_t> argsel(out.size());
    for (std::size_t b = 0; b < batch; ++b) {
        const double* plane = xv + b * h * w;
        for (std::size_t oh = 0; oh < ho; ++oh)
            for (std::size_t ow = 0; ow < wo; ++ow) {
                std::size_t best = oh * k * w + ow * k;
                double bv = plane[best];
                for (std::size_t dh = 0; dh < k; ++dh)
                    for (std::size_t dw = 0; dw < k; ++dw) {
                        std::size_t pos = (oh * k + dh) * w + ow * k + dw;
                        if (plane[pos] > bv) {
                            bv = plane[pos];
                            best = pos;
                        }
                    }
                out[(b * ho + oh) * wo + ow] = bv;
                argsel[(b * ho + oh) * wo + ow] = b * h * w + best;
            }
    }
    return detail::make_op(std::move(out_shape), std::move(out), {x},
                           [x, argsel](detail::Node& self) {
                               const double* g = self.grad_buf().data();
                               double* gx = x.node()->grad_buf().data();
                               for (std::size_t i = 0; i < argsel.size(); ++i) {
                                   gx[argsel[i]] += g[i];
                               }
                           });
}

// --- batch normalization -----------------------------------------------------------

// Per-feature affine normalization over [N, F]. Training mode uses batch
// statistics (biased variance) and folds them into the running buffers;
// eval mode reads the running buffers.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         Tensor running_mean, Tensor running_var, bool training,
                         double momentum = 0.1, double eps = 1e-5) {
    if (x.rank() != 2) {
        throw ShapeError("batch_norm: input must be [N,F], got " + shape_str(x.shape()));
    }
    std::size_t n = x.shape()[0], f = x.shape()[1];
    for (const auto* t : {&gamma, &beta, &running_mean, &running_var}) {
        if (t->rank() != 1 || t->shape()[0] != f) {
            throw ShapeError("batch_norm: parameter shape " + shape_str(t->shape()) +
                             " does not match feature axis " + std::to_string(f));
        }
    }
    const double* xv = x.values().data();
    const double* gv = gamma.values().data();
    const double* bv = beta.values().data();

    std::vector<double> mean(f, 0.0), var(f, 0.0);
    if (training) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < f; ++j) mean[j] += xv[i * f + j];
        for (std::size_t j = 0; j < f; ++j) mean[j] /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < f; ++j) {
                double dlt = xv[i * f + j] - mean[j];
                var[j] += dlt * dlt;
            }
        for (std::size_t j = 0; j < f; ++j) var[j] /= static_cast<double>(n);
        auto rm = running_mean.mutable_values();
        auto rv = running_var.mutable_values();
        for (std::size_t j = 0; j < f; ++j) {
            rm[j] = (1.0 - momentum) * rm[j] + momentum * mean[j];
            rv[j] = (1.0 - momentum) * rv[j] + momentum * var[j];
        }
    } else {
        mean.assign(running_mean.values().begin(), running_mean.values().end());
        var.assign(running_var.values().begin(), running_var.values().end());
    }

    std::vector<double> inv_std(f);
    for (std::size_t j = 0; j < f; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + eps);

    std::vector<double> out(n * f);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < f; ++j) {
            out[i * f + j] = gv[j] * (xv[i * f + j] - mean[j]) * inv_std[j] + bv[j];
        }

    return detail::make_op(
        x.shape(), std::move(out), {x, gamma, beta},
        [x, gamma, beta, mean, inv_std, n, f, training](detail::Node& self) {
            const double* g = self.grad_buf().data();
            const double* xv = x.node()->value.data();
            const double* gv = gamma.node()->value.data();
            double* gx = x.requires_grad() ? x.node()->grad_buf().data() : nullptr;
            double* gg = gamma.requires_grad() ? gamma.node()->grad_buf().data() : nullptr;
            double* gb = beta.requires_grad() ? beta.node()->grad_buf().data() : nullptr;
            for (std::size_t j = 0; j < f; ++j) {
                double sum_g = 0.0, sum_gxh = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    double xh = (xv[i * f + j] - mean[j]) * inv_std[j];
                    sum_g += g[i * f + j];
                    sum_gxh += g[i * f + j] * xh;
                }
                if (gb) gb[j] += sum_g;
                if (gg) gg[j] += sum_gxh;
                if (gx) {
                    if (training) {
                        double inv_n = 1.0 / static_cast<double>(n);
                        for (std::size_t i = 0; i < n; ++i) {
                            double xh = (xv[i * f + j] - mean[j]) * inv_std[j];
                            gx[i * f + j] += gv[j] * inv_std[j] *
                                             (g[i * f + j] - inv_n * sum_g - inv_n * xh * sum_gxh);
                        }
                    } else {
                        for (std::size_t i = 0; i < n; ++i) {
                            gx[i * f + j] += g[i * f + j] * gv[j] * inv_std[j];
                        }
                    }
                }
            }
        });
}

// --- softmax cross entropy ------------------------------------------------------------

// Mean softmax cross entropy over rows of [M, K] logits.
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) {
        throw ShapeError("softmax_cross_entropy: logits must be [M,K], got " +
                         shape_str(logits.shape()));
    }
    std::size_t m = logits.shape()[0], k = logits.shape()[1];
    if (labels.size() != m) {
        throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(m) + " rows");
    }
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= k) {
            throw Error("softmax_cross_entropy: label " + std::to_string(y) + " out of range");
        }
    }
    const double* z = logits.values().data();
    double loss = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = z + i * k;
        double mx = row[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
        loss += mx + std::log(sum) - row[labels[i]];
    }
    loss /= static_cast<double>(m);

    return detail::make_op({}, {loss}, {logits}, [logits, labels, m, k](detail::Node& self) {
        double g = self.grad_buf()[0] / static_cast<double>(m);
        const double* z = logits.node()->value.data();
        double* gz = logits.node()->grad_buf().data();
        for (std::size_t i = 0; i < m; ++i) {
            const double* row = z + i * k;
            double mx = row[0];
            for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
            double sum = 0.0;
            for (std::size_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
            for (std::size_t j = 0; j < k; ++j) {
                double p = std::exp(row[j] - mx) / sum;
                gz[i * k + j] += g * (p - (static_cast<std::size_t>(labels[i]) == static_cast<std::size_t>(j) ? 1.0 : 0.0));
            }
        }
    });
}

// --- batch-all triplet loss -------------------------------------------------------------

// Batch-all triplet hinge over [N, P, D] part embeddings: per part, every
// (anchor, positive, negative) combination contributes
// max(0, d(a,p) - d(a,n) + margin); active terms are averaged per part and
// parts are averaged. Returns the scalar loss; `active_out`, when given,
// receives the number of valid (a,p,n) combinations across all parts.
inline Tensor batch_all_triplet(const Tensor& parts, const std::vector<int>& labels,
                                double margin, std::size_t* active_out = nullptr) {
    if (parts.rank() != 3) {
        throw ShapeError("triplet: embeddings must be [N,P,D], got " + shape_str(parts.shape()));
    }
    if (margin < 0.0) throw Error("triplet: margin must be >= 0");
    std::size_t n = parts.shape()[0], p = parts.shape()[1], d = parts.shape()[2];
    if (labels.size() != n) {
        throw ShapeError("triplet: " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(n));
    }
    const double* e = parts.values().data();

    auto dist = [&](std::size_t part, std::size_t i, std::size_t j) {
        const double* a = e + (i * p + part) * d;
        const double* b = e + (j * p + part) * d;
        double acc = 0.0;
        for (std::size_t q = 0; q < d; ++q) {
            double dv = a[q] - b[q];
            acc += dv * dv;
        }
        return std::sqrt(acc);
    };

    double total = 0.0;
    std::size_t valid_total = 0;
    std::vector<double> per_part_nnz(p, 0.0);
    for (std::size_t part = 0; part < p; ++part) {
        double sum = 0.0;
        std::size_t nnz = 0;
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t pos = 0; pos < n; ++pos) {
                if (pos == a || labels[pos] != labels[a]) continue;
                double dap = dist(part, a, pos);
                for (std::size_t neg = 0; neg < n; ++neg) {
                    if (labels[neg] == labels[a]) continue;
                    if (part == 0) ++valid_total;
                    double h = dap - dist(part, a, neg) + margin;
                    if (h > 0.0) {
                        sum += h;
                        ++nnz;
                    }
                }
            }
        per_part_nnz[part] = static_cast<double>(nnz);
        if (nnz > 0) total += sum / static_cast<double>(nnz);
    }
    total /= static_cast<double>(p);
    if (active_out) *active_out = valid_total;

    return detail::make_op(
        {}, {total}, {parts},
        [parts, labels, margin, n, p, d, per_part_nnz](detail::Node& self) {
            double g = self.grad_buf()[0];
            const double* e = parts.node()->value.data();
            double* ge = parts.node()->grad_buf().data();
            std::vector<double> dmat(n * n);
            std::vector<double> alpha(n * n);
            for (std::size_t part = 0; part < p; ++part) {
                if (per_part_nnz[part] == 0.0) continue;
                double w = g / (per_part_nnz[part] * static_cast<double>(p));
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double* a = e + (i * p + part) * d;
                        const double* b = e + (j * p + part) * d;
                        double acc = 0.0;
                        for (std::size_t q = 0; q < d; ++q) {
                            double dv = a[q] - b[q];
                            acc += dv * dv;
                        }
                        dmat[i * n + j] = std::sqrt(acc);
                    }
                std::fill(alpha.begin(), alpha.end(), 0.0);
                for (std::size_t a = 0; a < n; ++a)
                    for (std::size_t pos = 0; pos < n; ++pos) {
                        if (pos == a || labels[pos] != labels[a]) continue;
                        for (std::size_t neg = 0; neg < n; ++neg) {
                            if (labels[neg] == labels[a]) continue;
                            double h = dmat[a * n + pos] - dmat[a * n + neg] + margin;
                            if (h > 0.0) {
                                alpha[a * n + pos] += w;
                                alpha[a * n + neg] -= w;
                            }
                        }
                    }
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        double c = alpha[i * n + j];
                        if (c == 0.0) continue;
                        double dij = dmat[i * n + j];
                        if (dij < 1e-300) continue;  // subgradient 0 at coincident points
                        const double* a = e + (i * p + part) * d;
                        const double* b = e + (j * p + part) * d;
                        double* gi = ge + (i * p + part) * d;
                        double* gj = ge + (j * p + part) * d;
                        for (std::size_t q = 0; q < d; ++q) {
                            double dir = (a[q] - b[q]) / dij;
                            gi[q] += c * dir;
                            gj[q] -= c * dir;
                        }
                    }
            }
        });
}

}  // namespace gaitkit
