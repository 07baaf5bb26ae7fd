#pragma once

// Minimal reverse-mode autodiff: a tape of shared_ptr tensor nodes, each with
// a backward closure. Covers exactly the ops the branched CNN needs plus a
// finite-difference oracle. Single-threaded per graph.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

namespace firbank::ad {

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad; // allocated by backward() when needed

    std::vector<TensorPtr> parents;
    std::function<void(Tensor&)> backward_fn; // accumulates into parents' grads

    std::size_t size() const { return data.size(); }

    static TensorPtr create(std::vector<std::size_t> shape, bool requires_grad = false) {
        auto t = std::make_shared<Tensor>();
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        t->shape = std::move(shape);
        t->data.assign(n, 0.0);
        t->requires_grad = requires_grad;
        return t;
    }

    static TensorPtr from_data(std::vector<std::size_t> shape, std::vector<double> data,
                               bool requires_grad = false) {
        auto t = create(std::move(shape), requires_grad);
        if (data.size() != t->data.size()) throw std::invalid_argument("data/shape mismatch");
        t->data = std::move(data);
        return t;
    }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
    void zero_grad() { grad.assign(data.size(), 0.0); }
};

namespace detail {

inline void check(bool ok, const char* msg) {
    if (!ok) throw std::invalid_argument(msg);
}

inline void topo_visit(const TensorPtr& t, std::vector<TensorPtr>& order,
                       std::vector<Tensor*>& seen) {
    for (auto* s : seen)
        if (s == t.get()) return;
    seen.push_back(t.get());
    for (auto& p : t->parents) topo_visit(p, order, seen);
    order.push_back(t);
}

} // namespace detail

// Reverse pass from a scalar loss. Gradients accumulate on every node reached,
// so intermediate activations keep theirs (used by Grad-CAM).
inline void backward(const TensorPtr& loss) {
    detail::check(loss->size() == 1, "backward: loss must be scalar");
    detail::check(static_cast<bool>(loss->backward_fn) || loss->requires_grad,
                  "backward: no recorded forward pass");
    std::vector<TensorPtr> order;
    std::vector<Tensor*> seen;
    detail::topo_visit(loss, order, seen);
    for (auto& t : order) {
        t->ensure_grad();
        t->zero_grad();
    }
    loss->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

// ---- ops ----

// Multi-channel same-length centered convolution.
// x: [B, C_in, N], kernels: [C_out, C_in, K], optional bias [C_out] -> [B, C_out, N].
// Default center floor((K-1)/2) matches centered_conv in the signal module; the
// zero-phase reverse pass overrides it with K-1-center to cancel the phase.
inline TensorPtr conv1d(const TensorPtr& x, const TensorPtr& kernels,
                        const TensorPtr& bias = nullptr, long center = -1) {
    detail::check(x->shape.size() == 3, "conv1d: input must be [B,C,N]");
    detail::check(kernels->shape.size() == 3, "conv1d: kernels must be [C_out,C_in,K]");
    detail::check(x->shape[1] == kernels->shape[1], "conv1d: channel mismatch");
    const long B = static_cast<long>(x->shape[0]);
    const long Cin = static_cast<long>(x->shape[1]);
    const long N = static_cast<long>(x->shape[2]);
    const long Cout = static_cast<long>(kernels->shape[0]);
    const long K = static_cast<long>(kernels->shape[2]);
    const long ctr = center >= 0 ? center : (K - 1) / 2;
    if (bias) detail::check(bias->size() == static_cast<std::size_t>(Cout), "conv1d: bias size");

    auto out = Tensor::create({static_cast<std::size_t>(B), static_cast<std::size_t>(Cout),
                               static_cast<std::size_t>(N)});
    const double* xd = x->data.data();
    const double* kd = kernels->data.data();
    double* od = out->data.data();
    for (long b = 0; b < B; ++b)
        for (long co = 0; co < Cout; ++co) {
            const double bv = bias ? bias->data[co] : 0.0;
            double* orow = od + (b * Cout + co) * N;
            for (long n = 0; n < N; ++n) orow[n] = bv;
            for (long ci = 0; ci < Cin; ++ci) {
                const double* xrow = xd + (b * Cin + ci) * N;
                const double* krow = kd + (co * Cin + ci) * K;
                for (long i = 0; i < K; ++i) {
                    const double w = krow[i];
                    if (w == 0.0) continue;
                    const long off = ctr - i; // src = n + off
                    const long n0 = std::max(0L, -off);
                    const long n1 = std::min(N, N - off);
                    for (long n = n0; n < n1; ++n) orow[n] += w * xrow[n + off];
                }
            }
        }

    out->parents = {x, kernels};
    if (bias) out->parents.push_back(bias);
    TensorPtr xp = x, kp = kernels, bp = bias;
    out->backward_fn = [xp, kp, bp, B, Cin, Cout, N, K, ctr](Tensor& self) {
        xp->ensure_grad();
        kp->ensure_grad();
        if (bp) bp->ensure_grad();
        const double* gd = self.grad.data();
        const double* xd = xp->data.data();
        const double* kd = kp->data.data();
        for (long b = 0; b < B; ++b)
            for (long co = 0; co < Cout; ++co) {
                const double* grow = gd + (b * Cout + co) * N;
                if (bp)
                    for (long n = 0; n < N; ++n) bp->grad[co] += grow[n];
                for (long ci = 0; ci < Cin; ++ci) {
                    const double* xrow = xd + (b * Cin + ci) * N;
                    const double* krow = kd + (co * Cin + ci) * K;
                    double* xgrow = xp->grad.data() + (b * Cin + ci) * N;
                    double* kgrow = kp->grad.data() + (co * Cin + ci) * K;
                    for (long i = 0; i < K; ++i) {
                        const long off = ctr - i;
                        const long n0 = std::max(0L, -off);
                        const long n1 = std::min(N, N - off);
                        double kacc = 0.0;
                        const double w = krow[i];
                        for (long n = n0; n < n1; ++n) {
                            kacc += grow[n] * xrow[n + off];
                            xgrow[n + off] += w * grow[n];
                        }
                        kgrow[i] += kacc;
                    }
                }
            }
    };
    return out;
}

inline TensorPtr relu(const TensorPtr& x) {
    auto out = Tensor::create(x->shape);
    for (std::size_t i = 0; i < x->size(); ++i) out->data[i] = x->data[i] > 0.0 ? x->data[i] : 0.0;
    out->parents = {x};
    TensorPtr xp = x;
    out->backward_fn = [xp](Tensor& self) {
        xp->ensure_grad();
        for (std::size_t i = 0; i < xp->size(); ++i)
            if (xp->data[i] > 0.0) xp->grad[i] += self.grad[i];
    };
    return out;
}

// Max-pool of width 2 over the last dimension; odd trailing element dropped.
inline TensorPtr maxpool2(const TensorPtr& x) {
    detail::check(!x->shape.empty(), "maxpool2: empty shape");
    const std::size_t N = x->shape.back();
    detail::check(N >= 2, "maxpool2: last dim too small");
    const std::size_t No = N / 2;
    auto oshape = x->shape;
    oshape.back() = No;
    auto out = Tensor::create(oshape);
    const std::size_t rows = x->size() / N;
    auto argmax = std::make_shared<std::vector<std::size_t>>(rows * No);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < No; ++j) {
            const std::size_t i0 = r * N + 2 * j;
            const std::size_t best = x->data[i0] >= x->data[i0 + 1] ? i0 : i0 + 1;
            out->data[r * No + j] = x->data[best];
            (*argmax)[r * No + j] = best;
        }
    out->parents = {x};
    TensorPtr xp = x;
    out->backward_fn = [xp, argmax](Tensor& self) {
        xp->ensure_grad();
        for (std::size_t i = 0; i < self.size(); ++i) xp->grad[(*argmax)[i]] += self.grad[i];
    };
    return out;
}

// Per-channel batch normalization over [B, C, N] (statistics over B and N).
// In train mode normalizes with batch stats and updates running stats in place;
// eval mode uses the running stats.
inline TensorPtr batchnorm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                           std::vector<double>& running_mean, std::vector<double>& running_var,
                           bool train, double momentum = 0.99, double eps = 1e-5) {
    detail::check(x->shape.size() == 3, "batchnorm: input must be [B,C,N]");
    const std::size_t B = x->shape[0], C = x->shape[1], N = x->shape[2];
    detail::check(gamma->size() == C && beta->size() == C, "batchnorm: affine size mismatch");
    detail::check(running_mean.size() == C && running_var.size() == C,
                  "batchnorm: running stat size mismatch");

    auto out = Tensor::create(x->shape);
    auto mean = std::make_shared<std::vector<double>>(C, 0.0);
    auto inv_std = std::make_shared<std::vector<double>>(C, 0.0);
    const std::size_t M = B * N; // samples per channel

    for (std::size_t c = 0; c < C; ++c) {
        double m, v;
        if (train) {
            double s = 0.0;
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t n = 0; n < N; ++n) s += x->data[(b * C + c) * N + n];
            m = s / M;
            double sq = 0.0;
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t n = 0; n < N; ++n) {
                    const double d = x->data[(b * C + c) * N + n] - m;
                    sq += d * d;
                }
            v = sq / M;
            running_mean[c] = momentum * running_mean[c] + (1.0 - momentum) * m;
            running_var[c] = momentum * running_var[c] + (1.0 - momentum) * v;
        } else {
            m = running_mean[c];
            v = running_var[c];
        }
        (*mean)[c] = m;
        (*inv_std)[c] = 1.0 / std::sqrt(v + eps);
        const double g = gamma->data[c], bb = beta->data[c], is = (*inv_std)[c];
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t n = 0; n < N; ++n) {
                const std::size_t i = (b * C + c) * N + n;
                out->data[i] = g * (x->data[i] - m) * is + bb;
            }
    }

    out->parents = {x, gamma, beta};
    TensorPtr xp = x, gp = gamma, bp = beta;
    out->backward_fn = [xp, gp, bp, mean, inv_std, B, C, N, train](Tensor& self) {
        xp->ensure_grad();
        gp->ensure_grad();
        bp->ensure_grad();
        const std::size_t M = B * N;
        for (std::size_t c = 0; c < C; ++c) {
            const double m = (*mean)[c], is = (*inv_std)[c], g = gp->data[c];
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t i = (b * C + c) * N + n;
                    const double xhat = (xp->data[i] - m) * is;
                    sum_dy += self.grad[i];
                    sum_dy_xhat += self.grad[i] * xhat;
                }
            gp->grad[c] += sum_dy_xhat;
            bp->grad[c] += sum_dy;
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t i = (b * C + c) * N + n;
                    const double xhat = (xp->data[i] - m) * is;
                    if (train) {
                        xp->grad[i] += g * is / M *
                                       (M * self.grad[i] - sum_dy - xhat * sum_dy_xhat);
                    } else {
                        xp->grad[i] += g * is * self.grad[i];
                    }
                }
        }
    };
    return out;
}

// Inverted dropout: active only in train mode, scales kept units by 1/(1-p).
inline TensorPtr dropout(const TensorPtr& x, double p, bool train, std::mt19937_64& rng) {
    detail::check(p >= 0.0 && p < 1.0, "dropout: p must be in [0,1)");
    if (!train || p == 0.0) return x;
    auto out = Tensor::create(x->shape);
    auto mask = std::make_shared<std::vector<double>>(x->size());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double scale = 1.0 / (1.0 - p);
    for (std::size_t i = 0; i < x->size(); ++i) {
        (*mask)[i] = u(rng) >= p ? scale : 0.0;
        out->data[i] = x->data[i] * (*mask)[i];
    }
    out->parents = {x};
    TensorPtr xp = x;
    out->backward_fn = [xp, mask](Tensor& self) {
        xp->ensure_grad();
        for (std::size_t i = 0; i < xp->size(); ++i) xp->grad[i] += self.grad[i] * (*mask)[i];
    };
    return out;
}

// Fully connected: x [B, F_in], W [F_out, F_in], b [F_out] -> [B, F_out].
inline TensorPtr dense(const TensorPtr& x, const TensorPtr& W, const TensorPtr& b) {
    detail::check(x->shape.size() == 2 && W->shape.size() == 2, "dense: ranks");
    const std::size_t B = x->shape[0], Fin = x->shape[1], Fout = W->shape[0];
    detail::check(W->shape[1] == Fin, "dense: shape mismatch");
    detail::check(b->size() == Fout, "dense: bias mismatch");
    auto out = Tensor::create({B, Fout});
    for (std::size_t r = 0; r < B; ++r)
        for (std::size_t o = 0; o < Fout; ++o) {
            double acc = b->data[o];
            const double* xr = x->data.data() + r * Fin;
            const double* wr = W->data.data() + o * Fin;
            for (std::size_t i = 0; i < Fin; ++i) acc += xr[i] * wr[i];
            out->data[r * Fout + o] = acc;
        }
    out->parents = {x, W, b};
    TensorPtr xp = x, wp = W, bp = b;
    out->backward_fn = [xp, wp, bp, B, Fin, Fout](Tensor& self) {
        xp->ensure_grad();
        wp->ensure_grad();
        bp->ensure_grad();
        for (std::size_t r = 0; r < B; ++r)
            for (std::size_t o = 0; o < Fout; ++o) {
                const double g = self.grad[r * Fout + o];
                if (g == 0.0) continue;
                bp->grad[o] += g;
                const double* xr = xp->data.data() + r * Fin;
                const double* wr = wp->data.data() + o * Fin;
                double* xgr = xp->grad.data() + r * Fin;
                double* wgr = wp->grad.data() + o * Fin;
                for (std::size_t i = 0; i < Fin; ++i) {
                    wgr[i] += g * xr[i];
                    xgr[i] += g * wr[i];
                }
            }
    };
    return out;
}

// Row-wise softmax over the last dimension of [B, C].
inline TensorPtr softmax(const TensorPtr& x) {
    detail::check(x->shape.size() == 2, "softmax: input must be [B,C]");
    const std::size_t B = x->shape[0], C = x->shape[1];
    auto out = Tensor::create(x->shape);
    for (std::size_t r = 0; r < B; ++r) {
        double mx = x->data[r * C];
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, x->data[r * C + c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            out->data[r * C + c] = std::exp(x->data[r * C + c] - mx);
            sum += out->data[r * C + c];
        }
        for (std::size_t c = 0; c < C; ++c) out->data[r * C + c] /= sum;
    }
    out->parents = {x};
    TensorPtr xp = x;
    out->backward_fn = [xp, B, C](Tensor& self) {
        xp->ensure_grad();
        for (std::size_t r = 0; r < B; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < C; ++c) dot += self.grad[r * C + c] * self.data[r * C + c];
            for (std::size_t c = 0; c < C; ++c)
                xp->grad[r * C + c] += self.data[r * C + c] * (self.grad[r * C + c] - dot);
        }
    };
    return out;
}

// Mean over the batch of -sum_c t_c ln p_c; targets must be one-hot rows.
inline TensorPtr cross_entropy(const TensorPtr& pred, const TensorPtr& target) {
    detail::check(pred->shape == target->shape, "cross_entropy: shape mismatch");
    detail::check(pred->shape.size() == 2, "cross_entropy: inputs must be [B,C]");
    const std::size_t B = pred->shape[0], C = pred->shape[1];
    for (std::size_t r = 0; r < B; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c) s += target->data[r * C + c];
        detail::check(std::abs(s - 1.0) < 1e-9, "cross_entropy: targets must be normalized");
    }
    constexpr double floor = 1e-300;
    auto out = Tensor::create({1});
    double loss = 0.0;
    for (std::size_t i = 0; i < pred->size(); ++i)
        if (target->data[i] != 0.0) loss -= target->data[i] * std::log(std::max(pred->data[i], floor));
    out->data[0] = loss / B;
    out->parents = {pred};
    TensorPtr pp = pred, tp = target;
    out->backward_fn = [pp, tp, B](Tensor& self) {
        pp->ensure_grad();
        const double g = self.grad[0] / B;
        for (std::size_t i = 0; i < pp->size(); ++i)
            if (tp->data[i] != 0.0)
                pp->grad[i] -= g * tp->data[i] / std::max(pp->data[i], 1e-300);
    };
    return out;
}

inline TensorPtr reshape(const TensorPtr& x, std::vector<std::size_t> shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    detail::check(n == x->size(), "reshape: element count mismatch");
    auto out = Tensor::create(std::move(shape));
    out->data = x->data;
    out->parents = {x};
    TensorPtr xp = x;
    out->backward_fn = [xp](Tensor& self) {
        xp->ensure_grad();
        for (std::size_t i = 0; i < xp->size(); ++i) xp->grad[i] += self.grad[i];
    };
    return out;
}

// Concatenate along dim 1 of [B, C, N] tensors (equal B and N).
inline TensorPtr concat_channels(const std::vector<TensorPtr>& xs) {
    detail::check(!xs.empty(), "concat_channels: empty list");
    const std::size_t B = xs[0]->shape[0], N = xs[0]->shape[2];
    std::size_t Ctot = 0;
    for (auto& x : xs) {
        detail::check(x->shape.size() == 3 && x->shape[0] == B && x->shape[2] == N,
                      "concat_channels: shape mismatch");
        Ctot += x->shape[1];
    }
    auto out = Tensor::create({B, Ctot, N});
    std::size_t coff = 0;
    for (auto& x : xs) {
        const std::size_t C = x->shape[1];
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c)
                std::copy_n(x->data.data() + (b * C + c) * N, N,
                            out->data.data() + (b * Ctot + coff + c) * N);
        coff += C;
    }
    out->parents = xs;
    auto parts = xs;
    out->backward_fn = [parts, B, Ctot, N](Tensor& self) {
        std::size_t coff = 0;
        for (auto& x : parts) {
            x->ensure_grad();
            const std::size_t C = x->shape[1];
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t c = 0; c < C; ++c) {
                    const double* g = self.grad.data() + (b * Ctot + coff + c) * N;
                    double* xg = x->grad.data() + (b * C + c) * N;
                    for (std::size_t n = 0; n < N; ++n) xg[n] += g[n];
                }
            coff += C;
        }
    };
    return out;
}

// Test helpers: sum and elementwise square, enough to build scalar losses.
inline TensorPtr sum(const TensorPtr& x) {
    auto out = Tensor::create({1});
    out->data[0] = std::accumulate(x->data.begin(), x->data.end(), 0.0);
    out->parents = {x};
    TensorPtr xp = x;
    out->backward_fn = [xp](Tensor& self) {
        xp->ensure_grad();
        for (auto& g : xp->grad) g += self.grad[0];
    };
    return out;
}

inline TensorPtr square(const TensorPtr& x) {
    auto out = Tensor::create(x->shape);
    for (std::size_t i = 0; i < x->size(); ++i) out->data[i] = x->data[i] * x->data[i];
    out->parents = {x};
    TensorPtr xp = x;
    out->backward_fn = [xp](Tensor& self) {
        xp->ensure_grad();
        for (std::size_t i = 0; i < xp->size(); ++i) xp->grad[i] += 2.0 * xp->data[i] * self.grad[i];
    };
    return out;
}

// ---- Adam ----

struct AdamState {
    std::size_t step = 0;
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;

    void init(const std::vector<TensorPtr>& params) {
        first_moment.clear();
        second_moment.clear();
        for (auto& p : params) {
            first_moment.emplace_back(p->size(), 0.0);
            second_moment.emplace_back(p->size(), 0.0);
        }
        step = 0;
    }
};

// Standard bias-corrected Adam update, reading each parameter's grad buffer.
inline void adam_step(const std::vector<TensorPtr>& params, AdamState& st) {
    detail::check(params.size() == st.first_moment.size(), "adam_step: state/param mismatch");
    st.step += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (std::size_t p = 0; p < params.size(); ++p) {
        auto& t = *params[p];
        detail::check(st.first_moment[p].size() == t.size(), "adam_step: shape mismatch");
        t.ensure_grad();
        auto& m = st.first_moment[p];
        auto& v = st.second_moment[p];
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double g = t.grad[i];
            m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g;
            v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            t.data[i] -= st.lr * mhat / (std::sqrt(vhat) + st.epsilon);
        }
    }
}

// Central finite differences of a scalar function of a flat parameter vector.
inline std::vector<double> finite_difference_grad(
    const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
    double eps = 1e-5) {
    detail::check(eps > 0.0, "finite_difference_grad: eps must be > 0");
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + eps;
        const double fp = f(x);
        x[i] = orig - eps;
        const double fm = f(x);
        x[i] = orig;
        g[i] = (fp - fm) / (2.0 * eps);
    }
    return g;
}

} // namespace firbank::ad
