#pragma once

// Learnable FIR filterbank front-end: seven kernel parameterizations with
// forward materialization and exact backward gradients, including the
// gammatone closed-form chain. Constraints live in the parameterization, so
// symmetry/anti-symmetry survive every optimizer step bit-exactly.

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "firbank/signal.hpp"
#include "firbank/tensor.hpp"

namespace firbank {

enum class FrontendKind { Free, TypeI, TypeII, TypeIII, TypeIV, ZeroPhase, Gammatone };

inline const char* to_string(FrontendKind k) {
    switch (k) {
        case FrontendKind::Free: return "free";
        case FrontendKind::TypeI: return "type1";
        case FrontendKind::TypeII: return "type2";
        case FrontendKind::TypeIII: return "type3";
        case FrontendKind::TypeIV: return "type4";
        case FrontendKind::ZeroPhase: return "zerophase";
        case FrontendKind::Gammatone: return "gammatone";
    }
    return "?";
}

inline FrontendKind frontend_kind_from_string(const std::string& s) {
    if (s == "free") return FrontendKind::Free;
    if (s == "type1") return FrontendKind::TypeI;
    if (s == "type2") return FrontendKind::TypeII;
    if (s == "type3") return FrontendKind::TypeIII;
    if (s == "type4") return FrontendKind::TypeIV;
    if (s == "zerophase") return FrontendKind::ZeroPhase;
    if (s == "gammatone") return FrontendKind::Gammatone;
    throw std::invalid_argument("unknown frontend kind: " + s);
}

// Odd length for symmetric/anti-symmetric odd types, even for the even types.
inline void check_parity(FrontendKind kind, int K) {
    if (K < 1) throw std::invalid_argument("kernel length must be >= 1");
    const bool odd = K % 2 == 1;
    if ((kind == FrontendKind::TypeI || kind == FrontendKind::TypeIII) && !odd)
        throw std::invalid_argument(std::string(to_string(kind)) + " requires odd kernel length");
    if ((kind == FrontendKind::TypeII || kind == FrontendKind::TypeIV) && odd)
        throw std::invalid_argument(std::string(to_string(kind)) + " requires even kernel length");
}

inline std::size_t free_param_count(FrontendKind kind, int K) {
    check_parity(kind, K);
    switch (kind) {
        case FrontendKind::Free:
        case FrontendKind::ZeroPhase: return static_cast<std::size_t>(K);
        case FrontendKind::TypeI: return static_cast<std::size_t>((K + 1) / 2);
        case FrontendKind::TypeII:
        case FrontendKind::TypeIV: return static_cast<std::size_t>(K / 2);
        case FrontendKind::TypeIII: return static_cast<std::size_t>((K - 1) / 2);
        case FrontendKind::Gammatone: return 4;
    }
    return 0;
}

struct GammatoneParams {
    double alpha = 1.0; // amplitude, > 0
    double eta = 4.0;   // filter order, > 1
    double beta = 0.03; // bandwidth, cycles/sample, > 0
    double f = 0.1;     // center frequency, cycles/sample, in (0, 0.5)
    // phase is fixed at 0

    void clamp() {
        alpha = std::max(alpha, 1e-12);
        eta = std::max(eta, 1.01);
        beta = std::max(beta, 1e-6);
        f = std::min(std::max(f, 1e-4), 0.4999);
    }
};

// g(n) = alpha * t^(eta-1) * exp(-2 pi beta t) * cos(2 pi f t), t = n+1.
// The +1 shift keeps ln(t) in the eta gradient finite at n=0.
inline double gammatone_tap(const GammatoneParams& p, int n) {
    const double t = n + 1.0;
    return p.alpha * std::pow(t, p.eta - 1.0) * std::exp(-2.0 * std::numbers::pi * p.beta * t) *
           std::cos(2.0 * std::numbers::pi * p.f * t);
}

struct FrontendKernel {
    FrontendKind kind = FrontendKind::Free;
    int K = 1;
    ad::TensorPtr free_params; // [P], requires_grad

    FrontendKernel() = default;
    FrontendKernel(FrontendKind kind_, int K_) : kind(kind_), K(K_) {
        free_params = ad::Tensor::create({free_param_count(kind, K)}, true);
    }

    GammatoneParams gammatone() const {
        if (kind != FrontendKind::Gammatone) throw std::logic_error("not a gammatone kernel");
        GammatoneParams p;
        p.alpha = free_params->data[0];
        p.eta = free_params->data[1];
        p.beta = free_params->data[2];
        p.f = free_params->data[3];
        return p;
    }
};

namespace detail {

inline void materialize_into(FrontendKind kind, int K, const std::vector<double>& p,
                             std::vector<double>& taps) {
    taps.assign(K, 0.0);
    switch (kind) {
        case FrontendKind::Free:
        case FrontendKind::ZeroPhase:
            taps = p;
            break;
        case FrontendKind::TypeI: { // [p0..pm, mirror], K odd
            const int half = (K + 1) / 2;
            for (int i = 0; i < half; ++i) { taps[i] = p[i]; taps[K - 1 - i] = p[i]; }
            break;
        }
        case FrontendKind::TypeII: {
            const int half = K / 2;
            for (int i = 0; i < half; ++i) { taps[i] = p[i]; taps[K - 1 - i] = p[i]; }
            break;
        }
        case FrontendKind::TypeIII: { // anti-symmetric, forced zero center
            const int half = (K - 1) / 2;
            for (int i = 0; i < half; ++i) { taps[i] = p[i]; taps[K - 1 - i] = -p[i]; }
            taps[half] = 0.0;
            break;
        }
        case FrontendKind::TypeIV: {
            const int half = K / 2;
            for (int i = 0; i < half; ++i) { taps[i] = p[i]; taps[K - 1 - i] = -p[i]; }
            break;
        }
        case FrontendKind::Gammatone: {
            GammatoneParams gp{p[0], p[1], p[2], p[3]};
            for (int n = 0; n < K; ++n) taps[n] = gammatone_tap(gp, n);
            break;
        }
    }
}

// Maps a gradient on the materialized taps back onto the free parameters.
inline void accumulate_param_grad(FrontendKind kind, int K, const std::vector<double>& p,
                                  const std::vector<double>& tap_grad, std::vector<double>& pgrad) {
    switch (kind) {
        case FrontendKind::Free:
        case FrontendKind::ZeroPhase:
            for (int i = 0; i < K; ++i) pgrad[i] += tap_grad[i];
            break;
        case FrontendKind::TypeI: {
            const int half = (K + 1) / 2;
            for (int i = 0; i < half; ++i) {
                pgrad[i] += tap_grad[i];
                if (K - 1 - i != i) pgrad[i] += tap_grad[K - 1 - i];
            }
            break;
        }
        case FrontendKind::TypeII: {
            const int half = K / 2;
            for (int i = 0; i < half; ++i) pgrad[i] += tap_grad[i] + tap_grad[K - 1 - i];
            break;
        }
        case FrontendKind::TypeIII: {
            const int half = (K - 1) / 2;
            for (int i = 0; i < half; ++i) pgrad[i] += tap_grad[i] - tap_grad[K - 1 - i];
            break; // center tap receives no gradient
        }
        case FrontendKind::TypeIV: {
            const int half = K / 2;
            for (int i = 0; i < half; ++i) pgrad[i] += tap_grad[i] - tap_grad[K - 1 - i];
            break;
        }
        case FrontendKind::Gammatone: {
            const GammatoneParams gp{p[0], p[1], p[2], p[3]};
            const double twopi = 2.0 * std::numbers::pi;
            for (int n = 0; n < K; ++n) {
                const double t = n + 1.0;
                const double env = gp.alpha * std::pow(t, gp.eta - 1.0) *
                                   std::exp(-twopi * gp.beta * t);
                const double g = env * std::cos(twopi * gp.f * t);
                const double up = tap_grad[n];
                pgrad[0] += up * g / gp.alpha;        // d g / d alpha
                pgrad[1] += up * g * std::log(t);     // d g / d eta
                pgrad[2] += up * (-twopi * t) * g;    // d g / d beta
                pgrad[3] += up * (-twopi * t) * env * std::sin(twopi * gp.f * t); // d g / d f
            }
            break;
        }
    }
}

} // namespace detail

// Full-length tap vector from the kernel's free parameters.
inline FirCoefficients materialize(const FrontendKernel& k) {
    std::vector<double> taps;
    detail::materialize_into(k.kind, k.K, k.free_params->data, taps);
    return FirCoefficients(std::move(taps));
}

// Graph node for the materialized taps, shaped [1,1,K] for conv1d. Backward
// routes the tap gradient onto the free parameters via the kind's rule.
inline ad::TensorPtr materialize_node(const FrontendKernel& k) {
    std::vector<double> taps;
    detail::materialize_into(k.kind, k.K, k.free_params->data, taps);
    auto out = ad::Tensor::from_data({1, 1, static_cast<std::size_t>(k.K)}, std::move(taps));
    out->parents = {k.free_params};
    const FrontendKind kind = k.kind;
    const int K = k.K;
    ad::TensorPtr pp = k.free_params;
    out->backward_fn = [pp, kind, K](ad::Tensor& self) {
        pp->ensure_grad();
        detail::accumulate_param_grad(kind, K, pp->data, self.grad, pp->grad);
    };
    return out;
}

// Time reversal of a [1,1,K] kernel node (for the zero-phase second pass).
inline ad::TensorPtr reverse_taps(const ad::TensorPtr& t) {
    auto out = ad::Tensor::create(t->shape);
    const std::size_t K = t->size();
    for (std::size_t i = 0; i < K; ++i) out->data[i] = t->data[K - 1 - i];
    out->parents = {t};
    ad::TensorPtr tp = t;
    out->backward_fn = [tp, K](ad::Tensor& self) {
        tp->ensure_grad();
        for (std::size_t i = 0; i < K; ++i) tp->grad[K - 1 - i] += self.grad[i];
    };
    return out;
}

struct Filterbank {
    std::vector<FrontendKernel> kernels; // exactly 4, identical kind and length

    FrontendKind kind() const { return kernels.at(0).kind; }
    int K() const { return kernels.at(0).K; }
};

// Branch b = centered conv of x with kernel b; ZeroPhase applies the kernel
// twice, flipped on the second pass. x: [B,1,N] -> [B,4,N].
inline ad::TensorPtr frontend_forward(const ad::TensorPtr& x, const Filterbank& bank) {
    if (x->shape.size() != 3 || x->shape[1] != 1)
        throw std::invalid_argument("frontend_forward: input must be [B,1,N]");
    if (bank.kernels.size() != 4) throw std::invalid_argument("filterbank must have 4 kernels");
    std::vector<ad::TensorPtr> branches;
    branches.reserve(4);
    for (const auto& k : bank.kernels) {
        auto taps = materialize_node(k);
        auto y = ad::conv1d(x, taps);
        if (k.kind == FrontendKind::ZeroPhase) {
            // reversed kernel, mirrored center: net phase cancels for any K
            const long c2 = static_cast<long>(k.K) - 1 - (static_cast<long>(k.K) - 1) / 2;
            y = ad::conv1d(y, reverse_taps(taps), nullptr, c2);
        }
        branches.push_back(y);
    }
    return ad::concat_channels(branches);
}

// Windowed-sinc bandpass, unit peak-band gain, centered at (K-1)/2.
inline std::vector<double> bandpass_taps(int K, double lo_hz, double hi_hz, double fs_hz) {
    const double f1 = lo_hz / fs_hz, f2 = hi_hz / fs_hz;
    const auto win = blackman_window(K);
    const double c = (K - 1) / 2.0;
    std::vector<double> h(K);
    const double pi = std::numbers::pi;
    for (int n = 0; n < K; ++n) {
        const double m = n - c;
        double v;
        if (std::abs(m) < 1e-12)
            v = 2.0 * (f2 - f1);
        else
            v = (std::sin(2.0 * pi * f2 * m) - std::sin(2.0 * pi * f1 * m)) / (pi * m);
        h[n] = v * win[n];
    }
    // normalize to unit gain at the band center
    const double fc = (f1 + f2) / 2.0;
    double re = 0.0, im = 0.0;
    for (int n = 0; n < K; ++n) {
        re += h[n] * std::cos(2.0 * pi * fc * n);
        im -= h[n] * std::sin(2.0 * pi * fc * n);
    }
    const double mag = std::sqrt(re * re + im * im);
    if (mag > 1e-12)
        for (double& v : h) v /= mag;
    return h;
}

struct FrontendInitConfig {
    double fs_hz = 1000.0;
    // static FIR initialization bands, Hz
    std::vector<std::pair<double, double>> bands = {{25, 45}, {45, 80}, {80, 200}, {200, 400}};
    // gammatone init distributions (Hz at fs)
    double gt_alpha = 1e5;
    double gt_eta = 4.0;
    double gt_f_lo_hz = 10.0, gt_f_hi_hz = 400.0;
    double gt_beta_mean_hz = 30.0, gt_beta_std_hz = 6.0;
};

// Gammatone: alpha=1e5, eta=4, f ~ U(10,400) Hz, beta ~ N(30, 6^2) Hz, both
// stored per-sample (divided by fs). Other kinds: windowed-sinc bandpass taps
// projected onto the kind's constraint.
inline Filterbank init_filterbank(FrontendKind kind, int K, std::uint64_t seed,
                                  const FrontendInitConfig& cfg = {}) {
    check_parity(kind, K);
    std::mt19937_64 rng(seed);
    Filterbank bank;
    for (int b = 0; b < 4; ++b) {
        FrontendKernel k(kind, K);
        if (kind == FrontendKind::Gammatone) {
            std::uniform_real_distribution<double> uf(cfg.gt_f_lo_hz, cfg.gt_f_hi_hz);
            std::normal_distribution<double> nb(cfg.gt_beta_mean_hz, cfg.gt_beta_std_hz);
            GammatoneParams p;
            p.alpha = cfg.gt_alpha;
            p.eta = cfg.gt_eta;
            p.f = uf(rng) / cfg.fs_hz;
            p.beta = std::abs(nb(rng)) / cfg.fs_hz;
            p.clamp();
            k.free_params->data = {p.alpha, p.eta, p.beta, p.f};
        } else {
            const auto& band = cfg.bands[b % cfg.bands.size()];
            const auto h = bandpass_taps(K, band.first, band.second, cfg.fs_hz);
            auto& p = k.free_params->data;
            switch (kind) {
                case FrontendKind::Free:
                case FrontendKind::ZeroPhase:
                    p.assign(h.begin(), h.end());
                    break;
                case FrontendKind::TypeI:
                case FrontendKind::TypeII:
                    for (std::size_t i = 0; i < p.size(); ++i)
                        p[i] = (h[i] + h[K - 1 - i]) / 2.0;
                    break;
                case FrontendKind::TypeIII:
                case FrontendKind::TypeIV:
                    for (std::size_t i = 0; i < p.size(); ++i)
                        p[i] = (h[i] - h[K - 1 - i]) / 2.0;
                    break;
                default: break;
            }
        }
        bank.kernels.push_back(std::move(k));
    }
    return bank;
}

// Keeps gammatone parameters inside the domain where the gradient chain is
// defined. No-op for other kinds.
inline void clamp_filterbank(Filterbank& bank) {
    if (bank.kind() != FrontendKind::Gammatone) return;
    for (auto& k : bank.kernels) {
        GammatoneParams p{k.free_params->data[0], k.free_params->data[1], k.free_params->data[2],
                          k.free_params->data[3]};
        p.clamp();
        k.free_params->data = {p.alpha, p.eta, p.beta, p.f};
    }
}

struct KernelExport {
    FrontendKind kind;
    int K;
    std::vector<double> taps;
    std::vector<double> params;
    FrequencyResponse response; // for ZeroPhase: |H|^2 with zero phase/delay
};

inline std::vector<KernelExport> export_kernels(const Filterbank& bank, int n_fft = 1024) {
    std::vector<KernelExport> out;
    for (const auto& k : bank.kernels) {
        KernelExport e;
        e.kind = k.kind;
        e.K = k.K;
        e.params = k.free_params->data;
        const auto fir = materialize(k);
        e.taps = fir.h;
        e.response = freq_response(fir, n_fft);
        if (k.kind == FrontendKind::ZeroPhase) {
            for (auto& m : e.response.magnitude) m = m * m;
            std::fill(e.response.phase_rad.begin(), e.response.phase_rad.end(), 0.0);
            std::fill(e.response.group_delay_samples.begin(), e.response.group_delay_samples.end(),
                      0.0);
        }
        out.push_back(std::move(e));
    }
    return out;
}

} // namespace firbank
