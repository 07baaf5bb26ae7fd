#pragma once

// Deterministic DSP primitives: FIR filtering, frequency/phase/group-delay
// analysis, window functions, Welch spectral estimation and resampling.
// All math in double precision.

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace firbank {

struct Signal {
    std::vector<double> samples;
    double sample_rate_hz = 1.0;

    Signal() = default;
    Signal(std::vector<double> s, double fs) : samples(std::move(s)), sample_rate_hz(fs) {
        if (sample_rate_hz <= 0.0) throw std::invalid_argument("sample_rate_hz must be > 0");
    }
    std::size_t size() const { return samples.size(); }
};

struct FirCoefficients {
    std::vector<double> h;

    FirCoefficients() = default;
    explicit FirCoefficients(std::vector<double> taps) : h(std::move(taps)) {
        if (h.empty()) throw std::invalid_argument("FIR filter needs at least one tap");
    }
    std::size_t order() const { return h.size() - 1; }
};

struct FrequencyResponse {
    int n_fft = 0;
    std::vector<double> magnitude;           // n_fft/2+1 bins
    std::vector<double> phase_rad;           // unwrapped
    std::vector<double> group_delay_samples; // from phase differences
};

// Causal direct-form convolution, y(n) = sum_i h(i) x(n-i), same length as x.
inline Signal fir_filter(const Signal& x, const FirCoefficients& h) {
    if (x.samples.empty()) throw std::invalid_argument("fir_filter: empty input signal");
    const std::size_t n = x.samples.size();
    const std::size_t k = h.h.size();
    std::vector<double> y(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        const std::size_t imax = std::min(k, i + 1);
        for (std::size_t j = 0; j < imax; ++j) acc += h.h[j] * x.samples[i - j];
        y[i] = acc;
    }
    return Signal(std::move(y), x.sample_rate_hz);
}

// Same-length centered convolution with zero padding at both ends.
// Even kernel lengths center at floor((K-1)/2).
inline Signal centered_conv(const Signal& x, const FirCoefficients& h) {
    if (x.samples.empty()) throw std::invalid_argument("centered_conv: empty input signal");
    const long n = static_cast<long>(x.samples.size());
    const long k = static_cast<long>(h.h.size());
    const long c = (k - 1) / 2;
    std::vector<double> y(n, 0.0);
    for (long out = 0; out < n; ++out) {
        double acc = 0.0;
        for (long i = 0; i < k; ++i) {
            const long src = out + c - i;
            if (src >= 0 && src < n) acc += h.h[i] * x.samples[src];
        }
        y[out] = acc;
    }
    return Signal(std::move(y), x.sample_rate_hz);
}

namespace detail {

// Direct DFT of a real sequence zero-padded to n_fft. Adequate for n_fft <= 4096.
inline std::vector<std::complex<double>> real_dft(const std::vector<double>& x, int n_fft) {
    const int bins = n_fft / 2 + 1;
    std::vector<std::complex<double>> out(bins);
    const double w0 = 2.0 * std::numbers::pi / n_fft;
    for (int b = 0; b < bins; ++b) {
        double re = 0.0, im = 0.0;
        for (std::size_t n = 0; n < x.size(); ++n) {
            const double ang = w0 * b * static_cast<double>(n);
            re += x[n] * std::cos(ang);
            im -= x[n] * std::sin(ang);
        }
        out[b] = {re, im};
    }
    return out;
}

inline std::vector<double> unwrap_phase(const std::vector<double>& p) {
    std::vector<double> out(p.size());
    if (p.empty()) return out;
    out[0] = p[0];
    double offset = 0.0;
    for (std::size_t i = 1; i < p.size(); ++i) {
        double d = p[i] - p[i - 1];
        while (d > std::numbers::pi) { offset -= 2.0 * std::numbers::pi; d -= 2.0 * std::numbers::pi; }
        while (d < -std::numbers::pi) { offset += 2.0 * std::numbers::pi; d += 2.0 * std::numbers::pi; }
        out[i] = p[i] + offset;
    }
    return out;
}

inline double bessel_i0(double x) {
    // power series; converges fast for the beta range used here
    double sum = 1.0, term = 1.0;
    const double hx = x / 2.0;
    for (int k = 1; k < 64; ++k) {
        term *= (hx / k) * (hx / k);
        sum += term;
        if (term < 1e-18 * sum) break;
    }
    return sum;
}

} // namespace detail

// Magnitude, unwrapped phase and group delay of h over [0, pi].
// Group delay is the negative phase derivative, evaluated exactly as
// Re(DFT(n*h) / DFT(h)); bin differencing of unwrapped phase is off by
// pi/(2*dw) next to amplitude sign changes, where magnitude is still well
// above the mask. Masked (set 0) where magnitude < 1e-8.
inline FrequencyResponse freq_response(const FirCoefficients& h, int n_fft) {
    if (n_fft < 2 * static_cast<int>(h.h.size()))
        throw std::invalid_argument("freq_response: n_fft must be >= 2*len(h)");
    const auto spec = detail::real_dft(h.h, n_fft);
    std::vector<double> nh(h.h.size());
    for (std::size_t n = 0; n < nh.size(); ++n) nh[n] = static_cast<double>(n) * h.h[n];
    const auto spec_n = detail::real_dft(nh, n_fft);
    const int bins = static_cast<int>(spec.size());
    FrequencyResponse r;
    r.n_fft = n_fft;
    r.magnitude.resize(bins);
    std::vector<double> raw_phase(bins);
    for (int b = 0; b < bins; ++b) {
        r.magnitude[b] = std::abs(spec[b]);
        raw_phase[b] = std::arg(spec[b]);
    }
    r.phase_rad = detail::unwrap_phase(raw_phase);
    r.group_delay_samples.assign(bins, 0.0);
    constexpr double mag_floor = 1e-8;
    for (int b = 0; b < bins; ++b) {
        if (r.magnitude[b] < mag_floor) continue;
        r.group_delay_samples[b] = (spec_n[b] / spec[b]).real();
    }
    return r;
}

inline std::vector<double> blackman_window(int n) {
    if (n < 1) throw std::invalid_argument("blackman_window: n must be >= 1");
    std::vector<double> w(n);
    if (n == 1) { w[0] = 1.0; return w; }
    const double pi = std::numbers::pi;
    for (int i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / (n - 1);
        w[i] = 0.42 - 0.5 * std::cos(2.0 * pi * t) + 0.08 * std::cos(4.0 * pi * t);
    }
    return w;
}

inline std::vector<double> kaiser_window(int n, double beta) {
    if (n < 1) throw std::invalid_argument("kaiser_window: n must be >= 1");
    std::vector<double> w(n);
    if (n == 1) { w[0] = 1.0; return w; }
    const double denom = detail::bessel_i0(beta);
    const double half = (n - 1) / 2.0;
    for (int i = 0; i < n; ++i) {
        const double r = (i - half) / half;
        w[i] = detail::bessel_i0(beta * std::sqrt(std::max(0.0, 1.0 - r * r))) / denom;
    }
    return w;
}

// Averaged periodogram over 50%-overlapping Kaiser-windowed segments.
// Returns window_len/2+1 bins.
inline std::vector<double> welch_psd(const Signal& x, int window_len, double kaiser_beta) {
    if (static_cast<int>(x.samples.size()) < window_len)
        throw std::invalid_argument("welch_psd: signal shorter than one window");
    const auto win = kaiser_window(window_len, kaiser_beta);
    double win_power = 0.0;
    for (double v : win) win_power += v * v;
    const int hop = window_len / 2;
    const int bins = window_len / 2 + 1;
    std::vector<double> psd(bins, 0.0);
    std::vector<double> seg(window_len);
    int count = 0;
    for (std::size_t start = 0; start + window_len <= x.samples.size(); start += hop) {
        for (int i = 0; i < window_len; ++i) seg[i] = x.samples[start + i] * win[i];
        const auto spec = detail::real_dft(seg, window_len);
        for (int b = 0; b < bins; ++b) psd[b] += std::norm(spec[b]);
        ++count;
        if (hop == 0) break;
    }
    const double scale = 1.0 / (count * win_power * x.sample_rate_hz);
    for (int b = 0; b < bins; ++b) {
        psd[b] *= scale;
        if (b != 0 && b != bins - 1) psd[b] *= 2.0; // one-sided
    }
    return psd;
}

// Windowed-sinc low-pass followed by linear interpolation. Identity (bit-exact)
// when already at the target rate.
inline Signal resample(const Signal& x, double target_hz) {
    if (target_hz <= 0.0) throw std::invalid_argument("resample: target rate must be > 0");
    if (x.samples.empty()) throw std::invalid_argument("resample: empty input signal");
    if (target_hz == x.sample_rate_hz) return x;

    const double ratio = target_hz / x.sample_rate_hz;
    std::vector<double> filtered;
    if (ratio < 1.0) {
        // anti-alias at the new Nyquist before decimation
        const double fc = 0.5 * ratio;       // cycles per input sample
        const int half = 32;
        const int taps = 2 * half + 1;
        const auto win = blackman_window(taps);
        std::vector<double> lp(taps);
        double sum = 0.0;
        for (int i = 0; i < taps; ++i) {
            const int m = i - half;
            const double s = (m == 0) ? 2.0 * fc
                                      : std::sin(2.0 * std::numbers::pi * fc * m) / (std::numbers::pi * m);
            lp[i] = s * win[i];
            sum += lp[i];
        }
        for (double& v : lp) v /= sum; // unity DC gain
        filtered = centered_conv(x, FirCoefficients(lp)).samples;
    } else {
        filtered = x.samples;
    }

    const std::size_t out_len = static_cast<std::size_t>(std::llround(x.samples.size() * ratio));
    std::vector<double> out(std::max<std::size_t>(out_len, 1));
    const double step = x.sample_rate_hz / target_hz;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double pos = i * step;
        const std::size_t i0 = std::min(static_cast<std::size_t>(pos), filtered.size() - 1);
        const std::size_t i1 = std::min(i0 + 1, filtered.size() - 1);
        const double frac = pos - static_cast<double>(i0);
        out[i] = filtered[i0] * (1.0 - frac) + filtered[i1] * frac;
    }
    return Signal(std::move(out), target_hz);
}

} // namespace firbank
