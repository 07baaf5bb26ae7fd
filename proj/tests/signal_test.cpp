#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <firbank/signal.hpp>

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

using namespace firbank;

namespace {

// Brute-force causal convolution straight from the summation definition.
// Kept independent of fir_filter; this is the oracle.
std::vector<double> causal_conv_oracle(const std::vector<double>& x, const std::vector<double>& h) {
    std::vector<double> y(x.size(), 0.0);
    for (std::size_t n = 0; n < x.size(); ++n)
        for (std::size_t i = 0; i < h.size(); ++i)
            if (n >= i) y[n] += h[i] * x[n - i];
    return y;
}

std::vector<double> centered_conv_oracle(const std::vector<double>& x,
                                         const std::vector<double>& h) {
    const long c = (static_cast<long>(h.size()) - 1) / 2;
    std::vector<double> y(x.size(), 0.0);
    for (long n = 0; n < static_cast<long>(x.size()); ++n)
        for (long i = 0; i < static_cast<long>(h.size()); ++i) {
            const long s = n + c - i;
            if (s >= 0 && s < static_cast<long>(x.size())) y[n] += h[i] * x[s];
        }
    return y;
}

Signal sig(std::vector<double> v, double fs = 1.0) { return Signal(std::move(v), fs); }

} // namespace

TEST_CASE("fir_filter basics") {
    CHECK(fir_filter(sig({1, 0, 0, 0}), FirCoefficients({1})).samples ==
          std::vector<double>{1, 0, 0, 0});

    // frozen from causal_conv_oracle
    CHECK(causal_conv_oracle({1, 2, 3}, {1, 1}) == std::vector<double>{1, 3, 5});
    CHECK(fir_filter(sig({1, 2, 3}), FirCoefficients({1, 1})).samples ==
          std::vector<double>{1, 3, 5});

    CHECK(causal_conv_oracle({0, 1, 0}, {1, 2, 1}) == std::vector<double>{0, 1, 2});
    CHECK(fir_filter(sig({0, 1, 0}), FirCoefficients({1, 2, 1})).samples ==
          std::vector<double>{0, 1, 2});

    CHECK(fir_filter(sig({1, 2, 3}, 44100.0), FirCoefficients({1})).sample_rate_hz == 44100.0);
    CHECK_THROWS(fir_filter(Signal(), FirCoefficients({1})));
}

TEST_CASE("fir_filter linearity property") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int trial = 0; trial < 25; ++trial) {
        std::vector<double> x1(16), x2(16), h(5);
        for (auto& v : x1) v = u(rng);
        for (auto& v : x2) v = u(rng);
        for (auto& v : h) v = u(rng);
        const double a = u(rng), b = u(rng);
        std::vector<double> mix(16);
        for (int i = 0; i < 16; ++i) mix[i] = a * x1[i] + b * x2[i];
        const auto ymix = fir_filter(sig(mix), FirCoefficients(h)).samples;
        const auto y1 = fir_filter(sig(x1), FirCoefficients(h)).samples;
        const auto y2 = fir_filter(sig(x2), FirCoefficients(h)).samples;
        for (int i = 0; i < 16; ++i)
            CHECK(ymix[i] == doctest::Approx(a * y1[i] + b * y2[i]).epsilon(1e-10));
    }
}

TEST_CASE("centered_conv basics") {
    CHECK(centered_conv_oracle({0, 0, 1, 0, 0}, {1, 2, 3}) == std::vector<double>{0, 1, 2, 3, 0});
    CHECK(centered_conv(sig({0, 0, 1, 0, 0}), FirCoefficients({1, 2, 3})).samples ==
          std::vector<double>{0, 1, 2, 3, 0});

    CHECK(centered_conv_oracle({1, 1, 1}, {1, 1, 1}) == std::vector<double>{2, 3, 2});
    CHECK(centered_conv(sig({1, 1, 1}), FirCoefficients({1, 1, 1})).samples ==
          std::vector<double>{2, 3, 2});
}

TEST_CASE("centered_conv delta identity property") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> x(20);
        for (auto& v : x) v = u(rng);
        CHECK(centered_conv(sig(x), FirCoefficients({0, 1, 0})).samples == x);
    }
    // even length matches the oracle's floor((K-1)/2) centering
    std::vector<double> x(12), h(4);
    for (auto& v : x) v = u(rng);
    for (auto& v : h) v = u(rng);
    const auto got = centered_conv(sig(x), FirCoefficients(h)).samples;
    const auto want = centered_conv_oracle(x, h);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]));
}

TEST_CASE("freq_response magnitude and phase") {
    const auto r = freq_response(FirCoefficients({0.5, 0.5}), 64);
    CHECK(r.magnitude.front() == doctest::Approx(1.0));
    CHECK(r.magnitude.back() == doctest::Approx(0.0).epsilon(1e-12));

    const auto tri = freq_response(FirCoefficients({1, 2, 1}), 128);
    for (std::size_t b = 0; b < tri.magnitude.size(); ++b)
        if (tri.magnitude[b] > 1e-8)
            CHECK(tri.group_delay_samples[b] == doctest::Approx(1.0).epsilon(1e-9));

    // h=[1,0,0,0,-1]: H = 2j sin(2w) e^{-2jw}, so phase == -2w + pi/2 modulo pi
    const auto t3 = freq_response(FirCoefficients({1, 0, 0, 0, -1}), 256);
    const double dw = 2.0 * std::numbers::pi / 256;
    for (std::size_t b = 0; b < t3.magnitude.size(); ++b) {
        if (t3.magnitude[b] <= 1e-8) continue;
        const double w = b * dw;
        const double expected = -2.0 * w + std::numbers::pi / 2.0;
        CHECK(std::abs(std::sin(t3.phase_rad[b] - expected)) < 1e-9);
        if (w < std::numbers::pi / 2.0 - 0.05)
            CHECK(t3.phase_rad[b] == doctest::Approx(expected).epsilon(1e-9));
    }
    CHECK_THROWS(freq_response(FirCoefficients({1, 2, 1}), 4));
}

TEST_CASE("freq_response Parseval") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> h(9);
    for (auto& v : h) v = u(rng);
    const int n_fft = 64;
    const auto r = freq_response(FirCoefficients(h), n_fft);
    double full = 0.0;
    for (std::size_t b = 0; b < r.magnitude.size(); ++b) {
        const double m2 = r.magnitude[b] * r.magnitude[b];
        full += (b == 0 || b + 1 == r.magnitude.size()) ? m2 : 2.0 * m2;
    }
    double e = 0.0;
    for (double v : h) e += v * v;
    CHECK(full == doctest::Approx(n_fft * e).epsilon(1e-8));
}

TEST_CASE("windows") {
    const auto b3 = blackman_window(3);
    CHECK(std::abs(b3[0] - (0.42 - 0.5 + 0.08)) < 1e-12);
    CHECK(b3[1] == doctest::Approx(1.0));
    CHECK(std::abs(b3[2] - b3[0]) < 1e-12);

    const auto k = kaiser_window(17, 0.0);
    for (double v : k) CHECK(v == doctest::Approx(1.0));

    const auto b64 = blackman_window(64);
    for (int i = 0; i < 64; ++i) CHECK(b64[i] == doctest::Approx(b64[63 - i]).epsilon(1e-12));

    CHECK_THROWS(blackman_window(0));
    CHECK_THROWS(kaiser_window(0, 5.0));
}

TEST_CASE("welch_psd") {
    const double fs = 1000.0;
    const double f0 = 125.0; // bin 128 of 1024
    std::vector<double> tone(4096);
    for (std::size_t i = 0; i < tone.size(); ++i)
        tone[i] = std::sin(2.0 * std::numbers::pi * f0 / fs * i);
    const auto psd = welch_psd(sig(tone, fs), 1024, 5.0);
    std::size_t peak = 0;
    for (std::size_t b = 1; b < psd.size(); ++b)
        if (psd[b] > psd[peak]) peak = b;
    CHECK(peak == static_cast<std::size_t>(std::lround(f0 / fs * 1024)));

    // averaging shrinks variance of a flat white-noise PSD
    std::mt19937_64 rng(19);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> var;
    for (std::size_t len : {2048u, 8192u, 32768u}) {
        std::vector<double> noise(len);
        for (auto& v : noise) v = g(rng);
        const auto p = welch_psd(sig(noise, fs), 256, 5.0);
        double m = 0.0;
        for (double v : p) m += v;
        m /= p.size();
        double s = 0.0;
        for (double v : p) s += (v - m) * (v - m);
        var.push_back(s / p.size() / (m * m)); // normalized
    }
    CHECK(var[1] < var[0]);
    CHECK(var[2] < var[1]);

    const auto zero = welch_psd(sig(std::vector<double>(2048, 0.0), fs), 1024, 5.0);
    for (double v : zero) CHECK(v == 0.0);

    CHECK_THROWS(welch_psd(sig(std::vector<double>(100, 0.0), fs), 1024, 5.0));
}

TEST_CASE("resample") {
    // DC invariance 2 kHz -> 1 kHz
    const auto dc = resample(sig(std::vector<double>(2000, 0.7), 2000.0), 1000.0);
    CHECK(dc.sample_rate_hz == 1000.0);
    CHECK(dc.size() == 1000);
    for (std::size_t i = 100; i + 100 < dc.size(); ++i)
        CHECK(dc.samples[i] == doctest::Approx(0.7).epsilon(1e-6));

    // 4 kHz tone at 100 Hz keeps its PSD peak after resampling to 1 kHz
    const double f0 = 100.0;
    std::vector<double> tone(16384);
    for (std::size_t i = 0; i < tone.size(); ++i)
        tone[i] = std::sin(2.0 * std::numbers::pi * f0 / 4000.0 * i);
    const auto ds = resample(sig(tone, 4000.0), 1000.0);
    CHECK(std::llabs(static_cast<long long>(ds.size()) - 4096) <= 1);
    const auto psd = welch_psd(ds, 1024, 5.0);
    std::size_t peak = 0;
    for (std::size_t b = 1; b < psd.size(); ++b)
        if (psd[b] > psd[peak]) peak = b;
    CHECK(peak == static_cast<std::size_t>(std::lround(f0 / 1000.0 * 1024)));

    // identity when already at the target rate
    const Signal x = sig({0.1, -0.2, 0.3}, 1000.0);
    const auto same = resample(x, 1000.0);
    CHECK(same.samples == x.samples);

    CHECK_THROWS(resample(x, 0.0));
}
