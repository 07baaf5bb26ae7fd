#pragma once

// Synthetic multi-domain heart-sound generation plus WAV+CSV dataset
// serialization and ingestion. The synthetic and real paths share one loader.
//
// Cycle layout at 1 kHz (sample indices, nominal):
//   S1 burst ~[100,160), systole window [160,430), S2 burst ~[430,480),
//   diastole window [480,1100), zero padding to 2500.
// Burst onsets get +-5% jitter; the window fields stay at the nominal
// constants so they survive the WAV+CSV round trip.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "firbank/frontend.hpp" // bandpass_taps
#include "firbank/signal.hpp"

namespace firbank {

constexpr int kCycleLen = 2500;
constexpr double kCycleRateHz = 1000.0;

enum class Label { Normal, Abnormal };

inline const char* to_string(Label l) { return l == Label::Normal ? "normal" : "abnormal"; }
inline Label label_from_string(const std::string& s) {
    if (s == "normal") return Label::Normal;
    if (s == "abnormal") return Label::Abnormal;
    throw std::invalid_argument("unknown label: " + s);
}

struct SampleRange {
    int begin = 0, end = 0;
    bool operator==(const SampleRange&) const = default;
};

struct CardiacCycle {
    std::vector<double> samples; // exactly kCycleLen, float32-representable
    Label label = Label::Normal;
    int domain_id = 0;
    std::string recording_id;
    SampleRange systole_window{160, 430};
    SampleRange diastole_window{480, 1100};
};

struct DomainProfile {
    int domain_id = 0;
    FirCoefficients transfer_fir{std::vector<double>{1.0}};
    double noise_sigma = 0.0;
    int count_normal = 0;
    int count_abnormal = 0;
};

enum class MurmurPhase { Systolic, Diastolic };
enum class MurmurEnvelope { Crescendo, Decrescendo, CrescendoDecrescendo, Uniform };

struct MurmurSpec {
    MurmurPhase phase = MurmurPhase::Systolic;
    MurmurEnvelope envelope = MurmurEnvelope::Uniform;
    double band_lo_hz = 120.0, band_hi_hz = 200.0;
    double amplitude = 0.35;
};

// Smooth random low-order FIR with unity DC gain, fixed per domain: simulates
// the stethoscope's coloration without modeling a specific device.
inline FirCoefficients domain_transfer_fir(int domain_id, int taps = 7) {
    std::mt19937_64 rng(0xd0a1u + static_cast<std::uint64_t>(domain_id) * 7919u);
    std::uniform_real_distribution<double> u(-0.25, 0.25);
    std::vector<double> h(taps);
    const auto win = blackman_window(taps);
    for (int i = 0; i < taps; ++i) h[i] = u(rng) * win[i];
    h[(taps - 1) / 2] += 1.0;
    double dc = 0.0;
    for (double v : h) dc += v;
    for (double& v : h) v /= dc;
    return FirCoefficients(h);
}

// |DFT|^2 bins of a segment zero-padded to n_fft (helper for band energies).
inline std::vector<double> signal_band_dft(const std::vector<double>& seg, int n_fft) {
    const auto spec = firbank::detail::real_dft(seg, n_fft);
    std::vector<double> p(spec.size());
    for (std::size_t i = 0; i < spec.size(); ++i) p[i] = std::norm(spec[i]);
    return p;
}

namespace detail {

inline void add_burst(std::vector<double>& y, int onset, int dur, double freq_hz, double amp,
                      double tau_ms) {
    for (int i = 0; i < dur && onset + i < static_cast<int>(y.size()); ++i) {
        if (onset + i < 0) continue;
        const double t = i / kCycleRateHz;
        y[onset + i] += amp * std::exp(-i / tau_ms) *
                        std::sin(2.0 * std::numbers::pi * freq_hz * t);
    }
}

inline double envelope_gain(MurmurEnvelope env, double frac) {
    switch (env) {
        case MurmurEnvelope::Crescendo: return frac;
        case MurmurEnvelope::Decrescendo: return 1.0 - frac;
        case MurmurEnvelope::CrescendoDecrescendo: return 1.0 - std::abs(2.0 * frac - 1.0);
        case MurmurEnvelope::Uniform: return 1.0;
    }
    return 1.0;
}

// Energy in [lo_hz, hi_hz] of a window of the cycle, via direct DFT.
inline double band_energy(const std::vector<double>& x, SampleRange range, double lo_hz,
                          double hi_hz) {
    const int n = range.end - range.begin;
    std::vector<double> seg(x.begin() + range.begin, x.begin() + range.end);
    const int n_fft = 1024;
    const auto spec = signal_band_dft(seg, n_fft);
    double e = 0.0;
    const int b0 = static_cast<int>(std::floor(lo_hz / kCycleRateHz * n_fft));
    const int b1 = static_cast<int>(std::ceil(hi_hz / kCycleRateHz * n_fft));
    for (int b = b0; b <= b1 && b < static_cast<int>(spec.size()); ++b) e += spec[b];
    return e / n;
}

} // namespace detail

// dB of murmur-phase band energy over the other phase's, in the murmur band.
inline double murmur_band_elevation_db(const CardiacCycle& c, const MurmurSpec& m) {
    const SampleRange murmur_rng =
        m.phase == MurmurPhase::Systolic ? c.systole_window : c.diastole_window;
    const SampleRange other_rng =
        m.phase == MurmurPhase::Systolic ? c.diastole_window : c.systole_window;
    const double e1 = detail::band_energy(c.samples, murmur_rng, m.band_lo_hz, m.band_hi_hz);
    const double e0 = detail::band_energy(c.samples, other_rng, m.band_lo_hz, m.band_hi_hz);
    return 10.0 * std::log10((e1 + 1e-30) / (e0 + 1e-30));
}

inline CardiacCycle synth_cycle(Label label, const std::optional<MurmurSpec>& murmur,
                                const DomainProfile& domain, std::uint64_t seed) {
    if (label == Label::Abnormal && !murmur)
        throw std::invalid_argument("synth_cycle: abnormal cycle requires a murmur spec");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> jit(-0.05, 0.05);
    std::uniform_real_distribution<double> u01(0.0, 1.0);

    std::vector<double> y(kCycleLen, 0.0);
    const int s1_onset = static_cast<int>(std::lround(100.0 * (1.0 + jit(rng))));
    const int s2_onset = static_cast<int>(std::lround(430.0 * (1.0 + jit(rng))));
    const double f1 = 30.0 + 30.0 * u01(rng);  // S1: 30-60 Hz
    const double f2 = 50.0 + 50.0 * u01(rng);  // S2: 50-100 Hz
    detail::add_burst(y, s1_onset, 60, f1, 1.0, 12.0);
    detail::add_burst(y, s2_onset, 50, f2, 0.8, 10.0);

    if (murmur) {
        const auto& m = *murmur;
        // noise carrier band-limited to the murmur band, envelope-shaped
        const SampleRange w = m.phase == MurmurPhase::Systolic ? SampleRange{170, 420}
                                                               : SampleRange{490, 1080};
        const int len = w.end - w.begin;
        std::normal_distribution<double> g(0.0, 1.0);
        std::vector<double> carrier(len + 128);
        for (auto& v : carrier) v = g(rng);
        const auto bp = bandpass_taps(65, m.band_lo_hz, m.band_hi_hz, kCycleRateHz);
        const auto shaped = centered_conv(Signal(carrier, kCycleRateHz), FirCoefficients(bp));
        for (int i = 0; i < len; ++i) {
            const double gain = detail::envelope_gain(m.envelope, (i + 0.5) / len);
            y[w.begin + i] += m.amplitude * gain * shaped.samples[64 + i];
        }
    }

    Signal colored = centered_conv(Signal(std::move(y), kCycleRateHz), domain.transfer_fir);
    if (domain.noise_sigma > 0.0) {
        std::normal_distribution<double> g(0.0, domain.noise_sigma);
        for (auto& v : colored.samples) v += g(rng);
    }
    // quantize to float32 so WAV serialization round-trips bit-exactly
    for (auto& v : colored.samples) v = static_cast<double>(static_cast<float>(v));

    CardiacCycle c;
    c.samples = std::move(colored.samples);
    c.label = label;
    c.domain_id = domain.domain_id;
    return c;
}

struct DatasetOptions {
    std::vector<MurmurSpec> murmur_mix = {
        {MurmurPhase::Systolic, MurmurEnvelope::Uniform},
        {MurmurPhase::Systolic, MurmurEnvelope::CrescendoDecrescendo},
        {MurmurPhase::Systolic, MurmurEnvelope::Crescendo},
        {MurmurPhase::Systolic, MurmurEnvelope::Decrescendo},
    };
    // confuser: breathing-like diastolic noise added to Normal cycles
    std::optional<MurmurSpec> normal_confuser;
    int cycles_per_recording = 5;
};

inline std::vector<CardiacCycle> synth_dataset(const std::vector<DomainProfile>& profiles,
                                               const DatasetOptions& opts, std::uint64_t seed) {
    if (profiles.size() < 2) throw std::invalid_argument("synth_dataset: need >= 2 profiles");
    std::vector<CardiacCycle> out;
    std::uint64_t index = 0;
    for (const auto& prof : profiles) {
        for (int pass = 0; pass < 2; ++pass) {
            const Label label = pass == 0 ? Label::Normal : Label::Abnormal;
            const int count = pass == 0 ? prof.count_normal : prof.count_abnormal;
            for (int i = 0; i < count; ++i, ++index) {
                std::optional<MurmurSpec> murmur;
                if (label == Label::Abnormal)
                    murmur = opts.murmur_mix[i % opts.murmur_mix.size()];
                else if (opts.normal_confuser)
                    murmur = opts.normal_confuser;
                // per-cycle seed derived from (run seed, cycle index)
                const std::uint64_t cseed = seed * 0x9e3779b97f4a7c15ull + index * 2654435761ull + 1;
                auto c = synth_cycle(label, murmur, prof, cseed);
                std::ostringstream id;
                id << "d" << prof.domain_id << "_" << (label == Label::Normal ? "n" : "a")
                   << i / opts.cycles_per_recording;
                c.recording_id = id.str();
                out.push_back(std::move(c));
            }
        }
    }
    return out;
}

enum class DatasetPreset { Balanced, Imbalanced, Confuser };

inline DatasetPreset preset_from_string(const std::string& s) {
    if (s == "balanced") return DatasetPreset::Balanced;
    if (s == "imbalanced") return DatasetPreset::Imbalanced;
    if (s == "confuser") return DatasetPreset::Confuser;
    throw std::invalid_argument("unknown preset: " + s);
}

// Domain profiles for a preset. "imbalanced" concentrates >= 70% of the Normal
// cycles in domain 0; per-domain noise floors and transfer shapes differ.
inline std::vector<DomainProfile> preset_profiles(DatasetPreset preset, int n_domains,
                                                  int cycles_per_domain) {
    if (n_domains < 2) throw std::invalid_argument("need >= 2 domains");
    std::vector<DomainProfile> profiles;
    const int half = cycles_per_domain / 2;
    for (int d = 0; d < n_domains; ++d) {
        DomainProfile p;
        p.domain_id = d;
        p.transfer_fir = domain_transfer_fir(d);
        p.noise_sigma = 0.01 + 0.02 * d;
        if (preset == DatasetPreset::Imbalanced) {
            if (d == 0) {
                // dominant domain: holds >= 70% of all Normal cycles
                p.count_normal = half * (3 * (n_domains - 1));
                p.count_abnormal = half;
            } else {
                p.count_normal = half;
                p.count_abnormal = half;
            }
        } else {
            p.count_normal = half;
            p.count_abnormal = cycles_per_domain - half;
        }
        profiles.push_back(std::move(p));
    }
    return profiles;
}

inline DatasetOptions preset_options(DatasetPreset preset) {
    DatasetOptions opts;
    if (preset == DatasetPreset::Confuser) {
        MurmurSpec breath;
        breath.phase = MurmurPhase::Diastolic;
        breath.envelope = MurmurEnvelope::Decrescendo;
        breath.band_lo_hz = 200.0;
        breath.band_hi_hz = 400.0;
        breath.amplitude = 0.15;
        opts.normal_confuser = breath;
    }
    return opts;
}

// ---- WAV I/O (mono PCM16 / float32) ----

namespace wav {

inline void put_u32(std::string& s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& s, std::uint16_t v) {
    s.push_back(static_cast<char>(v & 0xff));
    s.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void write_float32(const std::string& path, const std::vector<double>& samples,
                          double rate_hz) {
    std::string data;
    data.reserve(44 + samples.size() * 4);
    const std::uint32_t nbytes = static_cast<std::uint32_t>(samples.size() * 4);
    data += "RIFF";
    put_u32(data, 36 + nbytes);
    data += "WAVEfmt ";
    put_u32(data, 16);
    put_u16(data, 3); // IEEE float
    put_u16(data, 1);
    put_u32(data, static_cast<std::uint32_t>(rate_hz));
    put_u32(data, static_cast<std::uint32_t>(rate_hz) * 4);
    put_u16(data, 4);
    put_u16(data, 32);
    data += "data";
    put_u32(data, nbytes);
    for (double v : samples) {
        const float f = static_cast<float>(v);
        char buf[4];
        std::memcpy(buf, &f, 4);
        data.append(buf, 4);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write WAV: " + path);
    out << data;
}

struct WavData {
    std::vector<double> samples;
    double rate_hz = 0.0;
};

inline WavData read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read WAV: " + path);
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    auto u32 = [&](std::size_t off) {
        std::uint32_t v;
        std::memcpy(&v, data.data() + off, 4);
        return v;
    };
    auto u16 = [&](std::size_t off) {
        std::uint16_t v;
        std::memcpy(&v, data.data() + off, 2);
        return v;
    };
    if (data.size() < 44 || data.compare(0, 4, "RIFF") != 0 || data.compare(8, 4, "WAVE") != 0)
        throw std::runtime_error("not a RIFF/WAVE file: " + path);

    std::size_t pos = 12;
    std::uint16_t format = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    WavData out;
    bool got_fmt = false;
    while (pos + 8 <= data.size()) {
        const std::string id = data.substr(pos, 4);
        const std::uint32_t len = u32(pos + 4);
        pos += 8;
        if (id == "fmt ") {
            format = u16(pos);
            channels = u16(pos + 2);
            rate = u32(pos + 4);
            bits = u16(pos + 14);
            got_fmt = true;
        } else if (id == "data") {
            if (!got_fmt) throw std::runtime_error("WAV data before fmt: " + path);
            if (channels != 1) throw std::runtime_error("WAV must be mono: " + path);
            if (format == 1 && bits == 16) {
                const std::size_t n = len / 2;
                out.samples.resize(n);
                for (std::size_t i = 0; i < n; ++i) {
                    std::int16_t v;
                    std::memcpy(&v, data.data() + pos + 2 * i, 2);
                    out.samples[i] = v / 32768.0;
                }
            } else if (format == 3 && bits == 32) {
                const std::size_t n = len / 4;
                out.samples.resize(n);
                for (std::size_t i = 0; i < n; ++i) {
                    float v;
                    std::memcpy(&v, data.data() + pos + 4 * i, 4);
                    out.samples[i] = v;
                }
            } else {
                throw std::runtime_error("unsupported WAV format (need PCM16 or float32): " + path);
            }
            out.rate_hz = rate;
            return out;
        }
        pos += len + (len & 1);
    }
    throw std::runtime_error("WAV has no data chunk: " + path);
}

} // namespace wav

// ---- dataset directory serialization ----

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) {
        while (!field.empty() && (field.back() == '\r' || field.back() == ' ')) field.pop_back();
        out.push_back(field);
    }
    return out;
}

} // namespace detail

inline void save_dataset(const std::vector<CardiacCycle>& cycles, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    // group cycles by recording, preserving order
    std::vector<std::string> order;
    std::map<std::string, std::vector<const CardiacCycle*>> recs;
    for (const auto& c : cycles) {
        if (!recs.count(c.recording_id)) order.push_back(c.recording_id);
        recs[c.recording_id].push_back(&c);
    }
    std::ofstream labels(fs::path(dir) / "labels.csv");
    std::ofstream cyc(fs::path(dir) / "cycles.csv");
    if (!labels || !cyc) throw std::runtime_error("cannot write CSVs in " + dir);
    labels << "recording_id,label,domain\n";
    cyc << "recording_id,cycle_start_ms\n";
    for (const auto& id : order) {
        const auto& group = recs[id];
        labels << id << "," << to_string(group[0]->label) << "," << group[0]->domain_id << "\n";
        std::vector<double> all;
        for (std::size_t i = 0; i < group.size(); ++i) {
            cyc << id << "," << i * kCycleLen << "\n"; // 1 ms per sample at 1 kHz
            all.insert(all.end(), group[i]->samples.begin(), group[i]->samples.end());
        }
        wav::write_float32((fs::path(dir) / (id + ".wav")).string(), all, kCycleRateHz);
    }
}

inline std::vector<CardiacCycle> load_recordings(const std::string& audio_dir,
                                                 const std::string& labels_file,
                                                 const std::string& cycles_file) {
    namespace fs = std::filesystem;
    std::ifstream labels(labels_file);
    if (!labels) throw std::runtime_error("missing labels file: " + labels_file);
    std::ifstream cyc(cycles_file);
    if (!cyc) throw std::runtime_error("missing cycles file: " + cycles_file);

    struct RecMeta { Label label; int domain; };
    std::map<std::string, RecMeta> meta;
    std::string line;
    std::getline(labels, line); // header
    while (std::getline(labels, line)) {
        if (line.empty()) continue;
        const auto f = detail::split_csv_line(line);
        if (f.size() != 3) throw std::runtime_error("bad labels row: " + line);
        meta[f[0]] = {label_from_string(f[1]), std::stoi(f[2])};
    }

    std::map<std::string, Signal> audio;
    std::vector<CardiacCycle> out;
    std::getline(cyc, line); // header
    while (std::getline(cyc, line)) {
        if (line.empty()) continue;
        const auto f = detail::split_csv_line(line);
        if (f.size() != 2) throw std::runtime_error("bad cycles row: " + line);
        const std::string& id = f[0];
        const auto it = meta.find(id);
        if (it == meta.end())
            throw std::runtime_error("cycles row references unknown recording_id: " + line);
        if (!audio.count(id)) {
            const auto w = wav::read((fs::path(audio_dir) / (id + ".wav")).string());
            audio.emplace(id, resample(Signal(w.samples, w.rate_hz), kCycleRateHz));
        }
        const Signal& s = audio.at(id);
        const long start = std::lround(std::stod(f[1]) / 1000.0 * kCycleRateHz);
        if (start < 0 || start >= static_cast<long>(s.samples.size()))
            throw std::runtime_error("cycle_start beyond recording end in row: " + line);
        CardiacCycle c;
        c.samples.assign(kCycleLen, 0.0);
        const long avail = std::min<long>(kCycleLen, static_cast<long>(s.samples.size()) - start);
        std::copy_n(s.samples.begin() + start, avail, c.samples.begin());
        c.label = it->second.label;
        c.domain_id = it->second.domain;
        c.recording_id = id;
        out.push_back(std::move(c));
    }
    return out;
}

} // namespace firbank
