#pragma once

// Analysis artifacts: filter snapshots over training, phase-property audits,
// gammatone parameter traces and Grad-CAM exports.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "firbank/data.hpp"
#include "firbank/model.hpp"

namespace firbank {

// How far a response deviates from linear phase, in radians.
//
// The phase of a real linear-phase filter is -a*w + B only up to jumps of pi
// where the (real) amplitude response changes sign, so a straight least-squares
// fit against the unwrapped phase reports ~pi residuals for filters that are
// exactly linear phase. Instead the slope a is read off the group delay (which
// is blind to those sign flips), the intercept B is fitted as a circular mean
// of the doubled rotated phase, and each bin's deviation is folded to the
// nearest multiple of pi. Bins with magnitude <= 1e-8 are ignored.
inline double phase_linearity_residual(const FrequencyResponse& r) {
    constexpr double mag_floor = 1e-8;
    const double pi = std::numbers::pi;
    const int bins = static_cast<int>(r.magnitude.size());

    double wsum = 0.0, a = 0.0;
    for (int b = 0; b < bins; ++b) {
        if (r.magnitude[b] <= mag_floor) continue;
        const double w = r.magnitude[b] * r.magnitude[b];
        a += w * r.group_delay_samples[b];
        wsum += w;
    }
    if (wsum == 0.0) return 0.0; // silent filter: vacuously linear phase
    a /= wsum;

    double s = 0.0, c = 0.0;
    auto theta = [&](int b) {
        const double omega = pi * b / (bins - 1);
        return r.phase_rad[b] + a * omega;
    };
    for (int b = 0; b < bins; ++b) {
        if (r.magnitude[b] <= mag_floor) continue;
        s += r.magnitude[b] * std::sin(2.0 * theta(b));
        c += r.magnitude[b] * std::cos(2.0 * theta(b));
    }
    const double B = 0.5 * std::atan2(s, c);

    double worst = 0.0;
    for (int b = 0; b < bins; ++b) {
        if (r.magnitude[b] <= mag_floor) continue;
        double d = std::fmod(theta(b) - B, pi);
        if (d > pi / 2.0) d -= pi;
        if (d < -pi / 2.0) d += pi;
        worst = std::max(worst, std::abs(d));
    }
    return worst;
}

struct FilterSnapshot {
    int epoch = 0;
    std::vector<KernelExport> kernels;
    std::vector<double> phase_linearity; // one residual per kernel
};

inline FilterSnapshot snapshot_filters(const BranchedCnn& model, int epoch, int n_fft = 1024) {
    FilterSnapshot s;
    s.epoch = epoch;
    s.kernels = export_kernels(model.bank, n_fft);
    for (const auto& k : s.kernels) s.phase_linearity.push_back(phase_linearity_residual(k.response));
    return s;
}

// Epochs at which snapshots are taken: 0, every `stride`, and the final epoch.
inline bool snapshot_due(int epoch, int total_epochs, int stride = 10) {
    return epoch == 0 || epoch == total_epochs - 1 || (stride > 0 && epoch % stride == 0);
}

struct GammatoneTracePoint {
    int epoch = 0;
    double alpha = 0.0, eta = 0.0, beta_hz = 0.0, f_hz = 0.0;
};

// Per-kernel time series of gammatone parameters, frequencies in Hz.
inline std::vector<std::vector<GammatoneTracePoint>> gammatone_param_trace(
    const std::vector<FilterSnapshot>& snapshots) {
    if (snapshots.empty()) throw std::invalid_argument("gammatone_param_trace: no snapshots");
    const std::size_t n_kernels = snapshots.front().kernels.size();
    std::vector<std::vector<GammatoneTracePoint>> trace(n_kernels);
    for (const auto& snap : snapshots)
        for (std::size_t k = 0; k < n_kernels; ++k) {
            const auto& ke = snap.kernels[k];
            if (ke.kind != FrontendKind::Gammatone)
                throw std::invalid_argument("gammatone_param_trace: frontend is not gammatone");
            trace[k].push_back({snap.epoch, ke.params[0], ke.params[1], ke.params[2] * 1000.0,
                                ke.params[3] * 1000.0});
        }
    return trace;
}

inline nlohmann::json response_to_json(const FrequencyResponse& r) {
    return {{"n_fft", r.n_fft},
            {"magnitude", r.magnitude},
            {"phase_rad", r.phase_rad},
            {"group_delay_samples", r.group_delay_samples}};
}

inline FrequencyResponse response_from_json(const nlohmann::json& j) {
    FrequencyResponse r;
    r.n_fft = j.at("n_fft").get<int>();
    r.magnitude = j.at("magnitude").get<std::vector<double>>();
    r.phase_rad = j.at("phase_rad").get<std::vector<double>>();
    r.group_delay_samples = j.at("group_delay_samples").get<std::vector<double>>();
    return r;
}

inline nlohmann::json snapshot_to_json(const FilterSnapshot& s) {
    nlohmann::json kernels = nlohmann::json::array();
    for (const auto& k : s.kernels)
        kernels.push_back({{"kind", to_string(k.kind)},
                           {"K", k.K},
                           {"taps", k.taps},
                           {"params", k.params},
                           {"response", response_to_json(k.response)}});
    return {{"epoch", s.epoch}, {"kernels", kernels}, {"phase_linearity", s.phase_linearity}};
}

inline FilterSnapshot snapshot_from_json(const nlohmann::json& j) {
    FilterSnapshot s;
    s.epoch = j.at("epoch").get<int>();
    s.phase_linearity = j.at("phase_linearity").get<std::vector<double>>();
    for (const auto& jk : j.at("kernels")) {
        KernelExport k;
        k.kind = frontend_kind_from_string(jk.at("kind").get<std::string>());
        k.K = jk.at("K").get<int>();
        k.taps = jk.at("taps").get<std::vector<double>>();
        k.params = jk.at("params").get<std::vector<double>>();
        k.response = response_from_json(jk.at("response"));
        s.kernels.push_back(std::move(k));
    }
    return s;
}

inline void write_snapshots(const std::vector<FilterSnapshot>& snaps, const std::string& path) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& s : snaps) j.push_back(snapshot_to_json(s));
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write snapshots: " + path);
    out << j.dump(2) << "\n";
}

// One CSV per cycle (sample_index,waveform,cam_value) plus a summary JSON with
// the posterior and attributed class per file. The CAM targets the predicted
// class. Returns the summary.
inline nlohmann::json export_gradcam_batch(BranchedCnn& model,
                                           const std::vector<CardiacCycle>& cycles,
                                           const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw std::runtime_error("cannot create directory " + out_dir + ": " + ec.message());

    nlohmann::json summary = nlohmann::json::array();
    int n = 0;
    for (const auto& c : cycles) {
        const auto post = forward(model, c.samples);
        const int target = post.p_abnormal >= post.p_normal ? 1 : 0;
        const auto cam = grad_cam(model, c.samples, target);
        const auto wave = fit_input(c.samples, model.cfg.input_len);

        const std::string name = "gradcam_" + std::to_string(n++) + ".csv";
        const std::string path = out_dir + "/" + name;
        std::ofstream csv(path);
        if (!csv) throw std::runtime_error("cannot write " + path);
        csv.precision(17);
        csv << "sample_index,waveform,cam_value\n";
        for (std::size_t i = 0; i < cam.size(); ++i)
            csv << i << "," << wave[i] << "," << cam[i] << "\n";

        summary.push_back({{"file", name},
                           {"recording_id", c.recording_id},
                           {"label", to_string(c.label)},
                           {"domain", c.domain_id},
                           {"p_normal", post.p_normal},
                           {"p_abnormal", post.p_abnormal},
                           {"target_class", target}});
    }
    std::ofstream js(out_dir + "/gradcam_summary.json");
    if (!js) throw std::runtime_error("cannot write " + out_dir + "/gradcam_summary.json");
    js << summary.dump(2) << "\n";
    return summary;
}

} // namespace firbank
