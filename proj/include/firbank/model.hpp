#pragma once

// Branched CNN classifier: learnable filterbank front-end, four identical
// conv branches (conv -> batchnorm -> relu -> dropout -> maxpool, twice),
// channel concatenation, MLP head with softmax, per-recording fusion and
// Grad-CAM attribution.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "firbank/frontend.hpp"
#include "firbank/signal.hpp"
#include "firbank/tensor.hpp"

namespace firbank {

struct BranchedCnnConfig {
    FrontendKind frontend_kind = FrontendKind::TypeI;
    int frontend_K = 61;
    int branch_conv_kernel = 5;
    std::vector<int> branch_channels = {8, 4};
    double dropout_p = 0.5;
    int hidden_units = 20;
    int classes = 2;
    int input_len = 2500;

    int flatten_len() const {
        if (input_len % 4 != 0) throw std::invalid_argument("input_len must be divisible by 4");
        return 4 * branch_channels[1] * (input_len / 4);
    }

    bool operator==(const BranchedCnnConfig&) const = default;
};

struct Posterior {
    double p_normal = 0.5;
    double p_abnormal = 0.5;
};

struct BranchedCnn {
    BranchedCnnConfig cfg;
    Filterbank bank;

    struct Branch {
        ad::TensorPtr conv1_w, conv1_b, bn1_gamma, bn1_beta;
        ad::TensorPtr conv2_w, conv2_b, bn2_gamma, bn2_beta;
        std::vector<double> bn1_mean, bn1_var, bn2_mean, bn2_var;
    };
    std::vector<Branch> branches; // 4
    ad::TensorPtr head_w1, head_b1, head_w2, head_b2;

    std::vector<ad::TensorPtr> parameters() const {
        std::vector<ad::TensorPtr> ps;
        for (const auto& k : bank.kernels) ps.push_back(k.free_params);
        for (const auto& b : branches) {
            ps.push_back(b.conv1_w);
            ps.push_back(b.conv1_b);
            ps.push_back(b.bn1_gamma);
            ps.push_back(b.bn1_beta);
            ps.push_back(b.conv2_w);
            ps.push_back(b.conv2_b);
            ps.push_back(b.bn2_gamma);
            ps.push_back(b.bn2_beta);
        }
        ps.push_back(head_w1);
        ps.push_back(head_b1);
        ps.push_back(head_w2);
        ps.push_back(head_b2);
        return ps;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : parameters()) n += p->size();
        return n;
    }
};

namespace detail {

inline ad::TensorPtr init_param(std::vector<std::size_t> shape, double scale,
                                std::mt19937_64& rng) {
    auto t = ad::Tensor::create(std::move(shape), true);
    std::normal_distribution<double> g(0.0, scale);
    for (auto& v : t->data) v = g(rng);
    return t;
}

inline ad::TensorPtr const_param(std::vector<std::size_t> shape, double value) {
    auto t = ad::Tensor::create(std::move(shape), true);
    std::fill(t->data.begin(), t->data.end(), value);
    return t;
}

} // namespace detail

inline BranchedCnn init_model(const BranchedCnnConfig& cfg, std::uint64_t seed) {
    BranchedCnn m;
    m.cfg = cfg;
    m.bank = init_filterbank(cfg.frontend_kind, cfg.frontend_K, seed);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    const std::size_t k = static_cast<std::size_t>(cfg.branch_conv_kernel);
    const std::size_t c1 = static_cast<std::size_t>(cfg.branch_channels[0]);
    const std::size_t c2 = static_cast<std::size_t>(cfg.branch_channels[1]);
    for (int b = 0; b < 4; ++b) {
        BranchedCnn::Branch br;
        br.conv1_w = detail::init_param({c1, 1, k}, std::sqrt(2.0 / k), rng);
        br.conv1_b = detail::const_param({c1}, 0.0);
        br.bn1_gamma = detail::const_param({c1}, 1.0);
        br.bn1_beta = detail::const_param({c1}, 0.0);
        br.bn1_mean.assign(c1, 0.0);
        br.bn1_var.assign(c1, 1.0);
        br.conv2_w = detail::init_param({c2, c1, k}, std::sqrt(2.0 / (c1 * k)), rng);
        br.conv2_b = detail::const_param({c2}, 0.0);
        br.bn2_gamma = detail::const_param({c2}, 1.0);
        br.bn2_beta = detail::const_param({c2}, 0.0);
        br.bn2_mean.assign(c2, 0.0);
        br.bn2_var.assign(c2, 1.0);
        m.branches.push_back(std::move(br));
    }
    const std::size_t flat = static_cast<std::size_t>(cfg.flatten_len());
    const std::size_t hid = static_cast<std::size_t>(cfg.hidden_units);
    m.head_w1 = detail::init_param({hid, flat}, std::sqrt(2.0 / flat), rng);
    m.head_b1 = detail::const_param({hid}, 0.0);
    m.head_w2 = detail::init_param({static_cast<std::size_t>(cfg.classes), hid},
                                   std::sqrt(2.0 / hid), rng);
    m.head_b2 = detail::const_param({static_cast<std::size_t>(cfg.classes)}, 0.0);
    return m;
}

struct ForwardResult {
    ad::TensorPtr probs;  // [B, classes]
    ad::TensorPtr logits; // [B, classes], pre-softmax
    ad::TensorPtr concat; // [B, 4*c2, input_len/4] branch concatenation
};

// Batched forward. Dropout and batch statistics are active only when train
// is true; rng supplies the dropout masks. bn_momentum/use_dropout exist for
// the post-training statistics re-estimation pass.
inline ForwardResult forward_batch(BranchedCnn& m, const ad::TensorPtr& x, bool train,
                                   std::mt19937_64& rng, double bn_momentum = 0.99,
                                   bool use_dropout = true) {
    if (x->shape.size() != 3 || x->shape[1] != 1 ||
        x->shape[2] != static_cast<std::size_t>(m.cfg.input_len))
        throw std::invalid_argument("forward: input must be [B,1,input_len]");
    const std::size_t B = x->shape[0];

    std::vector<ad::TensorPtr> branch_outs;
    for (int b = 0; b < 4; ++b) {
        auto taps = materialize_node(m.bank.kernels[b]);
        auto z = ad::conv1d(x, taps);
        if (m.bank.kind() == FrontendKind::ZeroPhase) {
            const long K = m.bank.K();
            z = ad::conv1d(z, reverse_taps(taps), nullptr, K - 1 - (K - 1) / 2);
        }
        auto& br = m.branches[b];
        auto h = ad::conv1d(z, br.conv1_w, br.conv1_b);
        h = ad::batchnorm(h, br.bn1_gamma, br.bn1_beta, br.bn1_mean, br.bn1_var, train,
                          bn_momentum);
        h = ad::relu(h);
        h = ad::dropout(h, m.cfg.dropout_p, train && use_dropout, rng);
        h = ad::maxpool2(h);
        h = ad::conv1d(h, br.conv2_w, br.conv2_b);
        h = ad::batchnorm(h, br.bn2_gamma, br.bn2_beta, br.bn2_mean, br.bn2_var, train,
                          bn_momentum);
        h = ad::relu(h);
        h = ad::dropout(h, m.cfg.dropout_p, train && use_dropout, rng);
        h = ad::maxpool2(h);
        branch_outs.push_back(h);
    }
    ForwardResult r;
    r.concat = ad::concat_channels(branch_outs);
    auto flat = ad::reshape(r.concat, {B, static_cast<std::size_t>(m.cfg.flatten_len())});
    auto hid = ad::relu(ad::dense(flat, m.head_w1, m.head_b1));
    r.logits = ad::dense(hid, m.head_w2, m.head_b2);
    r.probs = ad::softmax(r.logits);
    return r;
}

// Zero-pad or truncate a cycle to the model's fixed input length.
inline std::vector<double> fit_input(const std::vector<double>& cycle, int input_len) {
    std::vector<double> out(static_cast<std::size_t>(input_len), 0.0);
    std::copy_n(cycle.begin(), std::min(out.size(), cycle.size()), out.begin());
    return out;
}

// Eval-mode forward of a single cycle (padded/truncated to input_len).
inline Posterior forward(BranchedCnn& m, const std::vector<double>& cycle) {
    auto fitted = fit_input(cycle, m.cfg.input_len);
    const std::size_t n = fitted.size();
    auto x = ad::Tensor::from_data({1, 1, n}, std::move(fitted));
    std::mt19937_64 rng(0); // unused in eval mode
    auto r = forward_batch(m, x, false, rng);
    return {r.probs->data[0], r.probs->data[1]};
}

// Arithmetic mean of per-cycle posteriors; ties at 0.5 go to abnormal.
inline std::pair<Posterior, bool> fuse_recording(const std::vector<Posterior>& posteriors,
                                                 double threshold = 0.5) {
    if (posteriors.empty()) throw std::invalid_argument("fuse_recording: empty posterior list");
    Posterior mean{0.0, 0.0};
    for (const auto& p : posteriors) {
        mean.p_normal += p.p_normal;
        mean.p_abnormal += p.p_abnormal;
    }
    mean.p_normal /= posteriors.size();
    mean.p_abnormal /= posteriors.size();
    return {mean, mean.p_abnormal >= threshold};
}

// Grad-CAM over the concatenated branch activations: channels weighted by the
// channel-wise mean gradient of the target-class logit, relu, x4 nearest
// upsample, Blackman smoothing (length 51), min-max scaled to [0,1].
inline std::vector<double> grad_cam(BranchedCnn& m, const std::vector<double>& cycle,
                                    int target_class) {
    if (target_class < 0 || target_class >= m.cfg.classes)
        throw std::invalid_argument("grad_cam: invalid target class");
    auto fitted = fit_input(cycle, m.cfg.input_len);
    const std::size_t n = fitted.size();
    auto x = ad::Tensor::from_data({1, 1, n}, std::move(fitted));
    std::mt19937_64 rng(0);
    auto r = forward_batch(m, x, false, rng);

    // scalar pick of the target logit
    auto pick = ad::Tensor::create({1});
    pick->data[0] = r.logits->data[target_class];
    pick->parents = {r.logits};
    ad::TensorPtr lp = r.logits;
    pick->backward_fn = [lp, target_class](ad::Tensor& self) {
        lp->ensure_grad();
        lp->grad[target_class] += self.grad[0];
    };
    ad::backward(pick);

    const std::size_t C = r.concat->shape[1], N = r.concat->shape[2];
    std::vector<double> cam(N, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
        double w = 0.0;
        for (std::size_t n = 0; n < N; ++n) w += r.concat->grad[c * N + n];
        w /= N;
        for (std::size_t n = 0; n < N; ++n) cam[n] += w * r.concat->data[c * N + n];
    }
    for (auto& v : cam) v = std::max(v, 0.0);

    std::vector<double> up(m.cfg.input_len, 0.0);
    for (std::size_t i = 0; i < up.size(); ++i) up[i] = cam[std::min(i / 4, N - 1)];

    auto win = blackman_window(51);
    double wsum = 0.0;
    for (double v : win) wsum += v;
    for (auto& v : win) v /= wsum;
    auto smooth = centered_conv(Signal(up, 1000.0), FirCoefficients(win)).samples;

    const auto [mn, mx] = std::minmax_element(smooth.begin(), smooth.end());
    const double lo = *mn, hi = *mx;
    if (hi - lo > 1e-300)
        for (auto& v : smooth) v = (v - lo) / (hi - lo);
    else
        std::fill(smooth.begin(), smooth.end(), 0.0);
    return smooth;
}

// ---- checkpoint ----

namespace detail {

inline nlohmann::json tensor_to_json(const ad::TensorPtr& t) {
    return {{"shape", t->shape}, {"data", t->data}};
}

inline ad::TensorPtr tensor_from_json(const nlohmann::json& j, bool requires_grad = true) {
    return ad::Tensor::from_data(j.at("shape").get<std::vector<std::size_t>>(),
                                 j.at("data").get<std::vector<double>>(), requires_grad);
}

} // namespace detail

inline nlohmann::json config_to_json(const BranchedCnnConfig& c) {
    return {{"frontend_kind", to_string(c.frontend_kind)},
            {"frontend_K", c.frontend_K},
            {"branch_conv_kernel", c.branch_conv_kernel},
            {"branch_channels", c.branch_channels},
            {"dropout_p", c.dropout_p},
            {"hidden_units", c.hidden_units},
            {"classes", c.classes},
            {"input_len", c.input_len}};
}

inline BranchedCnnConfig config_from_json(const nlohmann::json& j) {
    BranchedCnnConfig c;
    c.frontend_kind = frontend_kind_from_string(j.at("frontend_kind").get<std::string>());
    c.frontend_K = j.at("frontend_K").get<int>();
    c.branch_conv_kernel = j.at("branch_conv_kernel").get<int>();
    c.branch_channels = j.at("branch_channels").get<std::vector<int>>();
    c.dropout_p = j.at("dropout_p").get<double>();
    c.hidden_units = j.at("hidden_units").get<int>();
    c.classes = j.at("classes").get<int>();
    c.input_len = j.at("input_len").get<int>();
    return c;
}

inline nlohmann::json checkpoint_to_json(const BranchedCnn& m) {
    nlohmann::json j;
    j["format_version"] = 1;
    j["config"] = config_to_json(m.cfg);
    nlohmann::json kernels = nlohmann::json::array();
    for (const auto& k : m.bank.kernels) kernels.push_back(detail::tensor_to_json(k.free_params));
    j["frontend_params"] = kernels;
    nlohmann::json branches = nlohmann::json::array();
    for (const auto& b : m.branches) {
        branches.push_back({{"conv1_w", detail::tensor_to_json(b.conv1_w)},
                            {"conv1_b", detail::tensor_to_json(b.conv1_b)},
                            {"bn1_gamma", detail::tensor_to_json(b.bn1_gamma)},
                            {"bn1_beta", detail::tensor_to_json(b.bn1_beta)},
                            {"conv2_w", detail::tensor_to_json(b.conv2_w)},
                            {"conv2_b", detail::tensor_to_json(b.conv2_b)},
                            {"bn2_gamma", detail::tensor_to_json(b.bn2_gamma)},
                            {"bn2_beta", detail::tensor_to_json(b.bn2_beta)},
                            {"bn1_mean", b.bn1_mean},
                            {"bn1_var", b.bn1_var},
                            {"bn2_mean", b.bn2_mean},
                            {"bn2_var", b.bn2_var}});
    }
    j["branches"] = branches;
    j["head"] = {{"w1", detail::tensor_to_json(m.head_w1)},
                 {"b1", detail::tensor_to_json(m.head_b1)},
                 {"w2", detail::tensor_to_json(m.head_w2)},
                 {"b2", detail::tensor_to_json(m.head_b2)}};
    return j;
}

inline BranchedCnn checkpoint_from_json(const nlohmann::json& j) {
    if (j.at("format_version").get<int>() != 1)
        throw std::runtime_error("checkpoint: unsupported format version");
    BranchedCnn m;
    m.cfg = config_from_json(j.at("config"));
    const auto& kernels = j.at("frontend_params");
    if (kernels.size() != 4) throw std::runtime_error("checkpoint: expected 4 frontend kernels");
    for (const auto& kj : kernels) {
        FrontendKernel k(m.cfg.frontend_kind, m.cfg.frontend_K);
        auto t = detail::tensor_from_json(kj);
        if (t->size() != k.free_params->size())
            throw std::runtime_error("checkpoint: frontend parameter size mismatch with config");
        k.free_params = t;
        m.bank.kernels.push_back(std::move(k));
    }
    for (const auto& bj : j.at("branches")) {
        BranchedCnn::Branch b;
        b.conv1_w = detail::tensor_from_json(bj.at("conv1_w"));
        b.conv1_b = detail::tensor_from_json(bj.at("conv1_b"));
        b.bn1_gamma = detail::tensor_from_json(bj.at("bn1_gamma"));
        b.bn1_beta = detail::tensor_from_json(bj.at("bn1_beta"));
        b.conv2_w = detail::tensor_from_json(bj.at("conv2_w"));
        b.conv2_b = detail::tensor_from_json(bj.at("conv2_b"));
        b.bn2_gamma = detail::tensor_from_json(bj.at("bn2_gamma"));
        b.bn2_beta = detail::tensor_from_json(bj.at("bn2_beta"));
        b.bn1_mean = bj.at("bn1_mean").get<std::vector<double>>();
        b.bn1_var = bj.at("bn1_var").get<std::vector<double>>();
        b.bn2_mean = bj.at("bn2_mean").get<std::vector<double>>();
        b.bn2_var = bj.at("bn2_var").get<std::vector<double>>();
        m.branches.push_back(std::move(b));
    }
    if (m.branches.size() != 4) throw std::runtime_error("checkpoint: expected 4 branches");
    m.head_w1 = detail::tensor_from_json(j.at("head").at("w1"));
    m.head_b1 = detail::tensor_from_json(j.at("head").at("b1"));
    m.head_w2 = detail::tensor_from_json(j.at("head").at("w2"));
    m.head_b2 = detail::tensor_from_json(j.at("head").at("b2"));
    const std::size_t k = static_cast<std::size_t>(m.cfg.branch_conv_kernel);
    const std::size_t c1 = static_cast<std::size_t>(m.cfg.branch_channels.at(0));
    const std::size_t c2 = static_cast<std::size_t>(m.cfg.branch_channels.at(1));
    for (const auto& b : m.branches)
        if (b.conv1_w->shape != std::vector<std::size_t>{c1, 1, k} ||
            b.conv2_w->shape != std::vector<std::size_t>{c2, c1, k} ||
            b.bn1_gamma->size() != c1 || b.bn2_gamma->size() != c2 ||
            b.bn1_mean.size() != c1 || b.bn2_mean.size() != c2)
        throw std::runtime_error("checkpoint: branch parameter shape mismatch with config");
    if (m.head_w1->shape != std::vector<std::size_t>{static_cast<std::size_t>(m.cfg.hidden_units),
                                                     static_cast<std::size_t>(m.cfg.flatten_len())} ||
        m.head_w2->shape != std::vector<std::size_t>{static_cast<std::size_t>(m.cfg.classes),
                                                     static_cast<std::size_t>(m.cfg.hidden_units)})
        throw std::runtime_error("checkpoint: head shape mismatch with config");
    return m;
}

inline void save_checkpoint(const BranchedCnn& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    out << checkpoint_to_json(m).dump();
}

inline BranchedCnn load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
    nlohmann::json j;
    in >> j;
    return checkpoint_from_json(j);
}

} // namespace firbank
