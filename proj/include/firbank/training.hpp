#pragma once

// Domain Balanced Training sampler, the training loop and evaluation metrics.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "firbank/data.hpp"
#include "firbank/model.hpp"

namespace firbank {

// Raised when training hits a non-finite loss; maps to CLI exit code 4.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Largest multiple of n_queues not exceeding B; 0 signals a config error.
inline int effective_batch_size(int B, int n_queues) {
    if (B < 1 || n_queues < 1) throw std::invalid_argument("effective_batch_size: bad arguments");
    return n_queues * (B / n_queues);
}

inline int iterations_per_epoch(int reference_domain_cycle_count, int B_eff) {
    if (B_eff < 1) throw std::invalid_argument("iterations_per_epoch: B_eff must be >= 1");
    return std::max(1, reference_domain_cycle_count / B_eff);
}

// One shuffled index queue per observed (domain, class) pair. A queue
// reshuffles the moment it is exhausted, independently of the others.
class DomainQueueSet {
public:
    DomainQueueSet(const std::vector<CardiacCycle>& cycles, std::uint64_t seed) {
        for (std::size_t i = 0; i < cycles.size(); ++i)
            queues_[{cycles[i].domain_id, cycles[i].label}].indices.push_back(i);

        // every observed domain must cover both classes
        std::vector<std::string> missing;
        std::map<int, int> domains;
        for (const auto& [key, q] : queues_) domains[key.first]++;
        for (const auto& [dom, n] : domains)
            if (n != 2)
                missing.push_back("(domain " + std::to_string(dom) + ", " +
                                  (queues_.count({dom, Label::Normal}) ? "abnormal" : "normal") +
                                  ")");
        if (!missing.empty()) {
            std::string msg = "DBT requires every (domain,class) pair to be non-empty; missing:";
            for (const auto& m : missing) msg += " " + m;
            throw ConfigError(msg);
        }

        std::uint64_t salt = 0;
        for (auto& [key, q] : queues_) {
            q.rng.seed(seed ^ (0x51ed2701u + salt++ * 0x9e3779b97f4a7c15ull));
            std::shuffle(q.indices.begin(), q.indices.end(), q.rng);
        }
    }

    int n_queues() const { return static_cast<int>(queues_.size()); }

    // Draws B_eff indices, exactly B_eff/n_queues from each queue.
    std::vector<std::size_t> next_batch(int B) {
        const int beff = effective_batch_size(B, n_queues());
        if (beff == 0)
            throw ConfigError("batch size " + std::to_string(B) + " < " +
                              std::to_string(n_queues()) + " queues gives B_eff=0");
        const int per_queue = beff / n_queues();
        std::vector<std::size_t> batch;
        batch.reserve(beff);
        for (auto& [key, q] : queues_)
            for (int i = 0; i < per_queue; ++i) {
                if (q.cursor == q.indices.size()) {
                    std::shuffle(q.indices.begin(), q.indices.end(), q.rng);
                    q.cursor = 0;
                }
                batch.push_back(q.indices[q.cursor++]);
            }
        return batch;
    }

private:
    struct Queue {
        std::vector<std::size_t> indices;
        std::size_t cursor = 0;
        std::mt19937_64 rng;
    };
    std::map<std::pair<int, Label>, Queue> queues_;
};

struct TrainConfig {
    int batch_size = 64;
    int epochs = 300;
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
    std::uint64_t seed = 0;
    int reference_domain = 0; // iterations per epoch follow this domain's cycle count
    double fuse_threshold = 0.5;
};

struct EvalReport {
    double sensitivity = 0.0, specificity = 0.0, macc = 0.0, f1 = 0.0;
    std::map<int, double> per_domain_accuracy;
    double avg_domain_accuracy = 0.0;
    long tp = 0, fp = 0, tn = 0, fn = 0;
    std::vector<int> empty_domains; // excluded from the average
};

inline EvalReport report_from_counts(long tp, long fp, long tn, long fn) {
    EvalReport r;
    r.tp = tp;
    r.fp = fp;
    r.tn = tn;
    r.fn = fn;
    r.sensitivity = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
    r.specificity = tn + fp > 0 ? static_cast<double>(tn) / (tn + fp) : 0.0;
    r.macc = (r.sensitivity + r.specificity) / 2.0;
    r.f1 = 2 * tp + fp + fn > 0 ? 2.0 * tp / (2.0 * tp + fp + fn) : 0.0;
    return r;
}

// Recording-level evaluation: per-cycle posteriors fused per recording,
// abnormal = positive class.
inline EvalReport evaluate(BranchedCnn& model, const std::vector<CardiacCycle>& cycles,
                           double fuse_threshold = 0.5) {
    struct Rec {
        std::vector<Posterior> posteriors;
        Label label;
        int domain;
    };
    std::map<std::string, Rec> recs;
    for (const auto& c : cycles) {
        auto& r = recs[c.recording_id];
        r.posteriors.push_back(forward(model, c.samples));
        r.label = c.label;
        r.domain = c.domain_id;
    }
    long tp = 0, fp = 0, tn = 0, fn = 0;
    std::map<int, std::pair<long, long>> domain_counts; // correct, total
    for (const auto& [id, r] : recs) {
        const auto [post, abnormal] = fuse_recording(r.posteriors, fuse_threshold);
        const bool truth = r.label == Label::Abnormal;
        if (truth && abnormal) ++tp;
        else if (truth && !abnormal) ++fn;
        else if (!truth && abnormal) ++fp;
        else ++tn;
        auto& dc = domain_counts[r.domain];
        dc.second++;
        if (abnormal == truth) dc.first++;
    }
    EvalReport rep = report_from_counts(tp, fp, tn, fn);
    double acc_sum = 0.0;
    int n_domains = 0;
    for (const auto& [dom, dc] : domain_counts) {
        if (dc.second == 0) {
            rep.empty_domains.push_back(dom);
            continue;
        }
        const double acc = static_cast<double>(dc.first) / dc.second;
        rep.per_domain_accuracy[dom] = acc;
        acc_sum += acc;
        ++n_domains;
    }
    rep.avg_domain_accuracy = n_domains > 0 ? acc_sum / n_domains : 0.0;
    return rep;
}

// Uniform sampling with replacement, the non-DBT baseline regime.
inline std::vector<std::size_t> uniform_batch(std::mt19937_64& rng, std::size_t n, int B) {
    std::uniform_int_distribution<std::size_t> u(0, n - 1);
    std::vector<std::size_t> idx(B);
    for (auto& i : idx) i = u(rng);
    return idx;
}

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    EvalReport val;
};

struct TrainTrace {
    std::vector<EpochRecord> epochs;
    std::vector<double> iteration_loss;
    int best_epoch = -1;
    double best_val_macc = -1.0;
};

namespace detail {

inline std::pair<ad::TensorPtr, ad::TensorPtr> assemble_batch(
    const std::vector<CardiacCycle>& cycles, const std::vector<std::size_t>& idx,
    std::size_t input_len) {
    const std::size_t B = idx.size();
    auto x = ad::Tensor::create({B, 1, input_len});
    auto t = ad::Tensor::create({B, 2});
    for (std::size_t r = 0; r < B; ++r) {
        const auto& c = cycles[idx[r]];
        const std::size_t n = std::min(input_len, c.samples.size());
        std::copy_n(c.samples.begin(), n, x->data.begin() + r * input_len);
        t->data[r * 2 + (c.label == Label::Abnormal ? 1 : 0)] = 1.0;
    }
    return {x, t};
}

} // namespace detail

// Replaces the batchnorm running statistics with a uniform average of batch
// statistics over the given cycles (dropout off, weights untouched). The EMA
// collected during training lags far behind the weights on short runs, which
// otherwise skews every eval-mode prediction.
inline void reestimate_batchnorm(BranchedCnn& model, const std::vector<CardiacCycle>& cycles,
                                 int batch_size) {
    std::mt19937_64 rng(0); // dropout is disabled; masks are never drawn
    std::vector<std::size_t> idx;
    int t = 0;
    auto flush = [&] {
        if (idx.size() < 2) return; // batch stats need at least two rows
        auto [x, target] =
            detail::assemble_batch(cycles, idx, static_cast<std::size_t>(model.cfg.input_len));
        ++t;
        // momentum (t-1)/t turns the EMA into a running uniform mean
        forward_batch(model, x, true, rng, (t - 1.0) / t, false);
        idx.clear();
    };
    for (std::size_t i = 0; i < cycles.size(); ++i) {
        idx.push_back(i);
        if (static_cast<int>(idx.size()) == batch_size) flush();
    }
    flush();
}

// Deterministic under (dataset, config, seed, dbt). Validation metrics are
// recorded per epoch; the best-val-Macc epoch's weights are restored at the
// end when a validation set is given.
inline TrainTrace train(const std::vector<CardiacCycle>& train_cycles,
                        const std::vector<CardiacCycle>& val_cycles, BranchedCnn& model,
                        const TrainConfig& cfg, bool dbt,
                        const std::function<void(int, BranchedCnn&)>& on_epoch = {}) {
    if (train_cycles.empty()) throw std::invalid_argument("train: empty dataset");
    std::mt19937_64 rng(cfg.seed);

    std::optional<DomainQueueSet> queues;
    int beff = cfg.batch_size;
    if (dbt) {
        queues.emplace(train_cycles, cfg.seed ^ 0xdb7u);
        beff = effective_batch_size(cfg.batch_size, queues->n_queues());
        if (beff == 0)
            throw ConfigError("batch size " + std::to_string(cfg.batch_size) + " < " +
                              std::to_string(queues->n_queues()) + " DBT queues gives B_eff=0");
    }

    int ref_count = 0;
    for (const auto& c : train_cycles)
        if (c.domain_id == cfg.reference_domain) ++ref_count;
    if (ref_count == 0) ref_count = static_cast<int>(train_cycles.size());
    const int iters = iterations_per_epoch(ref_count, beff);

    auto params = model.parameters();
    ad::AdamState adam;
    adam.lr = cfg.lr;
    adam.beta1 = cfg.beta1;
    adam.beta2 = cfg.beta2;
    adam.epsilon = cfg.epsilon;
    adam.init(params);

    TrainTrace trace;
    nlohmann::json best_ckpt;
    double last_grad_norm = 0.0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double loss_sum = 0.0;
        for (int it = 0; it < iters; ++it) {
            std::vector<std::size_t> idx;
            if (dbt)
                idx = queues->next_batch(cfg.batch_size);
            else
                idx = uniform_batch(rng, train_cycles.size(), cfg.batch_size);
            auto [x, target] =
                detail::assemble_batch(train_cycles, idx,
                                       static_cast<std::size_t>(model.cfg.input_len));
            auto out = forward_batch(model, x, true, rng);
            auto loss = ad::cross_entropy(out.probs, target);
            if (!std::isfinite(loss->data[0])) {
                std::ostringstream msg;
                msg << "NaN loss at epoch " << epoch << " iteration " << it << " (lr=" << cfg.lr
                    << ", last grad norm=" << last_grad_norm << ")";
                throw NumericError(msg.str());
            }
            ad::backward(loss);
            double gn = 0.0;
            for (const auto& p : params)
                for (double g : p->grad) gn += g * g;
            last_grad_norm = std::sqrt(gn);
            ad::adam_step(params, adam);
            clamp_filterbank(model.bank);
            loss_sum += loss->data[0];
            trace.iteration_loss.push_back(loss->data[0]);
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / iters;
        if (!val_cycles.empty()) {
            reestimate_batchnorm(model, train_cycles, cfg.batch_size);
            rec.val = evaluate(model, val_cycles, cfg.fuse_threshold);
            if (rec.val.macc > trace.best_val_macc) {
                trace.best_val_macc = rec.val.macc;
                trace.best_epoch = epoch;
                best_ckpt = checkpoint_to_json(model);
            }
        }
        trace.epochs.push_back(std::move(rec));
        if (on_epoch) on_epoch(epoch, model);
    }
    // checkpoints taken at validation time already carry re-estimated stats
    if (trace.best_epoch >= 0)
        model = checkpoint_from_json(best_ckpt);
    else
        reestimate_batchnorm(model, train_cycles, cfg.batch_size);
    return trace;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
    nlohmann::json pd = nlohmann::json::object();
    for (const auto& [dom, acc] : r.per_domain_accuracy) pd[std::to_string(dom)] = acc;
    return {{"sensitivity", r.sensitivity}, {"specificity", r.specificity},
            {"macc", r.macc},               {"f1", r.f1},
            {"per_domain_acc", pd},         {"avg_domain_accuracy", r.avg_domain_accuracy},
            {"tp", r.tp},                   {"fp", r.fp},
            {"tn", r.tn},                   {"fn", r.fn}};
}

// One JSON record per epoch.
inline void write_trace_jsonl(const TrainTrace& trace, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write trace: " + path);
    for (const auto& e : trace.epochs) {
        nlohmann::json j = {{"epoch", e.epoch},
                            {"train_loss", e.train_loss},
                            {"val_sens", e.val.sensitivity},
                            {"val_spec", e.val.specificity},
                            {"val_macc", e.val.macc},
                            {"val_f1", e.val.f1}};
        nlohmann::json pd = nlohmann::json::object();
        for (const auto& [dom, acc] : e.val.per_domain_accuracy) pd[std::to_string(dom)] = acc;
        j["per_domain_acc"] = pd;
        out << j.dump() << "\n";
    }
}

} // namespace firbank
