// firbank_cli: generate synthetic datasets, train, evaluate and inspect
// filterbank front-end models.
//
// Exit codes: 0 success, 2 configuration error, 3 data/I-O error,
// 4 numeric failure during training.

#include <CLI11.hpp>

#include <firbank/data.hpp>
#include <firbank/interpret.hpp>
#include <firbank/model.hpp>
#include <firbank/training.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "1.0.0";

std::string default_out(const std::string& sub) {
    const char* root = std::getenv("FIRBANK_OUTPUT_ROOT");
    return (root ? std::string(root) : std::string(".")) + "/" + sub;
}

std::string timestamp() {
    const auto now = std::chrono::system_clock::now();
    const auto t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

void write_manifest(const std::string& path, const std::string& command, const json& config,
                    std::uint64_t seed, const std::vector<std::string>& outputs) {
    json m = {{"command", command},
              {"config", config},
              {"seed", seed},
              {"version", kVersion},
              {"timestamp", timestamp()},
              {"outputs", outputs}};
    fs::create_directories(fs::path(path).parent_path().empty()
                               ? fs::path(".")
                               : fs::path(path).parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest: " + path);
    out << m.dump(2) << "\n";
}

std::vector<firbank::CardiacCycle> load_dir(const std::string& dir) {
    return firbank::load_recordings(dir, dir + "/labels.csv", dir + "/cycles.csv");
}

void write_json(const std::string& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write: " + path);
    out << j.dump(2) << "\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Learnable FIR filterbank front-ends for 1D signal classification"};
    app.require_subcommand(1);
    app.set_config("--config", "", "optional key=value config file mirroring the flags");

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic multi-domain dataset");
    std::string gen_preset = "balanced", gen_out = default_out("dataset");
    std::uint64_t gen_seed = 0;
    int gen_domains = 2, gen_cycles = 200;
    gen->add_option("--preset", gen_preset, "balanced|imbalanced|confuser");
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--seed", gen_seed);
    gen->add_option("--domains", gen_domains)->check(CLI::Range(2, 64));
    gen->add_option("--cycles-per-domain", gen_cycles)->check(CLI::PositiveNumber);

    // train
    auto* tr = app.add_subcommand("train", "train a branched CNN on a dataset directory");
    std::string tr_data, tr_val, tr_frontend = "type1", tr_out = default_out("run");
    int tr_K = 0, tr_epochs = 300, tr_batch = 64, tr_snap_stride = 10;
    std::uint64_t tr_seed = 0;
    double tr_lr = 1e-3;
    bool tr_dbt = true;
    tr->add_option("--data", tr_data, "dataset directory (WAV + labels.csv + cycles.csv)")
        ->required();
    tr->add_option("--val-data", tr_val, "optional validation dataset directory");
    tr->add_option("--frontend", tr_frontend,
                   "free|type1|type2|type3|type4|zerophase|gammatone");
    tr->add_option("--K", tr_K, "front-end kernel length (default 61, or 60 for even types)");
    tr->add_flag("--dbt,!--no-dbt", tr_dbt, "domain balanced batch sampling (default on)");
    tr->add_option("--epochs", tr_epochs)->check(CLI::PositiveNumber);
    tr->add_option("--batch", tr_batch)->check(CLI::PositiveNumber);
    tr->add_option("--lr", tr_lr);
    tr->add_option("--seed", tr_seed);
    tr->add_option("--snapshot-stride", tr_snap_stride, "epochs between filter snapshots");
    tr->add_option("--out", tr_out, "output directory for run artifacts");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    std::string ev_model, ev_data, ev_report = default_out("eval_report.json");
    ev->add_option("--model", ev_model, "checkpoint JSON")->required();
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--report", ev_report, "report JSON path");

    // analyze
    auto* an = app.add_subcommand("analyze", "export filter taps, responses and phase audits");
    std::string an_model, an_out = default_out("analysis");
    an->add_option("--model", an_model, "checkpoint JSON")->required();
    an->add_option("--out", an_out, "output directory");

    // gradcam
    auto* gc = app.add_subcommand("gradcam", "export class activation maps for dataset cycles");
    std::string gc_model, gc_data, gc_out = default_out("gradcam");
    int gc_n = 10;
    gc->add_option("--model", gc_model, "checkpoint JSON")->required();
    gc->add_option("--data", gc_data, "dataset directory")->required();
    gc->add_option("--n", gc_n, "number of cycles to export")->check(CLI::PositiveNumber);
    gc->add_option("--out", gc_out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) {
            const auto preset = firbank::preset_from_string(gen_preset);
            const auto profiles = firbank::preset_profiles(preset, gen_domains, gen_cycles);
            const auto cycles =
                firbank::synth_dataset(profiles, firbank::preset_options(preset), gen_seed);
            firbank::save_dataset(cycles, gen_out);
            json cfg = {{"preset", gen_preset},
                        {"domains", gen_domains},
                        {"cycles_per_domain", gen_cycles},
                        {"out", gen_out}};
            write_manifest(gen_out + "/manifest.json", "gen-data", cfg, gen_seed,
                           {gen_out + "/labels.csv", gen_out + "/cycles.csv"});
            std::cout << "wrote " << cycles.size() << " cycles to " << gen_out << "\n";
        } else if (tr->parsed()) {
            const auto kind = firbank::frontend_kind_from_string(tr_frontend);
            firbank::BranchedCnnConfig mcfg;
            mcfg.frontend_kind = kind;
            if (tr_K > 0)
                mcfg.frontend_K = tr_K;
            else if (kind == firbank::FrontendKind::TypeII || kind == firbank::FrontendKind::TypeIV)
                mcfg.frontend_K = 60;
            auto model = firbank::init_model(mcfg, tr_seed);

            const auto train_cycles = load_dir(tr_data);
            std::vector<firbank::CardiacCycle> val_cycles;
            if (!tr_val.empty()) val_cycles = load_dir(tr_val);

            firbank::TrainConfig tcfg;
            tcfg.batch_size = tr_batch;
            tcfg.epochs = tr_epochs;
            tcfg.lr = tr_lr;
            tcfg.seed = tr_seed;

            fs::create_directories(tr_out);
            std::vector<firbank::FilterSnapshot> snaps;
            auto trace = firbank::train(
                train_cycles, val_cycles, model, tcfg, tr_dbt,
                [&](int epoch, firbank::BranchedCnn& m) {
                    if (firbank::snapshot_due(epoch, tr_epochs, tr_snap_stride))
                        snaps.push_back(firbank::snapshot_filters(m, epoch));
                });

            firbank::save_checkpoint(model, tr_out + "/checkpoint.json");
            firbank::write_trace_jsonl(trace, tr_out + "/trace.jsonl");
            firbank::write_snapshots(snaps, tr_out + "/snapshots.json");
            json cfg = {{"data", tr_data},       {"val_data", tr_val},
                        {"frontend", tr_frontend}, {"K", mcfg.frontend_K},
                        {"dbt", tr_dbt},         {"epochs", tr_epochs},
                        {"batch", tr_batch},     {"lr", tr_lr},
                        {"snapshot_stride", tr_snap_stride}, {"out", tr_out}};
            write_manifest(tr_out + "/manifest.json", "train", cfg, tr_seed,
                           {tr_out + "/checkpoint.json", tr_out + "/trace.jsonl",
                            tr_out + "/snapshots.json"});
            std::cout << "trained " << tr_epochs << " epochs; artifacts in " << tr_out << "\n";
            if (trace.best_epoch >= 0)
                std::cout << "best val Macc " << trace.best_val_macc << " at epoch "
                          << trace.best_epoch << "\n";
        } else if (ev->parsed()) {
            auto model = firbank::load_checkpoint(ev_model);
            const auto cycles = load_dir(ev_data);
            const auto report = firbank::evaluate(model, cycles);
            const auto dir = fs::path(ev_report).parent_path();
            if (!dir.empty()) fs::create_directories(dir);
            write_json(ev_report, firbank::report_to_json(report));
            json cfg = {{"model", ev_model}, {"data", ev_data}, {"report", ev_report}};
            write_manifest(ev_report + ".manifest.json", "eval", cfg, 0, {ev_report});
            std::cout << "macc " << report.macc << " sens " << report.sensitivity << " spec "
                      << report.specificity << " f1 " << report.f1 << "\n";
        } else if (an->parsed()) {
            auto model = firbank::load_checkpoint(an_model);
            fs::create_directories(an_out);
            const auto snap = firbank::snapshot_filters(model, 0);
            firbank::write_snapshots({snap}, an_out + "/snapshots.json");
            std::vector<std::string> outputs = {an_out + "/snapshots.json"};
            const double fs_hz = firbank::kCycleRateHz;
            for (std::size_t k = 0; k < snap.kernels.size(); ++k) {
                const auto& r = snap.kernels[k].response;
                const std::string path = an_out + "/kernel_" + std::to_string(k) + ".csv";
                std::ofstream csv(path);
                if (!csv) throw std::runtime_error("cannot write " + path);
                csv.precision(17);
                csv << "bin,freq_hz,magnitude,phase_rad,group_delay\n";
                const int bins = static_cast<int>(r.magnitude.size());
                for (int b = 0; b < bins; ++b)
                    csv << b << "," << 0.5 * fs_hz * b / (bins - 1) << "," << r.magnitude[b]
                        << "," << r.phase_rad[b] << "," << r.group_delay_samples[b] << "\n";
                outputs.push_back(path);
            }
            json cfg = {{"model", an_model}, {"out", an_out}};
            write_manifest(an_out + "/manifest.json", "analyze", cfg, 0, outputs);
            std::cout << "wrote responses for " << snap.kernels.size() << " kernels to " << an_out
                      << "\n";
        } else if (gc->parsed()) {
            auto model = firbank::load_checkpoint(gc_model);
            auto cycles = load_dir(gc_data);
            if (static_cast<int>(cycles.size()) > gc_n) cycles.resize(gc_n);
            firbank::export_gradcam_batch(model, cycles, gc_out);
            json cfg = {{"model", gc_model}, {"data", gc_data}, {"n", gc_n}, {"out", gc_out}};
            write_manifest(gc_out + "/manifest.json", "gradcam", cfg, 0,
                           {gc_out + "/gradcam_summary.json"});
            std::cout << "exported " << cycles.size() << " maps to " << gc_out << "\n";
        }
    } catch (const firbank::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 4;
    } catch (const firbank::ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
