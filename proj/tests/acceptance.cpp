// Acceptance suite: one pass/fail line per criterion, exit code = number of
// failures. Criteria 6-9 share a desk-scale pipeline run (three paradigms,
// N=10, M=10, |X|=1000) that takes a few CPU-hours; criteria 1-5 are fast
// property checks with pinned tolerances.
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <vector>

#include "memtrace/cli/experiment.hpp"
#include "memtrace/diffcore/network.hpp"
#include "memtrace/indicators/indicators.hpp"
#include "memtrace/paradigms/loss.hpp"
#include "memtrace/profiles/profiles.hpp"
#include "memtrace/rng.hpp"

using namespace memtrace;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int id, const std::string& label, bool pass, const std::string& detail,
            double seconds) {
    std::ostringstream line;
    line << (pass ? "PASS" : "FAIL") << " criterion " << id << " (" << label
         << "): " << detail << " [" << std::fixed << std::setprecision(1) << seconds
         << "s]";
    std::cout << line.str() << std::endl;
    if (!pass) ++g_failures;
}

template <typename F>
void run_criterion(int id, const std::string& label, F body) {
    const auto t0 = std::chrono::steady_clock::now();
    bool pass = false;
    std::string detail;
    try {
        pass = body(detail);
    } catch (const std::exception& e) {
        detail = std::string("exception: ") + e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report(id, label, pass, detail, secs);
}

// ---------------------------------------------------------------- criterion 1

double rel_err(double a, double f) {
    return std::fabs(a - f) / std::max({std::fabs(a), std::fabs(f), 1e-6});
}

// loss L = sum r_o out_o through a fresh state copy (train-mode batch norm
// mutates running stats)
double loss_value(diffcore::NetworkT<double>& net,
                  const diffcore::ModelStateT<double>& state,
                  const TensorT<double>& input, const std::vector<double>& r) {
    diffcore::ModelStateT<double> s = state;
    TensorT<double> out = net.forward(s, input, diffcore::Mode::train);
    double l = 0;
    for (size_t i = 0; i < out.numel(); ++i) l += r[i] * out.data[i];
    return l;
}

double gradient_check(const diffcore::NetworkSpec& spec,
                      const std::vector<int>& in_shape, uint64_t seed) {
    diffcore::NetworkT<double> net(spec);
    auto state = net.init(seed);
    Rng prng(stable_hash({seed, 99}));
    for (auto& [name, p] : state.params) {
        if (!diffcore::is_trainable(name)) continue;
        for (auto& v : p.data) v += 0.05 * prng.normal();
    }
    TensorT<double> input(in_shape);
    Rng rng(stable_hash({seed, 1}));
    for (auto& v : input.data) v = rng.normal();

    diffcore::ModelStateT<double> tmp = state;
    TensorT<double> out = net.forward(tmp, input, diffcore::Mode::train);
    std::vector<double> r(out.numel());
    Rng rrng(stable_hash({seed, 2}));
    for (auto& v : r) v = rrng.normal();
    TensorT<double> dout(out.shape);
    for (size_t i = 0; i < r.size(); ++i) dout.data[i] = r[i];

    diffcore::ModelStateT<double> fwd_state = state;
    net.forward(fwd_state, input, diffcore::Mode::train);
    TensorT<double> dinput;
    auto grads = net.backward(fwd_state, dout, &dinput);

    const double h = 1e-4;  // pinned finite-difference step
    double max_rel = 0;
    for (auto& [name, p] : state.params) {
        if (!diffcore::is_trainable(name)) continue;
        for (size_t i = 0; i < p.numel(); ++i) {
            auto plus = state, minus = state;
            plus.params.at(name).data[i] += h;
            minus.params.at(name).data[i] -= h;
            const double fd = (loss_value(net, plus, input, r) -
                               loss_value(net, minus, input, r)) /
                              (2 * h);
            max_rel = std::max(max_rel, rel_err(grads.at(name).data[i], fd));
        }
    }
    for (size_t i = 0; i < input.numel(); ++i) {
        auto plus = input, minus = input;
        plus.data[i] += h;
        minus.data[i] -= h;
        const double fd =
            (loss_value(net, state, plus, r) - loss_value(net, state, minus, r)) /
            (2 * h);
        max_rel = std::max(max_rel, rel_err(dinput.data[i], fd));
    }
    return max_rel;
}

bool criterion1(std::string& detail) {
    using namespace diffcore;
    auto single = [](LayerDesc layer, int c, int h, int w) {
        NetworkSpec s;
        s.layers.push_back(layer);
        s.in_channels = c;
        s.in_h = h;
        s.in_w = w;
        return s;
    };
    struct Case {
        const char* name;
        NetworkSpec spec;
        std::vector<int> in_shape;
    };
    NetworkSpec stack;  // every layer type + projection head in one net
    stack.layers = {ConvLayer{4, 3, 1, 1}, BatchNormLayer{}, ReluLayer{},
                    MaxPoolLayer{2}, GlobalAvgPoolLayer{}, AffineLayer{6}};
    stack.head = ProjectionHead{5, 4};
    stack.encoder_output_dim = 6;
    stack.in_channels = 2;
    stack.in_h = 4;
    stack.in_w = 4;
    const std::vector<Case> cases = {
        {"conv", single(ConvLayer{3, 3, 1, 1}, 2, 4, 4), {2, 2, 4, 4}},
        {"conv_stride2", single(ConvLayer{2, 3, 2, 1}, 2, 5, 5), {2, 2, 5, 5}},
        {"affine", single(AffineLayer{5}, 2, 4, 4), {2, 2, 4, 4}},
        {"relu", single(ReluLayer{}, 2, 4, 4), {2, 2, 4, 4}},
        {"batchnorm", single(BatchNormLayer{}, 3, 4, 4), {2, 3, 4, 4}},
        {"maxpool", single(MaxPoolLayer{2}, 2, 4, 4), {2, 2, 4, 4}},
        {"gap", single(GlobalAvgPoolLayer{}, 2, 4, 4), {2, 2, 4, 4}},
        {"full_stack", stack, {3, 2, 4, 4}},
    };
    double worst = 0;
    std::string worst_name;
    for (const auto& c : cases) {
        const double e = gradient_check(c.spec, c.in_shape, 42);
        if (e > worst) {
            worst = e;
            worst_name = c.name;
        }
    }
    std::ostringstream os;
    os << "max relative error " << worst << " (" << worst_name << "), limit 1e-3";
    detail = os.str();
    return worst < 1e-3;
}

// ---------------------------------------------------------------- criterion 2

double nt_xent_oracle(const TensorT<double>& proj, const std::vector<int>& pairing,
                      double tau) {
    const int n = proj.shape[0], d = proj.shape[1];
    std::vector<std::vector<double>> u(n, std::vector<double>(d));
    for (int i = 0; i < n; ++i) {
        double s = 0;
        for (int j = 0; j < d; ++j) s += proj.data[i * d + j] * proj.data[i * d + j];
        for (int j = 0; j < d; ++j) u[i][j] = proj.data[i * d + j] / std::sqrt(s);
    }
    long double total = 0;
    for (int a = 0; a < n; ++a) {
        long double denom = 0, num = 0;
        for (int j = 0; j < n; ++j) {
            if (j == a) continue;
            double s = 0;
            for (int c = 0; c < d; ++c) s += u[a][c] * u[j][c];
            const long double e = expl(static_cast<long double>(s) / tau);
            denom += e;
            if (j == pairing[a]) num = e;
        }
        total += -logl(num / denom);
    }
    return static_cast<double>(total / n);
}

bool criterion2(std::string& detail) {
    double worst = 0;
    Rng rng(23);
    for (int rep = 0; rep < 10; ++rep)
        for (int b = 1; b <= 4; ++b) {
            TensorT<double> proj({2 * b, 8});
            for (auto& v : proj.data) v = rng.normal();
            std::vector<int> pairing(2 * b);
            for (int i = 0; i < b; ++i) {
                pairing[2 * i] = 2 * i + 1;
                pairing[2 * i + 1] = 2 * i;
            }
            for (const double tau : {0.07, 0.5, 1.0}) {
                const double got = paradigms::nt_xent_loss(proj, pairing, tau).loss;
                const double want = nt_xent_oracle(proj, pairing, tau);
                worst = std::max(worst,
                                 std::fabs(got - want) / std::max(1.0, std::fabs(want)));
            }
        }
    TensorT<float> logits({4, 10});
    const double sup_err =
        std::fabs(paradigms::supervised_loss(logits, {0, 3, 7, 9}, 1.0).loss -
                  std::log(10.0));
    std::ostringstream os;
    os << "nt_xent max rel err " << worst << " (limit 1e-9), ln(10) abs err " << sup_err
       << " (limit 1e-12)";
    detail = os.str();
    return worst < 1e-9 && sup_err < 1e-12;
}

// ---------------------------------------------------------------- criterion 3

bool criterion3(std::string& detail) {
    const int n_models = 30, n_examples = 1000, n_seeds = 100;
    std::ostringstream os;
    bool ok = true;
    for (const double p : {0.25, 0.5, 0.75}) {
        int good = 0;
        for (int seed = 0; seed < n_seeds; ++seed) {
            indicators::IndicatorTensor ind(n_models, {1}, n_examples, 1);
            Rng rng(stable_hash({static_cast<uint64_t>(seed),
                                 static_cast<uint64_t>(p * 1000)}));
            for (int i = 0; i < n_models; ++i)
                for (int x = 0; x < n_examples; ++x)
                    ind.set(i, 0, x, 0, rng.bernoulli(p));
            auto curve = indicators::estimate_p_fixed(ind, 1, 0);
            auto prof = profiles::build_profile(curve);
            auto base = profiles::binomial_baseline(
                n_models, profiles::binomial_mle(curve), n_examples,
                profiles::BaselineMode::quantile);
            if (profiles::profile_deviation(prof, base).mad < 0.03) ++good;
        }
        os << "p=" << p << ": " << good << "/" << n_seeds << " ";
        if (good < 99) ok = false;
    }
    detail = os.str() + "(need >= 99 each, mad < 0.03)";
    return ok;
}

// ---------------------------------------------------------------- criterion 4

bool criterion4(std::string& detail) {
    Rng rng(404);
    double worst = 0;
    bool mle_exact = true;
    for (int rep = 0; rep < 20; ++rep) {
        const int n = 2 + static_cast<int>(rng.below(6));
        const int x = 50 + static_cast<int>(rng.below(200));
        const int m = 1 + static_cast<int>(rng.below(8));
        indicators::IndicatorTensor ind(n, {1, 7}, x, m);
        const double p = 0.1 + 0.8 * rng.uniform();
        for (int i = 0; i < n; ++i)
            for (int t = 0; t < 2; ++t)
                for (int xi = 0; xi < x; ++xi)
                    for (int j = 0; j < m; ++j) ind.set(i, t, xi, j, rng.bernoulli(p));
        for (const int epoch : {1, 7}) {
            auto avg = indicators::estimate_p_avg(ind, epoch);
            for (int xi = 0; xi < x; ++xi) {
                double mean = 0;
                for (int j = 0; j < m; ++j)
                    mean += indicators::estimate_p_fixed(ind, epoch, j).values[xi];
                worst = std::max(worst, std::fabs(avg.values[xi] - mean / m));
            }
            if (profiles::binomial_mle(avg) != profiles::build_profile(avg).area)
                mle_exact = false;
        }
    }
    std::ostringstream os;
    os << "max |p_avg - mean(fixed slots)| = " << worst
       << " (limit 1e-12), MLE == area exactly: " << (mle_exact ? "yes" : "no");
    detail = os.str();
    return worst <= 1e-12 && mle_exact;
}

// ---------------------------------------------------------------- criterion 5

bool criterion5(std::string& detail) {
    Rng rng(505);
    const std::vector<double> thresholds = {0.25, 0.5, 0.75};
    for (int rep = 0; rep < 1000; ++rep) {
        const int n = 2 + static_cast<int>(rng.below(10));
        std::vector<profiles::MemorizationProfile> profs(n);
        for (int i = 0; i < n; ++i) {
            profs[i].epoch = i + 1;
            // quantized areas force occasional exact ties
            profs[i].area = std::floor(rng.uniform() * 8.0) / 8.0;
        }
        auto res = profiles::align_epochs(profs, thresholds);
        for (size_t t = 0; t < thresholds.size(); ++t) {
            int want = 0;
            for (int i = 1; i < n; ++i)
                if (std::fabs(profs[i].area - thresholds[t]) <
                    std::fabs(profs[want].area - thresholds[t]))
                    want = i;  // strict <: earliest epoch wins ties
            if (res.entries[t].epoch != profs[want].epoch) {
                detail = "mismatch vs linear scan at instance " + std::to_string(rep);
                return false;
            }
        }
    }
    detail = "1000 random instances match the linear-scan oracle";
    return true;
}

// ----------------------------------------------------------- criteria 6 to 9

struct DeskRun {
    std::string root;
    // (paradigm, kind, epoch) -> (mad, sup)
    std::map<std::string, std::pair<double, double>> deviation;
    // (paradigm, kind, threshold) -> (epoch, area)
    std::map<std::string, std::pair<int, double>> alignment;
    // paradigm -> p~ values at the averaged 0.5-aligned epoch
    std::map<std::string, std::vector<double>> scatter;
};

std::string key3(const std::string& a, const std::string& b, const std::string& c) {
    return a + "|" + b + "|" + c;
}

cli::ExperimentConfig desk_config(const std::string& root) {
    cli::ExperimentConfig cfg;
    cfg.output_root = root;
    cfg.master_seed = 2024;
    const char* data_root = std::getenv("MEMTRACE_DATA");
    if (data_root) {
        cfg.dataset.kind = "cifar10";
        cfg.dataset.train_subset = 4000;
    } else {
        // no CIFAR-10 archive in this environment: procedural 10-class corpus
        cfg.dataset.kind = "synthetic";
        cfg.dataset.size = 4000;
        cfg.dataset.seed = 6;
    }
    cfg.eval.subset_size = 1000;
    cfg.eval.batch = 20;
    cfg.eval.augmentations = 10;
    for (const auto kind :
         {paradigms::ParadigmKind::supervised, paradigms::ParadigmKind::random_labels_noaug,
          paradigms::ParadigmKind::simclr}) {
        auto p = paradigms::default_config(kind);
        p.ensemble_size = 10;
        p.eval_augmentations = 10;
        // desk-scale recipe: the reference lr of 3e-4 targets ResNet-18;
        // SmallConvNet needs a larger step and smaller batches to memorize
        // within the same epoch budget
        p.batch_size = 64;
        switch (kind) {
            case paradigms::ParadigmKind::supervised: p.lr = 0.015; break;
            case paradigms::ParadigmKind::simclr: p.lr = 0.001; break;
            default: p.lr = 0.05; break;
        }
        // denser checkpoints than the default power-of-two grid so the
        // area-under-curve alignment can land close to each target
        p.checkpoint_epochs.clear();
        const int step = kind == paradigms::ParadigmKind::supervised ? 2
                         : kind == paradigms::ParadigmKind::simclr  ? 8
                                                                    : 5;
        for (int e = 1; e <= p.t_max; ++e) {
            if (e <= 4 || e % step == 0) p.checkpoint_epochs.push_back(e);
        }
        p.master_seed =
            stable_hash({cfg.master_seed, diffcore::fnv1a64(to_string(kind))});
        cfg.paradigms.push_back(p);
    }
    cfg.introspect.layers = {0};
    cfg.introspect.channels = {0, 1};
    cfg.introspect.steps = 50;
    return cfg;
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw RunError("cannot open " + path);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, ',')) fields.push_back(f);
        rows.push_back(std::move(fields));
    }
    return rows;
}

DeskRun load_desk_run(const std::string& root) {
    DeskRun run;
    run.root = root;
    for (const auto& r : read_csv(root + "/analysis/deviation.csv"))
        run.deviation[key3(r[0], r[1], r[2])] = {std::stod(r[3]), std::stod(r[4])};
    for (const auto& r : read_csv(root + "/analysis/alignment.csv"))
        run.alignment[key3(r[0], r[1], r[2])] = {std::stoi(r[3]), std::stod(r[4])};
    for (const auto& r : read_csv(root + "/analysis/scatter.csv"))
        run.scatter[r[0]].push_back(std::stod(r[4]));
    return run;
}

double mad_at_aligned(const DeskRun& run, const std::string& paradigm,
                      const std::string& kind) {
    const int epoch = run.alignment.at(key3(paradigm, "averaged", "0.5")).first;
    return run.deviation.at(key3(paradigm, kind, std::to_string(epoch))).first;
}

bool criterion6(const DeskRun& run, std::string& detail) {
    const double sup = mad_at_aligned(run, "supervised", "averaged");
    const double sim = mad_at_aligned(run, "simclr", "averaged");
    const double sim_fixed = mad_at_aligned(run, "simclr", "fixed");
    const double rl = mad_at_aligned(run, "random_labels_noaug", "averaged");
    const bool a = sup > sim;
    const bool b = sim_fixed > 2.0 * sim;
    const bool c = rl >= 0.5 * sim && rl <= 1.5 * sim;
    std::ostringstream os;
    os << "mad@area0.5: supervised=" << sup << " simclr=" << sim
       << " simclr_fixed=" << sim_fixed << " random_labels=" << rl << "; (a) "
       << (a ? "ok" : "VIOLATED") << " (b) " << (b ? "ok" : "VIOLATED") << " (c) "
       << (c ? "ok" : "VIOLATED");
    detail = os.str();
    return a && b && c;
}

bool criterion7(const DeskRun& run, std::string& detail) {
    auto extreme_fraction = [&](const std::string& paradigm) {
        const auto& v = run.scatter.at(paradigm);
        size_t n = 0;
        for (double x : v)
            if (x <= 0.1 || x >= 0.9) ++n;
        return static_cast<double>(n) / static_cast<double>(v.size());
    };
    const double sim = extreme_fraction("simclr");
    const double sup = extreme_fraction("supervised");
    std::ostringstream os;
    os << "extreme p~ fraction at area-0.5 epoch: simclr=" << sim
       << " supervised=" << sup << " (need simclr > supervised)";
    detail = os.str();
    return sim > sup;
}

bool criterion8(const cli::ExperimentConfig& base, const DeskRun& first,
                std::string& detail) {
    auto cfg = base;
    cfg.output_root = first.root + "_rerun";
    fs::remove_all(cfg.output_root);
    cli::run_experiment(cfg, cli::StageSet::all(), 1);
    size_t compared = 0;
    for (const auto& e : fs::recursive_directory_iterator(first.root)) {
        if (!e.is_regular_file()) continue;
        const std::string ext = e.path().extension().string();
        if (ext != ".memp" && ext != ".csv") continue;  // manifests embed the root
        const auto rel = fs::relative(e.path(), first.root);
        std::ifstream a(e.path(), std::ios::binary);
        std::ifstream b(cfg.output_root / rel, std::ios::binary);
        if (!b) {
            detail = "rerun missing artifact " + rel.string();
            return false;
        }
        const std::string ba((std::istreambuf_iterator<char>(a)), {});
        const std::string bb((std::istreambuf_iterator<char>(b)), {});
        if (ba != bb) {
            detail = "artifact differs between executions: " + rel.string();
            return false;
        }
        ++compared;
    }
    detail = std::to_string(compared) + " indicator/CSV artifacts bit-identical";
    return compared > 0;
}

bool criterion9(const DeskRun& run, std::string& detail) {
    // the epochs criteria 6 and 7 actually select are the averaged
    // area-0.5 alignments; verify each sits close to its target area
    bool ok = true;
    double worst = 0;
    std::string worst_key;
    for (const auto& paradigm : {"supervised", "random_labels_noaug", "simclr"}) {
        const auto& [epoch, area] = run.alignment.at(key3(paradigm, "averaged", "0.5"));
        const double err = std::fabs(area - 0.5);
        if (err > worst) {
            worst = err;
            worst_key = std::string(paradigm) + "@epoch" + std::to_string(epoch);
        }
        if (err > 0.08) ok = false;
    }
    std::ostringstream os;
    os << "max |area - 0.5| at selected epochs = " << worst << " (" << worst_key
       << "), limit 0.08";
    detail = os.str();
    return ok;
}

}  // namespace

int main(int argc, char** argv) {
    const bool fast_only = argc > 1 && std::string(argv[1]) == "--fast";

    run_criterion(1, "layer gradients vs finite differences", criterion1);
    run_criterion(2, "loss oracles", criterion2);
    run_criterion(3, "binomial null calibration", criterion3);
    run_criterion(4, "estimator identities", criterion4);
    run_criterion(5, "epoch alignment vs linear scan", criterion5);

    if (fast_only) {
        std::cout << "criteria 6-9 skipped (--fast)" << std::endl;
        return g_failures;
    }

    const std::string root = "acceptance_desk";
    const auto cfg = desk_config(root);
    DeskRun run;
    bool pipeline_ok = false;
    {
        const auto t0 = std::chrono::steady_clock::now();
        std::string detail;
        try {
            cli::run_experiment(cfg, cli::StageSet::all(), 1);
            run = load_desk_run(root);
            pipeline_ok = true;
            detail = "desk-scale pipeline complete (" + cfg.dataset.kind + " data)";
        } catch (const std::exception& e) {
            detail = std::string("pipeline failed: ") + e.what();
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                .count();
        std::cout << "INFO desk-scale run: " << detail << " [" << std::fixed
                  << std::setprecision(1) << secs << "s]" << std::endl;
    }
    if (!pipeline_ok) {
        for (int id : {6, 7, 8, 9})
            report(id, "desk-scale reproduction", false, "pipeline run failed", 0.0);
        return g_failures;
    }

    run_criterion(6, "profile deviation contrasts (Fig. 2 analogue)",
                  [&](std::string& d) { return criterion6(run, d); });
    run_criterion(7, "extreme fixed-pair probabilities (Fig. 4 analogue)",
                  [&](std::string& d) { return criterion7(run, d); });
    run_criterion(8, "pipeline determinism across executions",
                  [&](std::string& d) { return criterion8(cfg, run, d); });
    run_criterion(9, "alignment fidelity",
                  [&](std::string& d) { return criterion9(run, d); });
    return g_failures;
}
