#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "memtrace/diffcore/checkpoint.hpp"
#include "memtrace/diffcore/network.hpp"
#include "memtrace/diffcore/optim.hpp"
#include "memtrace/rng.hpp"

using namespace memtrace;
using namespace memtrace::diffcore;

namespace {

// scalar loss L = sum_o r_o * out_o with fixed random weights, evaluated
// through a fresh state copy (train-mode batch norm mutates running stats)
double loss_value(NetworkT<double>& net, const ModelStateT<double>& state,
                  const TensorT<double>& input, const std::vector<double>& r) {
    ModelStateT<double> s = state;
    TensorT<double> out = net.forward(s, input, Mode::train);
    double l = 0;
    for (size_t i = 0; i < out.numel(); ++i) l += r[i] * out.data[i];
    return l;
}

struct FdReport {
    double max_rel = 0;
};

double rel_err(double a, double f) {
    return std::fabs(a - f) / std::max({std::fabs(a), std::fabs(f), 1e-6});
}

// central finite differences (step 1e-4, 64-bit) on every parameter entry
// and every input entry
FdReport gradient_check(const NetworkSpec& spec, const std::vector<int>& in_shape,
                        uint64_t seed) {
    NetworkT<double> net(spec);
    ModelStateT<double> state = net.init(seed);
    // perturb init so batch-norm scale is not exactly 1 everywhere
    Rng prng(stable_hash({seed, 99}));
    for (auto& [name, p] : state.params) {
        if (!is_trainable(name)) continue;
        for (auto& v : p.data) v += 0.05 * prng.normal();
    }
    TensorT<double> input(in_shape);
    Rng rng(stable_hash({seed, 1}));
    for (auto& v : input.data) v = rng.normal();

    ModelStateT<double> tmp = state;
    TensorT<double> out = net.forward(tmp, input, Mode::train);
    std::vector<double> r(out.numel());
    Rng rrng(stable_hash({seed, 2}));
    for (auto& v : r) v = rrng.normal();
    TensorT<double> dout(out.shape);
    for (size_t i = 0; i < r.size(); ++i) dout.data[i] = r[i];

    ModelStateT<double> fwd_state = state;
    net.forward(fwd_state, input, Mode::train);
    TensorT<double> dinput;
    GradMap<double> grads = net.backward(fwd_state, dout, &dinput);

    const double h = 1e-4;
    FdReport rep;
    for (auto& [name, p] : state.params) {
        if (!is_trainable(name)) continue;
        for (size_t i = 0; i < p.numel(); ++i) {
            ModelStateT<double> plus = state, minus = state;
            plus.params.at(name).data[i] += h;
            minus.params.at(name).data[i] -= h;
            double fd = (loss_value(net, plus, input, r) -
                         loss_value(net, minus, input, r)) /
                        (2 * h);
            rep.max_rel = std::max(rep.max_rel, rel_err(grads.at(name).data[i], fd));
        }
    }
    for (size_t i = 0; i < input.numel(); ++i) {
        TensorT<double> plus = input, minus = input;
        plus.data[i] += h;
        minus.data[i] -= h;
        double fd =
            (loss_value(net, state, plus, r) - loss_value(net, state, minus, r)) /
            (2 * h);
        rep.max_rel = std::max(rep.max_rel, rel_err(dinput.data[i], fd));
    }
    return rep;
}

NetworkSpec single_layer_spec(LayerDesc layer, int c, int h, int w) {
    NetworkSpec s;
    s.layers.push_back(layer);
    s.head = NoHead{};
    s.in_channels = c;
    s.in_h = h;
    s.in_w = w;
    return s;
}

}  // namespace

TEST_CASE("init is deterministic and seed-sensitive") {
    NetworkSpec spec = small_convnet(ClassifierHead{10});
    Network net(spec);
    ModelState a = net.init(7);
    ModelState b = net.init(7);
    ModelState c = net.init(8);
    REQUIRE(a.params.size() == b.params.size());
    for (auto& [name, p] : a.params) CHECK(p.data == b.params.at(name).data);
    double max_diff = 0;
    for (auto& [name, p] : a.params)
        for (size_t i = 0; i < p.numel(); ++i)
            max_diff = std::max(
                max_diff,
                static_cast<double>(std::fabs(p.data[i] - c.params.at(name).data[i])));
    CHECK(max_diff > 0);
}

TEST_CASE("conv init variance matches 2/fan_in over 1000 seeds") {
    NetworkSpec spec = single_layer_spec(ConvLayer{16, 3, 1, 1}, 3, 32, 32);
    Network net(spec);
    double sum = 0, sq = 0;
    size_t n = 0;
    for (uint64_t seed = 0; seed < 1000; ++seed) {
        ModelState st = net.init(seed);
        const auto& w = st.params.at("l0.conv.weight");
        for (float v : w.data) {
            sum += v;
            sq += static_cast<double>(v) * v;
            ++n;
        }
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    const double expected = 2.0 / 27.0;
    CHECK(std::fabs(var - expected) < 0.1 * expected);
    CHECK(std::fabs(mean) < 0.01);
}

TEST_CASE("forward: all-zero weights give exactly zero logits") {
    Network net(small_convnet(ClassifierHead{10}));
    ModelState st = net.init(3);
    for (auto& [name, p] : st.params)
        std::fill(p.data.begin(), p.data.end(), 0.0f);
    Tensor batch({4, 3, 32, 32});
    Rng rng(11);
    for (auto& v : batch.data) v = static_cast<float>(rng.uniform());
    Tensor out = net.forward(st, batch, Mode::eval);
    REQUIRE(out.shape == std::vector<int>{4, 10});
    for (float v : out.data) CHECK(v == 0.0f);
}

TEST_CASE("forward: 1x1 identity conv reproduces the input") {
    NetworkSpec spec = single_layer_spec(ConvLayer{3, 1, 1, 0}, 3, 32, 32);
    Network net(spec);
    ModelState st = net.init(0);
    auto& w = st.params.at("l0.conv.weight");  // {3,3,1,1}
    std::fill(w.data.begin(), w.data.end(), 0.0f);
    for (int c = 0; c < 3; ++c) w.data[c * 3 + c] = 1.0f;
    std::fill(st.params.at("l0.conv.bias").data.begin(),
              st.params.at("l0.conv.bias").data.end(), 0.0f);
    Tensor batch({2, 3, 32, 32});
    Rng rng(5);
    for (auto& v : batch.data) v = static_cast<float>(rng.uniform());
    Tensor out = net.forward(st, batch, Mode::eval);
    REQUIRE(out.shape == batch.shape);
    for (size_t i = 0; i < out.numel(); ++i)
        CHECK(out.data[i] == doctest::Approx(batch.data[i]).epsilon(1e-6));
}

TEST_CASE("forward determinism and input validation") {
    Network net(small_convnet(ClassifierHead{10}));
    ModelState st = net.init(21);
    Tensor batch({2, 3, 32, 32});
    Rng rng(1);
    for (auto& v : batch.data) v = static_cast<float>(rng.normal());
    ModelState s1 = st, s2 = st;
    Tensor o1 = net.forward(s1, batch, Mode::eval);
    Tensor o2 = net.forward(s2, batch, Mode::eval);
    CHECK(o1.data == o2.data);
    Tensor bad({2, 3, 16, 16});
    CHECK_THROWS_AS(net.forward(st, bad, Mode::eval), InputError);
}

TEST_CASE("backward: linear in loss scale, zero for constant loss") {
    Network net(small_convnet(ClassifierHead{10}));
    ModelState st = net.init(13);
    Tensor batch({3, 3, 32, 32});
    Rng rng(2);
    for (auto& v : batch.data) v = static_cast<float>(rng.normal());
    ModelState s1 = st;
    Tensor out = net.forward(s1, batch, Mode::train);
    Tensor dout(out.shape);
    for (auto& v : dout.data) v = static_cast<float>(rng.normal());
    auto g1 = net.backward(s1, dout);
    Tensor dout2 = dout;
    for (auto& v : dout2.data) v *= 2.0f;
    ModelState s2 = st;
    net.forward(s2, batch, Mode::train);
    auto g2 = net.backward(s2, dout2);
    for (auto& [name, g] : g1)
        for (size_t i = 0; i < g.numel(); ++i)
            CHECK(g2.at(name).data[i] == doctest::Approx(2.0f * g.data[i]).epsilon(1e-5));

    Tensor zero(out.shape);
    ModelState s3 = st;
    net.forward(s3, batch, Mode::train);
    auto g0 = net.backward(s3, zero);
    for (auto& [name, g] : g0)
        for (float v : g.data) CHECK(v == 0.0f);
}

TEST_CASE("backward without recorded forward is a usage error") {
    Network net(small_convnet(ClassifierHead{10}));
    ModelState st = net.init(1);
    Tensor dout({1, 10});
    CHECK_THROWS_AS(net.backward(st, dout), UsageError);
}

TEST_CASE("gradient check: every layer type vs central finite differences") {
    struct Case {
        const char* name;
        NetworkSpec spec;
        std::vector<int> in_shape;
    };
    std::vector<Case> cases;
    cases.push_back({"conv", single_layer_spec(ConvLayer{3, 3, 1, 1}, 2, 4, 4),
                     {2, 2, 4, 4}});
    cases.push_back({"conv_stride2", single_layer_spec(ConvLayer{2, 3, 2, 1}, 2, 5, 5),
                     {2, 2, 5, 5}});
    cases.push_back({"affine", single_layer_spec(AffineLayer{5}, 2, 4, 4),
                     {2, 2, 4, 4}});
    cases.push_back({"relu", single_layer_spec(ReluLayer{}, 2, 4, 4), {2, 2, 4, 4}});
    cases.push_back({"batchnorm", single_layer_spec(BatchNormLayer{}, 3, 4, 4),
                     {2, 3, 4, 4}});
    cases.push_back({"maxpool", single_layer_spec(MaxPoolLayer{2}, 2, 4, 4),
                     {2, 2, 4, 4}});
    cases.push_back({"gap", single_layer_spec(GlobalAvgPoolLayer{}, 2, 4, 4),
                     {2, 2, 4, 4}});
    // full stack including heads
    cases.push_back({"small_convnet_classifier", small_convnet(ClassifierHead{4}),
                     {2, 3, 32, 32}});
    for (auto& c : cases) {
        if (std::string(c.name) == "small_convnet_classifier") {
            // full net FD over all parameters is too slow; check a reduced stack
            NetworkSpec s;
            s.layers = {ConvLayer{4, 3, 1, 1}, BatchNormLayer{}, ReluLayer{},
                        MaxPoolLayer{2}, GlobalAvgPoolLayer{}, AffineLayer{6}};
            s.head = ProjectionHead{5, 4};
            s.encoder_output_dim = 6;
            s.in_channels = 2;
            s.in_h = 4;
            s.in_w = 4;
            c.spec = s;
            c.in_shape = {3, 2, 4, 4};
        }
        FdReport rep = gradient_check(c.spec, c.in_shape, 42);
        INFO("layer case: " << c.name << " max_rel=" << rep.max_rel);
        CHECK(rep.max_rel < 1e-3);
    }
}

TEST_CASE("sgd momentum reference values") {
    ModelStateT<double> m;
    m.params["w"] = TensorT<double>({1});
    OptimizerStateT<double> opt;
    opt.kind = OptimizerKind::sgd_momentum;
    opt.weight_decay = 0;

    SUBCASE("m=0 single step") {
        opt.momentum = 0;
        m.params.at("w").data[0] = 1.0;
        GradMap<double> g;
        g["w"] = TensorT<double>({1});
        g.at("w").data[0] = 0.5;
        sgd_momentum_step(opt, m, g, 0.1);
        CHECK(m.params.at("w").data[0] == doctest::Approx(0.95).epsilon(1e-12));
    }
    SUBCASE("m=0.9 two steps") {
        opt.momentum = 0.9;
        m.params.at("w").data[0] = 0.0;
        GradMap<double> g;
        g["w"] = TensorT<double>({1});
        g.at("w").data[0] = 1.0;
        sgd_momentum_step(opt, m, g, 0.1);
        sgd_momentum_step(opt, m, g, 0.1);
        CHECK(m.params.at("w").data[0] == doctest::Approx(-0.29).epsilon(1e-12));
    }
    SUBCASE("zero gradient is a no-op") {
        opt.momentum = 0.9;
        m.params.at("w").data[0] = 0.7;
        GradMap<double> g;
        g["w"] = TensorT<double>({1});
        sgd_momentum_step(opt, m, g, 0.1);
        CHECK(m.params.at("w").data[0] == 0.7);
    }
}

TEST_CASE("adam reference values") {
    auto fresh = [] {
        ModelStateT<double> m;
        m.params["w"] = TensorT<double>({1});
        OptimizerStateT<double> opt;
        opt.kind = OptimizerKind::adam;
        opt.weight_decay = 0;
        return std::pair{m, opt};
    };
    SUBCASE("zero gradient, zero weight: no change") {
        auto [m, opt] = fresh();
        GradMap<double> g;
        g["w"] = TensorT<double>({1});
        adam_step(opt, m, g, 3e-4);
        CHECK(m.params.at("w").data[0] == 0.0);
    }
    SUBCASE("first step moves by ~lr*sign(g)") {
        auto [m, opt] = fresh();
        GradMap<double> g;
        g["w"] = TensorT<double>({1});
        g.at("w").data[0] = 1.0;
        adam_step(opt, m, g, 3e-4);
        CHECK(std::fabs(m.params.at("w").data[0] - (-3e-4)) < 1e-7);
    }
    SUBCASE("odd symmetry in g") {
        auto [mp, optp] = fresh();
        auto [mn, optn] = fresh();
        GradMap<double> gp, gn;
        gp["w"] = TensorT<double>({1});
        gn["w"] = TensorT<double>({1});
        gp.at("w").data[0] = 0.37;
        gn.at("w").data[0] = -0.37;
        adam_step(optp, mp, gp, 1e-3);
        adam_step(optn, mn, gn, 1e-3);
        CHECK(mp.params.at("w").data[0] ==
              doctest::Approx(-mn.params.at("w").data[0]).epsilon(1e-12));
    }
}

TEST_CASE("cosine schedule endpoints and midpoint") {
    ScheduleConfig cfg{3e-4, 100};
    CHECK(cosine_lr(0, cfg) == 3e-4);
    CHECK(cosine_lr(100, cfg) == 0.0);
    CHECK(cosine_lr(50, cfg) == doctest::Approx(1.5e-4).epsilon(1e-12));
    CHECK_THROWS_AS(cosine_lr(101, cfg), RangeError);
}

TEST_CASE("checkpoint round trip is bit exact") {
    Network net(small_convnet(ProjectionHead{128, 64}));
    ModelState st = net.init(99);
    const std::string path = "test_ckpt.ck";
    save_checkpoint(st, path);
    ModelState back = load_checkpoint(path);
    REQUIRE(back.params.size() == st.params.size());
    for (auto& [name, p] : st.params) {
        CHECK(back.params.at(name).shape == p.shape);
        CHECK(back.params.at(name).data == p.data);
    }
    std::filesystem::remove(path);
}

TEST_CASE("invalid spec raises configuration errors") {
    NetworkSpec s;
    s.layers = {MaxPoolLayer{2}};
    s.in_channels = 3;
    s.in_h = 5;
    s.in_w = 5;  // not divisible
    CHECK_THROWS_AS(Network{s}, ConfigError);

    NetworkSpec s2 = small_convnet(ClassifierHead{10});
    s2.encoder_output_dim = 64;  // SmallConvNet encoder is 128-d
    CHECK_THROWS_AS(Network{s2}, ConfigError);
}
