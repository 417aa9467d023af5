#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "cacs/error.hpp"
#include "cacs/rng.hpp"
#include "cacs/tensornet.hpp"

using namespace cacs;

namespace {

Tensor randn(Rng& rng, int n, int c, int h, int w, double sigma = 1.0) {
    Tensor t(n, c, h, w);
    for (auto& v : t.v) v = rng.normal(0.0, sigma);
    return t;
}

// Central-difference derivative of `loss` w.r.t. one store entry value.
template <typename LossFn>
double numeric_grad(ParamStore& store, int entry, size_t index, LossFn loss, double h = 1e-6) {
    double saved = store[entry].value.v[index];
    store[entry].value.v[index] = saved + h;
    double lp = loss();
    store[entry].value.v[index] = saved - h;
    double lm = loss();
    store[entry].value.v[index] = saved;
    return (lp - lm) / (2.0 * h);
}

}  // namespace

TEST_CASE("conv3x3: identity kernel reproduces the input") {
    Rng rng(1);
    ParamStore store;
    Tensor w(1, 1, 3, 3, 0.0);
    w.at(0, 0, 1, 1) = 1.0;
    int w_id = store.add("w", w);
    int b_id = store.add("b", Tensor::vec(1, 0.0));
    Conv3x3 conv(1, 1, w_id, b_id);
    Tensor x = randn(rng, 2, 1, 5, 5);
    Tensor y = conv.forward(store, x);
    for (size_t i = 0; i < x.size(); ++i) CHECK(y.v[i] == doctest::Approx(x.v[i]));
}

TEST_CASE("conv3x3: all-ones kernel on all-ones input counts the neighborhood") {
    ParamStore store;
    int w_id = store.add("w", Tensor(1, 1, 3, 3, 1.0));
    int b_id = store.add("b", Tensor::vec(1, 0.0));
    Conv3x3 conv(1, 1, w_id, b_id);
    Tensor x(1, 1, 3, 3, 1.0);
    Tensor y = conv.forward(store, x);
    CHECK(y.at(0, 0, 1, 1) == doctest::Approx(9.0));
    CHECK(y.at(0, 0, 0, 0) == doctest::Approx(4.0));
    CHECK(y.at(0, 0, 0, 2) == doctest::Approx(4.0));
    CHECK(y.at(0, 0, 2, 0) == doctest::Approx(4.0));
    CHECK(y.at(0, 0, 2, 2) == doctest::Approx(4.0));
    CHECK(y.at(0, 0, 0, 1) == doctest::Approx(6.0));
}

TEST_CASE("conv3x3: zero weights give a constant-bias output") {
    ParamStore store;
    int w_id = store.add("w", Tensor(2, 1, 3, 3, 0.0));
    int b_id = store.add("b", Tensor::vec(2, 0.0));
    store[b_id].value.v = {3.5, -1.25};
    Conv3x3 conv(1, 2, w_id, b_id);
    Rng rng(2);
    Tensor x = randn(rng, 1, 1, 4, 4);
    Tensor y = conv.forward(store, x);
    for (int i = 0; i < 16; ++i) {
        CHECK(y.v[static_cast<size_t>(i)] == doctest::Approx(3.5));
        CHECK(y.v[static_cast<size_t>(16 + i)] == doctest::Approx(-1.25));
    }
}

TEST_CASE("conv3x3 gradients match finite differences to 1e-6") {
    Rng rng(3);
    ParamStore store;
    int w_id = store.add("w", randn(rng, 2, 3, 3, 3, 0.3));
    int b_id = store.add("b", randn(rng, 2, 1, 1, 1, 0.3));
    Conv3x3 conv(3, 2, w_id, b_id);
    Tensor x = randn(rng, 2, 3, 6, 6);
    Tensor t = randn(rng, 2, 2, 6, 6);

    auto loss = [&]() {
        Tensor y = conv.forward(store, x);
        double s = 0.0;
        for (size_t i = 0; i < y.size(); ++i) s += 0.5 * (y.v[i] - t.v[i]) * (y.v[i] - t.v[i]);
        return s;
    };

    // Analytic gradients.
    Tensor y = conv.forward(store, x);
    Tensor gy(2, 2, 6, 6);
    for (size_t i = 0; i < y.size(); ++i) gy.v[i] = y.v[i] - t.v[i];
    store.zero_grads();
    Tensor gx = conv.backward(store, gy);

    Rng pick(4);
    for (int k = 0; k < 30; ++k) {
        int entry = pick.uniform() < 0.7 ? w_id : b_id;
        size_t idx = static_cast<size_t>(
            pick.uniform_int(0, static_cast<int64_t>(store[entry].value.size()) - 1));
        double num = numeric_grad(store, entry, idx, loss);
        double ana = store[entry].grad.v[idx];
        CHECK(std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-8}) < 1e-6);
    }

    // Input gradient via direct perturbation.
    for (int k = 0; k < 10; ++k) {
        size_t idx = static_cast<size_t>(pick.uniform_int(0, static_cast<int64_t>(x.size()) - 1));
        double saved = x.v[idx];
        x.v[idx] = saved + 1e-6;
        double lp = loss();
        x.v[idx] = saved - 1e-6;
        double lm = loss();
        x.v[idx] = saved;
        double num = (lp - lm) / 2e-6;
        CHECK(std::abs(gx.v[idx] - num) / std::max({std::abs(gx.v[idx]), std::abs(num), 1e-8}) <
              1e-6);
    }
}

TEST_CASE("maxpool2x2 picks window maxima and routes gradients") {
    Tensor x(1, 1, 2, 2);
    x.v = {1, 2, 3, 4};
    MaxPool2x2 pool;
    Tensor y = pool.forward(x);
    REQUIRE(y.size() == 1);
    CHECK(y.v[0] == 4.0);

    Tensor gy(1, 1, 1, 1, 1.0);
    Tensor gx = pool.backward(gy);
    CHECK(gx.v == std::vector<double>{0, 0, 0, 1});
}

TEST_CASE("maxpool2x2 tie-break goes to the first element in scan order") {
    Tensor x(1, 1, 2, 2, 7.0);
    MaxPool2x2 pool;
    Tensor y = pool.forward(x);
    CHECK(y.v[0] == 7.0);
    Tensor gy(1, 1, 1, 1, 2.5);
    Tensor gx = pool.backward(gy);
    CHECK(gx.v == std::vector<double>{2.5, 0, 0, 0});
}

TEST_CASE("maxpool2x2 drops odd trailing rows and columns") {
    Rng rng(5);
    Tensor x = randn(rng, 1, 1, 5, 7);
    MaxPool2x2 pool;
    Tensor y = pool.forward(x);
    CHECK(y.h == 2);
    CHECK(y.w == 3);
    // constant input stays constant
    Tensor c(1, 2, 4, 4, 3.0);
    Tensor yc = pool.forward(c);
    for (double v : yc.v) CHECK(v == 3.0);
}

namespace {

BatchNorm make_bn(ParamStore& store, int ch, bool spatial) {
    int g = store.add("gamma", Tensor::vec(ch, 1.0));
    int b = store.add("beta", Tensor::vec(ch, 0.0));
    int rm = store.add("rm", Tensor::vec(ch, 0.0), false);
    int rv = store.add("rv", Tensor::vec(ch, 1.0), false);
    return BatchNorm(ch, spatial, g, b, rm, rv);
}

}  // namespace

TEST_CASE("batch_norm normalizes a {0,2} batch to approximately {-1,+1}") {
    ParamStore store;
    BatchNorm bn = make_bn(store, 1, false);
    Tensor x(2, 1, 1, 1);
    x.v = {0.0, 2.0};
    Tensor y = bn.forward(store, x, true);
    double expected = 1.0 / std::sqrt(1.0 + 1e-5);  // biased var = 1
    CHECK(y.v[0] == doctest::Approx(-expected).epsilon(1e-12));
    CHECK(y.v[1] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("batch_norm inference with matching running stats equals train output") {
    ParamStore store;
    BatchNorm bn = make_bn(store, 1, false);
    Tensor x(2, 1, 1, 1);
    x.v = {0.0, 2.0};
    Tensor y_train = bn.forward(store, x, true);
    // Running stats use the convention: mean as-is, biased variance here to
    // make the comparison exact.
    store[2].value.v[0] = 1.0;  // rm = batch mean
    store[3].value.v[0] = 1.0;  // rv = biased batch variance
    Tensor y_infer = bn.forward(store, x, false);
    for (size_t i = 0; i < 2; ++i) CHECK(y_infer.v[i] == doctest::Approx(y_train.v[i]));
}

TEST_CASE("batch_norm: constant channel collapses to beta") {
    ParamStore store;
    BatchNorm bn = make_bn(store, 1, true);
    store[1].value.v[0] = 0.75;  // beta
    Tensor x(3, 1, 2, 2, 42.0);
    Tensor y = bn.forward(store, x, true);
    for (double v : y.v) CHECK(v == doctest::Approx(0.75).epsilon(1e-9));
}

TEST_CASE("batch_norm rejects batch size 1 in train mode") {
    ParamStore store;
    BatchNorm bn = make_bn(store, 1, false);
    Tensor x(1, 1, 1, 1, 3.0);
    CHECK_THROWS_AS(bn.forward(store, x, true), Error);
    CHECK_NOTHROW(bn.forward(store, x, false));
}

TEST_CASE("batch_norm running stats update with momentum 0.9 and unbiased variance") {
    ParamStore store;
    BatchNorm bn = make_bn(store, 1, false);
    Tensor x(2, 1, 1, 1);
    x.v = {0.0, 2.0};
    bn.forward(store, x, true);
    CHECK(store[2].value.v[0] == doctest::Approx(0.1 * 1.0));        // mean 1
    CHECK(store[3].value.v[0] == doctest::Approx(0.9 + 0.1 * 2.0));  // unbiased var 2
}

TEST_CASE("elu values and derivative continuity") {
    Elu elu(1.0);
    Tensor x(1, 1, 1, 3);
    x.v = {5.0, -1.0, 0.0};
    Tensor y = elu.forward(x);
    CHECK(y.v[0] == 5.0);
    CHECK(y.v[1] == doctest::Approx(std::exp(-1.0) - 1.0).epsilon(1e-12));
    CHECK(y.v[2] == 0.0);

    Tensor gy(1, 1, 1, 3, 1.0);
    Tensor gx = elu.backward(gy);
    CHECK(gx.v[0] == 1.0);
    CHECK(gx.v[1] == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));

    // Left and right derivative limits agree at 0 for alpha = 1.
    Tensor eps_in(1, 1, 1, 2);
    eps_in.v = {-1e-12, 1e-12};
    elu.forward(eps_in);
    Tensor gy2(1, 1, 1, 2, 1.0);
    Tensor gx2 = elu.backward(gy2);
    CHECK(gx2.v[0] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(gx2.v[1] == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("elu output is bounded below by -alpha") {
    Rng rng(6);
    Elu elu(1.0);
    Tensor x = randn(rng, 1, 1, 10, 10, 30.0);
    Tensor y = elu.forward(x);
    for (double v : y.v) CHECK(v > -1.0 - 1e-12);
}

TEST_CASE("dense layer affine behavior") {
    ParamStore store;
    int w_id = store.add("w", Tensor::mat(3, 2, 0.0));
    int b_id = store.add("b", Tensor::vec(3, 0.0));
    auto& w = store[w_id].value;
    // rows: [1,0], [0,1], [1,1]
    w.at(0, 0, 0, 0) = 1.0;
    w.at(1, 1, 0, 0) = 1.0;
    w.at(2, 0, 0, 0) = 1.0;
    w.at(2, 1, 0, 0) = 1.0;
    Dense dense(2, 3, w_id, b_id);
    Tensor x(1, 2, 1, 1);
    x.v = {1.0, 2.0};
    Tensor y = dense.forward(store, x);
    CHECK(y.v == std::vector<double>{1.0, 2.0, 3.0});

    // zero weights, bias b
    ParamStore store2;
    int w2 = store2.add("w", Tensor::mat(2, 2, 0.0));
    int b2 = store2.add("b", Tensor::vec(2, 0.0));
    store2[b2].value.v = {4.0, -2.0};
    Dense dense2(2, 2, w2, b2);
    Tensor y2 = dense2.forward(store2, x);
    CHECK(y2.v == std::vector<double>{4.0, -2.0});

    // identity weights, zero bias
    ParamStore store3;
    int w3 = store3.add("w", Tensor::mat(2, 2, 0.0));
    int b3 = store3.add("b", Tensor::vec(2, 0.0));
    store3[w3].value.at(0, 0, 0, 0) = 1.0;
    store3[w3].value.at(1, 1, 0, 0) = 1.0;
    Dense dense3(2, 2, w3, b3);
    Tensor y3 = dense3.forward(store3, x);
    CHECK(y3.v == x.v);
}

TEST_CASE("dense gradients match finite differences to 1e-6 (quadratic loss)") {
    Rng rng(7);
    ParamStore store;
    int w_id = store.add("w", randn(rng, 4, 5, 1, 1, 0.5));
    int b_id = store.add("b", randn(rng, 4, 1, 1, 1, 0.5));
    Dense dense(5, 4, w_id, b_id);
    Tensor x = randn(rng, 3, 5, 1, 1);
    Tensor t = randn(rng, 3, 4, 1, 1);

    auto loss = [&]() {
        Tensor y = dense.forward(store, x);
        double s = 0.0;
        for (size_t i = 0; i < y.size(); ++i) s += 0.5 * (y.v[i] - t.v[i]) * (y.v[i] - t.v[i]);
        return s;
    };
    Tensor y = dense.forward(store, x);
    Tensor gy(3, 4, 1, 1);
    for (size_t i = 0; i < y.size(); ++i) gy.v[i] = y.v[i] - t.v[i];
    store.zero_grads();
    dense.backward(store, gy);

    Rng pick(8);
    for (int k = 0; k < 25; ++k) {
        int entry = pick.uniform() < 0.8 ? w_id : b_id;
        size_t idx = static_cast<size_t>(
            pick.uniform_int(0, static_cast<int64_t>(store[entry].value.size()) - 1));
        double num = numeric_grad(store, entry, idx, loss);
        double ana = store[entry].grad.v[idx];
        CHECK(std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-8}) < 1e-6);
    }
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    AdamConfig cfg;
    Tensor p = Tensor::vec(3, 1.5);
    Tensor g = Tensor::vec(3, 0.0);
    Tensor m = Tensor::vec(3, 0.0), v = Tensor::vec(3, 0.0);
    adam_step(p, g, m, v, 1, cfg);
    for (double x : p.v) CHECK(x == 1.5);
}

TEST_CASE("adam: first step approx -lr * sign(gradient)") {
    AdamConfig cfg;
    Tensor p = Tensor::vec(2, 0.0);
    Tensor g = Tensor::vec(2);
    g.v = {0.37, -12.0};
    Tensor m = Tensor::vec(2, 0.0), v = Tensor::vec(2, 0.0);
    adam_step(p, g, m, v, 1, cfg);
    CHECK(p.v[0] == doctest::Approx(-cfg.lr).epsilon(1e-6));
    CHECK(p.v[1] == doctest::Approx(cfg.lr).epsilon(1e-6));
}

TEST_CASE("adam: constant gradient shrinks the update magnitude") {
    AdamConfig cfg;
    Tensor p = Tensor::vec(1, 0.0);
    Tensor g = Tensor::vec(1, 2.0);
    Tensor m = Tensor::vec(1, 0.0), v = Tensor::vec(1, 0.0);
    adam_step(p, g, m, v, 1, cfg);
    double d1 = std::abs(p.v[0]);
    double prev = p.v[0];
    adam_step(p, g, m, v, 2, cfg);
    double d2 = std::abs(p.v[0] - prev);
    CHECK(d2 <= d1 + 1e-15);
}

TEST_CASE("adam rejects non-finite gradients") {
    AdamConfig cfg;
    Tensor p = Tensor::vec(1, 0.0);
    Tensor g = Tensor::vec(1, std::numeric_limits<double>::quiet_NaN());
    Tensor m = Tensor::vec(1, 0.0), v = Tensor::vec(1, 0.0);
    CHECK_THROWS_AS(adam_step(p, g, m, v, 1, cfg), Error);
}

TEST_CASE("non-finite activations trip an error") {
    ParamStore store;
    int w_id = store.add("w", Tensor(1, 1, 3, 3, 1.0));
    int b_id = store.add("b", Tensor::vec(1, 0.0));
    Conv3x3 conv(1, 1, w_id, b_id);
    Tensor x(1, 1, 2, 2, 1.0);
    x.v[2] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(conv.forward(store, x), Error);
}

namespace {

ConvNetConfig tiny_config(bool shared) {
    ConvNetConfig cfg;
    cfg.input_size = 16;
    cfg.conv_channels = shared ? std::vector<int>{6, 6, 6} : std::vector<int>{4, 6, 6};
    cfg.shared_kernels = shared;
    cfg.dense_widths = {8};
    cfg.aux_features = 2;
    return cfg;
}

}  // namespace

TEST_CASE("regressor config: six pooled conv stages, two dense layers, one output") {
    auto cfg = ConvNetConfig::regressor(64, false);
    CHECK(cfg.stages() == 6);
    CHECK(cfg.conv_channels == std::vector<int>{16, 32, 32, 64, 64, 64});
    CHECK(cfg.dense_widths.size() == 2);
    CHECK(cfg.aux_features == 3);
    CHECK(cfg.final_spatial() == 1);  // 64 -> 1 through six 2x2 pools
    CHECK(cfg.flatten_width() == 64);

    auto shared = ConvNetConfig::regressor(256, true);
    CHECK(shared.conv_channels == std::vector<int>(6, 32));
    CHECK(shared.final_spatial() == 4);  // paper-scale inputs stay feasible

    ConvNetConfig bad = cfg;
    bad.shared_kernels = true;  // mixed widths cannot share one bank
    CHECK_THROWS_AS(bad.validate(), Error);

    ConvNetConfig tiny = cfg;
    tiny.input_size = 32;  // 32 / 2^6 < 1
    CHECK_THROWS_AS(tiny.validate(), Error);
}

TEST_CASE("full network finite-difference check stays below 1e-4") {
    ConvNet net(tiny_config(false), 99);
    Rng rng(10);
    Tensor x = randn(rng, 4, 1, 16, 16, 0.5);
    Tensor aux = randn(rng, 4, 2, 1, 1, 0.1);
    std::vector<double> targets = {0.3, -0.2, 1.0, 0.0};
    auto result = finite_diff_check(net, x, aux, targets, 220, 1234);
    CHECK(result.checked >= 200);
    CHECK(result.max_rel_error < 1e-4);
}

TEST_CASE("degenerate zero model keeps the checker finite") {
    ConvNet net(tiny_config(false), 99);
    for (auto& e : net.params().entries())
        if (e.trainable) e.value.fill(0.0);
    Tensor x(2, 1, 16, 16, 0.0);
    Tensor aux(2, 2, 1, 1, 0.0);
    std::vector<double> targets = {0.0, 0.0};
    auto result = finite_diff_check(net, x, aux, targets, 50, 77);
    CHECK(std::isfinite(result.max_rel_error));
}

TEST_CASE("shared kernels: one bank drives stages 2..k and shrinks the parameter count") {
    ConvNet shared(tiny_config(true), 5);
    ConvNet separate([&] {
        ConvNetConfig cfg = tiny_config(true);
        cfg.shared_kernels = false;
        return cfg;
    }(), 5);

    CHECK(shared.trainable_parameter_count() < separate.trainable_parameter_count());

    // Mutating the shared bank changes the forward output; the bank appears
    // once in the store.
    int bank = -1, bank_count = 0;
    for (size_t i = 0; i < shared.params().entries().size(); ++i) {
        if (shared.params().entries()[i].name == "conv_shared.w") {
            bank = static_cast<int>(i);
            ++bank_count;
        }
    }
    REQUIRE(bank >= 0);
    CHECK(bank_count == 1);

    Rng rng(11);
    Tensor x = randn(rng, 2, 1, 16, 16, 0.5);
    Tensor aux = randn(rng, 2, 2, 1, 1, 0.1);
    Tensor before = shared.forward(x, aux, false);
    for (auto& v : shared.params()[bank].value.v) v += 0.05;
    Tensor after = shared.forward(x, aux, false);
    bool changed = false;
    for (size_t i = 0; i < before.size(); ++i)
        if (before.v[i] != after.v[i]) changed = true;
    CHECK(changed);
}

TEST_CASE("forward is deterministic and reinitialization with one seed matches") {
    ConvNet a(tiny_config(false), 42);
    ConvNet b(tiny_config(false), 42);
    CHECK(a.serialize_params() == b.serialize_params());

    Rng rng(12);
    Tensor x = randn(rng, 2, 1, 16, 16, 0.5);
    Tensor aux = randn(rng, 2, 2, 1, 1, 0.1);
    Tensor y1 = a.forward(x, aux, false);
    Tensor y2 = a.forward(x, aux, false);
    CHECK(y1.v == y2.v);
}

TEST_CASE("checkpoint save/load round-trips parameters, config, and metadata") {
    auto dir = std::filesystem::temp_directory_path() / "cacs_test_net";
    std::filesystem::create_directories(dir);
    std::string path = (dir / "net.ckpt").string();

    ConvNet net(tiny_config(true), 7);
    nlohmann::json meta = {{"experiment", "ii"}, {"epoch", 3}, {"val_mae", 0.125}};
    net.save_checkpoint(path, meta);

    nlohmann::json meta_back;
    ConvNet back = ConvNet::load_checkpoint(path, &meta_back);
    CHECK(back.serialize_params() == net.serialize_params());
    CHECK(meta_back.at("experiment") == "ii");
    CHECK(meta_back.at("epoch") == 3);
    CHECK(back.config().shared_kernels == true);

    Rng rng(13);
    Tensor x = randn(rng, 2, 1, 16, 16, 0.5);
    Tensor aux = randn(rng, 2, 2, 1, 1, 0.1);
    CHECK(net.forward(x, aux, false).v == back.forward(x, aux, false).v);
}
