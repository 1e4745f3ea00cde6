#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "vkcc/checkpoint.hpp"
#include "vkcc/gradcheck.hpp"
#include "vkcc/training.hpp"

using vkcc::CascadeModel;
using vkcc::Illuminant;
using vkcc::Tensor;

namespace {

Tensor rand_tensor(Tensor::Shape shape, vkcc::Rng& rng, double lo, double hi,
                   bool requires_grad = true) {
    const Eigen::Index n = Tensor::shape_size(shape);
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = vkcc::uniform_double(rng, lo, hi);
    return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// Rows of random unit vectors with strictly positive components.
Tensor unit_label_rows(Eigen::Index n, vkcc::Rng& rng) {
    std::vector<double> v(static_cast<std::size_t>(n) * 3);
    for (Eigen::Index r = 0; r < n; ++r) {
        Eigen::Vector3d u;
        for (int c = 0; c < 3; ++c) u[c] = vkcc::uniform_double(rng, 0.1, 1.0);
        u.normalize();
        for (int c = 0; c < 3; ++c) v[static_cast<std::size_t>(r) * 3 + c] = u[c];
    }
    return Tensor::from({n, 3}, std::move(v));
}

/// Unit vector at `deg` degrees from `axis`, rotated toward `toward`.
Eigen::Vector3d at_angle(const Eigen::Vector3d& axis, const Eigen::Vector3d& toward, double deg) {
    const Eigen::Vector3d u = (toward - toward.dot(axis) * axis).normalized();
    const double rad = deg * vkcc::kPi / 180.0;
    return std::cos(rad) * axis + std::sin(rad) * u;
}

std::filesystem::path fresh_dir(const std::string& tag) {
    auto dir = std::filesystem::temp_directory_path() / ("vkcc_train_" + tag);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::vector<char> slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::vector<char>((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
}

}  // namespace

// ---------------------------------------------------------------------------
// multistage angular loss
// ---------------------------------------------------------------------------

TEST_CASE("loss: perfect prediction sits just above zero (arccos clamp)") {
    vkcc::Rng rng(31);
    Tensor labels = unit_label_rows(4, rng);
    Tensor pred = Tensor::from(labels.shape(),
                               std::vector<double>(labels.value().data(),
                                                   labels.value().data() + labels.size()));
    Tensor loss1 = vkcc::multistage_angular_loss<double>({pred}, labels);
    CHECK(loss1.item() > 0.0);
    CHECK(loss1.item() < 0.05);

    // three perfect stages: the clamp floor triples but stays tiny
    Tensor loss3 = vkcc::multistage_angular_loss<double>({pred, pred, pred}, labels);
    CHECK(loss3.item() == doctest::Approx(3.0 * loss1.item()).epsilon(1e-12));
    CHECK(loss3.item() < 0.15);
}

TEST_CASE("loss: orthogonal single-stage prediction scores 90 degrees") {
    Tensor labels = Tensor::from({1, 3}, {1.0, 0.0, 0.0});
    Tensor pred = Tensor::from({1, 3}, {0.0, 1.0, 0.0});
    Tensor loss = vkcc::multistage_angular_loss<double>({pred}, labels);
    CHECK(loss.item() == doctest::Approx(90.0).epsilon(1e-6));
}

TEST_CASE("loss: 10 + 5 + 2 degree stages match the scalar oracle") {
    const Eigen::Vector3d label = Eigen::Vector3d(1.0, 1.0, 1.0).normalized();
    const Eigen::Vector3d toward(0.2, 1.0, 0.4);
    Tensor labels = Tensor::from({1, 3}, {label[0], label[1], label[2]});

    std::vector<Tensor> preds;
    double oracle = 0.0;
    for (double deg : {10.0, 5.0, 2.0}) {
        const Eigen::Vector3d p = at_angle(label, toward, deg);
        preds.push_back(Tensor::from({1, 3}, {p[0], p[1], p[2]}));
        oracle += vkcc::angular_error_deg(p, label);
    }
    Tensor loss = vkcc::multistage_angular_loss<double>(preds, labels);
    CHECK(loss.item() == doctest::Approx(17.0).epsilon(1e-9));
    // agreement with the oracle up to the normalization guard epsilon
    CHECK(loss.item() == doctest::Approx(oracle).epsilon(1e-9));
}

TEST_CASE("loss: stage additivity and scale invariance") {
    vkcc::Rng rng(77);
    Tensor labels = unit_label_rows(5, rng);
    std::vector<Tensor> preds;
    for (int i = 0; i < 3; ++i) preds.push_back(rand_tensor({5, 3}, rng, 0.1, 1.0, false));

    const double joint = vkcc::multistage_angular_loss<double>(preds, labels).item();
    double stage_sum = 0.0;
    for (const auto& p : preds)
        stage_sum += vkcc::multistage_angular_loss<double>({p}, labels).item();
    CHECK(joint == doctest::Approx(stage_sum).epsilon(1e-12));
    CHECK(joint >= 0.0);

    // positive rescaling of any prediction leaves the loss unchanged
    std::vector<Tensor> scaled;
    for (const auto& p : preds) scaled.push_back(vkcc::scale(p, 137.0));
    const double rescaled = vkcc::multistage_angular_loss<double>(scaled, labels).item();
    CHECK(rescaled == doctest::Approx(joint).epsilon(1e-9));
}

TEST_CASE("loss: contract violations") {
    vkcc::Rng rng(5);
    Tensor labels = unit_label_rows(2, rng);
    Tensor good = rand_tensor({2, 3}, rng, 0.1, 1.0, false);

    CHECK_THROWS_AS(vkcc::multistage_angular_loss<double>({}, labels), vkcc::InvalidInput);

    Tensor bad_shape = rand_tensor({3, 3}, rng, 0.1, 1.0, false);
    CHECK_THROWS_AS(vkcc::multistage_angular_loss<double>({bad_shape}, labels),
                    vkcc::InvalidInput);

    Tensor unnormalized = Tensor::from({2, 3}, {1, 1, 1, 2, 0, 0});
    CHECK_THROWS_AS(vkcc::multistage_angular_loss<double>({good}, unnormalized),
                    vkcc::InvalidInput);

    Tensor zero_row = Tensor::from({2, 3}, {1, 0.5, 0.25, 0, 0, 0});
    CHECK_THROWS_AS(vkcc::multistage_angular_loss<double>({zero_row}, labels),
                    vkcc::NumericFault);
}

TEST_CASE("loss: gradient matches finite differences") {
    vkcc::Rng rng(91);
    Tensor labels = unit_label_rows(4, rng);
    std::vector<Tensor> leaves = {rand_tensor({4, 3}, rng, 0.2, 1.0),
                                  rand_tensor({4, 3}, rng, 0.2, 1.0)};
    auto fn = [&](const std::vector<Tensor>& xs) {
        return vkcc::multistage_angular_loss<double>({xs[0], xs[1]}, labels);
    };
    auto res = vkcc::gradcheck<double>(fn, leaves);
    CHECK(res.checked >= 24);
    CHECK(res.max_rel_err < 1e-3);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

TEST_CASE("adam: zero gradients leave parameters and moments untouched") {
    Tensor p = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
    vkcc::AdamOptimizer opt({{"p", p}}, 1e-3);
    opt.zero_grad();
    opt.step();
    CHECK(p.value()(0) == 1.0);
    CHECK(p.value()(3) == 4.0);
    CHECK(opt.moment1(0).abs().maxCoeff() == 0.0);
    CHECK(opt.moment2(0).abs().maxCoeff() == 0.0);
    CHECK(opt.step_count() == 1);
}

TEST_CASE("adam: first step with unit gradient moves by almost exactly -lr") {
    const double lr = 0.25;
    Tensor p = Tensor::from({1}, {0.0}, true);
    vkcc::AdamOptimizer opt({{"p", p}}, lr);
    opt.zero_grad();
    p.grad()(0) = 1.0;
    opt.step();
    // bias correction makes m-hat = v-hat = 1, so the update is lr / (1 + eps)
    const double expected = -lr * (1.0 / (1.0 + 1e-8));
    CHECK(p.value()(0) == doctest::Approx(expected).epsilon(1e-15));
    CHECK(std::abs(p.value()(0) + lr) < 1e-8);
}

TEST_CASE("adam: quadratic bowl from x=5 converges below 1e-3 within 2000 steps") {
    Tensor x = Tensor::from({1}, {5.0}, true);
    vkcc::AdamOptimizer opt({{"x", x}}, 0.1);
    for (int i = 0; i < 2000; ++i) {
        Tensor loss = vkcc::mul(x, x);
        opt.zero_grad();
        loss.backward();
        opt.step();
    }
    CHECK(std::abs(x.value()(0)) < 1e-3);
}

TEST_CASE("adam: odd symmetry — mirrored problem yields bit-mirrored iterates") {
    Tensor a = Tensor::from({1}, {5.0}, true);
    Tensor b = Tensor::from({1}, {-5.0}, true);
    vkcc::AdamOptimizer opt_a({{"a", a}}, 0.05);
    vkcc::AdamOptimizer opt_b({{"b", b}}, 0.05);
    const Tensor three = Tensor::constant({1}, 3.0);
    for (int i = 0; i < 200; ++i) {
        Tensor da = vkcc::sub(a, three);          // f(a) = (a-3)^2
        Tensor la = vkcc::mul(da, da);
        opt_a.zero_grad();
        la.backward();
        opt_a.step();

        Tensor db = vkcc::add(b, three);          // g(b) = (b+3)^2 = f(-b)
        Tensor lb = vkcc::mul(db, db);
        opt_b.zero_grad();
        lb.backward();
        opt_b.step();

        CHECK(b.value()(0) == -a.value()(0));     // exact, every step
    }
}

TEST_CASE("adam: non-finite gradient names the parameter") {
    Tensor p = Tensor::from({1}, {1.0}, true);
    vkcc::AdamOptimizer opt({{"weights.w", p}}, 1e-3);
    opt.zero_grad();
    p.grad()(0) = std::numeric_limits<double>::quiet_NaN();
    try {
        opt.step();
        FAIL("expected NumericFault");
    } catch (const vkcc::NumericFault& e) {
        CHECK(std::string(e.what()).find("weights.w") != std::string::npos);
    }
    CHECK_THROWS_AS(vkcc::AdamOptimizer({{"p", p}}, 0.0), vkcc::InvalidInput);
}

// ---------------------------------------------------------------------------
// TrainConfig
// ---------------------------------------------------------------------------

TEST_CASE("train config: defaults valid, invariants enforced") {
    vkcc::TrainConfig cfg;
    CHECK(cfg.resolved_lr_halve_at() == 2000);
    cfg.validate();

    vkcc::TrainConfig bad = cfg;
    bad.lr = 0.0;
    CHECK_THROWS_AS(bad.validate(), vkcc::InvalidInput);
    bad = cfg;
    bad.lr_halve_at = cfg.epochs + 1;
    CHECK_THROWS_AS(bad.validate(), vkcc::InvalidInput);
    bad = cfg;
    bad.epochs = 0;
    CHECK_THROWS_AS(bad.validate(), vkcc::InvalidInput);
    bad = cfg;
    bad.batch_size = 0;
    CHECK_THROWS_AS(bad.validate(), vkcc::InvalidInput);
    bad = cfg;
    bad.stages = 0;
    CHECK_THROWS_AS(bad.validate(), vkcc::InvalidInput);
    bad = cfg;
    bad.beta2 = 1.0;
    CHECK_THROWS_AS(bad.validate(), vkcc::InvalidInput);

    CHECK(vkcc::regime_from_string("saf") == vkcc::Regime::saf);
    CHECK(std::string(vkcc::to_string(vkcc::Regime::finetune)) == "finetune");
    CHECK_THROWS_AS(vkcc::regime_from_string("sgd"), vkcc::InvalidInput);
}

// ---------------------------------------------------------------------------
// train()
// ---------------------------------------------------------------------------

namespace {

vkcc::TrainConfig tiny_config(vkcc::Regime regime, int epochs, std::uint64_t seed) {
    vkcc::TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.batch_size = 4;
    cfg.lr = 3e-4;
    cfg.stages = 1;
    cfg.regime = regime;
    cfg.seed = seed;
    cfg.augment.output_size = 16;
    return cfg;
}

}  // namespace

TEST_CASE("train: single_sie smoke run logs, validates and checkpoints") {
    auto dir = fresh_dir("sie_smoke");
    vkcc::MondrianConfig mc;
    mc.n_scenes = 10;
    mc.size = 32;
    mc.bias = 0.4;
    mc.seed = 7;
    vkcc::Manifest manifest = vkcc::synth_mondrian(mc, dir);

    std::vector<int> train_idx{0, 1, 2, 3, 4, 5, 6, 7};
    std::vector<int> val_idx{8, 9};
    auto cfg = tiny_config(vkcc::Regime::single_sie, 3, 11);

    CascadeModel model = CascadeModel::make(vkcc::BackboneConfig::toy(),
                                            vkcc::HeadKind::lightweight, 1, 5);
    std::ostringstream log;
    const auto ckpt = dir / "model.ckpt";
    vkcc::TrainResult res = vkcc::train(model, manifest, dir, train_idx, val_idx, cfg, ckpt, &log);

    REQUIRE(res.epoch_loss_deg.size() == 3);
    REQUIRE(res.val_mean_deg.size() == 3);
    REQUIRE(res.log_lines.size() == 3);
    for (double l : res.epoch_loss_deg) {
        CHECK(std::isfinite(l));
        CHECK(l >= 0.0);
    }
    CHECK(res.log_lines[0].find("\"epoch\":1") != std::string::npos);
    CHECK(res.log_lines[2].find("\"epoch\":3") != std::string::npos);
    CHECK(res.log_lines[0].find("\"loss_deg\":") != std::string::npos);
    CHECK(res.log_lines[0].find("\"val_mean_deg\":") != std::string::npos);
    CHECK(res.log_lines[0].find("\"lr\":") != std::string::npos);
    CHECK(res.reshuffle_fallbacks == 0);  // donor pool is never empty here

    // the stream carries exactly the returned lines
    std::string expect;
    for (const auto& l : res.log_lines) expect += l + "\n";
    CHECK(log.str() == expect);

    // checkpoint restores into a fresh model: identical forward outputs
    REQUIRE(std::filesystem::exists(ckpt));
    CascadeModel restored = CascadeModel::make(vkcc::BackboneConfig::toy(),
                                               vkcc::HeadKind::lightweight, 1, 999);
    vkcc::load_checkpoint(ckpt, restored.named_params());
    vkcc::Rng prng(4242);
    Tensor probe = rand_tensor({1, 3, 16, 16}, prng, 0.05, 1.0, false);
    auto out_a = vkcc::cascade_forward(model, probe);
    auto out_b = vkcc::cascade_forward(restored, probe);
    CHECK((out_a.back().value() == out_b.back().value()).all());
}

TEST_CASE("train: identical seeds reproduce logs and checkpoints bit-exactly") {
    auto dir = fresh_dir("determinism");
    vkcc::MondrianConfig mc;
    mc.n_scenes = 6;
    mc.size = 32;
    mc.bias = 0.4;
    mc.seed = 3;
    vkcc::Manifest manifest = vkcc::synth_mondrian(mc, dir);
    std::vector<int> train_idx{0, 1, 2, 3, 4, 5};
    auto cfg = tiny_config(vkcc::Regime::single_sie, 3, 21);

    auto run = [&](const std::filesystem::path& ckpt) {
        CascadeModel model = CascadeModel::make(vkcc::BackboneConfig::toy(),
                                                vkcc::HeadKind::lightweight, 1, 77);
        return vkcc::train(model, manifest, dir, train_idx, {}, cfg, ckpt, nullptr);
    };
    vkcc::TrainResult a = run(dir / "a.ckpt");
    vkcc::TrainResult b = run(dir / "b.ckpt");

    REQUIRE(a.log_lines.size() == b.log_lines.size());
    for (std::size_t i = 0; i < a.log_lines.size(); ++i) CHECK(a.log_lines[i] == b.log_lines[i]);
    CHECK(a.val_mean_deg.empty());
    CHECK(a.log_lines[0].find("val_mean_deg") == std::string::npos);
    CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
}

TEST_CASE("train: learning rate halves once after the configured epoch") {
    auto dir = fresh_dir("lr_halve");
    vkcc::MondrianConfig mc;
    mc.n_scenes = 4;
    mc.size = 32;
    mc.seed = 9;
    vkcc::Manifest manifest = vkcc::synth_mondrian(mc, dir);
    auto cfg = tiny_config(vkcc::Regime::single_sie, 4, 2);
    cfg.lr_halve_at = 2;

    CascadeModel model = CascadeModel::make(vkcc::BackboneConfig::toy(),
                                            vkcc::HeadKind::lightweight, 1, 1);
    vkcc::TrainResult res = vkcc::train(model, manifest, dir, {0, 1, 2, 3}, {}, cfg);

    char full[40], half[40];
    std::snprintf(full, sizeof(full), "\"lr\":%.17g}", cfg.lr);
    std::snprintf(half, sizeof(half), "\"lr\":%.17g}", cfg.lr * 0.5);
    CHECK(res.log_lines[0].find(full) != std::string::npos);
    CHECK(res.log_lines[1].find(full) != std::string::npos);
    CHECK(res.log_lines[2].find(half) != std::string::npos);
    CHECK(res.log_lines[3].find(half) != std::string::npos);
}

TEST_CASE("train: uip and saf regimes run on domain-appropriate data") {
    auto dir = fresh_dir("regimes");
    vkcc::MondrianConfig mc;
    mc.n_scenes = 4;
    mc.size = 32;
    mc.seed = 13;
    vkcc::Manifest manifest = vkcc::synth_mondrian(mc, dir);

    // saf: raw records corrected by their labels, then synthetically relit
    {
        auto cfg = tiny_config(vkcc::Regime::saf, 2, 3);
        CascadeModel model = CascadeModel::make(vkcc::BackboneConfig::toy(),
                                                vkcc::HeadKind::lightweight, 1, 2);
        vkcc::TrainResult res = vkcc::train(model, manifest, dir, {0, 1, 2, 3}, {}, cfg);
        REQUIRE(res.epoch_loss_deg.size() == 2);
        for (double l : res.epoch_loss_deg) CHECK(std::isfinite(l));
    }

    // uip: white-balanced scene files stand in for unprocessed sRGB content
    {
        vkcc::Manifest uip = manifest;
        for (auto& rec : uip.records) {
            const auto pos = rec.image.rfind("_raw.ccraw");
            REQUIRE(pos != std::string::npos);
            rec.image.replace(pos, std::string::npos, "_awb.ccraw");
        }
        auto cfg = tiny_config(vkcc::Regime::uip, 2, 4);
        CascadeModel model = CascadeModel::make(vkcc::BackboneConfig::toy(),
                                                vkcc::HeadKind::lightweight, 1, 6);
        vkcc::TrainResult res = vkcc::train(model, uip, dir, {0, 1, 2, 3}, {}, cfg);
        REQUIRE(res.epoch_loss_deg.size() == 2);
        for (double l : res.epoch_loss_deg) CHECK(std::isfinite(l));
    }
}

TEST_CASE("train: finetune behaves as single_sie over the same stream") {
    auto dir = fresh_dir("finetune");
    vkcc::MondrianConfig mc;
    mc.n_scenes = 6;
    mc.size = 32;
    mc.bias = 0.4;
    mc.seed = 17;
    vkcc::Manifest manifest = vkcc::synth_mondrian(mc, dir);
    std::vector<int> idx{0, 1, 2, 3, 4, 5};

    auto run = [&](vkcc::Regime regime) {
        CascadeModel model = CascadeModel::make(vkcc::BackboneConfig::toy(),
                                                vkcc::HeadKind::lightweight, 1, 55);
        auto cfg = tiny_config(regime, 2, 66);
        return vkcc::train(model, manifest, dir, idx, {}, cfg);
    };
    vkcc::TrainResult sie = run(vkcc::Regime::single_sie);
    vkcc::TrainResult ft = run(vkcc::Regime::finetune);
    REQUIRE(sie.epoch_loss_deg.size() == ft.epoch_loss_deg.size());
    for (std::size_t i = 0; i < sie.epoch_loss_deg.size(); ++i)
        CHECK(sie.epoch_loss_deg[i] == ft.epoch_loss_deg[i]);
}

TEST_CASE("train: contract violations") {
    auto dir = fresh_dir("contract");
    vkcc::MondrianConfig mc;
    mc.n_scenes = 3;
    mc.size = 32;
    mc.seed = 19;
    vkcc::Manifest manifest = vkcc::synth_mondrian(mc, dir);
    auto cfg = tiny_config(vkcc::Regime::single_sie, 1, 1);

    CascadeModel model = CascadeModel::make(vkcc::BackboneConfig::toy(),
                                            vkcc::HeadKind::lightweight, 1, 1);
    CHECK_THROWS_AS(vkcc::train(model, manifest, dir, {}, {}, cfg), vkcc::InvalidInput);
    CHECK_THROWS_AS(vkcc::train(model, manifest, dir, {0, 3}, {}, cfg), vkcc::InvalidInput);
    CHECK_THROWS_AS(vkcc::train(model, manifest, dir, {0}, {-1}, cfg), vkcc::InvalidInput);

    // single-sensor regime rejects mixed-sensor records
    vkcc::Manifest mixed = manifest;
    mixed.records[1].sensor_id = "other_sensor";
    CHECK_THROWS_AS(vkcc::train(model, mixed, dir, {0, 1, 2}, {}, cfg), vkcc::InvalidInput);

    // stage mismatch between model and config
    auto cfg3 = cfg;
    cfg3.stages = 3;
    CHECK_THROWS_AS(vkcc::train(model, manifest, dir, {0, 1}, {}, cfg3), vkcc::InvalidInput);
}

TEST_CASE("train: loss decreases on the biased synthetic set") {
    auto dir = fresh_dir("decrease");
    vkcc::MondrianConfig mc;
    mc.n_scenes = 10;
    mc.size = 32;
    mc.bias = 0.4;
    mc.seed = 23;
    vkcc::Manifest manifest = vkcc::synth_mondrian(mc, dir);
    std::vector<int> idx(10);
    for (int i = 0; i < 10; ++i) idx[static_cast<std::size_t>(i)] = i;

    auto cfg = tiny_config(vkcc::Regime::single_sie, 30, 29);
    cfg.batch_size = 8;
    CascadeModel model = CascadeModel::make(vkcc::BackboneConfig::toy(),
                                            vkcc::HeadKind::lightweight, 1, 31);
    vkcc::TrainResult res = vkcc::train(model, manifest, dir, idx, {}, cfg);
    REQUIRE(res.epoch_loss_deg.size() == 30);

    double tail = 0.0, head = 0.0;
    for (int i = 0; i < 5; ++i) {
        head += res.epoch_loss_deg[static_cast<std::size_t>(i)];
        tail += res.epoch_loss_deg[res.epoch_loss_deg.size() - 1 - static_cast<std::size_t>(i)];
    }
    CHECK(tail < head);  // mean of last 5 epochs under mean of first 5
}
