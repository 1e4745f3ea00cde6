// vkcc: desk-scale color-constancy toolkit.
//
// Subcommands: synth, import, train, eval, correct, gradcheck, params.
// Exit codes: 0 success, 2 usage/data error, 3 numeric fault.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <json.hpp>

#include "vkcc/checkpoint.hpp"
#include "vkcc/color.hpp"
#include "vkcc/dataio.hpp"
#include "vkcc/evaluation.hpp"
#include "vkcc/gradcheck.hpp"
#include "vkcc/network.hpp"
#include "vkcc/training.hpp"

namespace {

using nlohmann::ordered_json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// resolved run configuration (file < flags), echoed next to every artifact
// ---------------------------------------------------------------------------

struct ModelSpec {
    std::string scale = "toy";
    std::string head = "lightweight";
    std::uint64_t seed = 0;

    vkcc::BackboneConfig backbone() const {
        if (scale == "toy") return vkcc::BackboneConfig::toy();
        if (scale == "full") return vkcc::BackboneConfig::full();
        throw vkcc::InvalidInput("model.scale must be 'toy' or 'full'");
    }
    vkcc::HeadKind head_kind() const {
        if (head == "lightweight") return vkcc::HeadKind::lightweight;
        if (head == "fc4") return vkcc::HeadKind::fc4_baseline;
        throw vkcc::InvalidInput("model.head must be 'lightweight' or 'fc4'");
    }
};

struct RunConfig {
    vkcc::TrainConfig train;
    ModelSpec model;

    void apply_json_file(const fs::path& path);
    ordered_json to_json() const;
};

template <typename T>
void read_key(const ordered_json& j, const std::string& key, T& out) {
    out = j.at(key).get<T>();
}

void RunConfig::apply_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in.good()) throw vkcc::IoError("config: cannot open " + path.string());
    ordered_json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw vkcc::InvalidInput("config: invalid JSON in " + path.string() + ": " + e.what());
    }
    if (!j.is_object()) throw vkcc::InvalidInput("config: top level must be an object");

    auto& aug = train.augment;
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "train.epochs") read_key(j, key, train.epochs);
            else if (key == "train.batch_size") read_key(j, key, train.batch_size);
            else if (key == "train.lr") read_key(j, key, train.lr);
            else if (key == "train.lr_halve_at") read_key(j, key, train.lr_halve_at);
            else if (key == "train.beta1") read_key(j, key, train.beta1);
            else if (key == "train.beta2") read_key(j, key, train.beta2);
            else if (key == "train.adam_eps") read_key(j, key, train.adam_eps);
            else if (key == "train.stages") read_key(j, key, train.stages);
            else if (key == "train.regime")
                train.regime = vkcc::regime_from_string(value.get<std::string>());
            else if (key == "train.seed") read_key(j, key, train.seed);
            else if (key == "augment.output_size") read_key(j, key, aug.output_size);
            else if (key == "augment.crop_fraction_min") read_key(j, key, aug.crop_fraction_min);
            else if (key == "augment.crop_fraction_max") read_key(j, key, aug.crop_fraction_max);
            else if (key == "augment.rotation_deg_max") read_key(j, key, aug.rotation_deg_max);
            else if (key == "augment.hflip_prob") read_key(j, key, aug.hflip_prob);
            else if (key == "augment.mix_no_aug") read_key(j, key, aug.mix_weights[0]);
            else if (key == "augment.mix_reshuffle") read_key(j, key, aug.mix_weights[1]);
            else if (key == "augment.mix_relight") read_key(j, key, aug.mix_weights[2]);
            else if (key == "augment.relight_gain_min") read_key(j, key, aug.relight_gain_min);
            else if (key == "augment.relight_gain_max") read_key(j, key, aug.relight_gain_max);
            else if (key == "augment.uip_channel_min") read_key(j, key, aug.uip_channel_min);
            else if (key == "augment.uip_channel_max") read_key(j, key, aug.uip_channel_max);
            else if (key == "model.scale") read_key(j, key, model.scale);
            else if (key == "model.head") read_key(j, key, model.head);
            else if (key == "model.seed") read_key(j, key, model.seed);
            else throw vkcc::InvalidInput("config: unknown key '" + key + "'");
        } catch (const ordered_json::exception& e) {
            throw vkcc::InvalidInput("config: bad value for '" + key + "': " + e.what());
        }
    }
}

ordered_json RunConfig::to_json() const {
    const auto& aug = train.augment;
    ordered_json j;
    j["train.epochs"] = train.epochs;
    j["train.batch_size"] = train.batch_size;
    j["train.lr"] = train.lr;
    j["train.lr_halve_at"] = train.resolved_lr_halve_at();
    j["train.beta1"] = train.beta1;
    j["train.beta2"] = train.beta2;
    j["train.adam_eps"] = train.adam_eps;
    j["train.stages"] = train.stages;
    j["train.regime"] = vkcc::to_string(train.regime);
    j["train.seed"] = train.seed;
    j["augment.output_size"] = aug.output_size;
    j["augment.crop_fraction_min"] = aug.crop_fraction_min;
    j["augment.crop_fraction_max"] = aug.crop_fraction_max;
    j["augment.rotation_deg_max"] = aug.rotation_deg_max;
    j["augment.hflip_prob"] = aug.hflip_prob;
    j["augment.mix_no_aug"] = aug.mix_weights[0];
    j["augment.mix_reshuffle"] = aug.mix_weights[1];
    j["augment.mix_relight"] = aug.mix_weights[2];
    j["augment.relight_gain_min"] = aug.relight_gain_min;
    j["augment.relight_gain_max"] = aug.relight_gain_max;
    j["augment.uip_channel_min"] = aug.uip_channel_min;
    j["augment.uip_channel_max"] = aug.uip_channel_max;
    j["model.scale"] = model.scale;
    j["model.head"] = model.head;
    j["model.seed"] = model.seed;
    return j;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out.good()) throw vkcc::IoError("cannot write " + path.string());
    out << text;
    if (!out.good()) throw vkcc::IoError("short write to " + path.string());
}

// ---------------------------------------------------------------------------
// model-as-estimator plumbing
// ---------------------------------------------------------------------------

vkcc::Tensor image_to_tensor(const vkcc::LinearImage& image) {
    const int h = image.height(), w = image.width();
    std::vector<double> data(static_cast<std::size_t>(3) * h * w);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                data[(static_cast<std::size_t>(c) * h + y) * w + x] =
                    static_cast<double>(image.at(x, y, c));
    return vkcc::Tensor::from({1, 3, h, w}, std::move(data));
}

/// Final-stage illuminant estimate: resize to the model input size, gamma
/// encode, run the cascade, take the stage-M row.
Eigen::Vector3d model_estimate(const vkcc::CascadeModel& model, const vkcc::LinearImage& image,
                               int input_size) {
    vkcc::LinearImage prepared = vkcc::bilinear_resize(image, input_size, input_size);
    prepared = vkcc::gamma_encode(prepared);
    auto preds = vkcc::cascade_forward(model, image_to_tensor(prepared));
    const auto& v = preds.back().value();
    return {v(0), v(1), v(2)};
}

vkcc::CascadeModel load_model(const ModelSpec& spec, int stages, const fs::path& ckpt) {
    vkcc::CascadeModel model =
        vkcc::CascadeModel::make(spec.backbone(), spec.head_kind(), stages, spec.seed);
    vkcc::load_checkpoint(ckpt, model.named_params());
    return model;
}

// ---------------------------------------------------------------------------
// subcommand payloads
// ---------------------------------------------------------------------------

int cmd_synth(const vkcc::MondrianConfig& config, const fs::path& out_dir) {
    vkcc::Manifest manifest = vkcc::synth_mondrian(config, out_dir);
    std::cout << "synth: wrote " << manifest.records.size() << " scenes (grid "
              << config.patch_grid << "x" << config.patch_grid << ", bias " << config.bias
              << ", size " << config.size << ", seed " << config.seed << ") to "
              << out_dir.string() << "\n";
    return 0;
}

int cmd_import(const fs::path& ppm_dir, const fs::path& out_dir) {
    if (!fs::is_directory(ppm_dir))
        throw vkcc::InvalidInput("import: not a directory: " + ppm_dir.string());
    std::vector<fs::path> ppms;
    for (const auto& entry : fs::directory_iterator(ppm_dir))
        if (entry.is_regular_file() && entry.path().extension() == ".ppm")
            ppms.push_back(entry.path());
    std::sort(ppms.begin(), ppms.end());
    if (ppms.empty()) throw vkcc::InvalidInput("import: no .ppm files in " + ppm_dir.string());

    fs::create_directories(out_dir);
    vkcc::Manifest manifest;
    manifest.name = out_dir.filename().string();
    for (const auto& ppm : ppms) {
        vkcc::LinearImage uip = vkcc::import_ppm_as_uip(ppm);
        const std::string name = ppm.stem().string() + ".ccraw";
        vkcc::write_ccraw(out_dir / name, uip);
        vkcc::SampleRecord rec;
        rec.image = name;
        rec.sensor_id = "uip";
        manifest.records.push_back(std::move(rec));
    }
    vkcc::save_manifest(out_dir / "manifest.json", manifest);
    std::cout << "import: converted " << manifest.records.size() << " ppm files to uip ccraw in "
              << out_dir.string() << "\n";
    return 0;
}

int cmd_train(RunConfig cfg, const fs::path& data_dir, const fs::path& out_dir,
              const std::optional<fs::path>& init_ckpt, std::optional<int> val_fold) {
    if (cfg.train.regime == vkcc::Regime::finetune && !init_ckpt)
        throw vkcc::InvalidInput("train: --init checkpoint required for finetune");
    vkcc::Manifest manifest = vkcc::load_manifest(data_dir / "manifest.json");
    fs::create_directories(out_dir);

    std::vector<int> train_idx, val_idx;
    if (val_fold) {
        if (*val_fold < 0 || *val_fold >= manifest.fold_count)
            throw vkcc::InvalidInput("train: --val-fold out of range");
        auto folds = vkcc::kfold_split(static_cast<int>(manifest.records.size()),
                                       manifest.fold_count, 0);
        train_idx = folds[static_cast<std::size_t>(*val_fold)].train;
        val_idx = folds[static_cast<std::size_t>(*val_fold)].test;
    } else {
        train_idx.resize(manifest.records.size());
        std::iota(train_idx.begin(), train_idx.end(), 0);
    }

    vkcc::CascadeModel model = vkcc::CascadeModel::make(
        cfg.model.backbone(), cfg.model.head_kind(), cfg.train.stages, cfg.model.seed);
    if (init_ckpt) vkcc::load_checkpoint(*init_ckpt, model.named_params());

    ordered_json echo = cfg.to_json();
    echo["paths.data"] = data_dir.string();
    echo["paths.out"] = out_dir.string();
    if (init_ckpt) echo["paths.init"] = init_ckpt->string();
    if (val_fold) echo["paths.val_fold"] = *val_fold;
    write_text(out_dir / "config.json", echo.dump(2) + "\n");

    std::ofstream log(out_dir / "train_log.jsonl", std::ios::binary);
    if (!log.good()) throw vkcc::IoError("cannot write train_log.jsonl");
    vkcc::TrainResult result = vkcc::train(model, manifest, data_dir, train_idx, val_idx,
                                           cfg.train, out_dir / "model.ckpt", &log);
    std::cout << "train: " << cfg.train.epochs << " epochs, final loss "
              << result.epoch_loss_deg.back() << " deg";
    if (!result.val_mean_deg.empty())
        std::cout << ", final val mean " << result.val_mean_deg.back() << " deg";
    std::cout << ", checkpoint " << (out_dir / "model.ckpt").string() << "\n";
    return 0;
}

int cmd_eval(const std::string& method, const std::optional<fs::path>& ckpt,
             const fs::path& data_dir, int folds, int fold, const fs::path& out_path,
             const RunConfig& cfg, bool robust, double p, double sigma) {
    vkcc::Manifest manifest = vkcc::load_manifest(data_dir / "manifest.json");

    vkcc::Estimator estimator;
    if (method == "model") {
        if (!ckpt) throw vkcc::InvalidInput("eval: --ckpt required for method 'model'");
        auto model = std::make_shared<vkcc::CascadeModel>(
            load_model(cfg.model, cfg.train.stages, *ckpt));
        const int input_size = cfg.train.augment.output_size;
        estimator = [model, input_size](const vkcc::LinearImage& im) {
            return model_estimate(*model, im, input_size);
        };
    } else if (method == "grayworld") {
        estimator = [](const vkcc::LinearImage& im) { return vkcc::gray_world(im); };
    } else if (method == "whitepatch") {
        estimator = [robust](const vkcc::LinearImage& im) { return vkcc::white_patch(im, robust); };
    } else if (method == "sog") {
        estimator = [p](const vkcc::LinearImage& im) { return vkcc::shades_of_gray(im, p); };
    } else if (method == "grayedge") {
        estimator = [p, sigma](const vkcc::LinearImage& im) {
            return vkcc::gray_edge1(im, p, sigma);
        };
    } else {
        throw vkcc::InvalidInput("eval: unknown method '" + method + "'");
    }

    if (folds < 1) throw vkcc::InvalidInput("eval: --folds must be >= 1");
    if (fold < -1 || fold >= folds) throw vkcc::InvalidInput("eval: fold index out of range");
    const auto splits = vkcc::kfold_split(static_cast<int>(manifest.records.size()), folds, 0);

    std::vector<int> test_indices;
    if (fold >= 0) {
        test_indices = splits[static_cast<std::size_t>(fold)].test;
    } else {
        // union over folds: every record is tested exactly once
        for (const auto& split : splits)
            test_indices.insert(test_indices.end(), split.test.begin(), split.test.end());
    }
    vkcc::MetricsReport report = vkcc::evaluate(estimator, manifest, data_dir, test_indices);
    vkcc::save_report(out_path, method, manifest.name, fold, report);

    ordered_json echo = cfg.to_json();
    echo["paths.data"] = data_dir.string();
    echo["paths.out"] = out_path.string();
    if (ckpt) echo["paths.ckpt"] = ckpt->string();
    echo["eval.method"] = method;
    echo["eval.folds"] = folds;
    echo["eval.fold"] = fold;
    echo["eval.robust"] = robust;
    echo["eval.p"] = p;
    echo["eval.sigma"] = sigma;
    write_text(out_path.string() + ".config.json", echo.dump(2) + "\n");

    std::cout << "eval: " << method << " on " << report.n << " images: mean " << report.mean
              << " median " << report.median << " trimean " << report.trimean << " best25 "
              << report.best25 << " worst25 " << report.worst25 << " (deg), report "
              << out_path.string() << "\n";
    return 0;
}

int cmd_correct(const std::optional<fs::path>& ckpt, const std::optional<std::string>& oracle,
                const fs::path& in_path, const fs::path& out_path, const RunConfig& cfg) {
    if (!ckpt && !oracle)
        throw vkcc::InvalidInput("correct: need --ckpt or --oracle-label");
    vkcc::LinearImage raw = vkcc::read_ccraw(in_path, vkcc::ColorDomain::raw);

    Eigen::Vector3d estimate;
    if (oracle) {
        double r = 0, g = 0, b = 0;
        char c1 = 0, c2 = 0;
        std::istringstream ss(*oracle);
        if (!(ss >> r >> c1 >> g >> c2 >> b) || c1 != ',' || c2 != ',')
            throw vkcc::InvalidInput("correct: --oracle-label must be 'r,g,b'");
        estimate = vkcc::Illuminant(r, g, b).vec();
    } else {
        vkcc::CascadeModel model = load_model(cfg.model, cfg.train.stages, *ckpt);
        estimate = model_estimate(model, raw, cfg.train.augment.output_size);
    }

    vkcc::LinearImage corrected = vkcc::correct(raw, vkcc::Illuminant(estimate));
    vkcc::write_ppm(out_path, vkcc::reprocess_to_srgb(corrected));
    std::cout << "correct: estimate (" << estimate.x() << ", " << estimate.y() << ", "
              << estimate.z() << "), wrote " << out_path.string() << "\n";
    return 0;
}

int cmd_gradcheck() {
    using vkcc::Tensor;
    vkcc::Rng rng(2024);
    auto rand_leaf = [&rng](Tensor::Shape shape, double lo, double hi) {
        const Eigen::Index n = Tensor::shape_size(shape);
        std::vector<double> v(static_cast<std::size_t>(n));
        for (auto& x : v) x = vkcc::uniform_double(rng, lo, hi);
        return Tensor::from(std::move(shape), std::move(v), true);
    };
    double worst_layer = 0.0;

    {  // convolution layer
        Tensor x = rand_leaf({2, 3, 6, 5}, -1.0, 1.0);
        Tensor w = rand_leaf({4, 3, 3, 3}, -0.5, 0.5);
        Tensor b = rand_leaf({4}, -0.2, 0.2);
        auto fn = [](const std::vector<Tensor>& l) {
            return vkcc::mean_all(vkcc::conv2d(l[0], l[1], l[2], 1, 1));
        };
        auto res = vkcc::gradcheck<double>(fn, {x, w, b});
        worst_layer = std::max(worst_layer, res.max_rel_err);
        std::cout << "gradcheck conv2d: max rel err " << res.max_rel_err << "\n";
    }
    {  // attention module
        auto isam = vkcc::IsamParamsT<double>::make(16, 4, rng, "isam");
        Tensor x = rand_leaf({1, 16, 4, 4}, 0.05, 1.0);
        auto fn = [&isam](const std::vector<Tensor>& l) {
            return vkcc::mean_all(vkcc::isam_forward(l[0], isam, vkcc::ConvImpl::im2col));
        };
        auto res = vkcc::gradcheck<double>(fn, {x});
        worst_layer = std::max(worst_layer, res.max_rel_err);
        std::cout << "gradcheck isam: max rel err " << res.max_rel_err << "\n";
    }
    {  // estimation head
        auto head = vkcc::LightweightHeadT<double>::make(32, rng, "head");
        Tensor x = rand_leaf({1, 32, 2, 2}, 0.05, 1.0);
        auto fn = [&head](const std::vector<Tensor>& l) {
            return vkcc::mean_all(head.forward(l[0], vkcc::ConvImpl::im2col));
        };
        auto res = vkcc::gradcheck<double>(fn, {x});
        worst_layer = std::max(worst_layer, res.max_rel_err);
        std::cout << "gradcheck lightweight head: max rel err " << res.max_rel_err << "\n";
    }

    // end-to-end: M=2 toy cascade + multistage angular loss on probe params
    vkcc::CascadeModel model =
        vkcc::CascadeModel::make(vkcc::BackboneConfig::toy(), vkcc::HeadKind::lightweight, 2, 9);
    Tensor image = rand_leaf({1, 3, 16, 16}, 0.05, 1.0);
    image.ptr()->requires_grad = false;
    Tensor labels = Tensor::from({1, 3}, {1.0 / std::sqrt(3.0), 1.0 / std::sqrt(3.0),
                                          1.0 / std::sqrt(3.0)});
    auto params = model.named_params();
    std::vector<Tensor> probes = {params[0].second, params[params.size() / 2].second,
                                  params.back().second};
    auto fn = [&model, &image, &labels](const std::vector<Tensor>&) {
        auto preds = vkcc::cascade_forward(model, image);
        return vkcc::multistage_angular_loss<double>(preds, labels);
    };
    auto res = vkcc::gradcheck<double>(fn, probes, 1e-5, 8);
    std::cout << "gradcheck cascade+loss (M=2): max rel err " << res.max_rel_err << "\n";

    if (worst_layer >= 1e-4 || res.max_rel_err >= 1e-3)
        throw vkcc::NumericFault("gradcheck: tolerance exceeded");
    std::cout << "gradcheck: all checks within tolerance\n";
    return 0;
}

int cmd_params() {
    auto count_set = [](const vkcc::ParamList<double>& list) {
        Eigen::Index n = 0;
        for (const auto& [name, t] : list) n += t.size();
        return n;
    };
    for (const std::string scale : {"toy", "full"}) {
        const auto config =
            scale == "toy" ? vkcc::BackboneConfig::toy() : vkcc::BackboneConfig::full();
        for (const std::string head : {"lightweight", "fc4"}) {
            const auto kind =
                head == "lightweight" ? vkcc::HeadKind::lightweight : vkcc::HeadKind::fc4_baseline;
            vkcc::CascadeModel m1 = vkcc::CascadeModel::make(config, kind, 1, 0);
            vkcc::CascadeModel m3 = vkcc::CascadeModel::make(config, kind, 3, 0);

            vkcc::ParamList<double> backbone_params, head_params;
            m1.backbone.params(backbone_params);
            if (kind == vkcc::HeadKind::lightweight)
                m1.light_head.params(head_params);
            else
                m1.fc4_head.params(head_params);
            const Eigen::Index backbone_n = count_set(backbone_params);
            const Eigen::Index head_n = count_set(head_params);
            const Eigen::Index isam_n = m1.count_isam_params_per_stage();
            const Eigen::Index total1 = m1.count_params();
            const Eigen::Index total3 = m3.count_params();
            const bool identity = total3 == total1 + 2 * isam_n;

            std::cout << "scale=" << scale << " head=" << head << " backbone=" << backbone_n
                      << " head_params=" << head_n << " isam_per_stage=" << isam_n
                      << " total_m1=" << total1 << " total_m3=" << total3
                      << " sharing_identity=" << (identity ? "ok" : "VIOLATED") << "\n";
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"vkcc: von Kries color constancy toolkit (synthesis, training, evaluation)"};
    app.require_subcommand(1);

    // ---- synth ----
    auto* synth = app.add_subcommand("synth", "Generate synthetic Mondrian scenes + manifest");
    vkcc::MondrianConfig mondrian;
    std::string synth_out;
    synth->add_option("--scenes", mondrian.n_scenes, "Number of scenes")->capture_default_str();
    synth->add_option("--grid", mondrian.patch_grid, "Patches per side")->capture_default_str();
    synth->add_option("--bias", mondrian.bias, "Chromatic reflectance bias in [0,1)")
        ->capture_default_str();
    synth->add_option("--achromatic", mondrian.achromatic_prob,
                      "Probability a scene contains a gray reference patch")
        ->capture_default_str();
    synth->add_option("--size", mondrian.size, "Scene side in pixels")->capture_default_str();
    synth->add_option("--seed", mondrian.seed, "Generator seed")->capture_default_str();
    synth->add_option("--out", synth_out, "Output directory")->required();

    // ---- import ----
    auto* import_cmd = app.add_subcommand("import", "Convert sRGB PPM images to uip-domain CCRAW");
    std::string import_dir, import_out;
    import_cmd->add_option("--ppm-dir", import_dir, "Directory of P6 .ppm files")->required();
    import_cmd->add_option("--out", import_out, "Output directory")->required();

    // ---- shared model/train options (train, eval, correct) ----
    RunConfig cfg;
    auto add_model_flags = [](CLI::App* cmd, std::optional<std::string>& scale,
                              std::optional<std::string>& head, std::optional<int>& stages,
                              std::optional<std::uint64_t>& model_seed,
                              std::optional<int>& output_size) {
        cmd->add_option("--scale", scale, "Backbone scale: toy or full");
        cmd->add_option("--head", head, "Estimation head: lightweight or fc4");
        cmd->add_option("--stages", stages, "Cascade stages M");
        cmd->add_option("--model-seed", model_seed, "Model initialization seed");
        cmd->add_option("--output-size", output_size, "Model input side in pixels");
    };

    // ---- train ----
    auto* train_cmd = app.add_subcommand("train", "Train the cascade on a manifest directory");
    std::string train_data, train_out, train_config_file, train_init;
    std::optional<int> t_epochs, t_batch, t_halve, t_stages, t_out_size, t_val_fold;
    std::optional<double> t_lr;
    std::optional<std::uint64_t> t_seed, t_model_seed;
    std::optional<std::string> t_scale, t_head, t_regime;
    train_cmd->add_option("--regime", t_regime,
                          "Training regime: uip, saf, single_sie (alias: single), finetune");
    train_cmd->add_option("--config", train_config_file,
                          "JSON config file with flat dotted keys (flags override)");
    train_cmd->add_option("--data", train_data, "Manifest directory")->required();
    train_cmd->add_option("--init", train_init, "Initial checkpoint (required for finetune)");
    train_cmd->add_option("--out", train_out, "Output directory")->required();
    train_cmd->add_option("--epochs", t_epochs, "Training epochs");
    train_cmd->add_option("--batch-size", t_batch, "Mini-batch size");
    train_cmd->add_option("--lr", t_lr, "Adam learning rate");
    train_cmd->add_option("--lr-halve-at", t_halve, "Epoch after which the rate halves once");
    train_cmd->add_option("--seed", t_seed, "Training stream seed");
    train_cmd->add_option("--val-fold", t_val_fold,
                          "Hold out this fold of the manifest's k-fold split for validation");
    add_model_flags(train_cmd, t_scale, t_head, t_stages, t_model_seed, t_out_size);

    // ---- eval ----
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate an estimator over a manifest");
    std::string eval_method, eval_data, eval_out;
    std::optional<std::string> e_ckpt;
    int eval_folds = 3, eval_fold = -1;
    bool eval_robust = false;
    double eval_p = 6.0, eval_sigma = 1.0;
    std::optional<int> e_stages, e_out_size;
    std::optional<std::uint64_t> e_model_seed;
    std::optional<std::string> e_scale, e_head;
    eval_cmd
        ->add_option("--method", eval_method,
                     "Estimator: model, grayworld, whitepatch, sog, grayedge")
        ->required();
    eval_cmd->add_option("--ckpt", e_ckpt, "Model checkpoint (method 'model')");
    eval_cmd->add_option("--data", eval_data, "Manifest directory")->required();
    eval_cmd->add_option("--folds", eval_folds, "Cross-validation fold count")
        ->capture_default_str();
    eval_cmd->add_option("--fold", eval_fold,
                         "Evaluate only this fold's test split (-1 = union of all folds)")
        ->capture_default_str();
    eval_cmd->add_option("--out", eval_out, "Report JSON path")->required();
    eval_cmd->add_flag("--robust", eval_robust,
                       "white_patch: use the 99th percentile instead of the max");
    eval_cmd->add_option("--p", eval_p, "Minkowski norm for sog/grayedge")->capture_default_str();
    eval_cmd->add_option("--sigma", eval_sigma, "Gaussian smoothing sigma for grayedge")
        ->capture_default_str();
    add_model_flags(eval_cmd, e_scale, e_head, e_stages, e_model_seed, e_out_size);

    // ---- correct ----
    auto* correct_cmd =
        app.add_subcommand("correct", "Estimate the illuminant and write a corrected sRGB PPM");
    std::string correct_in, correct_out;
    std::optional<std::string> c_ckpt, c_oracle;
    std::optional<int> c_stages, c_out_size;
    std::optional<std::uint64_t> c_model_seed;
    std::optional<std::string> c_scale, c_head;
    correct_cmd->add_option("--ckpt", c_ckpt, "Model checkpoint");
    correct_cmd->add_option("--oracle-label", c_oracle,
                            "Bypass the model with a ground-truth 'r,g,b' illuminant");
    correct_cmd->add_option("--in", correct_in, "Input CCRAW image")->required();
    correct_cmd->add_option("--out", correct_out, "Output PPM path")->required();
    add_model_flags(correct_cmd, c_scale, c_head, c_stages, c_model_seed, c_out_size);

    // ---- gradcheck / params ----
    auto* gradcheck_cmd =
        app.add_subcommand("gradcheck", "Finite-difference gradient checks on layers and cascade");
    auto* params_cmd =
        app.add_subcommand("params", "Print per-module parameter counts and sharing identity");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (synth->parsed()) return cmd_synth(mondrian, synth_out);
        if (import_cmd->parsed()) return cmd_import(import_dir, import_out);

        if (train_cmd->parsed()) {
            if (!train_config_file.empty()) cfg.apply_json_file(train_config_file);
            if (t_regime)
                cfg.train.regime =
                    vkcc::regime_from_string(*t_regime == "single" ? "single_sie" : *t_regime);
            if (t_epochs) cfg.train.epochs = *t_epochs;
            if (t_batch) cfg.train.batch_size = *t_batch;
            if (t_lr) cfg.train.lr = *t_lr;
            if (t_halve) cfg.train.lr_halve_at = *t_halve;
            if (t_seed) cfg.train.seed = *t_seed;
            if (t_stages) cfg.train.stages = *t_stages;
            if (t_out_size) cfg.train.augment.output_size = *t_out_size;
            if (t_scale) cfg.model.scale = *t_scale;
            if (t_head) cfg.model.head = *t_head;
            if (t_model_seed) cfg.model.seed = *t_model_seed;
            std::optional<fs::path> init;
            if (!train_init.empty()) init = fs::path(train_init);
            return cmd_train(cfg, train_data, train_out, init, t_val_fold);
        }

        if (eval_cmd->parsed()) {
            if (e_stages) cfg.train.stages = *e_stages;
            if (e_out_size) cfg.train.augment.output_size = *e_out_size;
            if (e_scale) cfg.model.scale = *e_scale;
            if (e_head) cfg.model.head = *e_head;
            if (e_model_seed) cfg.model.seed = *e_model_seed;
            std::optional<fs::path> ckpt;
            if (e_ckpt) ckpt = fs::path(*e_ckpt);
            return cmd_eval(eval_method, ckpt, eval_data, eval_folds, eval_fold, eval_out, cfg,
                            eval_robust, eval_p, eval_sigma);
        }

        if (correct_cmd->parsed()) {
            if (c_stages) cfg.train.stages = *c_stages;
            if (c_out_size) cfg.train.augment.output_size = *c_out_size;
            if (c_scale) cfg.model.scale = *c_scale;
            if (c_head) cfg.model.head = *c_head;
            if (c_model_seed) cfg.model.seed = *c_model_seed;
            std::optional<fs::path> ckpt;
            if (c_ckpt) ckpt = fs::path(*c_ckpt);
            return cmd_correct(ckpt, c_oracle, correct_in, correct_out, cfg);
        }

        if (gradcheck_cmd->parsed()) return cmd_gradcheck();
        if (params_cmd->parsed()) return cmd_params();
        throw vkcc::InvalidInput("no subcommand selected");
    } catch (const vkcc::NumericFault& e) {
        std::cerr << "numeric fault: " << e.what() << "\n";
        return 3;
    } catch (const vkcc::InvalidInput& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const vkcc::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
