#include "vkcc/training.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

#include "vkcc/checkpoint.hpp"
#include "vkcc/color.hpp"

namespace vkcc {

namespace {

struct CachedSample {
    LinearImage image;  // domain prepared for the regime's sampler
    Illuminant label;
    std::string sensor_id;
};

TrainingPair draw_pair(Regime regime, const CachedSample& sample, const LabelPool& pool, Rng& rng,
                       const AugmentationConfig& aug, long* reshuffle_fallbacks) {
    switch (regime) {
        case Regime::uip:
            return make_uip_pair(sample.image, rng, aug.uip_channel_min, aug.uip_channel_max);
        case Regime::saf:
            return make_saf_pair(sample.image, rng, aug.uip_channel_min, aug.uip_channel_max);
        case Regime::single_sie:
        case Regime::finetune:
            return sie_next(sample.image, sample.label, sample.sensor_id, pool, rng, aug,
                            reshuffle_fallbacks);
    }
    throw InvalidInput("train: unknown regime");
}

void copy_planar(const LinearImage& image, double* dst) {
    const int h = image.height(), w = image.width();
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                dst[(static_cast<std::ptrdiff_t>(c) * h + y) * w + x] =
                    static_cast<double>(image.at(x, y, c));
}

std::string format_number(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string format_log_line(int epoch, double loss_deg, const double* val_mean_deg, double lr) {
    std::string line = "{\"epoch\":" + std::to_string(epoch);
    line += ",\"loss_deg\":" + format_number(loss_deg);
    if (val_mean_deg) line += ",\"val_mean_deg\":" + format_number(*val_mean_deg);
    line += ",\"lr\":" + format_number(lr) + "}";
    return line;
}

}  // namespace

TrainResult train(CascadeModel& model, const Manifest& manifest,
                  const std::filesystem::path& base_dir, const std::vector<int>& train_indices,
                  const std::vector<int>& val_indices, const TrainConfig& config,
                  const std::filesystem::path& checkpoint_path, std::ostream* log) {
    config.validate();
    if (train_indices.empty()) throw InvalidInput("train: empty training split");
    const int record_count = static_cast<int>(manifest.records.size());
    for (int idx : train_indices)
        if (idx < 0 || idx >= record_count) throw InvalidInput("train: train index out of range");
    for (int idx : val_indices)
        if (idx < 0 || idx >= record_count) throw InvalidInput("train: val index out of range");
    if (model.stages() != config.stages)
        throw InvalidInput("train: model stage count differs from config stages");

    const bool sie_like = config.regime == Regime::single_sie || config.regime == Regime::finetune;
    if (sie_like) {
        const std::string& sensor = manifest.records[train_indices.front()].sensor_id;
        for (int idx : train_indices)
            if (manifest.records[idx].sensor_id != sensor)
                throw InvalidInput("train: single-sensor regime but records span multiple sensors");
    }

    // Cache every training image fully prepared for its sampler: uip images
    // re-tagged to their domain, saf records corrected to white-balanced by
    // their own label, sie records kept raw with a donor pool of train labels.
    std::vector<CachedSample> cache;
    cache.reserve(train_indices.size());
    LabelPool pool;
    for (int idx : train_indices) {
        const SampleRecord& rec = manifest.records[idx];
        LinearImage image = load_preprocessed(base_dir, rec);
        switch (config.regime) {
            case Regime::uip: image.set_domain(ColorDomain::uip); break;
            case Regime::saf: image = correct(image, rec.label); break;
            case Regime::single_sie:
            case Regime::finetune: pool.add(rec.sensor_id, rec.label); break;
        }
        cache.push_back({std::move(image), rec.label, rec.sensor_id});
    }

    // Validation inputs are static across epochs: resize to the model's input
    // size, gamma-encode, and pre-pack into batch tensors once.
    const int side = config.augment.output_size;
    struct ValChunk {
        Tensor input;
        std::vector<Eigen::Vector3d> labels;
    };
    std::vector<ValChunk> val_chunks;
    for (std::size_t start = 0; start < val_indices.size();
         start += static_cast<std::size_t>(config.batch_size)) {
        const std::size_t stop =
            std::min(start + static_cast<std::size_t>(config.batch_size), val_indices.size());
        const Eigen::Index rows = static_cast<Eigen::Index>(stop - start);
        std::vector<double> data(static_cast<std::size_t>(rows) * 3 * side * side);
        ValChunk chunk;
        for (std::size_t b = 0; b < stop - start; ++b) {
            const SampleRecord& rec = manifest.records[val_indices[start + b]];
            LinearImage image = load_preprocessed(base_dir, rec);
            image = bilinear_resize(image, side, side);
            image = gamma_encode(image);
            copy_planar(image, data.data() + static_cast<std::ptrdiff_t>(b) * 3 * side * side);
            chunk.labels.push_back(rec.label.vec());
        }
        chunk.input = Tensor::from({rows, 3, side, side}, data);
        val_chunks.push_back(std::move(chunk));
    }

    Rng rng(mix_seed(config.seed));
    std::vector<int> order(cache.size());
    std::iota(order.begin(), order.end(), 0);
    AdamOptimizer optimizer(model.named_params(), config.lr, config.beta1, config.beta2,
                            config.adam_eps);
    const int halve_at = config.resolved_lr_halve_at();

    TrainResult result;
    long reshuffle_fallbacks = 0;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        const double lr_now = epoch > halve_at ? config.lr * 0.5 : config.lr;
        optimizer.set_lr(lr_now);
        shuffle_indices(order.begin(), order.end(), rng);

        double loss_sum = 0.0;
        long seen = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t stop =
                std::min(start + static_cast<std::size_t>(config.batch_size), order.size());
            const Eigen::Index rows = static_cast<Eigen::Index>(stop - start);
            std::vector<double> data(static_cast<std::size_t>(rows) * 3 * side * side);
            std::vector<double> label_data(static_cast<std::size_t>(rows) * 3);
            for (std::size_t b = 0; b < stop - start; ++b) {
                const CachedSample& sample = cache[static_cast<std::size_t>(order[start + b])];
                TrainingPair pair =
                    draw_pair(config.regime, sample, pool, rng, config.augment, &reshuffle_fallbacks);
                auto augmented =
                    geometric_augment(pair.input, pair.label, rng, config.augment);
                LinearImage encoded = gamma_encode(augmented.first);
                copy_planar(encoded, data.data() + static_cast<std::ptrdiff_t>(b) * 3 * side * side);
                for (int c = 0; c < 3; ++c) label_data[b * 3 + c] = augmented.second[c];
            }
            Tensor input = Tensor::from({rows, 3, side, side}, data);
            Tensor labels = Tensor::from({rows, 3}, label_data);
            std::vector<Tensor> preds = cascade_forward(model, input);
            Tensor loss = multistage_angular_loss(preds, labels);
            optimizer.zero_grad();
            loss.backward();
            optimizer.step();
            loss_sum += loss.item() * static_cast<double>(rows);
            seen += rows;
        }
        const double epoch_loss = loss_sum / static_cast<double>(seen);
        result.epoch_loss_deg.push_back(epoch_loss);

        double val_mean = 0.0;
        if (!val_chunks.empty()) {
            double err_sum = 0.0;
            long n = 0;
            for (const ValChunk& chunk : val_chunks) {
                std::vector<Tensor> preds = cascade_forward(model, chunk.input);
                const auto& final_value = preds.back().value();
                for (std::size_t r = 0; r < chunk.labels.size(); ++r) {
                    const Eigen::Vector3d est(final_value(static_cast<Eigen::Index>(r) * 3),
                                              final_value(static_cast<Eigen::Index>(r) * 3 + 1),
                                              final_value(static_cast<Eigen::Index>(r) * 3 + 2));
                    err_sum += angular_error_deg(est, chunk.labels[r]);
                    ++n;
                }
            }
            val_mean = err_sum / static_cast<double>(n);
            result.val_mean_deg.push_back(val_mean);
        }

        std::string line = format_log_line(epoch, epoch_loss,
                                           val_chunks.empty() ? nullptr : &val_mean, lr_now);
        if (log) (*log) << line << '\n';
        result.log_lines.push_back(std::move(line));
    }
    result.reshuffle_fallbacks = reshuffle_fallbacks;

    if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, model.named_params());
    return result;
}

}  // namespace vkcc
