#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "vkcc/dataio.hpp"
#include "vkcc/network.hpp"
#include "vkcc/ops.hpp"
#include "vkcc/sampling.hpp"

namespace vkcc {

/// How training pairs are produced.
///   uip        - unprocessed sRGB images relit by sampled illuminants
///   saf        - labelled sensor captures, corrected then relit by sampled
///                illuminants (sensor-agnostic pool)
///   single_sie - one sensor's captures with the identity / reshuffle /
///                random-relight mix
///   finetune   - single_sie on a model restored from a checkpoint
enum class Regime { uip, saf, single_sie, finetune };

inline const char* to_string(Regime r) {
    switch (r) {
        case Regime::uip: return "uip";
        case Regime::saf: return "saf";
        case Regime::single_sie: return "single_sie";
        case Regime::finetune: return "finetune";
    }
    return "?";
}

inline Regime regime_from_string(const std::string& s) {
    if (s == "uip") return Regime::uip;
    if (s == "saf") return Regime::saf;
    if (s == "single_sie") return Regime::single_sie;
    if (s == "finetune") return Regime::finetune;
    throw InvalidInput("unknown regime: " + s);
}

struct TrainConfig {
    int epochs = 4000;
    int batch_size = 16;
    double lr = 3e-4;
    int lr_halve_at = -1;  // negative -> epochs / 2; the rate halves once after this epoch
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int stages = 3;
    Regime regime = Regime::single_sie;
    std::uint64_t seed = 0;
    AugmentationConfig augment;

    int resolved_lr_halve_at() const { return lr_halve_at < 0 ? epochs / 2 : lr_halve_at; }

    void validate() const {
        if (epochs < 1) throw InvalidInput("train config: epochs must be >= 1");
        if (batch_size < 1) throw InvalidInput("train config: batch_size must be >= 1");
        if (!(lr > 0.0)) throw InvalidInput("train config: lr must be > 0");
        if (resolved_lr_halve_at() > epochs)
            throw InvalidInput("train config: lr_halve_at must be <= epochs");
        if (stages < 1) throw InvalidInput("train config: stages must be >= 1");
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
            throw InvalidInput("train config: betas must lie in [0, 1)");
        if (!(adam_eps > 0.0)) throw InvalidInput("train config: adam_eps must be > 0");
        augment.validate();
    }
};

/// Sum over stages of the batch-mean angular error, in degrees:
///   L = sum_i mean_n (180/pi) * arccos(clamp(<l_n, p_in / ||p_in||>, -1+d, 1-d))
/// with d = 1e-7 so the gradient stays finite at perfect predictions.
/// `preds` holds the cascade's cumulative estimates [N,3] for stages 1..M;
/// `labels` is [N,3] with unit rows.
template <typename S>
TensorT<S> multistage_angular_loss(const std::vector<TensorT<S>>& preds, const TensorT<S>& labels,
                                   S delta = S(1e-7)) {
    if (preds.empty()) throw InvalidInput("loss: at least one stage prediction required");
    if (labels.rank() != 2 || labels.extent(1) != 3)
        throw InvalidInput("loss: labels must be [N,3]");
    const Eigen::Index n = labels.extent(0);
    for (Eigen::Index r = 0; r < n; ++r) {
        const S norm = std::sqrt(labels.ptr()->value.segment(r * 3, 3).square().sum());
        if (std::abs(norm - S(1)) > S(1e-6))
            throw InvalidInput("loss: labels must have unit rows");
    }

    TensorT<S> total;
    for (const auto& pred : preds) {
        if (pred.rank() != 2 || pred.extent(0) != n || pred.extent(1) != 3)
            throw InvalidInput("loss: prediction shape must match labels [N,3]");
        for (Eigen::Index r = 0; r < n; ++r) {
            const S norm = std::sqrt(pred.ptr()->value.segment(r * 3, 3).square().sum());
            if (!(norm > S(1e-12))) throw NumericFault("loss: zero-norm prediction");
        }
        TensorT<S> cosine = row_sum(mul(l2_normalize(pred), labels));
        TensorT<S> stage = mean_all(scale(acos_clamped(cosine, delta), S(180.0 / kPi)));
        total = total.defined() ? add(total, stage) : stage;
    }
    return total;
}

/// Adam with bias correction. Parameters are updated in place from the
/// gradients currently stored on the tensors:
///   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
///   p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
template <typename S>
class AdamOptimizerT {
public:
    AdamOptimizerT(ParamList<S> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                   double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        if (!(lr > 0.0)) throw InvalidInput("adam: lr must be > 0");
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const auto& [name, t] : params_) {
            if (!t.defined()) throw InvalidInput("adam: undefined parameter " + name);
            m_.push_back(TensorT<S>::Array::Zero(t.size()));
            v_.push_back(TensorT<S>::Array::Zero(t.size()));
        }
    }

    void zero_grad() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    /// One update from the gradients accumulated on the parameters.
    void step() {
        ++t_;
        const S bc1 = S(1) - S(std::pow(beta1_, static_cast<double>(t_)));
        const S bc2 = S(1) - S(std::pow(beta2_, static_cast<double>(t_)));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& [name, tensor] = params_[i];
            const auto& g = tensor.grad();
            if (!g.allFinite()) throw NumericFault("adam: non-finite gradient for " + name);
            m_[i] = S(beta1_) * m_[i] + (S(1) - S(beta1_)) * g;
            v_[i] = S(beta2_) * v_[i] + (S(1) - S(beta2_)) * g.square();
            tensor.value() -= S(lr_) * (m_[i] / bc1) / ((v_[i] / bc2).sqrt() + S(eps_));
        }
    }

    double lr() const { return lr_; }
    void set_lr(double lr) {
        if (!(lr > 0.0)) throw InvalidInput("adam: lr must be > 0");
        lr_ = lr;
    }
    long step_count() const { return t_; }
    const typename TensorT<S>::Array& moment1(std::size_t i) const { return m_.at(i); }
    const typename TensorT<S>::Array& moment2(std::size_t i) const { return v_.at(i); }

private:
    ParamList<S> params_;
    std::vector<typename TensorT<S>::Array> m_, v_;
    long t_ = 0;
    double lr_, beta1_, beta2_, eps_;
};

using AdamOptimizer = AdamOptimizerT<double>;

struct TrainResult {
    std::vector<double> epoch_loss_deg;  // one entry per epoch
    std::vector<double> val_mean_deg;    // empty when no validation split given
    std::vector<std::string> log_lines;  // the exact JSON lines written to the log
    long reshuffle_fallbacks = 0;        // empty-donor-pool downgrades (sie regimes)
};

/// Trains the model in place over the manifest's `train_indices`. Every sample
/// is re-drawn each epoch by the regime's sampler, geometrically augmented and
/// gamma-encoded before entering the model. When `val_indices` is nonempty the
/// final-stage estimate is evaluated on them after every epoch (resized to the
/// augmentation output size, no random augmentation). One JSON log line per
/// epoch {"epoch","loss_deg","val_mean_deg"?,"lr"} goes to `log` when given
/// and is returned in the result either way. A nonempty `checkpoint_path`
/// receives the final parameters. Deterministic for a fixed config and seed.
TrainResult train(CascadeModel& model, const Manifest& manifest,
                  const std::filesystem::path& base_dir, const std::vector<int>& train_indices,
                  const std::vector<int>& val_indices, const TrainConfig& config,
                  const std::filesystem::path& checkpoint_path = {}, std::ostream* log = nullptr);

}  // namespace vkcc
