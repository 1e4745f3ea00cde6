#pragma once

#include <array>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vkcc/color.hpp"
#include "vkcc/illuminant.hpp"
#include "vkcc/image.hpp"

namespace vkcc {

/// How a training pair was produced.
enum class Provenance { original, reshuffle, random_relight, uip_synthetic, saf_synthetic };

inline const char* to_string(Provenance p) {
    switch (p) {
        case Provenance::original: return "original";
        case Provenance::reshuffle: return "reshuffle";
        case Provenance::random_relight: return "random_relight";
        case Provenance::uip_synthetic: return "uip_synthetic";
        case Provenance::saf_synthetic: return "saf_synthetic";
    }
    return "?";
}

/// A (raw-domain input, illuminant label) training combination.
struct TrainingPair {
    LinearImage input;
    Illuminant label;
    Provenance provenance = Provenance::original;
};

struct AugmentationConfig {
    // categorical mix for sie_next: no-aug, reshuffle, random relight
    std::array<double, 3> mix_weights{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
    double crop_fraction_min = 0.1;
    double crop_fraction_max = 1.0;
    double rotation_deg_max = 30.0;  // angle drawn in [-max, +max]
    double hflip_prob = 0.5;
    int output_size = 64;  // square, even
    double relight_gain_min = 0.6;
    double relight_gain_max = 1.4;
    double uip_channel_min = 0.2;
    double uip_channel_max = 0.8;
    std::uint64_t rng_seed = 0;

    void validate() const;
};

/// Label pool per sensor, the donor source for reshuffle.
class LabelPool {
public:
    void add(const std::string& sensor_id, const Illuminant& label) {
        pools_[sensor_id].push_back(label);
    }
    const std::vector<Illuminant>* donors(const std::string& sensor_id) const {
        auto it = pools_.find(sensor_id);
        return it == pools_.end() ? nullptr : &it->second;
    }

private:
    std::map<std::string, std::vector<Illuminant>> pools_;
};

/// Draw r,g,b ~ U[lo,hi], double the green component, L2-normalize.
Illuminant sample_uip_illuminant(Rng& rng, double lo = 0.2, double hi = 0.8);

/// uip image + sampled illuminant -> (relit raw image, illuminant).
TrainingPair make_uip_pair(const LinearImage& uip_image, Rng& rng, double lo = 0.2, double hi = 0.8);

/// White-balanced image from a real sensor + sampled illuminant (SAF regime).
TrainingPair make_saf_pair(const LinearImage& awb_image, Rng& rng, double lo = 0.2, double hi = 0.8);

/// Correct the record by its own label, relight with a donor label drawn from
/// the same sensor's pool. Throws on sensor mismatch.
TrainingPair make_reshuffle_pair(const LinearImage& image, const Illuminant& label,
                                 const std::string& sensor_id, const Illuminant& donor_label,
                                 const std::string& donor_sensor_id);

/// Rescale image and label by independent per-channel gains in [lo, hi];
/// the label is re-normalized.
TrainingPair make_random_relight_pair(const LinearImage& image, const Illuminant& label, Rng& rng,
                                      double lo = 0.6, double hi = 1.4);

/// One SIE draw: pick no-aug / reshuffle / random relight by mix_weights and
/// delegate. An empty donor pool downgrades reshuffle to no-aug and bumps
/// *reshuffle_fallbacks when given.
TrainingPair sie_next(const LinearImage& image, const Illuminant& label, const std::string& sensor_id,
                      const LabelPool& pool, Rng& rng, const AugmentationConfig& config,
                      long* reshuffle_fallbacks = nullptr);

// ---- geometry ----
// All resampling is bilinear with half-pixel centers and edge clamping, so
// constant images stay constant.

/// Rotate the side x side patch at (x0, y0) by theta and return the largest
/// axis-aligned square inscribed in it, in one resampling pass.
LinearImage rotate_inscribe(const LinearImage& image, int x0, int y0, int side, double theta_rad);

LinearImage bilinear_resize(const LinearImage& image, int out_w, int out_h);

LinearImage hflip(const LinearImage& image);

/// Random square crop, rotation in [-rotation_deg_max, +rotation_deg_max],
/// inscribed-rectangle crop, optional horizontal flip, resize to
/// output_size^2. The label is never touched. Draw order: crop fraction,
/// crop x, crop y, angle, flip coin.
std::pair<LinearImage, Illuminant> geometric_augment(const LinearImage& image, const Illuminant& label,
                                                     Rng& rng, const AugmentationConfig& config);

}  // namespace vkcc
