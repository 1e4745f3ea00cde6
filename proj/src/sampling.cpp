#include "vkcc/sampling.hpp"

#include <cmath>

namespace vkcc {

void AugmentationConfig::validate() const {
    const double wsum = mix_weights[0] + mix_weights[1] + mix_weights[2];
    if (mix_weights[0] < 0 || mix_weights[1] < 0 || mix_weights[2] < 0 || std::abs(wsum - 1.0) > 1e-9)
        throw InvalidInput("aug config: mix_weights must be non-negative and sum to 1");
    if (!(crop_fraction_min > 0) || !(crop_fraction_max <= 1.0) || !(crop_fraction_min < crop_fraction_max))
        throw InvalidInput("aug config: bad crop fraction range");
    if (!(rotation_deg_max >= 0)) throw InvalidInput("aug config: bad rotation range");
    if (hflip_prob < 0 || hflip_prob > 1) throw InvalidInput("aug config: bad hflip probability");
    if (output_size <= 0 || output_size % 2 != 0)
        throw InvalidInput("aug config: output_size must be a positive even integer");
    if (!(relight_gain_min > 0) || !(relight_gain_min < relight_gain_max))
        throw InvalidInput("aug config: bad relight gain range");
    if (!(uip_channel_min > 0) || !(uip_channel_min < uip_channel_max))
        throw InvalidInput("aug config: bad uip channel range");
}

Illuminant sample_uip_illuminant(Rng& rng, double lo, double hi) {
    const double r = uniform_double(rng, lo, hi);
    const double g = uniform_double(rng, lo, hi);
    const double b = uniform_double(rng, lo, hi);
    return Illuminant(r, 2.0 * g, b);
}

TrainingPair make_uip_pair(const LinearImage& uip_image, Rng& rng, double lo, double hi) {
    if (uip_image.domain() != ColorDomain::uip)
        throw InvalidInput("make_uip_pair: image must be in uip domain");
    const Illuminant ell = sample_uip_illuminant(rng, lo, hi);
    return TrainingPair{relight(uip_image, ell), ell, Provenance::uip_synthetic};
}

TrainingPair make_saf_pair(const LinearImage& awb_image, Rng& rng, double lo, double hi) {
    if (awb_image.domain() != ColorDomain::awb)
        throw InvalidInput("make_saf_pair: image must be in awb domain");
    const Illuminant ell = sample_uip_illuminant(rng, lo, hi);
    return TrainingPair{relight(awb_image, ell), ell, Provenance::saf_synthetic};
}

TrainingPair make_reshuffle_pair(const LinearImage& image, const Illuminant& label,
                                 const std::string& sensor_id, const Illuminant& donor_label,
                                 const std::string& donor_sensor_id) {
    if (sensor_id != donor_sensor_id)
        throw InvalidInput("make_reshuffle_pair: sensor mismatch (" + sensor_id + " vs " + donor_sensor_id + ")");
    return TrainingPair{relight(correct(image, label), donor_label), donor_label, Provenance::reshuffle};
}

TrainingPair make_random_relight_pair(const LinearImage& image, const Illuminant& label, Rng& rng,
                                      double lo, double hi) {
    Eigen::Vector3d gains;  // drawn r,g,b by sequenced statements, not ctor args
    for (int c = 0; c < 3; ++c) gains[c] = uniform_double(rng, lo, hi);
    return TrainingPair{scale_channels(image, gains), label.scaled(gains), Provenance::random_relight};
}

TrainingPair sie_next(const LinearImage& image, const Illuminant& label, const std::string& sensor_id,
                      const LabelPool& pool, Rng& rng, const AugmentationConfig& config,
                      long* reshuffle_fallbacks) {
    config.validate();
    const double u = uniform_double(rng);
    if (u < config.mix_weights[0]) {
        return TrainingPair{image, label, Provenance::original};
    }
    if (u < config.mix_weights[0] + config.mix_weights[1]) {
        const auto* donors = pool.donors(sensor_id);
        if (donors == nullptr || donors->empty()) {
            if (reshuffle_fallbacks) ++(*reshuffle_fallbacks);
            return TrainingPair{image, label, Provenance::original};
        }
        const auto& donor = (*donors)[uniform_index(rng, donors->size())];
        return make_reshuffle_pair(image, label, sensor_id, donor, sensor_id);
    }
    return make_random_relight_pair(image, label, rng, config.relight_gain_min, config.relight_gain_max);
}

// ---- geometry ----

namespace {

// Bilinear fetch at continuous position (pixel centers at integer + 0.5),
// with neighbors clamped to [lox..hix] x [loy..hiy].
inline void sample_clamped(const LinearImage& im, double sx, double sy, int lox, int hix, int loy,
                           int hiy, float* out) {
    const double fx = sx - 0.5;
    const double fy = sy - 0.5;
    const int x0 = static_cast<int>(std::floor(fx));
    const int y0 = static_cast<int>(std::floor(fy));
    const double wx = fx - x0;
    const double wy = fy - y0;
    const auto cx = [&](int x) { return std::min(hix, std::max(lox, x)); };
    const auto cy = [&](int y) { return std::min(hiy, std::max(loy, y)); };
    const int xa = cx(x0), xb = cx(x0 + 1);
    const int ya = cy(y0), yb = cy(y0 + 1);
    for (int c = 0; c < 3; ++c) {
        const double top = (1.0 - wx) * im.at(xa, ya, c) + wx * im.at(xb, ya, c);
        const double bot = (1.0 - wx) * im.at(xa, yb, c) + wx * im.at(xb, yb, c);
        out[c] = static_cast<float>((1.0 - wy) * top + wy * bot);
    }
}

}  // namespace

LinearImage rotate_inscribe(const LinearImage& image, int x0, int y0, int side, double theta_rad) {
    if (side < 2 || x0 < 0 || y0 < 0 || x0 + side > image.width() || y0 + side > image.height())
        throw InvalidInput("rotate_inscribe: patch out of bounds");
    const double ct = std::cos(theta_rad);
    const double st = std::sin(theta_rad);
    // largest axis-aligned square inscribed in the rotated square patch
    const int inner = static_cast<int>(std::floor(side / (std::abs(ct) + std::abs(st))));
    if (inner < 2) throw InvalidInput("rotate_inscribe: inscribed square under 2 px");

    LinearImage out(inner, inner, image.domain());
    out.set_sensor_id(image.sensor_id());
    const double center = side / 2.0;
    const double off = (side - inner) / 2.0;
    float px[3];
    for (int y = 0; y < inner; ++y) {
        for (int x = 0; x < inner; ++x) {
            const double dx = x + 0.5 + off - center;
            const double dy = y + 0.5 + off - center;
            // inverse rotation back into the unrotated patch
            const double sx = ct * dx + st * dy + center + x0;
            const double sy = -st * dx + ct * dy + center + y0;
            sample_clamped(image, sx, sy, x0, x0 + side - 1, y0, y0 + side - 1, px);
            for (int c = 0; c < 3; ++c) out.at(x, y, c) = px[c];
        }
    }
    return out;
}

LinearImage bilinear_resize(const LinearImage& image, int out_w, int out_h) {
    if (out_w < 1 || out_h < 1) throw InvalidInput("bilinear_resize: bad output size");
    LinearImage out(out_w, out_h, image.domain());
    out.set_sensor_id(image.sensor_id());
    const double sx_scale = static_cast<double>(image.width()) / out_w;
    const double sy_scale = static_cast<double>(image.height()) / out_h;
    float px[3];
    for (int y = 0; y < out_h; ++y) {
        for (int x = 0; x < out_w; ++x) {
            const double sx = (x + 0.5) * sx_scale;
            const double sy = (y + 0.5) * sy_scale;
            sample_clamped(image, sx, sy, 0, image.width() - 1, 0, image.height() - 1, px);
            for (int c = 0; c < 3; ++c) out.at(x, y, c) = px[c];
        }
    }
    return out;
}

LinearImage hflip(const LinearImage& image) {
    LinearImage out = image;
    for (int y = 0; y < image.height(); ++y)
        for (int x = 0; x < image.width(); ++x)
            for (int c = 0; c < 3; ++c) out.at(x, y, c) = image.at(image.width() - 1 - x, y, c);
    return out;
}

std::pair<LinearImage, Illuminant> geometric_augment(const LinearImage& image, const Illuminant& label,
                                                     Rng& rng, const AugmentationConfig& config) {
    config.validate();
    if (image.width() <= 2 || image.height() <= 2)
        throw InvalidInput("geometric_augment: image too small");
    const int shorter = std::min(image.width(), image.height());

    for (int attempt = 0; attempt < 8; ++attempt) {
        const double frac = uniform_double(rng, config.crop_fraction_min, config.crop_fraction_max);
        int side = static_cast<int>(std::llround(frac * shorter));
        side = std::min(side, shorter);
        const int x0 = static_cast<int>(uniform_index(rng, std::uint64_t(image.width() - std::max(side, 1) + 1)));
        const int y0 = static_cast<int>(uniform_index(rng, std::uint64_t(image.height() - std::max(side, 1) + 1)));
        const double theta = uniform_double(rng, -config.rotation_deg_max, config.rotation_deg_max) * kPi / 180.0;
        const bool flip = uniform_double(rng) < config.hflip_prob;

        if (side < 2) continue;
        const int inner = static_cast<int>(std::floor(side / (std::abs(std::cos(theta)) + std::abs(std::sin(theta)))));
        if (inner < 2) continue;

        LinearImage patch = rotate_inscribe(image, x0, y0, side, theta);
        if (flip) patch = hflip(patch);
        return {bilinear_resize(patch, config.output_size, config.output_size), label};
    }
    throw InvalidInput("geometric_augment: crop degenerated below 2 px after 8 attempts");
}

}  // namespace vkcc
