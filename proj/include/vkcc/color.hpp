#pragma once

#include <atomic>
#include <cmath>

#include "vkcc/illuminant.hpp"
#include "vkcc/image.hpp"

namespace vkcc {

constexpr double kDefaultGamma = 1.0 / 2.2;

// Pixels pushed above 1 and clipped by gamma_encode. Monitoring only.
inline std::atomic<long>& gamma_clip_count() {
    static std::atomic<long> count{0};
    return count;
}

// ---- scalar transfer curves (double precision everywhere) ----

inline double gamma_encode_value(double x, double gamma = kDefaultGamma) {
    return std::pow(x, gamma);
}

inline double gamma_decode_value(double y, double gamma = kDefaultGamma) {
    return std::pow(y, 1.0 / gamma);
}

/// Smoothstep tone curve t(x) = 3x^2 - 2x^3 on [0, 1].
inline double tone_map_value(double x) {
    return x * x * (3.0 - 2.0 * x);
}

/// Closed-form inverse of the smoothstep curve (middle root, monotone branch).
inline double tone_unmap_value(double y) {
    const double s = std::min(1.0, std::max(-1.0, 1.0 - 2.0 * y));
    return 0.5 - std::sin(std::asin(s) / 3.0);
}

/// sRGB value -> linear scene value: de-gamma (x^2.2), then inverse tone map.
inline double unprocess_value(double v) {
    return tone_unmap_value(gamma_decode_value(v));
}

/// Inverse of unprocess_value: tone map, then gamma encode.
inline double reprocess_value(double u) {
    return gamma_encode_value(tone_map_value(u));
}

// ---- von Kries relighting ----

/// I_raw = I_awb * ell, per channel. Mask and dimensions preserved.
inline LinearImage relight(const LinearImage& image, const Illuminant& ell) {
    if (image.domain() != ColorDomain::awb && image.domain() != ColorDomain::uip)
        throw InvalidInput("relight: image must be in awb or uip domain");
    if (!image.pixels().allFinite()) throw InvalidInput("relight: non-finite pixel");
    LinearImage out = image;
    for (int c = 0; c < 3; ++c)
        out.pixels().col(c) *= static_cast<float>(ell[c]);
    out.set_domain(ColorDomain::raw);
    return out;
}

/// I_awb = I_raw / ell, per channel; exact inverse of relight.
inline LinearImage correct(const LinearImage& image, const Illuminant& ell) {
    for (int c = 0; c < 3; ++c)
        if (ell[c] <= 1e-12) throw InvalidInput("correct: illuminant component under division guard");
    LinearImage out = image;
    for (int c = 0; c < 3; ++c)
        out.pixels().col(c) = (image.pixels().col(c).template cast<double>() / ell[c]).template cast<float>();
    out.set_domain(ColorDomain::awb);
    return out;
}

/// Per-channel scaling by an arbitrary positive gain triple (random relighting).
inline LinearImage scale_channels(const LinearImage& image, const Eigen::Vector3d& gains) {
    if (!gains.allFinite() || !(gains.minCoeff() > 0.0))
        throw InvalidInput("scale_channels: gains must be finite and > 0");
    LinearImage out = image;
    for (int c = 0; c < 3; ++c)
        out.pixels().col(c) = (image.pixels().col(c).template cast<double>() * gains[c]).template cast<float>();
    return out;
}

// ---- image-level transfer curves ----

namespace detail {
template <typename Fn>
LinearImage map_channels(const LinearImage& image, Fn fn) {
    LinearImage out = image;
    auto& px = out.pixels();
    for (Eigen::Index i = 0; i < px.rows(); ++i)
        for (int c = 0; c < 3; ++c)
            px(i, c) = static_cast<float>(fn(static_cast<double>(px(i, c))));
    return out;
}
}  // namespace detail

/// x^gamma per channel. Inputs above 1 are clipped (counted), negatives throw.
inline LinearImage gamma_encode(const LinearImage& image, double gamma = kDefaultGamma) {
    if (image.pixels().minCoeff() < 0.0f) throw InvalidInput("gamma_encode: negative channel");
    long clipped = 0;
    LinearImage out = detail::map_channels(image, [&](double v) {
        if (v > 1.0) {
            ++clipped;
            v = 1.0;
        }
        return gamma_encode_value(v, gamma);
    });
    if (clipped > 0) gamma_clip_count() += clipped;
    return out;
}

inline LinearImage gamma_decode(const LinearImage& image, double gamma = kDefaultGamma) {
    if (image.pixels().minCoeff() < 0.0f) throw InvalidInput("gamma_decode: negative channel");
    return detail::map_channels(image, [&](double v) { return gamma_decode_value(std::min(v, 1.0), gamma); });
}

/// sRGB-domain image in [0,1] -> uip linear image (de-gamma then inverse tone
/// map). Inputs outside [0,1] beyond 1e-6 slack are rejected.
inline LinearImage unprocess_srgb(const LinearImage& image) {
    const auto& px = image.pixels();
    if (px.minCoeff() < -1e-6f || px.maxCoeff() > 1.0f + 1e-6f)
        throw InvalidInput("unprocess_srgb: input outside [0,1]");
    LinearImage out = detail::map_channels(image, [](double v) {
        return unprocess_value(std::min(1.0, std::max(0.0, v)));
    });
    out.set_domain(ColorDomain::uip);
    return out;
}

/// Display rendition of a linear white-balanced image: clamp, tone map, gamma
/// encode. Values above 1 are clipped via the gamma counter.
inline LinearImage reprocess_to_srgb(const LinearImage& image) {
    long clipped = 0;
    LinearImage out = detail::map_channels(image, [&](double v) {
        if (v > 1.0) {
            ++clipped;
            v = 1.0;
        }
        return reprocess_value(std::max(0.0, v));
    });
    if (clipped > 0) gamma_clip_count() += clipped;
    return out;
}

}  // namespace vkcc
