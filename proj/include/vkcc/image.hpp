#pragma once

#include <Eigen/Dense>
#include <string>
#include <utility>

#include "vkcc/common.hpp"

namespace vkcc {

/// Which point of the pipeline a linear image lives in: raw sensor domain,
/// white-balanced, or unprocessed-from-sRGB (treated as white-balanced).
enum class ColorDomain { raw, awb, uip };

inline const char* to_string(ColorDomain d) {
    switch (d) {
        case ColorDomain::raw: return "raw";
        case ColorDomain::awb: return "awb";
        case ColorDomain::uip: return "uip";
    }
    return "?";
}

/// Linear-domain RGB image. Pixels are row-major (y * width + x) with
/// interleaved channels; an optional mask marks excluded pixels (true =
/// excluded, e.g. a calibration object). Masked pixels are kept at exactly 0.
template <typename Scalar>
class ImageT {
public:
    using Pixels = Eigen::Array<Scalar, Eigen::Dynamic, 3, Eigen::RowMajor>;
    using Mask = Eigen::Array<bool, Eigen::Dynamic, 1>;

    ImageT() = default;

    ImageT(int width, int height, ColorDomain domain)
        : width_(width), height_(height), domain_(domain) {
        if (width <= 0 || height <= 0) throw InvalidInput("image: non-positive dimensions");
        pixels_ = Pixels::Zero(static_cast<Eigen::Index>(width) * height, 3);
    }

    static ImageT constant(int width, int height, Scalar r, Scalar g, Scalar b, ColorDomain domain) {
        ImageT im(width, height, domain);
        im.pixels_.col(0) = r;
        im.pixels_.col(1) = g;
        im.pixels_.col(2) = b;
        return im;
    }

    int width() const { return width_; }
    int height() const { return height_; }
    Eigen::Index pixel_count() const { return pixels_.rows(); }

    Pixels& pixels() { return pixels_; }
    const Pixels& pixels() const { return pixels_; }

    Scalar& at(int x, int y, int c) { return pixels_(static_cast<Eigen::Index>(y) * width_ + x, c); }
    Scalar at(int x, int y, int c) const { return pixels_(static_cast<Eigen::Index>(y) * width_ + x, c); }

    ColorDomain domain() const { return domain_; }
    void set_domain(ColorDomain d) { domain_ = d; }

    const std::string& sensor_id() const { return sensor_id_; }
    void set_sensor_id(std::string id) { sensor_id_ = std::move(id); }

    bool has_mask() const { return mask_.size() != 0; }
    const Mask& mask() const { return mask_; }

    void ensure_mask() {
        if (!has_mask()) mask_ = Mask::Constant(pixel_count(), false);
    }
    bool masked(Eigen::Index i) const { return has_mask() && mask_(i); }
    void set_masked(int x, int y) {
        ensure_mask();
        const Eigen::Index i = static_cast<Eigen::Index>(y) * width_ + x;
        mask_(i) = true;
        pixels_.row(i).setZero();
    }

    Eigen::Index unmasked_count() const {
        if (!has_mask()) return pixel_count();
        return pixel_count() - mask_.template cast<Eigen::Index>().sum();
    }

    /// Enforces the type invariants: finite non-negative channels, mask shape,
    /// masked pixels exactly zero.
    void validate() const {
        if (pixels_.rows() != static_cast<Eigen::Index>(width_) * height_)
            throw InvalidInput("image: pixel count mismatch");
        if (!pixels_.allFinite()) throw InvalidInput("image: non-finite pixel");
        if (pixels_.minCoeff() < Scalar(0)) throw InvalidInput("image: negative channel value");
        if (has_mask()) {
            if (mask_.size() != pixels_.rows()) throw InvalidInput("image: mask size mismatch");
            for (Eigen::Index i = 0; i < mask_.size(); ++i)
                if (mask_(i) && (pixels_.row(i) != Scalar(0)).any())
                    throw InvalidInput("image: masked pixel not zero");
        }
    }

private:
    int width_ = 0;
    int height_ = 0;
    Pixels pixels_;
    Mask mask_;
    ColorDomain domain_ = ColorDomain::raw;
    std::string sensor_id_;
};

using LinearImage = ImageT<float>;

}  // namespace vkcc
