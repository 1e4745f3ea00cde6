#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "vkcc/common.hpp"

namespace vkcc {

/// Scene illuminant as a unit-L2 RGB gain triple. Components are strictly
/// positive so the triple is always usable as a von Kries diagonal.
class Illuminant {
public:
    Illuminant() : rgb_(1.0, 1.0, 1.0) { rgb_ /= std::sqrt(3.0); }

    Illuminant(double r, double g, double b) : Illuminant(Eigen::Vector3d(r, g, b)) {}

    explicit Illuminant(const Eigen::Vector3d& raw) {
        if (!raw.allFinite()) throw InvalidInput("illuminant: non-finite component");
        if (!(raw.minCoeff() > 0.0)) throw InvalidInput("illuminant: components must be > 0");
        rgb_ = raw / raw.norm();
    }

    double r() const { return rgb_.x(); }
    double g() const { return rgb_.y(); }
    double b() const { return rgb_.z(); }
    double operator[](int c) const { return rgb_[c]; }
    const Eigen::Vector3d& vec() const { return rgb_; }

    /// Per-channel product with a positive gain triple, re-normalized.
    Illuminant scaled(const Eigen::Vector3d& gains) const {
        return Illuminant(rgb_.cwiseProduct(gains).eval());
    }

    friend bool operator==(const Illuminant& a, const Illuminant& b) { return a.rgb_ == b.rgb_; }

private:
    Eigen::Vector3d rgb_;
};

/// Angle in degrees between two color directions; invariant to positive
/// scaling of either argument and symmetric. Accepts any nonzero triple.
inline double angular_error_deg(const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
    const double na = a.norm();
    const double nb = b.norm();
    if (!(na > 0.0) || !(nb > 0.0)) throw InvalidInput("angular_error: zero-norm argument");
    if (!a.allFinite() || !b.allFinite()) throw InvalidInput("angular_error: non-finite argument");
    double c = a.dot(b) / (na * nb);
    c = std::min(1.0, std::max(-1.0, c));
    return std::acos(c) * (180.0 / kPi);
}

inline double angular_error_deg(const Illuminant& a, const Illuminant& b) {
    return angular_error_deg(a.vec(), b.vec());
}

}  // namespace vkcc
