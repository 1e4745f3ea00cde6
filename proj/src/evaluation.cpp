#include "vkcc/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "vkcc/illuminant.hpp"

namespace vkcc {

namespace {

double median_of_sorted(const std::vector<double>& v, std::size_t lo, std::size_t hi) {
    const std::size_t n = hi - lo;
    const std::size_t mid = lo + n / 2;
    return n % 2 == 1 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
}

}  // namespace

MetricsReport compute_stats(const std::vector<double>& errors_deg) {
    if (errors_deg.empty()) throw InvalidInput("compute_stats: empty error list");
    for (const double e : errors_deg)
        if (!std::isfinite(e) || e < 0.0) throw InvalidInput("compute_stats: errors must be finite and >= 0");

    std::vector<double> s = errors_deg;
    std::sort(s.begin(), s.end());
    const std::size_t n = s.size();

    MetricsReport r;
    r.n = static_cast<int>(n);
    r.mean = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(n);
    r.median = median_of_sorted(s, 0, n);

    if (n == 1) {
        r.trimean = s[0];
    } else {
        // halves exclude the middle element when n is odd
        const std::size_t half = n / 2;
        const double q1 = median_of_sorted(s, 0, half);
        const double q3 = median_of_sorted(s, n - half, n);
        r.trimean = (q1 + 2.0 * r.median + q3) / 4.0;
    }

    const std::size_t k = std::max<std::size_t>(1, n / 4);
    r.best25 = std::accumulate(s.begin(), s.begin() + k, 0.0) / static_cast<double>(k);
    r.worst25 = std::accumulate(s.end() - k, s.end(), 0.0) / static_cast<double>(k);
    return r;
}

// ---- baseline estimators ----

namespace {

Eigen::Vector3d normalized_or_throw(const Eigen::Vector3d& v, const char* who) {
    if (!v.allFinite()) throw NumericFault(std::string(who) + ": non-finite estimate");
    const double norm = v.norm();
    if (norm < 1e-12) throw NumericFault(std::string(who) + ": estimate has zero norm");
    return v / norm;
}

void require_unmasked(const LinearImage& image, const char* who) {
    if (image.unmasked_count() == 0) throw InvalidInput(std::string(who) + ": image is fully masked");
}

}  // namespace

Eigen::Vector3d gray_world(const LinearImage& image) {
    require_unmasked(image, "gray_world");
    Eigen::Vector3d sum = Eigen::Vector3d::Zero();
    for (Eigen::Index i = 0; i < image.pixel_count(); ++i) {
        if (image.masked(i)) continue;
        for (int c = 0; c < 3; ++c) sum[c] += image.pixels()(i, c);
    }
    return normalized_or_throw(sum / double(image.unmasked_count()), "gray_world");
}

Eigen::Vector3d white_patch(const LinearImage& image, bool robust) {
    require_unmasked(image, "white_patch");
    Eigen::Vector3d est = Eigen::Vector3d::Zero();
    if (!robust) {
        for (Eigen::Index i = 0; i < image.pixel_count(); ++i) {
            if (image.masked(i)) continue;
            for (int c = 0; c < 3; ++c) est[c] = std::max(est[c], double(image.pixels()(i, c)));
        }
    } else {
        std::vector<double> vals;
        vals.reserve(static_cast<std::size_t>(image.unmasked_count()));
        for (int c = 0; c < 3; ++c) {
            vals.clear();
            for (Eigen::Index i = 0; i < image.pixel_count(); ++i)
                if (!image.masked(i)) vals.push_back(image.pixels()(i, c));
            std::sort(vals.begin(), vals.end());
            // nearest-rank 99th percentile
            const std::size_t k = static_cast<std::size_t>(
                std::ceil(0.99 * static_cast<double>(vals.size())));
            est[c] = vals[std::max<std::size_t>(k, 1) - 1];
        }
    }
    return normalized_or_throw(est, "white_patch");
}

Eigen::Vector3d shades_of_gray(const LinearImage& image, double p) {
    require_unmasked(image, "shades_of_gray");
    if (!(p >= 1.0)) throw InvalidInput("shades_of_gray: p must be >= 1");
    Eigen::Vector3d acc = Eigen::Vector3d::Zero();
    for (Eigen::Index i = 0; i < image.pixel_count(); ++i) {
        if (image.masked(i)) continue;
        for (int c = 0; c < 3; ++c) acc[c] += std::pow(double(image.pixels()(i, c)), p);
    }
    acc /= double(image.unmasked_count());
    for (int c = 0; c < 3; ++c) acc[c] = std::pow(acc[c], 1.0 / p);
    return normalized_or_throw(acc, "shades_of_gray");
}

namespace {

// Separable Gaussian blur of one channel with clamped edges; kernel radius 3*sigma.
void gaussian_blur(const Eigen::ArrayXXd& in, Eigen::ArrayXXd& out, double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double ksum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        ksum += kernel[static_cast<std::size_t>(i + radius)];
    }
    for (auto& k : kernel) k /= ksum;

    const int h = static_cast<int>(in.rows());
    const int w = static_cast<int>(in.cols());
    Eigen::ArrayXXd tmp(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += kernel[static_cast<std::size_t>(i + radius)] *
                       in(y, std::clamp(x + i, 0, w - 1));
            tmp(y, x) = acc;
        }
    out.resize(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += kernel[static_cast<std::size_t>(i + radius)] *
                       tmp(std::clamp(y + i, 0, h - 1), x);
            out(y, x) = acc;
        }
}

}  // namespace

Eigen::Vector3d gray_edge1(const LinearImage& image, double p, double sigma) {
    require_unmasked(image, "gray_edge1");
    if (!(p >= 1.0) || !(sigma > 0.0)) throw InvalidInput("gray_edge1: need p >= 1 and sigma > 0");
    const int h = image.height();
    const int w = image.width();

    // exclude everything a masked pixel can touch: blur radius plus the
    // one-pixel central-difference stencil
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma))) + 1;
    Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> excluded(h, w);
    excluded.setConstant(false);
    if (image.has_mask()) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                if (!image.mask()(static_cast<Eigen::Index>(y) * w + x)) continue;
                for (int dy = -radius; dy <= radius; ++dy)
                    for (int dx = -radius; dx <= radius; ++dx) {
                        const int yy = y + dy, xx = x + dx;
                        if (yy >= 0 && yy < h && xx >= 0 && xx < w) excluded(yy, xx) = true;
                    }
            }
    }

    Eigen::Vector3d acc = Eigen::Vector3d::Zero();
    Eigen::ArrayXXd chan(h, w), smooth;
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) chan(y, x) = image.at(x, y, c);
        gaussian_blur(chan, smooth, sigma);
        long cnt = 0;
        double sum = 0.0;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                if (excluded(y, x)) continue;
                const double gx =
                    0.5 * (smooth(y, std::min(x + 1, w - 1)) - smooth(y, std::max(x - 1, 0)));
                const double gy =
                    0.5 * (smooth(std::min(y + 1, h - 1), x) - smooth(std::max(y - 1, 0), x));
                sum += std::pow(std::hypot(gx, gy), p);
                ++cnt;
            }
        if (cnt == 0) throw InvalidInput("gray_edge1: mask leaves no usable pixels");
        acc[c] = std::pow(sum / static_cast<double>(cnt), 1.0 / p);
    }
    if (acc.norm() < 1e-12)  // edge-free image: no signal, answer neutral
        return Eigen::Vector3d::Constant(1.0 / std::sqrt(3.0));
    return normalized_or_throw(acc, "gray_edge1");
}

// ---- evaluation driver ----

MetricsReport evaluate(const Estimator& estimator, const Manifest& manifest,
                       const std::filesystem::path& base_dir, const std::vector<int>& test_indices) {
    if (test_indices.empty()) throw InvalidInput("evaluate: empty test fold");
    std::vector<double> errors;
    std::vector<std::pair<std::string, double>> per_image;
    errors.reserve(test_indices.size());
    for (const int idx : test_indices) {
        if (idx < 0 || idx >= static_cast<int>(manifest.records.size()))
            throw InvalidInput("evaluate: fold index out of range");
        const SampleRecord& rec = manifest.records[static_cast<std::size_t>(idx)];
        const LinearImage raw = load_preprocessed(base_dir, rec);
        const Eigen::Vector3d estimate = estimator(raw);
        const double err = angular_error_deg(estimate, rec.label.vec());
        errors.push_back(err);
        per_image.emplace_back(rec.image, err);
    }
    MetricsReport report = compute_stats(errors);
    report.per_image = std::move(per_image);
    return report;
}

void save_report(const std::filesystem::path& path, const std::string& method,
                 const std::string& dataset, int fold, const MetricsReport& report) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write report: " + path.string());
    char num[32];
    const auto fmt = [&](double v) {
        std::snprintf(num, sizeof num, "%.4f", v);
        return std::string(num);
    };
    os << "{\n";
    os << "  \"method\": \"" << method << "\",\n";
    os << "  \"dataset\": \"" << dataset << "\",\n";
    os << "  \"fold\": " << fold << ",\n";
    os << "  \"trimean_rule\": \"(Q1 + 2*median + Q3)/4; halves exclude the overall median for odd n\",\n";
    os << "  \"n\": " << report.n << ",\n";
    os << "  \"mean\": " << fmt(report.mean) << ",\n";
    os << "  \"median\": " << fmt(report.median) << ",\n";
    os << "  \"trimean\": " << fmt(report.trimean) << ",\n";
    os << "  \"best25\": " << fmt(report.best25) << ",\n";
    os << "  \"worst25\": " << fmt(report.worst25) << ",\n";
    os << "  \"per_image\": [";
    for (std::size_t i = 0; i < report.per_image.size(); ++i) {
        os << (i == 0 ? "\n" : ",\n");
        os << "    {\"id\": \"" << report.per_image[i].first << "\", \"error\": "
           << fmt(report.per_image[i].second) << "}";
    }
    os << "\n  ]\n}\n";
    if (!os) throw IoError("short write: " + path.string());
}

}  // namespace vkcc
