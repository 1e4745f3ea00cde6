#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "vkcc/dataio.hpp"
#include "vkcc/image.hpp"

namespace vkcc {

/// Angular-error summary over one evaluation run, all values in degrees.
struct MetricsReport {
    int n = 0;
    double mean = 0.0;
    double median = 0.0;
    double trimean = 0.0;
    double best25 = 0.0;
    double worst25 = 0.0;
    std::vector<std::pair<std::string, double>> per_image;  // (id, error)
};

/// Mean / median / trimean / best-25% / worst-25% of an error list.
/// Median of an even list is the average of the two middle values. Trimean is
/// (Q1 + 2*median + Q3)/4 where Q1/Q3 are medians of the lower/upper halves,
/// the overall median excluded from both halves when n is odd (for n = 1 all
/// statistics collapse to the single value). best25/worst25 average the
/// k = max(1, floor(n/4)) smallest/largest entries.
MetricsReport compute_stats(const std::vector<double>& errors_deg);

// ---- statistics-based estimators ----
// Each returns a unit-L2 illuminant direction; masked pixels are excluded.
// All are invariant to uniform positive scaling of the image.

/// Normalized per-channel mean.
Eigen::Vector3d gray_world(const LinearImage& image);

/// Normalized per-channel max; `robust` swaps the max for the 99th percentile.
Eigen::Vector3d white_patch(const LinearImage& image, bool robust = false);

/// Normalized per-channel Minkowski p-mean.
Eigen::Vector3d shades_of_gray(const LinearImage& image, double p = 6.0);

/// Normalized p-mean of first-order gradient magnitudes after Gaussian
/// smoothing. Pixels within the smoothing+gradient support of a masked pixel
/// are excluded along with the mask itself. An edge-free (constant) image
/// carries no signal and yields the neutral direction (1,1,1)/sqrt(3).
Eigen::Vector3d gray_edge1(const LinearImage& image, double p = 6.0, double sigma = 1.0);

/// Anything that maps a preprocessed raw image to an illuminant direction;
/// model estimators wrap their own encoding/resizing inside the callable.
using Estimator = std::function<Eigen::Vector3d(const LinearImage&)>;

/// Runs the estimator over the listed records (paths relative to base_dir),
/// in the given order, and aggregates angular errors.
MetricsReport evaluate(const Estimator& estimator, const Manifest& manifest,
                       const std::filesystem::path& base_dir, const std::vector<int>& test_indices);

/// Writes the report JSON: {"method","dataset","fold","n","mean","median",
/// "trimean","best25","worst25","per_image":[{"id","error"},...]}, degrees at
/// 4 decimal places, plus a "trimean_rule" line documenting the quartile
/// convention.
void save_report(const std::filesystem::path& path, const std::string& method,
                 const std::string& dataset, int fold, const MetricsReport& report);

}  // namespace vkcc
