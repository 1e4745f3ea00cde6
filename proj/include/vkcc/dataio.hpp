#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vkcc/color.hpp"
#include "vkcc/illuminant.hpp"
#include "vkcc/image.hpp"

namespace vkcc {

/// One labelled capture: image file plus the metadata needed to linearize it.
struct SampleRecord {
    std::string image;  // path relative to the manifest directory
    Illuminant label;
    std::string sensor_id;
    Eigen::Vector3d black_level{0.0, 0.0, 0.0};
    double saturation = 1.0;
    std::optional<Eigen::Vector4i> mask_rect;  // x, y, w, h
};

struct Manifest {
    std::string name;
    int fold_count = 3;
    std::vector<SampleRecord> records;
};

Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const Manifest& manifest);

// ---- CCRAW container: "CCRW1\n", u32 LE width, u32 LE height, then
// float32 LE interleaved RGB, row-major. Bit-exact round trip. ----

LinearImage read_ccraw(const std::filesystem::path& path, ColorDomain domain = ColorDomain::raw);
void write_ccraw(const std::filesystem::path& path, const LinearImage& image);

// ---- PPM (binary P6, maxval 255 only) ----

LinearImage read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const LinearImage& image);

/// Reads a P6 PPM, de-quantizes to [0,1] and unprocesses it to the uip domain.
LinearImage import_ppm_as_uip(const std::filesystem::path& path);

/// Masking, black-level subtraction and saturate-pixel clipping, in that
/// order. Output channels lie in [0,1]; masked pixels are exactly 0.
LinearImage preprocess(const LinearImage& image, const SampleRecord& record);

/// Loads the record's CCRAW (relative to base_dir) and preprocesses it.
LinearImage load_preprocessed(const std::filesystem::path& base_dir, const SampleRecord& record);

// ---- synthetic Mondrian scenes ----

struct MondrianConfig {
    int n_scenes = 100;
    int patch_grid = 4;       // grid x grid rectangles
    double bias = 0.0;        // chromatic bias: reflectance * (1+b, 1, 1-b), clipped
    double achromatic_prob = 1.0;  // chance a scene gets one gray (white-reference) patch
    int size = 64;            // square scene side in pixels
    std::uint64_t seed = 1;
};

/// Generates white-balanced patchwork scenes, relights each by a sampled
/// illuminant and writes scene_NNNN_raw.ccraw / scene_NNNN_awb.ccraw plus
/// manifest.json into out_dir. Labels satisfy I_raw = I_awb * ell.
Manifest synth_mondrian(const MondrianConfig& config, const std::filesystem::path& out_dir);

// ---- cross-validation ----

struct FoldSplit {
    std::vector<int> train;
    std::vector<int> test;
};

/// Deterministic shuffled k-fold partition; test sizes differ by at most one.
std::vector<FoldSplit> kfold_split(int record_count, int k, std::uint64_t seed);

}  // namespace vkcc
