#include "vkcc/dataio.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "vkcc/sampling.hpp"

namespace vkcc {

namespace {

using nlohmann::json;

void put_u32le(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32le(std::istream& is, const char* what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError(std::string("truncated ") + what);
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
           std::uint32_t(b[3]) << 24;
}

std::uint32_t float_bits(float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    return u;
}

float bits_float(std::uint32_t u) {
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

constexpr char kCcrawMagic[6] = {'C', 'C', 'R', 'W', '1', '\n'};

}  // namespace

// ---- manifest JSON ----

Manifest load_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open manifest: " + path.string());
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw InvalidInput("manifest parse error in " + path.string() + ": " + e.what());
    }
    try {
        Manifest m;
        m.name = j.at("name").get<std::string>();
        m.fold_count = j.at("fold_count").get<int>();
        if (m.fold_count < 2) throw InvalidInput("manifest: fold_count must be >= 2");
        const auto& recs = j.at("records");
        if (!recs.is_array() || recs.empty()) throw InvalidInput("manifest: records must be a non-empty array");
        for (const auto& r : recs) {
            SampleRecord rec;
            rec.image = r.at("image").get<std::string>();
            const auto& lab = r.at("label");
            if (!lab.is_array() || lab.size() != 3) throw InvalidInput("manifest: label must be [r,g,b]");
            rec.label = Illuminant(lab[0].get<double>(), lab[1].get<double>(), lab[2].get<double>());
            rec.sensor_id = r.at("sensor_id").get<std::string>();
            if (rec.sensor_id.empty()) throw InvalidInput("manifest: empty sensor_id");
            const auto& bl = r.at("black_level");
            if (!bl.is_array() || bl.size() != 3)
                throw InvalidInput("manifest: black_level must have three entries");
            for (int c = 0; c < 3; ++c) rec.black_level[c] = bl[c].get<double>();
            rec.saturation = r.at("saturation").get<double>();
            if (!(rec.saturation > rec.black_level.maxCoeff()))
                throw InvalidInput("manifest: saturation must exceed every black level");
            if (r.contains("mask_rect") && !r.at("mask_rect").is_null()) {
                const auto& mr = r.at("mask_rect");
                if (!mr.is_array() || mr.size() != 4)
                    throw InvalidInput("manifest: mask_rect must be [x,y,w,h] or null");
                rec.mask_rect = Eigen::Vector4i(mr[0].get<int>(), mr[1].get<int>(), mr[2].get<int>(),
                                                mr[3].get<int>());
            }
            m.records.push_back(std::move(rec));
        }
        return m;
    } catch (const json::exception& e) {
        throw InvalidInput("manifest schema error in " + path.string() + ": " + e.what());
    }
}

void save_manifest(const std::filesystem::path& path, const Manifest& manifest) {
    if (manifest.records.empty()) throw InvalidInput("save_manifest: empty manifest");
    json recs = json::array();
    for (const auto& r : manifest.records) {
        json jr{{"image", r.image},
                {"label", {r.label.r(), r.label.g(), r.label.b()}},
                {"sensor_id", r.sensor_id},
                {"black_level", {r.black_level[0], r.black_level[1], r.black_level[2]}},
                {"saturation", r.saturation}};
        if (r.mask_rect)
            jr["mask_rect"] = {(*r.mask_rect)[0], (*r.mask_rect)[1], (*r.mask_rect)[2], (*r.mask_rect)[3]};
        else
            jr["mask_rect"] = nullptr;
        recs.push_back(std::move(jr));
    }
    json j{{"name", manifest.name}, {"fold_count", manifest.fold_count}, {"records", std::move(recs)}};
    std::ofstream os(path);
    if (!os) throw IoError("cannot write manifest: " + path.string());
    os << j.dump(2) << "\n";
    if (!os) throw IoError("short write: " + path.string());
}

// ---- CCRAW ----

LinearImage read_ccraw(const std::filesystem::path& path, ColorDomain domain) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    char magic[6];
    if (!is.read(magic, 6) || std::memcmp(magic, kCcrawMagic, 6) != 0)
        throw IoError("bad magic (not CCRAW): " + path.string());
    const std::uint32_t w = get_u32le(is, "header");
    const std::uint32_t h = get_u32le(is, "header");
    if (w == 0 || h == 0 || std::uint64_t(w) * h > (1u << 26))
        throw IoError("implausible dimensions in " + path.string());
    LinearImage image(static_cast<int>(w), static_cast<int>(h), domain);
    std::vector<unsigned char> buf(std::size_t(w) * h * 3 * 4);
    if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
        throw IoError("truncated payload: " + path.string());
    float* dst = image.pixels().data();
    for (std::size_t i = 0; i < buf.size(); i += 4)
        *dst++ = bits_float(std::uint32_t(buf[i]) | std::uint32_t(buf[i + 1]) << 8 |
                            std::uint32_t(buf[i + 2]) << 16 | std::uint32_t(buf[i + 3]) << 24);
    if (!image.pixels().allFinite()) throw IoError("non-finite pixels in " + path.string());
    return image;
}

void write_ccraw(const std::filesystem::path& path, const LinearImage& image) {
    if (!image.pixels().allFinite()) throw InvalidInput("write_ccraw: non-finite pixels");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write: " + path.string());
    os.write(kCcrawMagic, 6);
    put_u32le(os, static_cast<std::uint32_t>(image.width()));
    put_u32le(os, static_cast<std::uint32_t>(image.height()));
    const float* src = image.pixels().data();
    std::vector<unsigned char> buf(std::size_t(image.pixel_count()) * 3 * 4);
    for (std::size_t i = 0; i < buf.size(); i += 4) {
        const std::uint32_t u = float_bits(*src++);
        buf[i] = static_cast<unsigned char>(u);
        buf[i + 1] = static_cast<unsigned char>(u >> 8);
        buf[i + 2] = static_cast<unsigned char>(u >> 16);
        buf[i + 3] = static_cast<unsigned char>(u >> 24);
    }
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!os) throw IoError("short write: " + path.string());
}

// ---- PPM ----

namespace {

// Next whitespace-separated header token, skipping '#' comment lines.
std::string ppm_token(std::istream& is) {
    std::string tok;
    int c;
    while ((c = is.get()) != EOF) {
        if (c == '#') {
            while ((c = is.get()) != EOF && c != '\n') {
            }
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(static_cast<char>(c));
    }
    if (tok.empty()) throw IoError("truncated ppm header");
    return tok;
}

}  // namespace

LinearImage read_ppm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    if (ppm_token(is) != "P6") throw InvalidInput("unsupported ppm format (want binary P6): " + path.string());
    const int w = std::stoi(ppm_token(is));
    const int h = std::stoi(ppm_token(is));
    const int maxval = std::stoi(ppm_token(is));
    if (maxval != 255) throw InvalidInput("unsupported ppm maxval (want 255): " + path.string());
    if (w <= 0 || h <= 0) throw IoError("bad ppm dimensions: " + path.string());
    // ppm_token consumed exactly one whitespace after the maxval
    std::vector<unsigned char> buf(std::size_t(w) * h * 3);
    if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
        throw IoError("truncated ppm payload: " + path.string());
    LinearImage image(w, h, ColorDomain::awb);
    float* dst = image.pixels().data();
    for (const unsigned char v : buf) *dst++ = static_cast<float>(v) / 255.0f;
    return image;
}

void write_ppm(const std::filesystem::path& path, const LinearImage& image) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write: " + path.string());
    os << "P6\n" << image.width() << " " << image.height() << "\n255\n";
    std::vector<unsigned char> buf(std::size_t(image.pixel_count()) * 3);
    const float* src = image.pixels().data();
    for (auto& b : buf) {
        const double v = std::min(1.0, std::max(0.0, static_cast<double>(*src++)));
        b = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!os) throw IoError("short write: " + path.string());
}

LinearImage import_ppm_as_uip(const std::filesystem::path& path) {
    return unprocess_srgb(read_ppm(path));
}

// ---- preprocessing ----

LinearImage preprocess(const LinearImage& image, const SampleRecord& record) {
    if (!(record.saturation > record.black_level.maxCoeff()))
        throw InvalidInput("preprocess: saturation must exceed every black level");
    LinearImage out = image;
    if (record.mask_rect) {
        const auto& mr = *record.mask_rect;
        if (mr[0] < 0 || mr[1] < 0 || mr[2] < 0 || mr[3] < 0 || mr[0] + mr[2] > out.width() ||
            mr[1] + mr[3] > out.height())
            throw InvalidInput("preprocess: mask_rect out of bounds");
        for (int y = mr[1]; y < mr[1] + mr[3]; ++y)
            for (int x = mr[0]; x < mr[0] + mr[2]; ++x) out.set_masked(x, y);
    }
    for (int c = 0; c < 3; ++c) {
        const double black = record.black_level[c];
        const double range = record.saturation - black;
        out.pixels().col(c) = ((out.pixels().col(c).cast<double>() - black) / range)
                                  .cwiseMax(0.0)
                                  .cwiseMin(1.0)
                                  .cast<float>();
    }
    if (out.has_mask())  // black-level shift must not leak into masked pixels
        for (Eigen::Index i = 0; i < out.pixel_count(); ++i)
            if (out.mask()(i)) out.pixels().row(i).setZero();
    out.set_domain(ColorDomain::raw);
    return out;
}

LinearImage load_preprocessed(const std::filesystem::path& base_dir, const SampleRecord& record) {
    return preprocess(read_ccraw(base_dir / record.image, ColorDomain::raw), record);
}

// ---- synthetic Mondrian scenes ----

Manifest synth_mondrian(const MondrianConfig& config, const std::filesystem::path& out_dir) {
    if (config.n_scenes < 1) throw InvalidInput("synth_mondrian: n_scenes must be >= 1");
    if (config.patch_grid < 2) throw InvalidInput("synth_mondrian: patch_grid must be >= 2");
    if (config.size < config.patch_grid) throw InvalidInput("synth_mondrian: size smaller than grid");
    if (config.bias < 0.0 || config.bias >= 1.0) throw InvalidInput("synth_mondrian: bias must be in [0,1)");
    if (config.achromatic_prob < 0.0 || config.achromatic_prob > 1.0)
        throw InvalidInput("synth_mondrian: achromatic_prob must be in [0,1]");
    std::filesystem::create_directories(out_dir);

    Rng rng(mix_seed(config.seed));
    Manifest manifest;
    manifest.name = "mondrian";
    manifest.fold_count = 3;

    const int grid = config.patch_grid;
    for (int s = 0; s < config.n_scenes; ++s) {
        // reflectances first, then the gray coin, then the illuminant: a fixed
        // draw order keeps scenes reproducible from the seed alone
        std::vector<Eigen::Vector3d> patches(static_cast<std::size_t>(grid) * grid);
        for (auto& p : patches) {
            for (int c = 0; c < 3; ++c) p[c] = uniform_double(rng, 0.05, 0.95);
            p[0] = std::min(1.0, p[0] * (1.0 + config.bias));
            p[2] = std::min(1.0, p[2] * (1.0 - config.bias));
        }
        if (uniform_double(rng) < config.achromatic_prob) {
            // a true white reference at the reflectance ceiling, so this patch
            // reflects the illuminant with the largest margin over its neighbors
            const auto gray = uniform_index(rng, patches.size());
            patches[gray] = Eigen::Vector3d(0.95, 0.95, 0.95);
        }

        LinearImage awb(config.size, config.size, ColorDomain::awb);
        awb.set_sensor_id("mondrian");
        for (int y = 0; y < config.size; ++y) {
            const int cy = y * grid / config.size;
            for (int x = 0; x < config.size; ++x) {
                const int cx = x * grid / config.size;
                const auto& p = patches[static_cast<std::size_t>(cy) * grid + cx];
                for (int c = 0; c < 3; ++c) awb.at(x, y, c) = static_cast<float>(p[c]);
            }
        }

        const Illuminant ell = sample_uip_illuminant(rng);
        const LinearImage raw = relight(awb, ell);

        std::ostringstream stem;
        stem << "scene_" << std::setw(4) << std::setfill('0') << s;
        write_ccraw(out_dir / (stem.str() + "_raw.ccraw"), raw);
        write_ccraw(out_dir / (stem.str() + "_awb.ccraw"), awb);

        SampleRecord rec;
        rec.image = stem.str() + "_raw.ccraw";
        rec.label = ell;
        rec.sensor_id = "mondrian";
        manifest.records.push_back(std::move(rec));
    }

    save_manifest(out_dir / "manifest.json", manifest);
    return manifest;
}

// ---- cross-validation ----

std::vector<FoldSplit> kfold_split(int record_count, int k, std::uint64_t seed) {
    if (k < 2) throw InvalidInput("kfold_split: k must be >= 2");
    if (k > record_count) throw InvalidInput("kfold_split: k exceeds record count");
    std::vector<int> order(static_cast<std::size_t>(record_count));
    for (int i = 0; i < record_count; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng rng(mix_seed(seed ^ 0xf01d5eedULL));
    shuffle_indices(order.begin(), order.end(), rng);

    std::vector<FoldSplit> folds(static_cast<std::size_t>(k));
    const int base = record_count / k;
    const int extra = record_count % k;  // first `extra` folds get one more
    int pos = 0;
    for (int f = 0; f < k; ++f) {
        const int len = base + (f < extra ? 1 : 0);
        auto& fold = folds[static_cast<std::size_t>(f)];
        fold.test.assign(order.begin() + pos, order.begin() + pos + len);
        fold.train.reserve(order.size() - fold.test.size());
        for (int i = 0; i < pos; ++i) fold.train.push_back(order[static_cast<std::size_t>(i)]);
        for (std::size_t i = static_cast<std::size_t>(pos + len); i < order.size(); ++i)
            fold.train.push_back(order[i]);
        std::sort(fold.test.begin(), fold.test.end());
        std::sort(fold.train.begin(), fold.train.end());
        pos += len;
    }
    return folds;
}

}  // namespace vkcc
