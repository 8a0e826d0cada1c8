#include "fairskin/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>

#include "fairskin/colorspace.hpp"
#include "fairskin/errors.hpp"
#include "fairskin/skintone.hpp"

namespace fairskin {

namespace fs = std::filesystem;

namespace {

constexpr const char* kHeader = "image,mask,label,fst,age_group,gender";

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split_row(const std::string& line) {
    // Field values may not contain commas; the writer never emits them.
    std::vector<std::string> out;
    std::string cur;
    std::stringstream ss(line);
    while (std::getline(ss, cur, ',')) out.push_back(trim(cur));
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

int parse_int_field(const std::string& s, const char* what, long line_no) {
    std::size_t pos = 0;
    int v = 0;
    try {
        v = std::stoi(s, &pos);
    } catch (const std::exception&) {
        throw ParseError(std::string("bad ") + what + " value '" + s + "'", line_no);
    }
    if (pos != s.size()) throw ParseError(std::string("bad ") + what + " value '" + s + "'", line_no);
    return v;
}

std::string resolve(const fs::path& dir, const std::string& p) {
    fs::path q(p);
    if (q.is_absolute()) return q.lexically_normal().string();
    return (dir / q).lexically_normal().string();
}

// Written paths stay portable: anything under the CSV's directory is stored
// relative to it.
std::string relativize(const fs::path& dir, const std::string& p) {
    if (p.empty()) return p;
    const fs::path rel = fs::path(p).lexically_relative(dir);
    if (rel.empty()) return p;
    const std::string r = rel.generic_string();
    if (r == ".." || r.rfind("../", 0) == 0 || r == ".") return p;
    return r;
}

LesionMask mask_from_file(const std::string& path) {
    LesionMask m;
    std::vector<std::uint8_t> raw = load_mask(path, &m.width, &m.height);
    m.data = std::move(raw);
    return m;
}

int backfill_fst(const SampleRecord& rec) {
    const RgbImage img = load_image(rec.image_path);
    const LesionMask mask = mask_from_file(rec.mask_path);
    const LabImage lab = srgb_to_lab(img);
    return static_cast<int>(classify_fst(compute_ita(lab, mask)));
}

// Classification band of one skin type; open ends run to +-90 degrees.
void fst_band(int fst, double* lo, double* hi) {
    static constexpr double kEdges[7] = {90.0, 55.0, 41.0, 28.0, 10.0, -30.0, -90.0};
    *hi = kEdges[fst - 1];
    *lo = kEdges[fst];
}

struct LesionDraw {
    Lab skin;
    Lab lesion;
    double cx = 0.0, cy = 0.0;
    double ax = 1.0, ay = 1.0;
};

// Skin prototypes sit well inside their ITA band so the +-2 Lab jitter,
// plus 8-bit quantization of the rendered pixels, cannot push the measured
// angle across a category edge.
constexpr double kSkinProto[6][3] = {
    {78.0, 14.0, 14.0},  // I
    {73.0, 14.0, 20.0},  // II
    {65.0, 14.0, 22.0},  // III
    {58.0, 14.0, 24.0},  // IV
    {45.0, 14.0, 26.0},  // V
    {33.0, 14.0, 18.0},  // VI
};

Lab draw_skin(int fst, Rng& rng) {
    double lo = 0.0, hi = 0.0;
    fst_band(fst, &lo, &hi);
    Lab p;
    // Redraw jitter while the analytic angle sits within 1 degree of a band
    // edge; 8-bit rendering moves the measured angle by well under that.
    for (int attempt = 0; attempt < 64; ++attempt) {
        p.L = kSkinProto[fst - 1][0] + rng.uniform(-2.0, 2.0);
        p.a = kSkinProto[fst - 1][1] + rng.uniform(-2.0, 2.0);
        p.b = kSkinProto[fst - 1][2] + rng.uniform(-2.0, 2.0);
        const double ita = std::atan2(p.L - 50.0, p.b) * 180.0 / M_PI;
        if (ita - lo >= 1.0 && hi - ita >= 1.0) break;
    }
    return p;
}

LesionDraw draw_lesion(int fst, int cls, Rng& rng) {
    LesionDraw d;
    d.skin = draw_skin(fst, rng);

    const bool dark = cls < 2;
    const bool irregular = (cls % 2) == 1;
    const double drop = (dark ? 25.0 : 12.0) + rng.uniform(-2.0, 2.0);
    d.lesion.L = std::max(d.skin.L - drop, 2.0);
    d.lesion.a = d.skin.a + 6.0;
    d.lesion.b = d.skin.b - 6.0;

    d.ax = rng.uniform(5.0, 8.0);
    const double ratio = irregular ? rng.uniform(0.45, 0.6) : rng.uniform(0.85, 1.0);
    d.ay = d.ax * ratio;
    if (rng.bernoulli(0.5)) std::swap(d.ax, d.ay);
    d.cx = 15.5 + rng.uniform(-3.0, 3.0);
    d.cy = 15.5 + rng.uniform(-3.0, 3.0);
    return d;
}

int draw_age(double skew, Rng& rng) {
    double w[3];
    double total = 0.0;
    for (int i = 0; i < 3; ++i) {
        w[i] = std::max(0.0, 1.0 + skew * i);
        total += w[i];
    }
    double u = rng.uniform() * total;
    for (int i = 0; i < 2; ++i) {
        if (u < w[i]) return i;
        u -= w[i];
    }
    return 2;
}

}  // namespace

const std::vector<std::string>& synthetic_class_names() {
    static const std::vector<std::string> kNames{"dark_round", "dark_irregular", "light_round",
                                                 "light_irregular"};
    return kNames;
}

Manifest load_manifest(const std::string& path, const std::vector<std::string>& class_names) {
    std::ifstream in(path);
    if (!in) throw MissingFile("manifest not found: " + path);
    const fs::path dir = fs::path(path).parent_path();

    std::string line;
    if (!std::getline(in, line) || trim(line) != kHeader) {
        throw ParseError("manifest header must be '" + std::string(kHeader) + "'", 1);
    }

    Manifest m;
    long line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const std::vector<std::string> f = split_row(line);
        if (f.size() != 6) {
            throw ParseError("expected 6 fields, got " + std::to_string(f.size()), line_no);
        }

        SampleRecord rec;
        if (f[0].empty()) throw ParseError("empty image path", line_no);
        rec.image_path = resolve(dir, f[0]);
        rec.mask_path = f[1].empty() ? "" : resolve(dir, f[1]);

        const auto it = std::find(class_names.begin(), class_names.end(), f[2]);
        if (it == class_names.end()) throw ParseError("unknown label '" + f[2] + "'", line_no);
        rec.label = static_cast<int>(it - class_names.begin());

        if (!f[3].empty()) {
            rec.fst = parse_int_field(f[3], "fst", line_no);
            if (rec.fst < 1 || rec.fst > 6) {
                throw ParseError("fst must be 1..6, got " + f[3], line_no);
            }
        }
        if (!f[4].empty()) {
            rec.age_group = parse_int_field(f[4], "age_group", line_no);
            if (rec.age_group < 0) throw ParseError("negative age_group", line_no);
        }
        if (!f[5].empty()) {
            if (f[5] == "M") {
                rec.gender = 0;
            } else if (f[5] == "F") {
                rec.gender = 1;
            } else {
                throw ParseError("gender must be M, F or empty, got '" + f[5] + "'", line_no);
            }
        }
        m.rows.push_back(std::move(rec));
    }

    std::string missing;
    for (const SampleRecord& rec : m.rows) {
        if (!fs::exists(rec.image_path)) missing += "\n  " + rec.image_path;
        if (!rec.mask_path.empty() && !fs::exists(rec.mask_path)) missing += "\n  " + rec.mask_path;
    }
    if (!missing.empty()) throw MissingFile("referenced files do not exist:" + missing);

    for (SampleRecord& rec : m.rows) {
        if (rec.fst == -1 && !rec.mask_path.empty()) rec.fst = backfill_fst(rec);
    }
    return m;
}

void save_manifest(const Manifest& m, const std::string& path,
                   const std::vector<std::string>& class_names) {
    const fs::path dir = fs::path(path).parent_path();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write manifest: " + path);
    out << kHeader << "\n";
    for (const SampleRecord& rec : m.rows) {
        if (rec.label < 0 || rec.label >= static_cast<int>(class_names.size())) {
            throw BadClass("row label " + std::to_string(rec.label) + " has no class name");
        }
        out << relativize(dir, rec.image_path) << ',' << relativize(dir, rec.mask_path) << ','
            << class_names[rec.label] << ',';
        if (rec.fst != -1) out << rec.fst;
        out << ',';
        if (rec.age_group != -1) out << rec.age_group;
        out << ',';
        if (rec.gender == 0) out << 'M';
        if (rec.gender == 1) out << 'F';
        out << "\n";
    }
    if (!out) throw IoError("short write: " + path);
}

Manifest generate_synthetic(const SynthConfig& cfg) {
    if (cfg.n < 1) throw BadConfig("sample count must be >= 1");
    if (cfg.bias < 0.0 || cfg.bias > 1.0) throw BadConfig("bias must lie in [0, 1]");
    if (cfg.out_dir.empty()) throw BadConfig("out_dir required");

    const fs::path root(cfg.out_dir);
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");

    Rng rng(cfg.seed);
    const double p_female = std::clamp(0.5 + 0.5 * cfg.gender_skew, 0.0, 1.0);

    Manifest m;
    m.rows.reserve(cfg.n);
    for (int i = 0; i < cfg.n; ++i) {
        SampleRecord rec;
        rec.fst = rng.uniform_int(1, 6);
        rec.label = rng.bernoulli(cfg.bias) ? (rec.fst - 1) % 4 : rng.uniform_int(0, 3);
        rec.age_group = draw_age(cfg.age_skew, rng);
        rec.gender = rng.bernoulli(p_female) ? 1 : 0;

        const LesionDraw d = draw_lesion(rec.fst, rec.label, rng);

        RgbImage img;
        img.width = 32;
        img.height = 32;
        img.data.resize(32 * 32 * 3);
        RgbImage mask = img;
        for (int y = 0; y < 32; ++y) {
            for (int x = 0; x < 32; ++x) {
                const double dx = (x - d.cx) / d.ax;
                const double dy = (y - d.cy) / d.ay;
                const bool inside = dx * dx + dy * dy <= 1.0;
                std::uint8_t* px = img.pixel(x, y);
                lab_pixel_to_srgb(inside ? d.lesion : d.skin, px, px + 1, px + 2, nullptr);
                std::uint8_t* mp = mask.pixel(x, y);
                mp[0] = mp[1] = mp[2] = inside ? 255 : 0;
            }
        }

        char name[32];
        std::snprintf(name, sizeof(name), "img_%05d.png", i);
        rec.image_path = (root / "images" / name).lexically_normal().string();
        std::snprintf(name, sizeof(name), "mask_%05d.png", i);
        rec.mask_path = (root / "masks" / name).lexically_normal().string();
        save_image(img, rec.image_path);
        save_image(mask, rec.mask_path);
        m.rows.push_back(std::move(rec));
    }

    save_manifest(m, (root / "manifest.csv").string(), synthetic_class_names());
    return m;
}

Batch load_batch(const Manifest& m) {
    Batch b;
    b.B = static_cast<int>(m.rows.size());
    b.n_attrs = 3;
    if (b.B == 0) return b;

    b.labels.reserve(b.B);
    b.attrs.reserve(static_cast<std::size_t>(b.B) * 3);
    for (int i = 0; i < b.B; ++i) {
        const SampleRecord& rec = m.rows[i];
        const RgbImage img = load_image(rec.image_path);
        if (i == 0) {
            b.H = img.height;
            b.W = img.width;
            b.images.resize(static_cast<std::size_t>(b.B) * 3 * b.H * b.W);
        } else if (img.height != b.H || img.width != b.W) {
            throw ShapeMismatch("image " + rec.image_path + " is " + std::to_string(img.width) +
                                "x" + std::to_string(img.height) + ", batch is " +
                                std::to_string(b.W) + "x" + std::to_string(b.H));
        }
        const std::size_t plane = static_cast<std::size_t>(b.H) * b.W;
        double* dst = b.images.data() + static_cast<std::size_t>(i) * 3 * plane;
        for (std::size_t p = 0; p < plane; ++p) {
            for (int c = 0; c < 3; ++c) dst[c * plane + p] = img.data[3 * p + c] / 255.0;
        }
        b.labels.push_back(rec.label);
        b.attrs.push_back(rec.fst);
        b.attrs.push_back(rec.age_group);
        b.attrs.push_back(rec.gender);
    }
    return b;
}

}  // namespace fairskin
