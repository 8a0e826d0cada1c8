#include "fairskin/colorspace.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "fairskin/errors.hpp"

namespace fairskin {

namespace {

// Linearization of an 8-bit sRGB channel.
double srgb_to_linear(double c8) {
    const double c = c8 / 255.0;
    if (c > 0.04045) return std::pow((c + 0.055) / 1.055, 2.4);
    return c / 12.92;
}

double linear_to_srgb(double v) {
    if (v > 0.0031308) return 1.055 * std::pow(v, 1.0 / 2.4) - 0.055;
    return 12.92 * v;
}

// Row-major sRGB->XYZ matrix (D65).
constexpr double kM[3][3] = {
    {0.4124, 0.3576, 0.1805},
    {0.2126, 0.7152, 0.0722},
    {0.0193, 0.1192, 0.9505},
};

// Inverse of kM, computed once by cofactor expansion so the round trip is
// exact with respect to the forward matrix actually used.
struct InverseM {
    double m[3][3];
    InverseM() {
        const double a = kM[0][0], b = kM[0][1], c = kM[0][2];
        const double d = kM[1][0], e = kM[1][1], f = kM[1][2];
        const double g = kM[2][0], h = kM[2][1], i = kM[2][2];
        const double det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g);
        m[0][0] = (e * i - f * h) / det;
        m[0][1] = (c * h - b * i) / det;
        m[0][2] = (b * f - c * e) / det;
        m[1][0] = (f * g - d * i) / det;
        m[1][1] = (a * i - c * g) / det;
        m[1][2] = (c * d - a * f) / det;
        m[2][0] = (d * h - e * g) / det;
        m[2][1] = (b * g - a * h) / det;
        m[2][2] = (a * e - b * d) / det;
    }
};
const InverseM kMinv;

// D65 reference white on the 0..100 XYZ scale.
constexpr double kXn = 95.047;
constexpr double kYn = 100.000;
constexpr double kZn = 108.883;

constexpr double kEps = 0.008856;

double lab_f(double t) {
    if (t > kEps) return std::cbrt(t);
    return 7.787 * t + 16.0 / 116.0;
}

double lab_f_inv(double u) {
    const double u3 = u * u * u;
    if (u3 > kEps) return u3;
    return (u - 16.0 / 116.0) / 7.787;
}

std::uint8_t clamp_channel(double v, long* clamped) {
    double c8 = std::round(v * 255.0);
    if (c8 < 0.0) {
        c8 = 0.0;
        if (clamped) ++*clamped;
    } else if (c8 > 255.0) {
        c8 = 255.0;
        if (clamped) ++*clamped;
    }
    return static_cast<std::uint8_t>(c8);
}

bool has_suffix(const std::string& s, const std::string& suf) {
    if (s.size() < suf.size()) return false;
    for (std::size_t i = 0; i < suf.size(); ++i) {
        char a = s[s.size() - suf.size() + i];
        if (a >= 'A' && a <= 'Z') a = static_cast<char>(a - 'A' + 'a');
        if (a != suf[i]) return false;
    }
    return true;
}

RgbImage load_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::string magic;
    in >> magic;
    if (magic != "P6") throw IoError(path + ": not a binary PPM");
    // PPM headers may contain '#' comments between tokens.
    auto next_int = [&in, &path]() {
        for (;;) {
            int c = in.peek();
            if (c == '#') {
                std::string line;
                std::getline(in, line);
            } else if (std::isspace(c)) {
                in.get();
            } else {
                break;
            }
        }
        long v = -1;
        in >> v;
        if (!in || v < 0) throw IoError(path + ": bad PPM header");
        return v;
    };
    const long w = next_int();
    const long h = next_int();
    const long maxval = next_int();
    if (maxval != 255) throw IoError(path + ": only maxval 255 PPM supported");
    in.get();  // single whitespace byte before the raster
    RgbImage img;
    img.width = static_cast<int>(w);
    img.height = static_cast<int>(h);
    img.data.resize(static_cast<std::size_t>(w) * h * 3);
    in.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
    if (static_cast<std::size_t>(in.gcount()) != img.data.size())
        throw IoError(path + ": truncated PPM raster");
    return img;
}

void save_ppm(const RgbImage& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.data.data()),
              static_cast<std::streamsize>(img.data.size()));
    if (!out) throw IoError("write failed: " + path);
}

struct PngReadCloser {
    png_structp png = nullptr;
    png_infop info = nullptr;
    FILE* fp = nullptr;
    ~PngReadCloser() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        if (fp) std::fclose(fp);
    }
};

RgbImage load_png(const std::string& path) {
    PngReadCloser ctx;
    ctx.fp = std::fopen(path.c_str(), "rb");
    if (!ctx.fp) throw IoError("cannot open " + path);
    ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!ctx.png) throw IoError("png_create_read_struct failed");
    ctx.info = png_create_info_struct(ctx.png);
    if (!ctx.info) throw IoError("png_create_info_struct failed");
    if (setjmp(png_jmpbuf(ctx.png))) throw IoError(path + ": PNG decode error");
    png_init_io(ctx.png, ctx.fp);
    png_read_info(ctx.png, ctx.info);

    const png_uint_32 w = png_get_image_width(ctx.png, ctx.info);
    const png_uint_32 h = png_get_image_height(ctx.png, ctx.info);
    const int color = png_get_color_type(ctx.png, ctx.info);
    const int depth = png_get_bit_depth(ctx.png, ctx.info);

    if (depth == 16) png_set_strip_16(ctx.png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(ctx.png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(ctx.png);
    if (png_get_valid(ctx.png, ctx.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(ctx.png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(ctx.png);
    png_set_strip_alpha(ctx.png);
    png_read_update_info(ctx.png, ctx.info);

    RgbImage img;
    img.width = static_cast<int>(w);
    img.height = static_cast<int>(h);
    img.data.resize(static_cast<std::size_t>(w) * h * 3);
    std::vector<png_bytep> rows(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = img.data.data() + static_cast<std::size_t>(y) * w * 3;
    png_read_image(ctx.png, rows.data());
    return img;
}

struct PngWriteCloser {
    png_structp png = nullptr;
    png_infop info = nullptr;
    FILE* fp = nullptr;
    ~PngWriteCloser() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        if (fp) std::fclose(fp);
    }
};

void save_png(const RgbImage& img, const std::string& path) {
    PngWriteCloser ctx;
    ctx.fp = std::fopen(path.c_str(), "wb");
    if (!ctx.fp) throw IoError("cannot open " + path + " for writing");
    ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!ctx.png) throw IoError("png_create_write_struct failed");
    ctx.info = png_create_info_struct(ctx.png);
    if (!ctx.info) throw IoError("png_create_info_struct failed");
    if (setjmp(png_jmpbuf(ctx.png))) throw IoError(path + ": PNG encode error");
    png_init_io(ctx.png, ctx.fp);
    // Fixed filter and compression settings keep the byte stream reproducible
    // across libpng builds.
    png_set_filter(ctx.png, 0, PNG_FILTER_NONE);
    png_set_compression_level(ctx.png, 6);
    png_set_IHDR(ctx.png, ctx.info, static_cast<png_uint_32>(img.width),
                 static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(ctx.png, ctx.info);
    std::vector<png_bytep> rows(img.height);
    for (int y = 0; y < img.height; ++y)
        rows[y] = const_cast<png_bytep>(img.data.data() + static_cast<std::size_t>(y) * img.width * 3);
    png_write_image(ctx.png, rows.data());
    png_write_end(ctx.png, nullptr);
}

}  // namespace

Lab srgb_pixel_to_lab(std::uint8_t r8, std::uint8_t g8, std::uint8_t b8) {
    const double rl = srgb_to_linear(r8);
    const double gl = srgb_to_linear(g8);
    const double bl = srgb_to_linear(b8);
    // XYZ on the 0..100 scale to match the reference white.
    const double X = 100.0 * (kM[0][0] * rl + kM[0][1] * gl + kM[0][2] * bl);
    const double Y = 100.0 * (kM[1][0] * rl + kM[1][1] * gl + kM[1][2] * bl);
    const double Z = 100.0 * (kM[2][0] * rl + kM[2][1] * gl + kM[2][2] * bl);
    const double fx = lab_f(X / kXn);
    const double fy = lab_f(Y / kYn);
    const double fz = lab_f(Z / kZn);
    Lab lab;
    lab.L = 116.0 * fy - 16.0;
    lab.a = 500.0 * (fx - fy);
    lab.b = 200.0 * (fy - fz);
    return lab;
}

void lab_pixel_to_srgb(const Lab& lab, std::uint8_t* r, std::uint8_t* g, std::uint8_t* b,
                       long* clamped) {
    const double fy = (lab.L + 16.0) / 116.0;
    const double fx = fy + lab.a / 500.0;
    const double fz = fy - lab.b / 200.0;
    const double X = kXn * lab_f_inv(fx);
    const double Y = kYn * lab_f_inv(fy);
    const double Z = kZn * lab_f_inv(fz);
    const double x = X / 100.0, y = Y / 100.0, z = Z / 100.0;
    const double rl = kMinv.m[0][0] * x + kMinv.m[0][1] * y + kMinv.m[0][2] * z;
    const double gl = kMinv.m[1][0] * x + kMinv.m[1][1] * y + kMinv.m[1][2] * z;
    const double bl = kMinv.m[2][0] * x + kMinv.m[2][1] * y + kMinv.m[2][2] * z;
    *r = clamp_channel(linear_to_srgb(rl), clamped);
    *g = clamp_channel(linear_to_srgb(gl), clamped);
    *b = clamp_channel(linear_to_srgb(bl), clamped);
}

LabImage srgb_to_lab(const RgbImage& img) {
    LabImage out;
    out.width = img.width;
    out.height = img.height;
    const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
    out.L.resize(n);
    out.a.resize(n);
    out.b.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Lab lab = srgb_pixel_to_lab(img.data[3 * i], img.data[3 * i + 1], img.data[3 * i + 2]);
        out.L[i] = lab.L;
        out.a[i] = lab.a;
        out.b[i] = lab.b;
    }
    return out;
}

RgbImage lab_to_srgb(const LabImage& img, long* clamped) {
    RgbImage out;
    out.width = img.width;
    out.height = img.height;
    const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
    out.data.resize(n * 3);
    for (std::size_t i = 0; i < n; ++i) {
        Lab lab{img.L[i], img.a[i], img.b[i]};
        lab_pixel_to_srgb(lab, &out.data[3 * i], &out.data[3 * i + 1], &out.data[3 * i + 2], clamped);
    }
    return out;
}

RgbImage load_image(const std::string& path) {
    if (!std::filesystem::exists(path)) throw MissingFile(path);
    if (has_suffix(path, ".ppm")) return load_ppm(path);
    return load_png(path);
}

void save_image(const RgbImage& img, const std::string& path) {
    if (img.width <= 0 || img.height <= 0) throw IoError("refusing to save empty image: " + path);
    if (has_suffix(path, ".ppm")) {
        save_ppm(img, path);
        return;
    }
    save_png(img, path);
}

std::vector<std::uint8_t> load_mask(const std::string& path, int* width, int* height) {
    const RgbImage img = load_image(path);
    *width = img.width;
    *height = img.height;
    const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
    std::vector<std::uint8_t> mask(n);
    for (std::size_t i = 0; i < n; ++i) mask[i] = img.data[3 * i];
    return mask;
}

}  // namespace fairskin
