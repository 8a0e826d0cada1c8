#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fairskin {

// Interleaved 8-bit RGB image.
struct RgbImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> data;  // size = width * height * 3

    std::uint8_t* pixel(int x, int y) { return data.data() + 3 * (static_cast<std::size_t>(y) * width + x); }
    const std::uint8_t* pixel(int x, int y) const {
        return data.data() + 3 * (static_cast<std::size_t>(y) * width + x);
    }
};

// Planar CIELAB image, one double per channel per pixel.
struct LabImage {
    int width = 0;
    int height = 0;
    std::vector<double> L;  // size = width * height
    std::vector<double> a;
    std::vector<double> b;

    std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
};

struct Lab {
    double L = 0.0;
    double a = 0.0;
    double b = 0.0;
};

// sRGB (D65) -> CIELAB for a single pixel. Inputs are 8-bit channel values.
Lab srgb_pixel_to_lab(std::uint8_t r, std::uint8_t g, std::uint8_t b);

// CIELAB -> sRGB for a single pixel. Out-of-gamut values are clamped to
// [0, 255] after rounding; *clamped is incremented once per clamped channel
// when non-null.
void lab_pixel_to_srgb(const Lab& lab, std::uint8_t* r, std::uint8_t* g, std::uint8_t* b,
                       long* clamped = nullptr);

LabImage srgb_to_lab(const RgbImage& img);

// Returns the number of clamped channel values via *clamped when non-null.
RgbImage lab_to_srgb(const LabImage& img, long* clamped = nullptr);

// PNG and binary PPM (P6) image I/O, 8-bit RGB only. Grayscale and palette
// PNGs are expanded to RGB on read; alpha is stripped. Throws IoError on
// failure and MissingFile when the path does not exist.
RgbImage load_image(const std::string& path);
void save_image(const RgbImage& img, const std::string& path);

// Single-channel 8-bit mask: nonzero bytes mark lesion pixels. Accepts the
// same formats as load_image; RGB inputs are reduced by taking the red
// channel.
std::vector<std::uint8_t> load_mask(const std::string& path, int* width, int* height);

}  // namespace fairskin
