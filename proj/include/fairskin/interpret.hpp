#pragma once

#include <string>
#include <vector>

#include "fairskin/model.hpp"

namespace fairskin {

// Spatial saliency values at some resolution; raw maps may be signed,
// rectified ones are non-negative, normalized ones live in [0,1].
struct Heatmap {
    int width = 0;
    int height = 0;
    std::vector<double> values;  // row-major
    bool normalized = false;

    double at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

// Class activation map: head-weighted sum of the last conv block's maps.
// Raw output, neither rectified nor normalized. The batch must hold exactly
// one image. Throws BadClass on an out-of-range class.
Heatmap cam(const ToyModel& model, const Batch& image, int class_c);

// Gradient-weighted map: each channel map scaled by the spatial mean of the
// class logit's gradient w.r.t. that map, summed and rectified.
Heatmap grad_cam(const ToyModel& model, const Batch& image, int class_c);

// Product of the bilinearly upsampled, max-normalized gradient map with the
// max-normalized rectified guided-backpropagation saliency (gradient mean
// over input channels). Output is at input resolution, values in [0,1].
Heatmap guided_grad_cam(const ToyModel& model, const Batch& image, int class_c);

// (v - min) / (max - min); a constant map collapses to all zeros.
void normalize_01(std::vector<double>& values);

// v / max for non-negative maps; an all-zero map stays zero.
void max_normalize(std::vector<double>& values);

// Pixel-center-aligned bilinear resampling of a row-major plane.
std::vector<double> bilinear_resize(const std::vector<double>& src, int sw, int sh, int dw,
                                    int dh);

// Diverging colormap for t in [0,1]: blue (0,0,255) through gray
// (128,128,128) at 0.5 up to red (255,0,0). Inputs outside [0,1] are clamped.
void colormap_blue_red(double t, unsigned char* r, unsigned char* g, unsigned char* b);

// For every image in the batch and every listed channel, overlays the
// normalized, 224x224-resized feature map (through the colormap, alpha 0.5)
// on the resized input and writes img_{i}_ch_{c}.png into out_dir, plus an
// index.json with one row per written file. gamma, when provided, is indexed
// by absolute channel id and lands in the index (null when absent). A file
// that fails to write is skipped and excluded from the result.
std::vector<std::string> visualize_channels(const ToyModel& model, const Batch& data,
                                            const std::vector<int>& channels,
                                            const std::string& out_dir,
                                            const std::vector<double>& gamma = {});

}  // namespace fairskin
