#pragma once

#include <cstdint>
#include <vector>

#include "fairskin/colorspace.hpp"
#include "fairskin/rng.hpp"

namespace fairskin {

// Fitzpatrick skin type, classified from the individual typology angle.
enum class Fst : int { I = 1, II = 2, III = 3, IV = 4, V = 5, VI = 6 };

// Binary lesion mask paired with an image: 1 = lesion, 0 = skin.
struct LesionMask {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> data;

    std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
};

struct ToneParams {
    double lambda_L = 0.01;
    double lambda_b = 0.01;
    double eta = 0.1;
    double sigma = 2.0;
    int kernel_radius = 2;  // kernel side is 2k+1
    int edge_radius = 3;
    Fst target_fst = Fst::IV;
    std::uint64_t rng_seed = 0;
};

struct ToneResult {
    RgbImage image;
    double achieved_ita = 0.0;  // skin-mean ITA of the output, degrees
    double target_ita = 0.0;    // the sampled target angle, degrees
};

// Individual typology angle in degrees over non-lesion pixels:
// atan2(mean_L - 50, mean_b) * 180/pi.
double compute_ita(const LabImage& img, const LesionMask& mask);

// Category bounds: upper-inclusive, lower-exclusive.
// I: >55, II: (41,55], III: (28,41], IV: (10,28], V: (-30,10], VI: <= -30.
Fst classify_fst(double ita_degrees);

// Half-open interval (lo, hi] the sampler draws from. The open-ended
// categories are truncated: I to (55,75], VI to [-50,-30].
void fst_sampling_range(Fst target, double* lo, double* hi);

double sample_target_ita(Fst target, Rng& rng);

// Closest point on the target-angle ray: either move L at fixed b, or move b
// at fixed L, whichever lands nearer to (L0, b0). A zero-degree target makes
// the fixed-L candidate degenerate, so only the fixed-b one is considered.
void init_lb(double L0, double b0, double ita_target_deg, double* L_out, double* b_out);

// Loss for one mean tone point: squared angle mismatch plus proximity
// penalties on L and b.
double tone_loss(double L, double b, double ita_target_deg, const ToneParams& params,
                 double L_orig, double b_orig);

// One analytic gradient step on tone_loss. b is kept away from zero: if the
// step crosses, the result is clamped to sign(b) * 1e-6.
void refine_lb(double L, double b, double ita_target_deg, const ToneParams& params,
               double L_orig, double b_orig, double* L_out, double* b_out);

// Morphological gradient: dilation(mask, r) AND NOT erosion(mask, r) with a
// square structuring element of side 2r+1; out-of-bounds reads as 0.
LesionMask extract_edge_mask(const LesionMask& mask, int radius);

// (2r+1)^2 isotropic Gaussian taps, row-major. Unnormalized taps are the
// continuous density values; normalized taps sum to 1.
std::vector<double> gaussian_kernel(double sigma, int radius, bool normalized);

// Gaussian-blurs the L and b planes and blends blurred into original where
// edge = 1. The a plane passes through untouched.
LabImage gaussian_blend(const LabImage& img, const LesionMask& edge, const ToneParams& params);

// Full tone transformation. Lesion pixels are copied byte-for-byte from the
// input. Throws EmptySkinRegion when the mask covers every pixel.
ToneResult transform_skin_tone(const RgbImage& img, const LesionMask& mask,
                               const ToneParams& params, Rng& rng);

}  // namespace fairskin
