#include "fairskin/skintone.hpp"

#include <algorithm>
#include <cmath>

#include "fairskin/errors.hpp"

namespace fairskin {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kDeg = 180.0 / kPi;

double ita_of(double L, double b) { return std::atan2(L - 50.0, b) * kDeg; }

}  // namespace

double compute_ita(const LabImage& img, const LesionMask& mask) {
    const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
    double sum_L = 0.0, sum_b = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (mask.data[i]) continue;
        sum_L += img.L[i];
        sum_b += img.b[i];
        ++count;
    }
    if (count == 0) throw EmptySkinRegion("mask covers every pixel, no skin to estimate");
    return ita_of(sum_L / count, sum_b / count);
}

Fst classify_fst(double ita) {
    if (ita > 55.0) return Fst::I;
    if (ita > 41.0) return Fst::II;
    if (ita > 28.0) return Fst::III;
    if (ita > 10.0) return Fst::IV;
    if (ita > -30.0) return Fst::V;
    return Fst::VI;
}

void fst_sampling_range(Fst target, double* lo, double* hi) {
    switch (target) {
        case Fst::I: *lo = 55.0; *hi = 75.0; return;
        case Fst::II: *lo = 41.0; *hi = 55.0; return;
        case Fst::III: *lo = 28.0; *hi = 41.0; return;
        case Fst::IV: *lo = 10.0; *hi = 28.0; return;
        case Fst::V: *lo = -30.0; *hi = 10.0; return;
        case Fst::VI: *lo = -50.0; *hi = -30.0; return;
    }
    *lo = 10.0;
    *hi = 28.0;
}

double sample_target_ita(Fst target, Rng& rng) {
    double lo, hi;
    fst_sampling_range(target, &lo, &hi);
    return rng.uniform_open_closed(lo, hi);
}

void init_lb(double L0, double b0, double ita_target_deg, double* L_out, double* b_out) {
    const double t = std::tan(ita_target_deg * kPi / 180.0);
    // Candidate A: keep b, solve for L on the target ray.
    const double La = b0 * t + 50.0;
    if (t == 0.0) {
        // The fixed-L candidate would divide by zero; only A remains.
        *L_out = La;
        *b_out = b0;
        return;
    }
    // Candidate B: keep L, solve for b.
    const double bb = (L0 - 50.0) / t;
    const double da = std::abs(La - L0);
    const double db = std::abs(bb - b0);
    if (da <= db) {
        *L_out = La;
        *b_out = b0;
    } else {
        *L_out = L0;
        *b_out = bb;
    }
}

double tone_loss(double L, double b, double ita_target_deg, const ToneParams& params,
                 double L_orig, double b_orig) {
    const double angle = std::atan((L - 50.0) / b) * kDeg;
    const double e = angle - ita_target_deg;
    return e * e + params.lambda_L * (L - L_orig) * (L - L_orig) +
           params.lambda_b * (b - b_orig) * (b - b_orig);
}

void refine_lb(double L, double b, double ita_target_deg, const ToneParams& params,
               double L_orig, double b_orig, double* L_out, double* b_out) {
    const double u = (L - 50.0) / b;
    const double angle = std::atan(u) * kDeg;
    const double e = angle - ita_target_deg;
    // d(angle)/dL = kDeg / (1+u^2) / b; d(angle)/db = -kDeg u / (1+u^2) / b.
    const double common = kDeg / (1.0 + u * u) / b;
    const double gL = 2.0 * e * common + 2.0 * params.lambda_L * (L - L_orig);
    const double gb = 2.0 * e * (-u * common) + 2.0 * params.lambda_b * (b - b_orig);
    double Ln = L - params.eta * gL;
    double bn = b - params.eta * gb;
    if ((b > 0.0 && bn <= 0.0) || (b < 0.0 && bn >= 0.0))
        bn = (b > 0.0 ? 1e-6 : -1e-6);
    *L_out = Ln;
    *b_out = bn;
}

LesionMask extract_edge_mask(const LesionMask& mask, int radius) {
    LesionMask out;
    out.width = mask.width;
    out.height = mask.height;
    out.data.assign(static_cast<std::size_t>(mask.width) * mask.height, 0);
    for (int y = 0; y < mask.height; ++y) {
        for (int x = 0; x < mask.width; ++x) {
            std::uint8_t dil = 0;
            std::uint8_t ero = 1;
            for (int dy = -radius; dy <= radius; ++dy) {
                for (int dx = -radius; dx <= radius; ++dx) {
                    const int xx = x + dx;
                    const int yy = y + dy;
                    std::uint8_t v = 0;  // out of bounds reads as background
                    if (xx >= 0 && xx < mask.width && yy >= 0 && yy < mask.height)
                        v = mask.data[mask.index(xx, yy)] ? 1 : 0;
                    dil = std::max(dil, v);
                    ero = std::min(ero, v);
                }
            }
            out.data[out.index(x, y)] = (dil && !ero) ? 1 : 0;
        }
    }
    return out;
}

std::vector<double> gaussian_kernel(double sigma, int radius, bool normalized) {
    const int side = 2 * radius + 1;
    std::vector<double> kern(static_cast<std::size_t>(side) * side);
    double sum = 0.0;
    for (int y = -radius; y <= radius; ++y) {
        for (int x = -radius; x <= radius; ++x) {
            const double v =
                std::exp(-(x * x + y * y) / (2.0 * sigma * sigma)) / (2.0 * kPi * sigma * sigma);
            kern[static_cast<std::size_t>(y + radius) * side + (x + radius)] = v;
            sum += v;
        }
    }
    if (normalized)
        for (double& v : kern) v /= sum;
    return kern;
}

namespace {

std::vector<double> convolve_replicate(const std::vector<double>& plane, int w, int h,
                                       const std::vector<double>& kern, int k) {
    std::vector<double> out(plane.size());
    const int side = 2 * k + 1;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int dy = -k; dy <= k; ++dy) {
                for (int dx = -k; dx <= k; ++dx) {
                    const int xx = std::clamp(x + dx, 0, w - 1);
                    const int yy = std::clamp(y + dy, 0, h - 1);
                    acc += plane[static_cast<std::size_t>(yy) * w + xx] *
                           kern[static_cast<std::size_t>(dy + k) * side + (dx + k)];
                }
            }
            out[static_cast<std::size_t>(y) * w + x] = acc;
        }
    }
    return out;
}

}  // namespace

LabImage gaussian_blend(const LabImage& img, const LesionMask& edge, const ToneParams& params) {
    const auto kern = gaussian_kernel(params.sigma, params.kernel_radius, true);
    LabImage out = img;
    const auto blurred_L = convolve_replicate(img.L, img.width, img.height, kern, params.kernel_radius);
    const auto blurred_b = convolve_replicate(img.b, img.width, img.height, kern, params.kernel_radius);
    const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
    for (std::size_t i = 0; i < n; ++i) {
        if (!edge.data[i]) continue;
        out.L[i] = blurred_L[i];
        out.b[i] = blurred_b[i];
    }
    return out;
}

ToneResult transform_skin_tone(const RgbImage& img, const LesionMask& mask,
                               const ToneParams& params, Rng& rng) {
    LabImage lab = srgb_to_lab(img);
    const std::size_t n = static_cast<std::size_t>(img.width) * img.height;

    double sum_L = 0.0, sum_b = 0.0;
    std::size_t skin = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (mask.data[i]) continue;
        sum_L += lab.L[i];
        sum_b += lab.b[i];
        ++skin;
    }
    if (skin == 0) throw EmptySkinRegion("mask covers every pixel, nothing to transform");
    const double mean_L = sum_L / skin;
    const double mean_b = sum_b / skin;

    const double target = sample_target_ita(params.target_fst, rng);

    double L1, b1;
    init_lb(mean_L, mean_b, target, &L1, &b1);
    double L2, b2;
    refine_lb(L1, b1, target, params, mean_L, mean_b, &L2, &b2);

    const double dL = L2 - mean_L;
    const double db = b2 - mean_b;
    for (std::size_t i = 0; i < n; ++i) {
        if (mask.data[i]) continue;
        lab.L[i] += dL;
        lab.b[i] += db;
    }

    const LesionMask edge = extract_edge_mask(mask, params.edge_radius);
    lab = gaussian_blend(lab, edge, params);

    ToneResult res;
    res.target_ita = target;
    res.achieved_ita = compute_ita(lab, mask);
    res.image = lab_to_srgb(lab);
    // Lesion pixels survive untouched regardless of what the tone math did
    // around them.
    for (std::size_t i = 0; i < n; ++i) {
        if (!mask.data[i]) continue;
        res.image.data[3 * i] = img.data[3 * i];
        res.image.data[3 * i + 1] = img.data[3 * i + 1];
        res.image.data[3 * i + 2] = img.data[3 * i + 2];
    }
    return res;
}

}  // namespace fairskin
