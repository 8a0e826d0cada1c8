#include "fairskin/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "fairskin/colorspace.hpp"
#include "fairskin/errors.hpp"

namespace fairskin {

namespace {

void check_single_image(const Batch& image) {
    if (image.B != 1) throw ShapeMismatch("heatmaps are computed one image at a time");
}

void check_class(const ToyModel& model, int class_c) {
    if (class_c < 0 || class_c >= model.cfg.n_classes)
        throw BadClass("class index " + std::to_string(class_c) + " out of range");
}

}  // namespace

Heatmap cam(const ToyModel& model, const Batch& image, int class_c) {
    check_single_image(image);
    check_class(model, class_c);
    ForwardResult fr = forward(model, image);

    Heatmap h;
    h.width = fr.fmap_w;
    h.height = fr.fmap_h;
    const int plane = fr.fmap_w * fr.fmap_h;
    h.values.assign(plane, 0.0);
    for (int k = 0; k < model.last_channels(); ++k) {
        const double w = model.head_w(class_c, k);
        const double* map = fr.feature_maps.data() + static_cast<std::size_t>(k) * plane;
        for (int p = 0; p < plane; ++p) h.values[p] += w * map[p];
    }
    return h;
}

Heatmap grad_cam(const ToyModel& model, const Batch& image, int class_c) {
    check_single_image(image);
    check_class(model, class_c);
    ForwardResult fr = forward(model, image);

    const int plane = fr.fmap_w * fr.fmap_h;
    Heatmap h;
    h.width = fr.fmap_w;
    h.height = fr.fmap_h;
    h.values.assign(plane, 0.0);

    // The class logit reaches each map through the spatial mean, so the
    // gradient w.r.t. every cell of map k is head_w / plane; its spatial mean
    // is the channel importance.
    for (int k = 0; k < model.last_channels(); ++k) {
        const double alpha = model.head_w(class_c, k) / plane;
        const double* map = fr.feature_maps.data() + static_cast<std::size_t>(k) * plane;
        for (int p = 0; p < plane; ++p) h.values[p] += alpha * map[p];
    }
    for (auto& v : h.values) v = std::max(0.0, v);
    return h;
}

Heatmap guided_grad_cam(const ToyModel& model, const Batch& image, int class_c) {
    check_single_image(image);
    check_class(model, class_c);

    Heatmap coarse = grad_cam(model, image, class_c);
    max_normalize(coarse.values);

    ForwardResult fr = forward(model, image);
    const std::vector<int> target{class_c};
    const auto grad = input_gradient(model, image, fr, target, /*guided=*/true);

    // Collapse the per-channel input gradient by its mean, then rectify.
    const int plane = image.H * image.W;
    std::vector<double> saliency(plane, 0.0);
    for (int c = 0; c < image.C; ++c)
        for (int p = 0; p < plane; ++p)
            saliency[p] += grad[static_cast<std::size_t>(c) * plane + p];
    for (auto& v : saliency) v = std::max(0.0, v / image.C);
    max_normalize(saliency);

    std::vector<double> up =
        bilinear_resize(coarse.values, coarse.width, coarse.height, image.W, image.H);

    Heatmap out;
    out.width = image.W;
    out.height = image.H;
    out.normalized = true;
    out.values.resize(plane);
    for (int p = 0; p < plane; ++p) out.values[p] = up[p] * saliency[p];
    return out;
}

void normalize_01(std::vector<double>& values) {
    if (values.empty()) return;
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    const double min = *lo, max = *hi;
    if (max == min) {
        std::fill(values.begin(), values.end(), 0.0);
        return;
    }
    for (auto& v : values) v = (v - min) / (max - min);
}

void max_normalize(std::vector<double>& values) {
    if (values.empty()) return;
    const double max = *std::max_element(values.begin(), values.end());
    if (max <= 0.0) {
        std::fill(values.begin(), values.end(), 0.0);
        return;
    }
    for (auto& v : values) v /= max;
}

std::vector<double> bilinear_resize(const std::vector<double>& src, int sw, int sh, int dw,
                                    int dh) {
    if (sw <= 0 || sh <= 0 || dw <= 0 || dh <= 0)
        throw BadConfig("resize dimensions must be positive");
    if (src.size() != static_cast<std::size_t>(sw) * sh)
        throw ShapeMismatch("source plane size mismatch");

    std::vector<double> dst(static_cast<std::size_t>(dw) * dh);
    const double sx = static_cast<double>(sw) / dw;
    const double sy = static_cast<double>(sh) / dh;
    for (int y = 0; y < dh; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(sh - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, sh - 1);
        const double wy = fy - y0;
        for (int x = 0; x < dw; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(sw - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, sw - 1);
            const double wx = fx - x0;
            const double top = src[y0 * sw + x0] * (1 - wx) + src[y0 * sw + x1] * wx;
            const double bot = src[y1 * sw + x0] * (1 - wx) + src[y1 * sw + x1] * wx;
            dst[static_cast<std::size_t>(y) * dw + x] = top * (1 - wy) + bot * wy;
        }
    }
    return dst;
}

void colormap_blue_red(double t, unsigned char* r, unsigned char* g, unsigned char* b) {
    t = std::clamp(t, 0.0, 1.0);
    if (t <= 0.5) {
        const double u = 2.0 * t;
        *r = static_cast<unsigned char>(std::lround(128.0 * u));
        *g = *r;
        *b = static_cast<unsigned char>(std::lround(255.0 - 127.0 * u));
    } else {
        const double v = 2.0 * t - 1.0;
        *r = static_cast<unsigned char>(std::lround(128.0 + 127.0 * v));
        *g = static_cast<unsigned char>(std::lround(128.0 * (1.0 - v)));
        *b = *g;
    }
}

std::vector<std::string> visualize_channels(const ToyModel& model, const Batch& data,
                                            const std::vector<int>& channels,
                                            const std::string& out_dir,
                                            const std::vector<double>& gamma) {
    constexpr int kSide = 224;
    for (int c : channels)
        if (c < 0 || c >= model.last_channels())
            throw BadClass("channel index " + std::to_string(c) + " out of range");
    std::filesystem::create_directories(out_dir);

    std::vector<std::string> written;
    nlohmann::ordered_json index = nlohmann::ordered_json::array();

    for (int i = 0; i < data.B; ++i) {
        Batch one = data.slice({i});
        ForwardResult fr = forward(model, one);
        const int plane = fr.fmap_w * fr.fmap_h;

        // Input planes upsampled once per image, shared across channels.
        std::vector<std::vector<double>> base(3);
        const int in_plane = one.H * one.W;
        for (int c = 0; c < 3; ++c) {
            std::vector<double> src(one.images.begin() + static_cast<std::size_t>(c) * in_plane,
                                    one.images.begin() +
                                        static_cast<std::size_t>(c + 1) * in_plane);
            base[c] = bilinear_resize(src, one.W, one.H, kSide, kSide);
        }

        for (int c : channels) {
            std::vector<double> map(fr.feature_maps.begin() + static_cast<std::size_t>(c) * plane,
                                    fr.feature_maps.begin() +
                                        static_cast<std::size_t>(c + 1) * plane);
            normalize_01(map);
            std::vector<double> up = bilinear_resize(map, fr.fmap_w, fr.fmap_h, kSide, kSide);

            RgbImage img;
            img.width = kSide;
            img.height = kSide;
            img.data.resize(static_cast<std::size_t>(kSide) * kSide * 3);
            for (int p = 0; p < kSide * kSide; ++p) {
                unsigned char hr, hg, hb;
                colormap_blue_red(up[p], &hr, &hg, &hb);
                const double br = 255.0 * std::clamp(base[0][p], 0.0, 1.0);
                const double bg = 255.0 * std::clamp(base[1][p], 0.0, 1.0);
                const double bb = 255.0 * std::clamp(base[2][p], 0.0, 1.0);
                img.data[p * 3] = static_cast<unsigned char>(std::lround(0.5 * hr + 0.5 * br));
                img.data[p * 3 + 1] =
                    static_cast<unsigned char>(std::lround(0.5 * hg + 0.5 * bg));
                img.data[p * 3 + 2] =
                    static_cast<unsigned char>(std::lround(0.5 * hb + 0.5 * bb));
            }

            const std::string name = "img_" + std::to_string(i) + "_ch_" + std::to_string(c) +
                                     ".png";
            const std::string path = (std::filesystem::path(out_dir) / name).string();
            try {
                save_image(img, path);
            } catch (const IoError&) {
                continue;  // skip the file, keep processing
            }
            written.push_back(path);
            nlohmann::ordered_json row;
            row["image"] = i;
            row["channel"] = c;
            row["path"] = name;
            if (c < static_cast<int>(gamma.size()))
                row["gamma"] = gamma[c];
            else
                row["gamma"] = nullptr;
            index.push_back(row);
        }
    }

    const std::string index_path = (std::filesystem::path(out_dir) / "index.json").string();
    std::ofstream out(index_path);
    if (!out) throw IoError("cannot write " + index_path);
    out << index.dump(2) << "\n";
    return written;
}

}  // namespace fairskin
