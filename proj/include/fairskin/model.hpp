#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fairskin/rng.hpp"

namespace fairskin {

// Small convolutional classifier: 3x3 stride-1 pad-1 convolutions with
// rectifier activations, 2x2 max pooling after every conv block except the
// last, global average pooling, then an affine map to class logits.
struct ModelConfig {
    std::vector<int> conv_channels{8, 16, 32};
    int n_classes = 4;
    int input_hw = 32;
    int in_channels = 3;
    std::uint64_t seed = 0;
};

// Per-layer slices into the flat parameter vector.
struct LayerSlice {
    std::size_t w_off = 0;
    std::size_t w_len = 0;
    std::size_t b_off = 0;
    std::size_t b_len = 0;
    int c_in = 0;
    int c_out = 0;
};

struct ToyModel {
    ModelConfig cfg;
    std::vector<double> params;
    std::vector<LayerSlice> conv;  // one per conv layer
    LayerSlice head;               // affine c_last -> n_classes

    int last_channels() const { return cfg.conv_channels.back(); }
    int fmap_hw() const;  // spatial side of the last conv block's output

    // head weight for (class, channel) lives at head.w_off + cls*C + ch
    double head_w(int cls, int ch) const {
        return params[head.w_off + static_cast<std::size_t>(cls) * last_channels() + ch];
    }
};

// Images are stored densely as B x C x H x W doubles in [0,1]; attrs holds
// n_attrs group indices per sample (attr 0 = skin type by convention).
struct Batch {
    int B = 0;
    int C = 3;
    int H = 32;
    int W = 32;
    std::vector<double> images;
    std::vector<int> labels;
    std::vector<int> attrs;
    int n_attrs = 3;

    int attr(int i, int k) const { return attrs[static_cast<std::size_t>(i) * n_attrs + k]; }
    Batch slice(const std::vector<int>& idx) const;
};

// Activations kept from a forward pass so gradients can be replayed exactly.
struct ForwardResult {
    std::vector<double> logits;        // B x n_classes
    std::vector<double> features;      // B x C_last, spatial mean of feature_maps
    std::vector<double> feature_maps;  // B x C_last x h x w
    int fmap_h = 0;
    int fmap_w = 0;

    // caches, one entry per conv layer
    std::vector<std::vector<double>> layer_in;   // input tensor of each conv
    std::vector<std::vector<double>> pre_act;    // conv output before the rectifier
    std::vector<std::vector<std::int32_t>> pool_argmax;  // per pooled layer
};

// Deterministic uniform fan-in initialization; biases start at zero.
// Throws BadConfig on inconsistent shapes.
ToyModel build_model(const ModelConfig& cfg);

ForwardResult forward(const ToyModel& model, const Batch& batch);

// Mean cross-entropy of softmaxed logits against labels, max-stabilized.
double cross_entropy(const std::vector<double>& logits, const std::vector<int>& labels,
                     int n_classes);

// Softmax probabilities per sample, same layout as logits.
std::vector<double> softmax(const std::vector<double>& logits, int B, int n_classes);

// Gradient of mean cross-entropy w.r.t. every parameter.
std::vector<double> backward_ce(const ToyModel& model, const Batch& batch,
                                const ForwardResult& fr);

// Gradient of any scalar loss given its gradient w.r.t. the pooled features
// (B x C_last). Used by the neighbor-loss objectives, which never touch the
// classifier head.
std::vector<double> backward_from_feature_grad(const ToyModel& model, const Batch& batch,
                                               const ForwardResult& fr,
                                               const std::vector<double>& dfeatures);

// Gradient of one logit per sample w.r.t. the input image. `target` selects
// the logit per sample. With `guided`, the rectifier backward additionally
// zeroes positions whose incoming gradient is negative.
std::vector<double> input_gradient(const ToyModel& model, const Batch& batch,
                                   const ForwardResult& fr, const std::vector<int>& target,
                                   bool guided);

struct TrainConfig {
    int epochs = 5;
    double lr = 0.05;
    int batch_size = 64;
};

// Plain SGD with seeded shuffling; returns the per-epoch mean training loss.
std::vector<double> sgd_train(ToyModel& model, const Batch& data, const TrainConfig& cfg,
                              Rng& rng);

// Removes the given channels (sorted, unique, zero-based) from the last conv
// block, rewiring the head. Throws EmptyModel when nothing would remain and
// BadClass on an out-of-range index.
ToyModel remove_last_channels(const ToyModel& model, const std::vector<int>& channels);

// JSON checkpoint holding config + parameters, round-trip exact.
void save_checkpoint(const ToyModel& model, const std::string& path);
ToyModel load_checkpoint(const std::string& path);

}  // namespace fairskin
