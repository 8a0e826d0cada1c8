#include "fairskin/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "fairskin/errors.hpp"

namespace fairskin {

namespace {

void validate(const ModelConfig& cfg) {
    if (cfg.conv_channels.empty()) throw BadConfig("no conv layers");
    for (int c : cfg.conv_channels)
        if (c < 1) throw BadConfig("conv layer with no channels");
    if (cfg.n_classes < 2) throw BadConfig("need at least two classes");
    if (cfg.in_channels < 1 || cfg.input_hw < 1) throw BadConfig("bad input shape");
    int s = cfg.input_hw;
    for (std::size_t l = 0; l + 1 < cfg.conv_channels.size(); ++l) {
        if (s % 2 != 0) throw BadConfig("spatial size not divisible by pooling");
        s /= 2;
    }
    if (s < 1) throw BadConfig("pooled away all spatial extent");
}

}  // namespace

int ToyModel::fmap_hw() const {
    int s = cfg.input_hw;
    for (std::size_t l = 0; l + 1 < cfg.conv_channels.size(); ++l) s /= 2;
    return s;
}

ToyModel build_model(const ModelConfig& cfg) {
    validate(cfg);
    ToyModel m;
    m.cfg = cfg;
    std::size_t off = 0;
    int c_in = cfg.in_channels;
    for (int c_out : cfg.conv_channels) {
        LayerSlice s;
        s.c_in = c_in;
        s.c_out = c_out;
        s.w_off = off;
        s.w_len = static_cast<std::size_t>(c_out) * c_in * 9;
        off += s.w_len;
        s.b_off = off;
        s.b_len = static_cast<std::size_t>(c_out);
        off += s.b_len;
        m.conv.push_back(s);
        c_in = c_out;
    }
    m.head.c_in = c_in;
    m.head.c_out = cfg.n_classes;
    m.head.w_off = off;
    m.head.w_len = static_cast<std::size_t>(cfg.n_classes) * c_in;
    off += m.head.w_len;
    m.head.b_off = off;
    m.head.b_len = static_cast<std::size_t>(cfg.n_classes);
    off += m.head.b_len;

    m.params.assign(off, 0.0);
    Rng rng(cfg.seed);
    for (const LayerSlice& s : m.conv) {
        const double scale = 1.0 / std::sqrt(static_cast<double>(s.c_in) * 9.0);
        for (std::size_t i = 0; i < s.w_len; ++i)
            m.params[s.w_off + i] = rng.uniform(-scale, scale);
        // biases stay zero
    }
    const double hscale = 1.0 / std::sqrt(static_cast<double>(m.head.c_in));
    for (std::size_t i = 0; i < m.head.w_len; ++i)
        m.params[m.head.w_off + i] = rng.uniform(-hscale, hscale);
    return m;
}

Batch Batch::slice(const std::vector<int>& idx) const {
    Batch out;
    out.B = static_cast<int>(idx.size());
    out.C = C;
    out.H = H;
    out.W = W;
    out.n_attrs = n_attrs;
    const std::size_t px = static_cast<std::size_t>(C) * H * W;
    out.images.resize(idx.size() * px);
    out.labels.resize(idx.size());
    out.attrs.resize(idx.size() * n_attrs);
    for (std::size_t j = 0; j < idx.size(); ++j) {
        const int i = idx[j];
        std::copy_n(images.begin() + i * px, px, out.images.begin() + j * px);
        out.labels[j] = labels[i];
        for (int k = 0; k < n_attrs; ++k)
            out.attrs[j * n_attrs + k] = attrs[static_cast<std::size_t>(i) * n_attrs + k];
    }
    return out;
}

namespace {

// conv 3x3, stride 1, pad 1: out[co][y][x] = b[co] + sum W[co][ci][ky][kx] * in[ci][y+ky-1][x+kx-1]
void conv_forward(const double* in, int c_in, int s, const double* w, const double* b, int c_out,
                  double* out) {
    for (int co = 0; co < c_out; ++co) {
        double* o = out + static_cast<std::size_t>(co) * s * s;
        for (int i = 0; i < s * s; ++i) o[i] = b[co];
        for (int ci = 0; ci < c_in; ++ci) {
            const double* inp = in + static_cast<std::size_t>(ci) * s * s;
            const double* wk = w + (static_cast<std::size_t>(co) * c_in + ci) * 9;
            for (int y = 0; y < s; ++y) {
                for (int x = 0; x < s; ++x) {
                    double acc = 0.0;
                    for (int ky = 0; ky < 3; ++ky) {
                        const int yy = y + ky - 1;
                        if (yy < 0 || yy >= s) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            const int xx = x + kx - 1;
                            if (xx < 0 || xx >= s) continue;
                            acc += wk[ky * 3 + kx] * inp[yy * s + xx];
                        }
                    }
                    o[y * s + x] += acc;
                }
            }
        }
    }
}

}  // namespace

ForwardResult forward(const ToyModel& model, const Batch& batch) {
    const ModelConfig& cfg = model.cfg;
    if (batch.C != cfg.in_channels || batch.H != cfg.input_hw || batch.W != cfg.input_hw)
        throw ShapeMismatch("batch does not match the model input shape");
    const int B = batch.B;
    const int n_layers = static_cast<int>(cfg.conv_channels.size());

    ForwardResult fr;
    fr.layer_in.resize(n_layers);
    fr.pre_act.resize(n_layers);
    fr.pool_argmax.resize(n_layers > 1 ? n_layers - 1 : 0);

    std::vector<double> cur = batch.images;
    int s = cfg.input_hw;
    int c_in = cfg.in_channels;
    for (int l = 0; l < n_layers; ++l) {
        const LayerSlice& ls = model.conv[l];
        fr.layer_in[l] = cur;
        std::vector<double> pre(static_cast<std::size_t>(B) * ls.c_out * s * s);
        for (int b = 0; b < B; ++b)
            conv_forward(cur.data() + static_cast<std::size_t>(b) * c_in * s * s, c_in, s,
                         model.params.data() + ls.w_off, model.params.data() + ls.b_off, ls.c_out,
                         pre.data() + static_cast<std::size_t>(b) * ls.c_out * s * s);
        fr.pre_act[l] = pre;
        std::vector<double> act(pre.size());
        for (std::size_t i = 0; i < pre.size(); ++i) act[i] = pre[i] > 0.0 ? pre[i] : 0.0;

        if (l + 1 < n_layers) {
            const int so = s / 2;
            std::vector<double> pooled(static_cast<std::size_t>(B) * ls.c_out * so * so);
            std::vector<std::int32_t> arg(pooled.size());
            for (int b = 0; b < B; ++b) {
                for (int c = 0; c < ls.c_out; ++c) {
                    const std::size_t base = (static_cast<std::size_t>(b) * ls.c_out + c) * s * s;
                    const std::size_t obase = (static_cast<std::size_t>(b) * ls.c_out + c) * so * so;
                    for (int y = 0; y < so; ++y) {
                        for (int x = 0; x < so; ++x) {
                            std::size_t best = base + (2 * y) * s + 2 * x;
                            double bv = act[best];
                            const std::size_t cand[3] = {base + (2 * y) * s + 2 * x + 1,
                                                         base + (2 * y + 1) * s + 2 * x,
                                                         base + (2 * y + 1) * s + 2 * x + 1};
                            for (std::size_t idx : cand)
                                if (act[idx] > bv) {
                                    bv = act[idx];
                                    best = idx;
                                }
                            pooled[obase + y * so + x] = bv;
                            arg[obase + y * so + x] = static_cast<std::int32_t>(best);
                        }
                    }
                }
            }
            fr.pool_argmax[l] = std::move(arg);
            cur = std::move(pooled);
            s = so;
        } else {
            cur = std::move(act);
        }
        c_in = ls.c_out;
    }

    const int C = cfg.conv_channels.back();
    fr.fmap_h = s;
    fr.fmap_w = s;
    fr.feature_maps = cur;
    fr.features.assign(static_cast<std::size_t>(B) * C, 0.0);
    const double inv_z = 1.0 / (s * s);
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const std::size_t base = (static_cast<std::size_t>(b) * C + c) * s * s;
            double acc = 0.0;
            for (int i = 0; i < s * s; ++i) acc += fr.feature_maps[base + i];
            fr.features[static_cast<std::size_t>(b) * C + c] = acc * inv_z;
        }

    fr.logits.assign(static_cast<std::size_t>(B) * cfg.n_classes, 0.0);
    for (int b = 0; b < B; ++b)
        for (int k = 0; k < cfg.n_classes; ++k) {
            double acc = model.params[model.head.b_off + k];
            for (int c = 0; c < C; ++c)
                acc += model.params[model.head.w_off + static_cast<std::size_t>(k) * C + c] *
                       fr.features[static_cast<std::size_t>(b) * C + c];
            fr.logits[static_cast<std::size_t>(b) * cfg.n_classes + k] = acc;
        }
    return fr;
}

std::vector<double> softmax(const std::vector<double>& logits, int B, int n_classes) {
    std::vector<double> p(logits.size());
    for (int b = 0; b < B; ++b) {
        const std::size_t base = static_cast<std::size_t>(b) * n_classes;
        double mx = logits[base];
        for (int k = 1; k < n_classes; ++k) mx = std::max(mx, logits[base + k]);
        double sum = 0.0;
        for (int k = 0; k < n_classes; ++k) {
            p[base + k] = std::exp(logits[base + k] - mx);
            sum += p[base + k];
        }
        for (int k = 0; k < n_classes; ++k) p[base + k] /= sum;
    }
    return p;
}

double cross_entropy(const std::vector<double>& logits, const std::vector<int>& labels,
                     int n_classes) {
    const int B = static_cast<int>(labels.size());
    double loss = 0.0;
    for (int b = 0; b < B; ++b) {
        const std::size_t base = static_cast<std::size_t>(b) * n_classes;
        double mx = logits[base];
        for (int k = 1; k < n_classes; ++k) mx = std::max(mx, logits[base + k]);
        double sum = 0.0;
        for (int k = 0; k < n_classes; ++k) sum += std::exp(logits[base + k] - mx);
        loss += std::log(sum) - (logits[base + labels[b]] - mx);
    }
    return loss / B;
}

namespace {

// Shared reverse pass. dlogits and dfeatures_extra may independently be null.
// Returns parameter gradients when want_params, input gradients when
// want_input. The guided flag changes the rectifier backward rule to also
// drop negative incoming gradients.
void backward_pass(const ToyModel& model, const Batch& batch, const ForwardResult& fr,
                   const double* dlogits, const double* dfeatures_extra, bool guided,
                   std::vector<double>* param_grads, std::vector<double>* input_grads) {
    const ModelConfig& cfg = model.cfg;
    const int B = batch.B;
    const int C = cfg.conv_channels.back();
    const int n_layers = static_cast<int>(cfg.conv_channels.size());
    const int s_last = fr.fmap_h;

    if (param_grads) param_grads->assign(model.params.size(), 0.0);

    // head and feature gradient
    std::vector<double> dfeat(static_cast<std::size_t>(B) * C, 0.0);
    if (dlogits) {
        for (int b = 0; b < B; ++b) {
            for (int k = 0; k < cfg.n_classes; ++k) {
                const double dl = dlogits[static_cast<std::size_t>(b) * cfg.n_classes + k];
                if (dl == 0.0) continue;
                if (param_grads) {
                    (*param_grads)[model.head.b_off + k] += dl;
                    for (int c = 0; c < C; ++c)
                        (*param_grads)[model.head.w_off + static_cast<std::size_t>(k) * C + c] +=
                            dl * fr.features[static_cast<std::size_t>(b) * C + c];
                }
                for (int c = 0; c < C; ++c)
                    dfeat[static_cast<std::size_t>(b) * C + c] +=
                        dl * model.params[model.head.w_off + static_cast<std::size_t>(k) * C + c];
            }
        }
    }
    if (dfeatures_extra)
        for (std::size_t i = 0; i < dfeat.size(); ++i) dfeat[i] += dfeatures_extra[i];

    // features -> feature maps (spatial mean)
    const double inv_z = 1.0 / (s_last * s_last);
    std::vector<double> dact(static_cast<std::size_t>(B) * C * s_last * s_last);
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const double g = dfeat[static_cast<std::size_t>(b) * C + c] * inv_z;
            const std::size_t base = (static_cast<std::size_t>(b) * C + c) * s_last * s_last;
            for (int i = 0; i < s_last * s_last; ++i) dact[base + i] = g;
        }

    for (int l = n_layers - 1; l >= 0; --l) {
        const LayerSlice& ls = model.conv[l];
        // conv layer l runs at this spatial size: every earlier layer pooled
        const int s = cfg.input_hw >> l;
        // rectifier backward on this layer's pre-activations
        const std::vector<double>& pre = fr.pre_act[l];
        std::vector<double> dpre(pre.size(), 0.0);
        // dact refers to post-pool for pooled layers; route through the pool first
        if (l + 1 < n_layers) {
            const std::vector<std::int32_t>& arg = fr.pool_argmax[l];
            for (std::size_t i = 0; i < arg.size(); ++i) dpre[arg[i]] += dact[i];
            for (std::size_t i = 0; i < dpre.size(); ++i) {
                const bool pass = pre[i] > 0.0 && (!guided || dpre[i] > 0.0);
                dpre[i] = pass ? dpre[i] : 0.0;
            }
        } else {
            for (std::size_t i = 0; i < pre.size(); ++i) {
                const bool pass = pre[i] > 0.0 && (!guided || dact[i] > 0.0);
                dpre[i] = pass ? dact[i] : 0.0;
            }
        }

        // conv backward
        const std::vector<double>& in = fr.layer_in[l];
        const bool want_din = (l > 0) || (input_grads != nullptr);
        std::vector<double> din;
        if (want_din) din.assign(in.size(), 0.0);
        for (int b = 0; b < B; ++b) {
            const std::size_t ibase = static_cast<std::size_t>(b) * ls.c_in * s * s;
            const std::size_t obase = static_cast<std::size_t>(b) * ls.c_out * s * s;
            for (int co = 0; co < ls.c_out; ++co) {
                const double* dp = dpre.data() + obase + static_cast<std::size_t>(co) * s * s;
                if (param_grads) {
                    double acc = 0.0;
                    for (int i = 0; i < s * s; ++i) acc += dp[i];
                    (*param_grads)[ls.b_off + co] += acc;
                }
                for (int ci = 0; ci < ls.c_in; ++ci) {
                    const double* ip = in.data() + ibase + static_cast<std::size_t>(ci) * s * s;
                    double* dip = want_din
                                      ? din.data() + ibase + static_cast<std::size_t>(ci) * s * s
                                      : nullptr;
                    const std::size_t wbase = ls.w_off + (static_cast<std::size_t>(co) * ls.c_in + ci) * 9;
                    for (int ky = 0; ky < 3; ++ky) {
                        for (int kx = 0; kx < 3; ++kx) {
                            const double wv = model.params[wbase + ky * 3 + kx];
                            double wg = 0.0;
                            for (int y = 0; y < s; ++y) {
                                const int yy = y + ky - 1;
                                if (yy < 0 || yy >= s) continue;
                                for (int x = 0; x < s; ++x) {
                                    const int xx = x + kx - 1;
                                    if (xx < 0 || xx >= s) continue;
                                    const double g = dp[y * s + x];
                                    wg += g * ip[yy * s + xx];
                                    if (dip) dip[yy * s + xx] += g * wv;
                                }
                            }
                            if (param_grads) (*param_grads)[wbase + ky * 3 + kx] += wg;
                        }
                    }
                }
            }
        }
        if (l == 0) {
            if (input_grads) *input_grads = std::move(din);
        } else {
            dact = std::move(din);  // gradient w.r.t. the previous layer's post-pool output
        }
    }
}

}  // namespace

std::vector<double> backward_ce(const ToyModel& model, const Batch& batch,
                                const ForwardResult& fr) {
    const int B = batch.B;
    const int K = model.cfg.n_classes;
    std::vector<double> dlogits = softmax(fr.logits, B, K);
    for (int b = 0; b < B; ++b) dlogits[static_cast<std::size_t>(b) * K + batch.labels[b]] -= 1.0;
    for (double& v : dlogits) v /= B;
    std::vector<double> grads;
    backward_pass(model, batch, fr, dlogits.data(), nullptr, false, &grads, nullptr);
    return grads;
}

std::vector<double> backward_from_feature_grad(const ToyModel& model, const Batch& batch,
                                               const ForwardResult& fr,
                                               const std::vector<double>& dfeatures) {
    if (dfeatures.size() != fr.features.size())
        throw ShapeMismatch("feature gradient does not match features");
    std::vector<double> grads;
    backward_pass(model, batch, fr, nullptr, dfeatures.data(), false, &grads, nullptr);
    return grads;
}

std::vector<double> input_gradient(const ToyModel& model, const Batch& batch,
                                   const ForwardResult& fr, const std::vector<int>& target,
                                   bool guided) {
    const int B = batch.B;
    const int K = model.cfg.n_classes;
    std::vector<double> dlogits(static_cast<std::size_t>(B) * K, 0.0);
    for (int b = 0; b < B; ++b) dlogits[static_cast<std::size_t>(b) * K + target[b]] = 1.0;
    std::vector<double> input_grads;
    backward_pass(model, batch, fr, dlogits.data(), nullptr, guided, nullptr, &input_grads);
    return input_grads;
}

std::vector<double> sgd_train(ToyModel& model, const Batch& data, const TrainConfig& cfg,
                              Rng& rng) {
    if (data.B == 0) throw DegenerateBatch("cannot train on an empty batch");
    std::vector<double> trace;
    std::vector<int> order(data.B);
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        for (int start = 0; start < data.B; start += cfg.batch_size) {
            const int end = std::min(start + cfg.batch_size, data.B);
            std::vector<int> idx(order.begin() + start, order.begin() + end);
            const Batch mb = data.slice(idx);
            const ForwardResult fr = forward(model, mb);
            epoch_loss += cross_entropy(fr.logits, mb.labels, model.cfg.n_classes) * mb.B;
            const std::vector<double> g = backward_ce(model, mb, fr);
            for (std::size_t i = 0; i < model.params.size(); ++i)
                model.params[i] -= cfg.lr * g[i];
        }
        trace.push_back(epoch_loss / data.B);
    }
    return trace;
}

ToyModel remove_last_channels(const ToyModel& model, const std::vector<int>& channels) {
    const int C = model.last_channels();
    std::vector<char> drop(C, 0);
    for (int c : channels) {
        if (c < 0 || c >= C) throw BadClass("channel index out of range");
        drop[c] = 1;
    }
    std::vector<int> keep;
    for (int c = 0; c < C; ++c)
        if (!drop[c]) keep.push_back(c);
    if (keep.empty()) throw EmptyModel("cannot remove every channel of the last conv block");

    ModelConfig cfg = model.cfg;
    cfg.conv_channels.back() = static_cast<int>(keep.size());
    ToyModel out = build_model(cfg);

    // earlier layers copy verbatim
    for (std::size_t l = 0; l + 1 < model.conv.size(); ++l) {
        std::copy_n(model.params.begin() + model.conv[l].w_off, model.conv[l].w_len,
                    out.params.begin() + out.conv[l].w_off);
        std::copy_n(model.params.begin() + model.conv[l].b_off, model.conv[l].b_len,
                    out.params.begin() + out.conv[l].b_off);
    }
    // last conv: surviving rows
    const LayerSlice& src = model.conv.back();
    const LayerSlice& dst = out.conv.back();
    for (std::size_t j = 0; j < keep.size(); ++j) {
        std::copy_n(model.params.begin() + src.w_off + static_cast<std::size_t>(keep[j]) * src.c_in * 9,
                    static_cast<std::size_t>(src.c_in) * 9,
                    out.params.begin() + dst.w_off + j * dst.c_in * 9);
        out.params[dst.b_off + j] = model.params[src.b_off + keep[j]];
    }
    // head: surviving columns
    for (int k = 0; k < cfg.n_classes; ++k) {
        for (std::size_t j = 0; j < keep.size(); ++j)
            out.params[out.head.w_off + static_cast<std::size_t>(k) * keep.size() + j] =
                model.params[model.head.w_off + static_cast<std::size_t>(k) * C + keep[j]];
        out.params[out.head.b_off + k] = model.params[model.head.b_off + k];
    }
    return out;
}

void save_checkpoint(const ToyModel& model, const std::string& path) {
    nlohmann::ordered_json j;
    j["version"] = 1;
    j["config"]["conv_channels"] = model.cfg.conv_channels;
    j["config"]["n_classes"] = model.cfg.n_classes;
    j["config"]["input_hw"] = model.cfg.input_hw;
    j["config"]["in_channels"] = model.cfg.in_channels;
    j["config"]["seed"] = model.cfg.seed;
    j["params"] = model.params;
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << j.dump(2) << "\n";
    if (!out) throw IoError("write failed: " + path);
}

ToyModel load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingFile(path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("bad checkpoint: ") + e.what(), 0);
    }
    ModelConfig cfg;
    cfg.conv_channels = j.at("config").at("conv_channels").get<std::vector<int>>();
    cfg.n_classes = j.at("config").at("n_classes").get<int>();
    cfg.input_hw = j.at("config").at("input_hw").get<int>();
    cfg.in_channels = j.at("config").at("in_channels").get<int>();
    cfg.seed = j.at("config").at("seed").get<std::uint64_t>();
    ToyModel m = build_model(cfg);
    const auto params = j.at("params").get<std::vector<double>>();
    if (params.size() != m.params.size()) throw ParseError("checkpoint parameter count mismatch", 0);
    m.params = params;
    return m;
}

}  // namespace fairskin
