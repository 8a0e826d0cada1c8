#include "fairskin/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>
#include <tuple>

#include "fairskin/errors.hpp"
#include "fairskin/interpret.hpp"
#include "fairskin/sampler.hpp"

namespace fairskin {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------- schema --

void check_keys(const json& j, const std::string& ctx,
                std::initializer_list<const char*> allowed) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* a : allowed) {
            if (it.key() == a) {
                ok = true;
                break;
            }
        }
        if (!ok) throw BadConfig("unknown key '" + it.key() + "' in " + ctx);
    }
}

const json* find(const json& j, const char* key) {
    const auto it = j.find(key);
    return it == j.end() ? nullptr : &*it;
}

double need_double(const json& v, const std::string& ctx) {
    if (!v.is_number()) throw BadConfig(ctx + " must be a number");
    return v.get<double>();
}

int need_int(const json& v, const std::string& ctx) {
    if (!v.is_number_integer()) throw BadConfig(ctx + " must be an integer");
    return v.get<int>();
}

std::uint64_t need_u64(const json& v, const std::string& ctx) {
    if (!(v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0))) {
        throw BadConfig(ctx + " must be a non-negative integer");
    }
    return v.get<std::uint64_t>();
}

bool need_bool(const json& v, const std::string& ctx) {
    if (!v.is_boolean()) throw BadConfig(ctx + " must be a boolean");
    return v.get<bool>();
}

std::string need_str(const json& v, const std::string& ctx) {
    if (!v.is_string()) throw BadConfig(ctx + " must be a string");
    return v.get<std::string>();
}

void require_object(const json& v, const std::string& ctx) {
    if (!v.is_object()) throw BadConfig(ctx + " must be an object");
}

constexpr const char* kStageNames[] = {"normalize", "train",    "prune",
                                       "meta-prune", "evaluate", "explain"};

void parse_data(const json& j, DataConfig& out) {
    require_object(j, "data");
    check_keys(j, "data",
               {"manifest", "class_names", "synthetic", "eval_fraction", "meta_fraction"});
    if (const json* v = find(j, "manifest")) out.manifest = need_str(*v, "data.manifest");
    if (const json* v = find(j, "class_names")) {
        if (!v->is_array() || v->empty()) {
            throw BadConfig("data.class_names must be a nonempty array");
        }
        out.class_names.clear();
        for (const json& e : *v) out.class_names.push_back(need_str(e, "data.class_names[]"));
    }
    if (const json* v = find(j, "synthetic")) {
        require_object(*v, "data.synthetic");
        check_keys(*v, "data.synthetic", {"n", "bias", "age_skew", "gender_skew"});
        if (const json* s = find(*v, "n")) out.synthetic.n = need_int(*s, "data.synthetic.n");
        if (const json* s = find(*v, "bias"))
            out.synthetic.bias = need_double(*s, "data.synthetic.bias");
        if (const json* s = find(*v, "age_skew"))
            out.synthetic.age_skew = need_double(*s, "data.synthetic.age_skew");
        if (const json* s = find(*v, "gender_skew"))
            out.synthetic.gender_skew = need_double(*s, "data.synthetic.gender_skew");
        if (out.synthetic.n < 1) throw BadConfig("data.synthetic.n must be >= 1");
        if (out.synthetic.bias < 0.0 || out.synthetic.bias > 1.0) {
            throw BadConfig("data.synthetic.bias must lie in [0, 1]");
        }
    }
    if (const json* v = find(j, "eval_fraction"))
        out.eval_fraction = need_double(*v, "data.eval_fraction");
    if (const json* v = find(j, "meta_fraction"))
        out.meta_fraction = need_double(*v, "data.meta_fraction");
    if (out.eval_fraction < 0.0 || out.eval_fraction >= 1.0) {
        throw BadConfig("data.eval_fraction must lie in [0, 1)");
    }
    if (out.meta_fraction < 0.0 || out.meta_fraction >= 1.0) {
        throw BadConfig("data.meta_fraction must lie in [0, 1)");
    }
}

void parse_tone(const json& j, ToneParams& out) {
    require_object(j, "tone");
    check_keys(j, "tone", {"lambda_L", "lambda_b", "eta", "sigma", "kernel_radius",
                           "edge_radius", "target_fst"});
    if (const json* v = find(j, "lambda_L")) out.lambda_L = need_double(*v, "tone.lambda_L");
    if (const json* v = find(j, "lambda_b")) out.lambda_b = need_double(*v, "tone.lambda_b");
    if (const json* v = find(j, "eta")) out.eta = need_double(*v, "tone.eta");
    if (const json* v = find(j, "sigma")) out.sigma = need_double(*v, "tone.sigma");
    if (const json* v = find(j, "kernel_radius"))
        out.kernel_radius = need_int(*v, "tone.kernel_radius");
    if (const json* v = find(j, "edge_radius")) out.edge_radius = need_int(*v, "tone.edge_radius");
    if (const json* v = find(j, "target_fst")) {
        const int t = need_int(*v, "tone.target_fst");
        if (t < 1 || t > 6) throw BadConfig("tone.target_fst must be 1..6");
        out.target_fst = static_cast<Fst>(t);
    }
    if (out.lambda_L < 0.0 || out.lambda_b < 0.0) throw BadConfig("tone penalties must be >= 0");
    if (out.eta <= 0.0) throw BadConfig("tone.eta must be > 0");
    if (out.sigma <= 0.0) throw BadConfig("tone.sigma must be > 0");
    if (out.kernel_radius < 1) throw BadConfig("tone.kernel_radius must be >= 1");
    if (out.edge_radius < 0) throw BadConfig("tone.edge_radius must be >= 0");
}

void parse_blend(const json& j, BlendConfig& out) {
    require_object(j, "blend");
    check_keys(j, "blend", {"enabled", "tau", "delta", "eval_period"});
    if (const json* v = find(j, "enabled")) out.enabled = need_bool(*v, "blend.enabled");
    if (const json* v = find(j, "tau")) out.tau = need_double(*v, "blend.tau");
    if (const json* v = find(j, "delta")) out.delta = need_double(*v, "blend.delta");
    if (const json* v = find(j, "eval_period")) out.eval_period = need_int(*v, "blend.eval_period");
    if (out.tau < 0.0 || out.tau > 1.0) throw BadConfig("blend.tau must lie in [0, 1]");
    if (out.delta < 0.0 || out.delta > 1.0) throw BadConfig("blend.delta must lie in [0, 1]");
    if (out.eval_period < 1) throw BadConfig("blend.eval_period must be >= 1");
}

void parse_model(const json& j, ModelConfig& out) {
    require_object(j, "model");
    check_keys(j, "model", {"conv_channels"});
    if (const json* v = find(j, "conv_channels")) {
        if (!v->is_array() || v->empty()) {
            throw BadConfig("model.conv_channels must be a nonempty array");
        }
        out.conv_channels.clear();
        for (const json& e : *v) {
            const int c = need_int(e, "model.conv_channels[]");
            if (c < 1) throw BadConfig("model.conv_channels entries must be >= 1");
            out.conv_channels.push_back(c);
        }
    }
}

void parse_train(const json& j, TrainStageConfig& out) {
    require_object(j, "train");
    check_keys(j, "train", {"epochs", "lr", "batch_size", "folds"});
    if (const json* v = find(j, "epochs")) out.sgd.epochs = need_int(*v, "train.epochs");
    if (const json* v = find(j, "lr")) out.sgd.lr = need_double(*v, "train.lr");
    if (const json* v = find(j, "batch_size")) out.sgd.batch_size = need_int(*v, "train.batch_size");
    if (const json* v = find(j, "folds")) out.folds = need_int(*v, "train.folds");
    if (out.sgd.epochs < 0) throw BadConfig("train.epochs must be >= 0");
    if (out.sgd.lr <= 0.0) throw BadConfig("train.lr must be > 0");
    if (out.sgd.batch_size < 1) throw BadConfig("train.batch_size must be >= 1");
    if (out.folds != 0 && out.folds < 2) throw BadConfig("train.folds must be 0 or >= 2");
}

void parse_snnl(const json& j, SnnlParams& out) {
    require_object(j, "snnl");
    check_keys(j, "snnl", {"temperature", "batch_b"});
    if (const json* v = find(j, "temperature"))
        out.temperature_T = need_double(*v, "snnl.temperature");
    if (const json* v = find(j, "batch_b")) out.batch_b = need_int(*v, "snnl.batch_b");
    if (out.temperature_T <= 0.0) throw BadConfig("snnl.temperature must be > 0");
    if (out.batch_b < 2) throw BadConfig("snnl.batch_b must be >= 2");
}

void parse_prune(const json& j, PruneConfig& out, int& attribute) {
    require_object(j, "prune");
    check_keys(j, "prune", {"ratio", "max_iterations", "acc_threshold", "fair_threshold",
                            "finetune_epochs", "finetune_lr", "attribute"});
    if (const json* v = find(j, "ratio")) out.prune_ratio = need_double(*v, "prune.ratio");
    if (const json* v = find(j, "max_iterations"))
        out.max_iterations = need_int(*v, "prune.max_iterations");
    if (const json* v = find(j, "acc_threshold"))
        out.acc_threshold = need_double(*v, "prune.acc_threshold");
    if (const json* v = find(j, "fair_threshold"))
        out.fair_threshold = need_double(*v, "prune.fair_threshold");
    if (const json* v = find(j, "finetune_epochs"))
        out.finetune_epochs = need_int(*v, "prune.finetune_epochs");
    if (const json* v = find(j, "finetune_lr"))
        out.finetune_lr = need_double(*v, "prune.finetune_lr");
    if (const json* v = find(j, "attribute")) attribute = need_int(*v, "prune.attribute");
    if (out.prune_ratio <= 0.0 || out.prune_ratio > 1.0) {
        throw BadConfig("prune.ratio must lie in (0, 1]");
    }
    if (out.max_iterations < 0) throw BadConfig("prune.max_iterations must be >= 0");
    if (out.acc_threshold < 0.0) throw BadConfig("prune.acc_threshold must be >= 0");
    if (out.fair_threshold < 0.0) throw BadConfig("prune.fair_threshold must be >= 0");
    if (out.finetune_epochs < 0) throw BadConfig("prune.finetune_epochs must be >= 0");
    if (out.finetune_lr <= 0.0) throw BadConfig("prune.finetune_lr must be > 0");
    if (attribute < 0 || attribute > 2) throw BadConfig("prune.attribute must be 0..2");
}

void parse_meta(const json& j, MetaConfig& out, int& subset) {
    require_object(j, "meta");
    check_keys(j, "meta", {"alpha", "eta", "iterations", "fd_step", "train_subset"});
    if (const json* v = find(j, "alpha")) out.alpha = need_double(*v, "meta.alpha");
    if (const json* v = find(j, "eta")) out.eta = need_double(*v, "meta.eta");
    if (const json* v = find(j, "iterations"))
        out.meta_iterations_T = need_int(*v, "meta.iterations");
    if (const json* v = find(j, "fd_step")) out.fd_step = need_double(*v, "meta.fd_step");
    if (const json* v = find(j, "train_subset")) subset = need_int(*v, "meta.train_subset");
    if (out.alpha < 0.0) throw BadConfig("meta.alpha must be >= 0");
    if (out.eta < 0.0) throw BadConfig("meta.eta must be >= 0");
    if (out.meta_iterations_T < 0) throw BadConfig("meta.iterations must be >= 0");
    if (out.fd_step <= 0.0) throw BadConfig("meta.fd_step must be > 0");
    if (subset < 0) throw BadConfig("meta.train_subset must be >= 0");
}

void parse_metrics(const json& j, MetricConfig& out) {
    require_object(j, "metrics");
    check_keys(j, "metrics", {"positive_class", "di_attribute"});
    if (const json* v = find(j, "positive_class"))
        out.positive_class = need_int(*v, "metrics.positive_class");
    if (const json* v = find(j, "di_attribute"))
        out.di_attribute = need_int(*v, "metrics.di_attribute");
    if (out.positive_class < 0) throw BadConfig("metrics.positive_class must be >= 0");
    if (out.di_attribute < 0 || out.di_attribute > 2) {
        throw BadConfig("metrics.di_attribute must be 0..2");
    }
}

void parse_explain(const json& j, ExplainConfig& out) {
    require_object(j, "explain");
    check_keys(j, "explain", {"images", "channels"});
    if (const json* v = find(j, "images")) out.images = need_int(*v, "explain.images");
    if (const json* v = find(j, "channels")) {
        if (!v->is_array()) throw BadConfig("explain.channels must be an array");
        out.channels.clear();
        for (const json& e : *v) {
            const int c = need_int(e, "explain.channels[]");
            if (c < 0) throw BadConfig("explain.channels entries must be >= 0");
            out.channels.push_back(c);
        }
    }
    if (out.images < 1) throw BadConfig("explain.images must be >= 1");
}

}  // namespace

RunConfig parse_run_config(const json& j) {
    require_object(j, "config");
    check_keys(j, "config", {"seed", "out_dir", "workers", "stages", "data", "tone", "blend",
                             "model", "train", "snnl", "prune", "meta", "metrics", "explain"});
    RunConfig cfg;
    if (const json* v = find(j, "seed")) cfg.seed = need_u64(*v, "seed");
    if (const json* v = find(j, "out_dir")) cfg.out_dir = need_str(*v, "out_dir");
    if (const json* v = find(j, "workers")) cfg.workers = need_int(*v, "workers");
    if (cfg.out_dir.empty()) throw BadConfig("out_dir must be nonempty");
    if (cfg.workers < 1) throw BadConfig("workers must be >= 1");
    if (const json* v = find(j, "stages")) {
        if (!v->is_array()) throw BadConfig("stages must be an array");
        cfg.stages.clear();
        for (const json& e : *v) {
            const std::string s = need_str(e, "stages[]");
            const auto* end = std::end(kStageNames);
            if (std::find(std::begin(kStageNames), end, s) == end) {
                throw BadConfig("unknown stage '" + s + "'");
            }
            if (std::find(cfg.stages.begin(), cfg.stages.end(), s) != cfg.stages.end()) {
                throw BadConfig("stage '" + s + "' listed twice");
            }
            cfg.stages.push_back(s);
        }
    }
    if (const json* v = find(j, "data")) parse_data(*v, cfg.data);
    if (const json* v = find(j, "tone")) parse_tone(*v, cfg.tone);
    if (const json* v = find(j, "blend")) parse_blend(*v, cfg.blend);
    if (const json* v = find(j, "model")) parse_model(*v, cfg.model);
    if (const json* v = find(j, "train")) parse_train(*v, cfg.train);
    if (const json* v = find(j, "snnl")) parse_snnl(*v, cfg.snnl);
    if (const json* v = find(j, "prune")) parse_prune(*v, cfg.prune, cfg.prune_attribute);
    if (const json* v = find(j, "meta")) parse_meta(*v, cfg.meta, cfg.meta_train_subset);
    if (const json* v = find(j, "metrics")) parse_metrics(*v, cfg.metrics);
    if (const json* v = find(j, "explain")) parse_explain(*v, cfg.explain);
    return cfg;
}

json load_config_json(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingFile("config not found: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        const std::size_t upto = std::min(text.size(), e.byte);
        const long line = 1 + static_cast<long>(std::count(text.begin(), text.begin() + upto, '\n'));
        throw ParseError(std::string("config is not valid JSON: ") + e.what(), line);
    }
}

RunConfig load_run_config(const std::string& path) { return parse_run_config(load_config_json(path)); }

ordered_json run_config_json(const RunConfig& cfg) {
    ordered_json j;
    j["seed"] = cfg.seed;
    j["out_dir"] = cfg.out_dir;
    j["workers"] = cfg.workers;
    j["stages"] = cfg.stages;
    j["data"] = {{"manifest", cfg.data.manifest},
                 {"class_names", cfg.data.class_names},
                 {"synthetic",
                  {{"n", cfg.data.synthetic.n},
                   {"bias", cfg.data.synthetic.bias},
                   {"age_skew", cfg.data.synthetic.age_skew},
                   {"gender_skew", cfg.data.synthetic.gender_skew}}},
                 {"eval_fraction", cfg.data.eval_fraction},
                 {"meta_fraction", cfg.data.meta_fraction}};
    j["tone"] = {{"lambda_L", cfg.tone.lambda_L},
                 {"lambda_b", cfg.tone.lambda_b},
                 {"eta", cfg.tone.eta},
                 {"sigma", cfg.tone.sigma},
                 {"kernel_radius", cfg.tone.kernel_radius},
                 {"edge_radius", cfg.tone.edge_radius},
                 {"target_fst", static_cast<int>(cfg.tone.target_fst)}};
    j["blend"] = {{"enabled", cfg.blend.enabled},
                  {"tau", cfg.blend.tau},
                  {"delta", cfg.blend.delta},
                  {"eval_period", cfg.blend.eval_period}};
    j["model"] = {{"conv_channels", cfg.model.conv_channels}};
    j["train"] = {{"epochs", cfg.train.sgd.epochs},
                  {"lr", cfg.train.sgd.lr},
                  {"batch_size", cfg.train.sgd.batch_size},
                  {"folds", cfg.train.folds}};
    j["snnl"] = {{"temperature", cfg.snnl.temperature_T}, {"batch_b", cfg.snnl.batch_b}};
    j["prune"] = {{"ratio", cfg.prune.prune_ratio},
                  {"max_iterations", cfg.prune.max_iterations},
                  {"acc_threshold", cfg.prune.acc_threshold},
                  {"fair_threshold", cfg.prune.fair_threshold},
                  {"finetune_epochs", cfg.prune.finetune_epochs},
                  {"finetune_lr", cfg.prune.finetune_lr},
                  {"attribute", cfg.prune_attribute}};
    j["meta"] = {{"alpha", cfg.meta.alpha},
                 {"eta", cfg.meta.eta},
                 {"iterations", cfg.meta.meta_iterations_T},
                 {"fd_step", cfg.meta.fd_step},
                 {"train_subset", cfg.meta_train_subset}};
    j["metrics"] = {{"positive_class", cfg.metrics.positive_class},
                    {"di_attribute", cfg.metrics.di_attribute}};
    j["explain"] = {{"images", cfg.explain.images}, {"channels", cfg.explain.channels}};
    return j;
}

void apply_override(json& config, const std::string& dotted_key, const std::string& value) {
    if (dotted_key.empty()) throw BadConfig("override key must be nonempty");
    std::vector<std::string> parts;
    std::string cur;
    std::stringstream ss(dotted_key);
    while (std::getline(ss, cur, '.')) parts.push_back(cur);
    for (const std::string& p : parts) {
        if (p.empty()) throw BadConfig("override key '" + dotted_key + "' has an empty segment");
    }
    json* node = &config;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        json& next = (*node)[parts[i]];
        if (!next.is_object() && !next.is_null()) {
            throw BadConfig("override key '" + dotted_key + "' descends through a non-object");
        }
        if (next.is_null()) next = json::object();
        node = &next;
    }
    const json parsed = json::parse(value, nullptr, false);
    if (parsed.is_discarded()) {
        (*node)[parts.back()] = value;
    } else {
        (*node)[parts.back()] = parsed;
    }
}

std::string fnv1a64_hex(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::pair<Manifest, Manifest> split_manifest(const Manifest& m, double held_out_fraction,
                                             Rng& rng) {
    if (held_out_fraction < 0.0 || held_out_fraction >= 1.0) {
        throw BadConfig("held-out fraction must lie in [0, 1)");
    }
    if (held_out_fraction == 0.0) return {m, Manifest{}};

    std::map<std::tuple<int, int, int, int>, std::vector<int>> strata;
    for (int i = 0; i < static_cast<int>(m.rows.size()); ++i) {
        const SampleRecord& r = m.rows[i];
        strata[{r.label, r.fst, r.age_group, r.gender}].push_back(i);
    }
    std::vector<int> held, rest;
    for (auto& [key, idx] : strata) {
        (void)key;
        rng.shuffle(idx);
        const long n = static_cast<long>(idx.size());
        const long k = std::clamp(std::lround(held_out_fraction * n), 1L, n);
        held.insert(held.end(), idx.begin(), idx.begin() + k);
        rest.insert(rest.end(), idx.begin() + k, idx.end());
    }
    std::sort(held.begin(), held.end());
    std::sort(rest.begin(), rest.end());

    std::pair<Manifest, Manifest> out;
    for (const int i : rest) out.first.rows.push_back(m.rows[i]);
    for (const int i : held) out.second.rows.push_back(m.rows[i]);
    return out;
}

namespace {

// ----------------------------------------------------------- stage runner --

void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
    workers = std::clamp(workers, 1, std::max(1, n));
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::mutex mu;
    std::exception_ptr first;
    auto body = [&] {
        for (;;) {
            const int i = next.fetch_add(1);
            if (i >= n) return;
            {
                std::lock_guard<std::mutex> lk(mu);
                if (first) return;
            }
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lk(mu);
                if (!first) first = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int t = 0; t < workers; ++t) pool.emplace_back(body);
    for (std::thread& th : pool) th.join();
    if (first) std::rethrow_exception(first);
}

void write_json(const ordered_json& j, const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << "\n";
    if (!out) throw IoError("short write: " + path.string());
}

std::string read_bytes_or_throw(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Rng stage_rng(std::uint64_t seed, std::uint64_t salt) {
    return Rng(seed * 0x9E3779B97F4A7C15ULL + salt);
}

struct StageContext {
    const RunConfig& cfg;
    fs::path root;

    bool data_ready = false;
    std::vector<std::string> class_names;
    Manifest train_rows, meta_rows, eval_rows;
    Batch train_b, meta_b, eval_b;

    bool counterparts_ready = false;
    std::vector<std::optional<SampleRecord>> counterparts;  // aligned to train_rows

    std::optional<ToyModel> baseline, pruned, meta_pruned;
    std::vector<std::pair<std::string, std::string>> artifacts;  // name, relative path
};

void add_artifact(StageContext& c, const std::string& name, const std::string& rel) {
    c.artifacts.emplace_back(name, rel);
}

void ensure_data(StageContext& c) {
    if (c.data_ready) return;
    const RunConfig& cfg = c.cfg;

    Manifest all;
    if (cfg.data.manifest.empty()) {
        c.class_names = synthetic_class_names();
        SynthConfig s = cfg.data.synthetic;
        s.seed = cfg.seed;
        s.out_dir = (c.root / "data").string();
        all = generate_synthetic(s);
        add_artifact(c, "data_manifest", "data/manifest.csv");
    } else {
        c.class_names = cfg.data.class_names;
        all = load_manifest(cfg.data.manifest, c.class_names);
    }

    Rng split_rng = stage_rng(cfg.seed, 0x51);
    auto [rest, eval_rows] = split_manifest(all, cfg.data.eval_fraction, split_rng);
    auto [train_rows, meta_rows] = split_manifest(rest, cfg.data.meta_fraction, split_rng);
    c.train_rows = std::move(train_rows);
    c.meta_rows = std::move(meta_rows);
    c.eval_rows = std::move(eval_rows);
    c.train_b = load_batch(c.train_rows);
    c.meta_b = load_batch(c.meta_rows);
    c.eval_b = load_batch(c.eval_rows);
    c.data_ready = true;
}

std::optional<ToyModel> stored_model(StageContext& c, const std::optional<ToyModel>& slot,
                                     const char* filename) {
    if (slot) return slot;
    const fs::path p = c.root / "checkpoints" / filename;
    if (!fs::exists(p)) return std::nullopt;
    return load_checkpoint(p.string());
}

ToyModel acquire_baseline(StageContext& c, const std::string& stage) {
    const std::optional<ToyModel> m = stored_model(c, c.baseline, "baseline.json");
    if (!m) throw StageFailure(stage, "no trained checkpoint found; run the train stage first");
    return *m;
}

// ----------------------------------------------------------------- stages --

void stage_normalize(StageContext& c) {
    ensure_data(c);
    const RunConfig& cfg = c.cfg;
    const int n = static_cast<int>(c.train_rows.rows.size());
    fs::create_directories(c.root / "normalized" / "images");

    struct RowResult {
        bool done = false;
        double achieved = 0.0;
        double target = 0.0;
        std::string rel;
    };
    std::vector<RowResult> results(n);

    parallel_for(n, cfg.workers, [&](int i) {
        const SampleRecord& rec = c.train_rows.rows[i];
        if (rec.mask_path.empty() || rec.fst == -1) return;
        const RgbImage img = load_image(rec.image_path);
        LesionMask mask;
        mask.data = load_mask(rec.mask_path, &mask.width, &mask.height);
        // One stream per image: output bytes do not depend on the worker
        // count or on scheduling.
        Rng rng(cfg.seed * 1000003ULL + static_cast<std::uint64_t>(i));
        const ToneResult tr = transform_skin_tone(img, mask, cfg.tone, rng);
        char name[32];
        std::snprintf(name, sizeof(name), "norm_%05d.png", i);
        const std::string rel = std::string("normalized/images/") + name;
        save_image(tr.image, (c.root / rel).string());
        results[i] = {true, tr.achieved_ita, tr.target_ita, rel};
    });

    Manifest norm;
    ordered_json rows = ordered_json::array();
    int transformed = 0;
    double sum_achieved = 0.0;
    c.counterparts.assign(n, std::nullopt);
    for (int i = 0; i < n; ++i) {
        if (!results[i].done) {
            rows.push_back({{"row", i}, {"skipped", true}});
            continue;
        }
        SampleRecord cp = c.train_rows.rows[i];
        cp.image_path = (c.root / results[i].rel).lexically_normal().string();
        c.counterparts[i] = cp;
        norm.rows.push_back(cp);
        rows.push_back({{"row", i},
                        {"image", results[i].rel},
                        {"achieved_ita", results[i].achieved},
                        {"target_ita", results[i].target}});
        ++transformed;
        sum_achieved += results[i].achieved;
    }
    c.counterparts_ready = true;

    save_manifest(norm, (c.root / "normalized" / "manifest.csv").string(), c.class_names);
    ordered_json report;
    report["target_fst"] = static_cast<int>(cfg.tone.target_fst);
    report["transformed"] = transformed;
    report["skipped"] = n - transformed;
    report["mean_achieved_ita"] = transformed > 0 ? sum_achieved / transformed : 0.0;
    report["rows"] = rows;
    write_json(report, c.root / "tone_report.json");
    add_artifact(c, "tone_report", "tone_report.json");
    add_artifact(c, "normalized_manifest", "normalized/manifest.csv");
}

void ensure_counterparts(StageContext& c, const std::string& stage) {
    if (c.counterparts_ready) return;
    ensure_data(c);
    const fs::path report_path = c.root / "tone_report.json";
    if (!fs::exists(report_path)) {
        throw StageFailure(stage,
                           "blend training needs tone-transformed counterparts; "
                           "run the normalize stage first");
    }
    const json report = json::parse(read_bytes_or_throw(report_path));
    const int n = static_cast<int>(c.train_rows.rows.size());
    c.counterparts.assign(n, std::nullopt);
    for (const json& row : report.at("rows")) {
        if (row.contains("skipped")) continue;
        const int i = row.at("row").get<int>();
        if (i < 0 || i >= n) {
            throw StageFailure(stage, "tone_report.json does not match the current split; "
                                      "rerun the normalize stage");
        }
        SampleRecord cp = c.train_rows.rows[i];
        cp.image_path = (c.root / row.at("image").get<std::string>()).lexically_normal().string();
        c.counterparts[i] = cp;
    }
    c.counterparts_ready = true;
}

std::array<double, 6> train_fst_distribution(const Manifest& rows) {
    std::array<double, 6> counts{};
    double total = 0.0;
    for (const SampleRecord& r : rows.rows) {
        if (r.fst >= 1 && r.fst <= 6) {
            counts[r.fst - 1] += 1.0;
            total += 1.0;
        }
    }
    if (total == 0.0) {
        throw BadDistribution("no row carries a known skin type; cannot initialize blending");
    }
    for (double& v : counts) v /= total;
    return counts;
}

void stage_train(StageContext& c) {
    ensure_data(c);
    const RunConfig& cfg = c.cfg;
    if (c.train_b.B == 0) throw DegenerateBatch("training split is empty");

    ModelConfig mc = cfg.model;
    mc.seed = cfg.seed;
    mc.input_hw = c.train_b.H;
    mc.in_channels = c.train_b.C;
    mc.n_classes = static_cast<int>(c.class_names.size());

    ordered_json history;

    if (cfg.train.folds >= 2) {
        const int K = cfg.train.folds;
        const int n = c.train_b.B;
        if (K > n) throw BadConfig("train.folds exceeds the training split size");
        std::vector<int> order(n);
        for (int i = 0; i < n; ++i) order[i] = i;
        Rng fold_rng = stage_rng(cfg.seed, 0x17);
        fold_rng.shuffle(order);

        ordered_json cv = ordered_json::array();
        double mean_acc = 0.0;
        for (int f = 0; f < K; ++f) {
            const int lo = static_cast<int>(static_cast<long>(f) * n / K);
            const int hi = static_cast<int>(static_cast<long>(f + 1) * n / K);
            std::vector<int> hold(order.begin() + lo, order.begin() + hi);
            std::vector<int> rest;
            rest.reserve(n - (hi - lo));
            rest.insert(rest.end(), order.begin(), order.begin() + lo);
            rest.insert(rest.end(), order.begin() + hi, order.end());
            std::sort(hold.begin(), hold.end());
            std::sort(rest.begin(), rest.end());

            ModelConfig fold_cfg = mc;
            fold_cfg.seed = cfg.seed + 101 + static_cast<std::uint64_t>(f);
            ToyModel fold_model = build_model(fold_cfg);
            Rng rng = stage_rng(cfg.seed, 0x100 + static_cast<std::uint64_t>(f));
            sgd_train(fold_model, c.train_b.slice(rest), cfg.train.sgd, rng);
            const double acc = accuracy(predict(fold_model, c.train_b.slice(hold)));
            cv.push_back({{"fold", f}, {"held_out", static_cast<int>(hold.size())},
                          {"accuracy", acc}});
            mean_acc += acc / K;
        }
        history["cv"] = cv;
        history["cv_mean_accuracy"] = mean_acc;
    }

    ToyModel model = build_model(mc);
    Rng rng = stage_rng(cfg.seed, 0x21);

    if (cfg.blend.enabled) {
        ensure_counterparts(c, "train");
        BlendState st = init_probs(train_fst_distribution(c.train_rows));
        st.tau = cfg.blend.tau;
        st.delta = cfg.blend.delta;
        st.eval_period_K = cfg.blend.eval_period;

        const int rounds = std::max(1, cfg.train.sgd.epochs);
        ordered_json round_log = ordered_json::array();
        for (int r = 0; r < rounds; ++r) {
            Manifest blended;
            blended.rows.reserve(c.train_rows.rows.size());
            int replaced = 0;
            for (std::size_t i = 0; i < c.train_rows.rows.size(); ++i) {
                const SampleRecord* cp =
                    c.counterparts[i] ? &*c.counterparts[i] : nullptr;
                SampleRecord chosen = maybe_replace(c.train_rows.rows[i], cp, st, rng);
                if (chosen.image_path != c.train_rows.rows[i].image_path) ++replaced;
                blended.rows.push_back(std::move(chosen));
            }
            const Batch b = load_batch(blended);
            TrainConfig one = cfg.train.sgd;
            one.epochs = 1;
            const std::vector<double> losses = sgd_train(model, b, one, rng);

            ordered_json entry;
            entry["round"] = r;
            entry["loss"] = losses.empty() ? 0.0 : losses[0];
            entry["replaced"] = replaced;
            entry["p_synth"] = st.p_synth;
            if ((r + 1) % st.eval_period_K == 0 && c.meta_b.B > 0) {
                const auto aucs = group_macro_auc(predict(model, c.meta_b), 0);
                std::array<std::optional<double>, 6> arr{};
                for (const auto& [gid, v] : aucs) {
                    if (gid >= 1 && gid <= 6) arr[gid - 1] = v;
                }
                st = update_probs(st, arr);
                ordered_json ja = ordered_json::array();
                for (const auto& v : arr) {
                    if (v) {
                        ja.push_back(*v);
                    } else {
                        ja.push_back(nullptr);
                    }
                }
                entry["per_fst_auc"] = ja;
            }
            round_log.push_back(entry);
        }
        history["blend_rounds"] = round_log;
    } else {
        history["epoch_loss"] = sgd_train(model, c.train_b, cfg.train.sgd, rng);
    }

    fs::create_directories(c.root / "checkpoints");
    save_checkpoint(model, (c.root / "checkpoints" / "baseline.json").string());
    write_json(history, c.root / "train_history.json");
    add_artifact(c, "baseline_checkpoint", "checkpoints/baseline.json");
    add_artifact(c, "train_history", "train_history.json");
    c.baseline = std::move(model);
}

void stage_prune(StageContext& c) {
    ensure_data(c);
    const RunConfig& cfg = c.cfg;
    if (c.meta_b.B == 0) {
        throw StageFailure("prune", "pruning gates need a probe split; set data.meta_fraction > 0");
    }
    const ToyModel base = acquire_baseline(c, "prune");

    PruneConfig pc = cfg.prune;
    pc.positive_class = cfg.metrics.positive_class;
    Rng rng = stage_rng(cfg.seed, 0x31);
    const PruneResult res =
        iterative_prune(base, c.train_b, c.meta_b, cfg.prune_attribute, pc, cfg.snnl, rng);

    fs::create_directories(c.root / "checkpoints");
    save_checkpoint(res.model, (c.root / "checkpoints" / "pruned.json").string());
    write_json(prune_history_json(res), c.root / "prune_history.json");
    add_artifact(c, "pruned_checkpoint", "checkpoints/pruned.json");
    add_artifact(c, "prune_history", "prune_history.json");
    c.pruned = res.model;
}

void stage_meta_prune(StageContext& c) {
    ensure_data(c);
    const RunConfig& cfg = c.cfg;
    if (c.meta_b.B == 0) {
        throw StageFailure("meta-prune",
                           "the meta objective needs a probe split; set data.meta_fraction > 0");
    }
    const ToyModel base = acquire_baseline(c, "meta-prune");

    Batch inner = c.train_b;
    if (cfg.meta_train_subset > 0 && cfg.meta_train_subset < c.train_b.B) {
        const double frac = static_cast<double>(cfg.meta_train_subset) / c.train_b.B;
        Rng sub_rng = stage_rng(cfg.seed, 0x41);
        inner = stratified_split(c.train_b, frac, sub_rng).second;
    }

    PruneConfig pc = cfg.prune;
    pc.positive_class = cfg.metrics.positive_class;
    Rng rng = stage_rng(cfg.seed, 0x43);
    const MetaResult res = meta_prune(base, inner, c.meta_b, cfg.meta, pc, cfg.snnl, rng);

    fs::create_directories(c.root / "checkpoints");
    save_checkpoint(res.model, (c.root / "checkpoints" / "meta_pruned.json").string());
    write_json(meta_history_json(res), c.root / "meta_history.json");
    add_artifact(c, "meta_pruned_checkpoint", "checkpoints/meta_pruned.json");
    add_artifact(c, "meta_history", "meta_history.json");
    c.meta_pruned = res.model;
}

void stage_evaluate(StageContext& c) {
    ensure_data(c);
    const RunConfig& cfg = c.cfg;
    if (c.eval_b.B == 0) {
        throw StageFailure("evaluate", "evaluation split is empty; raise data.eval_fraction");
    }

    ordered_json report;
    report["n_eval"] = c.eval_b.B;
    int evaluated = 0;
    const std::pair<const char*, std::optional<ToyModel> StageContext::*> slots[] = {
        {"baseline", &StageContext::baseline},
        {"pruned", &StageContext::pruned},
        {"meta_pruned", &StageContext::meta_pruned},
    };
    for (const auto& [name, member] : slots) {
        const std::string file = std::string(name) + ".json";
        const std::optional<ToyModel> m = stored_model(c, c.*member, file.c_str());
        if (!m) continue;
        report[name] = fairness_report(predict(*m, c.eval_b), cfg.metrics);
        ++evaluated;
    }
    if (evaluated == 0) {
        throw StageFailure("evaluate", "no checkpoints to evaluate; run the train stage first");
    }
    write_json(report, c.root / "fairness_report.json");
    add_artifact(c, "fairness_report", "fairness_report.json");
}

void stage_explain(StageContext& c) {
    ensure_data(c);
    const RunConfig& cfg = c.cfg;
    if (c.eval_b.B == 0) {
        throw StageFailure("explain", "no evaluation images to explain; raise data.eval_fraction");
    }
    std::optional<ToyModel> model = stored_model(c, c.meta_pruned, "meta_pruned.json");
    if (!model) model = stored_model(c, c.pruned, "pruned.json");
    if (!model) model = stored_model(c, c.baseline, "baseline.json");
    if (!model) {
        throw StageFailure("explain", "no checkpoints to explain; run the train stage first");
    }

    const int C = model->last_channels();
    std::vector<int> channels = cfg.explain.channels;
    if (channels.empty()) {
        channels.resize(C);
        for (int i = 0; i < C; ++i) channels[i] = i;
    } else {
        for (const int ch : channels) {
            if (ch >= C) {
                throw BadClass("explain.channels entry " + std::to_string(ch) +
                               " out of range for " + std::to_string(C) + " channels");
            }
        }
    }

    std::vector<double> gamma(C, 0.0);
    for (const ChannelScore& s : score_channels(*model, c.eval_b, cfg.prune_attribute, cfg.snnl)) {
        gamma[s.channel_index] = s.score_gamma;
    }

    const fs::path heat = c.root / "heatmaps";
    fs::create_directories(heat);
    const int n_img = std::min(cfg.explain.images, c.eval_b.B);

    parallel_for(n_img, cfg.workers, [&](int i) {
        const Batch one = c.eval_b.slice({i});
        visualize_channels(*model, one, channels, (heat / ("im_" + std::to_string(i))).string(),
                           gamma);
    });

    // Collapse the per-image directories into the flat layout, one file per
    // (image, channel), and one merged index.
    ordered_json index = ordered_json::array();
    for (int i = 0; i < n_img; ++i) {
        const fs::path sub = heat / ("im_" + std::to_string(i));
        for (const int ch : channels) {
            const fs::path src = sub / ("img_0_ch_" + std::to_string(ch) + ".png");
            const std::string name = "img_" + std::to_string(i) + "_ch_" + std::to_string(ch) +
                                     ".png";
            if (!fs::exists(src)) continue;
            fs::rename(src, heat / name);
            index.push_back({{"image", i}, {"channel", ch}, {"path", name}, {"gamma", gamma[ch]}});
        }
        fs::remove_all(sub);
    }
    write_json(index, heat / "index.json");
    add_artifact(c, "heatmap_index", "heatmaps/index.json");
}

void write_error_report(const StageContext& c, const std::string& stage, const std::string& code,
                        const std::string& message) {
    ordered_json err;
    err["stage"] = stage;
    err["code"] = code;
    err["message"] = message;
    try {
        write_json(err, c.root / "error_report.json");
    } catch (...) {
        // the original failure outranks a reporting failure
    }
}

}  // namespace

ordered_json run_pipeline(const RunConfig& cfg) {
    StageContext ctx{cfg};
    ctx.root = fs::path(cfg.out_dir);
    fs::create_directories(ctx.root);

    const ordered_json canonical = run_config_json(cfg);
    const std::string config_hash = "fnv1a64:" + fnv1a64_hex(canonical.dump());

    const std::pair<const char*, void (*)(StageContext&)> stages[] = {
        {"normalize", stage_normalize}, {"train", stage_train},
        {"prune", stage_prune},         {"meta-prune", stage_meta_prune},
        {"evaluate", stage_evaluate},   {"explain", stage_explain},
    };
    for (const auto& [name, fn] : stages) {
        if (std::find(cfg.stages.begin(), cfg.stages.end(), name) == cfg.stages.end()) continue;
        try {
            fn(ctx);
        } catch (const StageFailure& e) {
            write_error_report(ctx, name, e.code(), e.what());
            throw;
        } catch (const MissingFile& e) {
            write_error_report(ctx, name, e.code(), e.what());
            throw;
        } catch (const ParseError& e) {
            write_error_report(ctx, name, e.code(), e.what());
            throw;
        } catch (const Error& e) {
            write_error_report(ctx, name, e.code(), e.what());
            throw StageFailure(name, e.what());
        } catch (const std::exception& e) {
            write_error_report(ctx, name, "error", e.what());
            throw StageFailure(name, e.what());
        }
    }

    ordered_json manifest;
    manifest["schema_version"] = 1;
    manifest["config_hash"] = config_hash;
    manifest["stages"] = cfg.stages;
    ordered_json arts = ordered_json::array();
    for (const auto& [name, rel] : ctx.artifacts) {
        const fs::path p = ctx.root / rel;
        arts.push_back({{"name", name},
                        {"path", rel},
                        {"version", "fnv1a64:" + fnv1a64_hex(read_bytes_or_throw(p))}});
    }
    manifest["artifacts"] = arts;
    manifest["config"] = canonical;
    write_json(manifest, ctx.root / "run_manifest.json");
    return manifest;
}

}  // namespace fairskin
