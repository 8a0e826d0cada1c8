#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "fairskin/dataset.hpp"
#include "fairskin/metafair.hpp"
#include "fairskin/metrics.hpp"
#include "fairskin/model.hpp"
#include "fairskin/pruning.hpp"
#include "fairskin/skintone.hpp"

namespace fairskin {

// Where the pipeline's samples come from. An empty manifest path switches to
// the synthetic generator, written under <out_dir>/data with the run seed.
struct DataConfig {
    std::string manifest;
    std::vector<std::string> class_names = synthetic_class_names();
    SynthConfig synthetic;
    double eval_fraction = 0.2;  // held out for the final report
    double meta_fraction = 0.1;  // carved from the remainder as the probe set
};

// Replacement-probability training knobs; the probabilities themselves are
// derived from the training split at stage time.
struct BlendConfig {
    bool enabled = false;
    double tau = 0.7;
    double delta = 0.05;
    int eval_period = 5;
};

struct TrainStageConfig {
    TrainConfig sgd;
    int folds = 0;  // > 0 adds a cross-validated accuracy estimate
};

struct ExplainConfig {
    int images = 2;
    std::vector<int> channels;  // empty = every last-block channel
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string out_dir = "run_out";
    int workers = 1;
    std::vector<std::string> stages{"normalize", "train",    "prune",
                                    "meta-prune", "evaluate", "explain"};
    DataConfig data;
    ToneParams tone;
    BlendConfig blend;
    ModelConfig model;  // n_classes is derived from the class list
    TrainStageConfig train;
    SnnlParams snnl;
    PruneConfig prune;
    int prune_attribute = 0;
    MetaConfig meta;
    int meta_train_subset = 512;  // 0 = run the meta loop on the full split
    MetricConfig metrics;
    ExplainConfig explain;
};

// Strict schema: unknown keys and wrong value types throw BadConfig; omitted
// keys keep their defaults.
RunConfig parse_run_config(const nlohmann::json& j);

// Reads a config file as raw JSON without schema checks, so overrides can be
// applied before parse_run_config. Throws MissingFile or ParseError with the
// offending line.
nlohmann::json load_config_json(const std::string& path);

// Reads and parses a config file. Throws MissingFile, ParseError (malformed
// JSON, with the line number) or BadConfig (schema violations).
RunConfig load_run_config(const std::string& path);

// Canonical JSON echo of a config; hashing this defines the config hash.
nlohmann::ordered_json run_config_json(const RunConfig& cfg);

// Sets config[dotted path] = value, creating intermediate objects. The value
// is parsed as JSON when it parses, else taken as a string.
void apply_override(nlohmann::json& config, const std::string& dotted_key,
                    const std::string& value);

// FNV-1a 64-bit hex digest; stable across platforms, used for config and
// artifact versioning.
std::string fnv1a64_hex(const std::string& bytes);

// Splits manifest rows into (remainder, held_out) stratified on the joint
// (label, fst, age, gender) key; every nonempty stratum keeps at least one
// row on the held-out side unless the fraction is exactly zero.
std::pair<Manifest, Manifest> split_manifest(const Manifest& m, double held_out_fraction,
                                             Rng& rng);

// Runs the requested stages in their fixed order (normalize, train, prune,
// meta-prune, evaluate, explain), writes all artifacts plus run_manifest.json
// under cfg.out_dir, and returns the run manifest. Data-loading problems
// propagate as MissingFile/ParseError; anything raised inside a stage is
// rethrown as StageFailure after error_report.json is written.
nlohmann::ordered_json run_pipeline(const RunConfig& cfg);

}  // namespace fairskin
