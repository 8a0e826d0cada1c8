#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fairskin/colorspace.hpp"
#include "fairskin/dataset.hpp"
#include "fairskin/errors.hpp"
#include "fairskin/pipeline.hpp"
#include "fairskin/skintone.hpp"

using namespace fairskin;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Exit codes: 0 success, 2 config error, 3 data error, 4 stage failure.

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    if (s.empty()) return out;
    std::stringstream ss(s);
    std::string cur;
    while (std::getline(ss, cur, ',')) {
        if (!cur.empty()) out.push_back(cur);
    }
    return out;
}

// Shared options of every verb that drives the pipeline.
struct RunOpts {
    std::string config;
    std::string out;
    std::string stages;
    std::vector<std::string> sets;
    std::uint64_t seed = 0;
    int workers = 0;
    int folds = 0;
    CLI::App* cmd = nullptr;
};

void add_run_options(CLI::App* sub, RunOpts& o, bool with_stages, bool with_folds) {
    sub->add_option("--config", o.config, "JSON config file");
    sub->add_option("--seed", o.seed, "override the run seed");
    sub->add_option("--out", o.out, "output directory (overrides out_dir)");
    sub->add_option("--workers", o.workers, "worker threads for per-image work");
    sub->add_option("--set", o.sets, "override a config key, dotted.path=value")
        ->take_all()
        ->expected(-1);
    if (with_stages) {
        sub->add_option("--stages", o.stages,
                        "comma-separated stage subset; an empty value runs none");
    }
    if (with_folds) sub->add_option("--folds", o.folds, "cross-validated accuracy folds");
    o.cmd = sub;
}

std::size_t opt_count(const CLI::App* cmd, const std::string& name) {
    const CLI::Option* opt = cmd->get_option_no_throw(name);
    return opt ? opt->count() : 0;
}

int exec_run(const RunOpts& o, const std::optional<std::string>& single_stage) {
    RunConfig cfg;
    try {
        json raw = o.config.empty() ? json::object() : load_config_json(o.config);
        if (opt_count(o.cmd, "--seed") > 0) raw["seed"] = o.seed;
        if (opt_count(o.cmd, "--out") > 0) raw["out_dir"] = o.out;
        if (opt_count(o.cmd, "--workers") > 0) raw["workers"] = o.workers;
        if (opt_count(o.cmd, "--folds") > 0) apply_override(raw, "train.folds", std::to_string(o.folds));
        for (const std::string& kv : o.sets) {
            const std::size_t eq = kv.find('=');
            if (eq == std::string::npos || eq == 0) {
                throw BadConfig("--set expects dotted.path=value, got '" + kv + "'");
            }
            apply_override(raw, kv.substr(0, eq), kv.substr(eq + 1));
        }
        if (single_stage) {
            raw["stages"] = json::array({*single_stage});
        } else if (opt_count(o.cmd, "--stages") > 0) {
            raw["stages"] = split_commas(o.stages);
        }
        cfg = parse_run_config(raw);
    } catch (const Error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    }

    try {
        run_pipeline(cfg);
        std::cout << "wrote " << cfg.out_dir << "/run_manifest.json\n";
        return 0;
    } catch (const StageFailure& e) {
        std::cerr << e.what() << "\n";
        return 4;
    } catch (const MissingFile& e) {
        std::cerr << e.what() << "\n";
        return 3;
    } catch (const ParseError& e) {
        std::cerr << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return 4;
    }
}

// Utility verbs: flag problems are config errors, unreadable or malformed
// inputs are data errors, anything else is a stage failure.
int guarded(const std::function<void()>& body) {
    try {
        body();
        return 0;
    } catch (const BadConfig& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const MissingFile& e) {
        std::cerr << e.what() << "\n";
        return 3;
    } catch (const ParseError& e) {
        std::cerr << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return 4;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"skin-lesion fairness pipeline"};
    app.require_subcommand(1);
    std::function<int()> task;

    // ------------------------------------------------------------ convert --
    struct {
        std::string input, out;
    } conv;
    CLI::App* convert = app.add_subcommand("convert", "re-encode an image (PNG or PPM by extension)");
    convert->add_option("input", conv.input, "source image")->required();
    convert->add_option("--out", conv.out, "destination path")->required();
    convert->callback([&] {
        task = [&] {
            return guarded([&] {
                save_image(load_image(conv.input), conv.out);
                std::cout << "wrote " << conv.out << "\n";
            });
        };
    });

    // --------------------------------------------------------- ita-report --
    struct {
        std::string manifest, classes, out;
    } ita;
    CLI::App* ita_report =
        app.add_subcommand("ita-report", "per-row skin-tone angles and categories of a manifest");
    ita_report->add_option("manifest", ita.manifest, "manifest CSV")->required();
    ita_report->add_option("--classes", ita.classes, "comma-separated class names");
    ita_report->add_option("--out", ita.out, "report path (default stdout)");
    ita_report->callback([&] {
        task = [&] {
            return guarded([&] {
                const std::vector<std::string> names =
                    ita.classes.empty() ? synthetic_class_names() : split_commas(ita.classes);
                const Manifest m = load_manifest(ita.manifest, names);
                ordered_json rows = ordered_json::array();
                std::array<int, 7> recorded{};  // index 6 = unknown
                std::array<int, 7> measured{};
                for (std::size_t i = 0; i < m.rows.size(); ++i) {
                    const SampleRecord& rec = m.rows[i];
                    ordered_json row;
                    row["index"] = i;
                    row["image"] = rec.image_path;
                    if (rec.fst != -1) {
                        row["recorded_fst"] = rec.fst;
                        ++recorded[rec.fst - 1];
                    } else {
                        row["recorded_fst"] = nullptr;
                        ++recorded[6];
                    }
                    if (!rec.mask_path.empty()) {
                        LesionMask mask;
                        mask.data = load_mask(rec.mask_path, &mask.width, &mask.height);
                        const double angle =
                            compute_ita(srgb_to_lab(load_image(rec.image_path)), mask);
                        const int cls = static_cast<int>(classify_fst(angle));
                        row["measured_ita"] = angle;
                        row["measured_fst"] = cls;
                        ++measured[cls - 1];
                    } else {
                        row["measured_ita"] = nullptr;
                        row["measured_fst"] = nullptr;
                        ++measured[6];
                    }
                    rows.push_back(row);
                }
                ordered_json report;
                report["rows"] = rows;
                report["recorded_histogram"] = recorded;
                report["measured_histogram"] = measured;
                if (ita.out.empty()) {
                    std::cout << report.dump(2) << "\n";
                } else {
                    std::ofstream f(ita.out, std::ios::binary);
                    if (!f) throw IoError("cannot write " + ita.out);
                    f << report.dump(2) << "\n";
                    std::cout << "wrote " << ita.out << "\n";
                }
            });
        };
    });

    // ----------------------------------------------------------- gen-synth --
    struct {
        int n = 4000;
        double bias = 0.0, age_skew = 0.0, gender_skew = 0.0;
        std::uint64_t seed = 0;
        std::string out;
    } gen;
    CLI::App* gen_synth = app.add_subcommand("gen-synth", "write a synthetic lesion corpus");
    gen_synth->add_option("--n", gen.n, "sample count");
    gen_synth->add_option("--bias", gen.bias, "class/skin-group coupling in [0,1]");
    gen_synth->add_option("--age-skew", gen.age_skew, "age band skew");
    gen_synth->add_option("--gender-skew", gen.gender_skew, "gender skew");
    gen_synth->add_option("--seed", gen.seed, "generator seed");
    gen_synth->add_option("--out", gen.out, "output directory")->required();
    gen_synth->callback([&] {
        task = [&] {
            return guarded([&] {
                SynthConfig cfg;
                cfg.n = gen.n;
                cfg.bias = gen.bias;
                cfg.age_skew = gen.age_skew;
                cfg.gender_skew = gen.gender_skew;
                cfg.seed = gen.seed;
                cfg.out_dir = gen.out;
                const Manifest m = generate_synthetic(cfg);
                std::cout << "wrote " << m.rows.size() << " samples under " << gen.out << "\n";
            });
        };
    });

    // -------------------------------------------------------- stage verbs --
    const std::pair<const char*, const char*> stage_verbs[] = {
        {"normalize", "tone-transform the training split"},
        {"train", "fit the classifier"},
        {"prune", "iterative fairness-gated channel pruning"},
        {"meta-prune", "meta-weighted one-shot channel pruning"},
        {"evaluate", "fairness report on the held-out split"},
        {"explain", "channel heatmaps for sample images"},
    };
    std::vector<std::unique_ptr<RunOpts>> stage_opts;
    for (const auto& [verb, help] : stage_verbs) {
        auto opts = std::make_unique<RunOpts>();
        CLI::App* sub = app.add_subcommand(verb, help);
        add_run_options(sub, *opts, false, std::string(verb) == "train");
        RunOpts* o = opts.get();
        const std::string stage = verb;
        sub->callback([&task, o, stage] { task = [o, stage] { return exec_run(*o, stage); }; });
        stage_opts.push_back(std::move(opts));
    }

    RunOpts pipe;
    CLI::App* pipeline = app.add_subcommand("pipeline", "run the configured stage subset");
    add_run_options(pipeline, pipe, true, false);
    pipeline->callback([&] { task = [&] { return exec_run(pipe, std::nullopt); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    return task ? task() : 2;
}
