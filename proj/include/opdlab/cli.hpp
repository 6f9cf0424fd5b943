// Command pipeline: dataset synthesis, gap-inducing pretraining, objective
// training, evaluation, and ablation matrices. Every command resolves its
// config to a canonical JSON form, derives the run id from that form, and
// writes a manifest before any other artifact. Timestamps live only in the
// manifest, so all primary artifacts are byte-deterministic per seed.

#pragma once

#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "opdlab/checkpoint.hpp"
#include "opdlab/evalgap.hpp"
#include "opdlab/synth.hpp"
#include "opdlab/trainer.hpp"

namespace opdlab::cli {

inline constexpr const char* kCodeVersion = "opdlab 0.1.0";
inline constexpr double kPretrainGapFloor = 0.10;

enum ExitCode : int {
    kOk = 0,
    kConfigError = 1,
    kMissingInput = 2,
    kTrainAbort = 3,
    kTargetUnmet = 4,
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct MissingInput : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Last diagnostic produced by a cmd_* call; commands also print it to stderr.
inline std::string& last_error() {
    static thread_local std::string msg;
    return msg;
}

template <typename F>
inline int guarded(F&& body) {
    last_error().clear();
    try {
        return body();
    } catch (const MissingInput& e) {
        last_error() = e.what();
        std::fprintf(stderr, "error: %s\n", e.what());
        return kMissingInput;
    } catch (const std::exception& e) {
        last_error() = e.what();
        std::fprintf(stderr, "error: %s\n", e.what());
        return kConfigError;
    }
}

// ---------------------------------------------------------------------------
// Config plumbing.

inline nlohmann::json load_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingInput("missing config file: " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
}

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                                const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed) {
            if (it.key() == k) {
                known = true;
                break;
            }
        }
        if (!known) throw ConfigError("unknown config key \"" + it.key() + "\" in " + where);
    }
}

template <typename T>
inline void get_key(const nlohmann::json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        j.at(key).get_to(out);
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(std::string("bad value for config key \"") + key + "\"");
    }
}

inline std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
    return buf;
}

inline std::string iso8601_now() {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[24];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << content;
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Run manifest. Written (with finished_at null) before any other artifact,
// rewritten complete at the end of the run. The run id is a pure function of
// the command and its resolved config, so repeat runs reuse it.

struct RunManifest {
    std::filesystem::path dir;
    std::string run_id;
    std::string command;
    nlohmann::ordered_json config;
    uint64_t config_hash = 0;
    nlohmann::ordered_json dataset_hashes = nlohmann::ordered_json::object();
    nlohmann::ordered_json seeds = nlohmann::ordered_json::object();
    std::vector<std::string> warnings;
    std::string started_at;
    std::string finished_at;
};

inline nlohmann::ordered_json manifest_json(const RunManifest& m) {
    nlohmann::ordered_json j;
    j["run_id"] = m.run_id;
    j["command"] = m.command;
    j["code_version"] = kCodeVersion;
    j["config"] = m.config;
    j["config_hash"] = hex64(m.config_hash);
    j["dataset_hashes"] = m.dataset_hashes;
    j["seeds"] = m.seeds;
    j["warnings"] = m.warnings;
    j["started_at"] = m.started_at;
    if (m.finished_at.empty()) {
        j["finished_at"] = nullptr;
    } else {
        j["finished_at"] = m.finished_at;
    }
    return j;
}

inline RunManifest begin_run(const std::filesystem::path& out_dir, const std::string& command,
                             nlohmann::ordered_json config, nlohmann::ordered_json seeds,
                             nlohmann::ordered_json input_hashes = nlohmann::ordered_json::object(),
                             std::vector<std::string> warnings = {}) {
    RunManifest m;
    m.dir = out_dir;
    m.command = command;
    m.config = std::move(config);
    m.config_hash = fnv1a64(command + "\n" + m.config.dump());
    m.run_id = "run_" + hex64(derive_seed(m.config_hash, "run"));
    m.dataset_hashes = std::move(input_hashes);
    m.seeds = std::move(seeds);
    m.warnings = std::move(warnings);
    m.started_at = iso8601_now();
    std::filesystem::create_directories(out_dir);
    write_text_file(out_dir / "manifest.json", manifest_json(m).dump(2) + "\n");
    return m;
}

inline void finish_run(RunManifest& m) {
    m.finished_at = iso8601_now();
    write_text_file(m.dir / "manifest.json", manifest_json(m).dump(2) + "\n");
}

inline std::vector<Triplet> load_dataset_checked(const std::string& path) {
    if (path.empty()) throw ConfigError("dataset path is empty");
    if (!std::filesystem::exists(path)) throw MissingInput("missing dataset file: " + path);
    return load_dataset(path);
}

inline std::string hash_of(const std::string& path) { return hex64(file_hash(path)); }

// Flag-level overrides shared by the subcommands.
struct CliOverrides {
    std::optional<std::string> objective;
    std::optional<std::string> teacher;
    std::optional<std::string> divergence;
    std::optional<std::string> checkpoint;
    std::optional<std::string> dataset;
    std::optional<std::string> view;
    std::optional<int> gen_len;
    std::optional<int> n;
    std::optional<uint64_t> seed;
};

// ---------------------------------------------------------------------------
// synth: four dataset files with globally disjoint id ranges. train/eval
// share the training template families, holdout gets the complement, and the
// pretraining file spans all families.

struct SynthCliConfig {
    uint64_t seed = 0;
    int grid_n = 12;
    double tau = 0.05;
    int n_train = 4000;
    int n_eval = 512;
    int n_holdout = 512;
    int n_pretrain = 4000;
    std::vector<std::string> train_templates = {"color_of_glyph_in_box", "glyph_at_position_in_box"};
    int consensus_m = 8;
    double consensus_threshold = 0.75;
    int consensus_gen_len = 8;
};

inline SynthCliConfig parse_synth_config(const std::string& config_path) {
    SynthCliConfig c;
    if (config_path.empty()) return c;
    nlohmann::json j = load_config_file(config_path);
    reject_unknown_keys(j,
                        {"seed", "grid_n", "tau", "n_train", "n_eval", "n_holdout", "n_pretrain",
                         "train_templates", "consensus_m", "consensus_threshold", "consensus_gen_len"},
                        "synth config");
    get_key(j, "seed", c.seed);
    get_key(j, "grid_n", c.grid_n);
    get_key(j, "tau", c.tau);
    get_key(j, "n_train", c.n_train);
    get_key(j, "n_eval", c.n_eval);
    get_key(j, "n_holdout", c.n_holdout);
    get_key(j, "n_pretrain", c.n_pretrain);
    get_key(j, "train_templates", c.train_templates);
    get_key(j, "consensus_m", c.consensus_m);
    get_key(j, "consensus_threshold", c.consensus_threshold);
    get_key(j, "consensus_gen_len", c.consensus_gen_len);
    return c;
}

inline nlohmann::ordered_json resolved_synth_json(const SynthCliConfig& c) {
    nlohmann::ordered_json j;
    j["seed"] = c.seed;
    j["grid_n"] = c.grid_n;
    j["tau"] = c.tau;
    j["n_train"] = c.n_train;
    j["n_eval"] = c.n_eval;
    j["n_holdout"] = c.n_holdout;
    j["n_pretrain"] = c.n_pretrain;
    j["train_templates"] = c.train_templates;
    j["consensus_m"] = c.consensus_m;
    j["consensus_threshold"] = c.consensus_threshold;
    j["consensus_gen_len"] = c.consensus_gen_len;
    return j;
}

inline std::vector<std::string> holdout_template_family(const std::vector<std::string>& train_templates) {
    std::vector<std::string> out;
    for (const std::string& t : all_template_ids()) {
        if (std::find(train_templates.begin(), train_templates.end(), t) == train_templates.end()) {
            out.push_back(t);
        }
    }
    return out;
}

inline int cmd_synth(const std::string& config_path, const CliOverrides& ov, const std::string& out_dir) {
    return guarded([&]() -> int {
        SynthCliConfig cfg = parse_synth_config(config_path);
        if (ov.seed) cfg.seed = *ov.seed;
        if (ov.n) cfg.n_train = *ov.n;

        const std::vector<std::string> holdout_templates = holdout_template_family(cfg.train_templates);
        if (holdout_templates.empty()) {
            throw ConfigError("train_templates covers every template family, leaving no holdout family");
        }

        struct FilePlan {
            const char* name;
            const char* seed_tag;
            std::vector<std::string> templates;
            int n;
            int id_base;
        };
        const std::vector<FilePlan> plans = {
            {"train.jsonl", "synth_train", cfg.train_templates, cfg.n_train, 0},
            {"eval.jsonl", "synth_eval", cfg.train_templates, cfg.n_eval, 1'000'000},
            {"holdout.jsonl", "synth_holdout", holdout_templates, cfg.n_holdout, 2'000'000},
            {"pretrain.jsonl", "synth_pretrain", all_template_ids(), cfg.n_pretrain, 3'000'000},
        };

        nlohmann::ordered_json seeds;
        seeds["base"] = cfg.seed;
        std::vector<SynthConfig> synth_cfgs;
        for (const FilePlan& p : plans) {
            SynthConfig sc;
            sc.grid_n = cfg.grid_n;
            sc.tau = cfg.tau;
            sc.n_samples = p.n;
            sc.consensus_m = cfg.consensus_m;
            sc.consensus_threshold = cfg.consensus_threshold;
            sc.consensus_gen_len = cfg.consensus_gen_len;
            sc.templates = p.templates;
            sc.seed = derive_seed(cfg.seed, p.seed_tag);
            sc.id_base = p.id_base;
            sc.validate();
            seeds[p.seed_tag] = sc.seed;
            synth_cfgs.push_back(std::move(sc));
        }

        RunManifest m = begin_run(out_dir, "synth", resolved_synth_json(cfg), seeds);
        for (size_t i = 0; i < plans.size(); ++i) {
            auto [triplets, stats] = build_triplets(synth_cfgs[i]);
            const std::string path = (m.dir / plans[i].name).string();
            save_dataset(triplets, path, m.run_id);
            m.dataset_hashes[plans[i].name] = hash_of(path);
            std::printf("%s: %zu records, acceptance rate %.3f (%d attempts)\n", plans[i].name,
                        triplets.size(), stats.acceptance_rate(), stats.attempts);
        }
        finish_run(m);
        std::printf("synth %s: wrote %zu files to %s\n", m.run_id.c_str(), plans.size(), out_dir.c_str());
        return kOk;
    });
}

// ---------------------------------------------------------------------------
// pretrain: asymmetric-exposure NLL on answer+EOS. Crop-conditioned epochs
// first, then fewer global-conditioned epochs; the induced regional-global
// gap is the precondition every training run starts from.

struct PretrainCliConfig {
    uint64_t seed = 0;
    std::string dataset = "runs/synth/pretrain.jsonl";
    std::string eval_dataset = "runs/synth/eval.jsonl";
    int crop_epochs = 6;
    int global_epochs = 1;
    int batch_size = 16;
    double learning_rate = 2e-3;
    double global_lr_scale = 0.25;  // damps the short phase so it refines instead of overwriting
    ModelConfig model;
};

inline ModelConfig parse_model_config(const nlohmann::json& j) {
    ModelConfig m;
    reject_unknown_keys(j, {"d_model", "n_layers", "d_ff", "max_ctx", "init_std", "rms_eps"}, "model config");
    get_key(j, "d_model", m.d_model);
    get_key(j, "n_layers", m.n_layers);
    get_key(j, "d_ff", m.d_ff);
    get_key(j, "max_ctx", m.max_ctx);
    get_key(j, "init_std", m.init_std);
    get_key(j, "rms_eps", m.rms_eps);
    if (m.d_model < 1 || m.n_layers < 1 || m.d_ff < 1 || m.max_ctx < 8) {
        throw ConfigError("model dimensions must be positive (max_ctx >= 8)");
    }
    if (!(m.init_std > 0.0) || !(m.rms_eps > 0.0)) throw ConfigError("init_std and rms_eps must be positive");
    return m;
}

inline PretrainCliConfig parse_pretrain_config(const std::string& config_path) {
    PretrainCliConfig c;
    if (config_path.empty()) return c;
    nlohmann::json j = load_config_file(config_path);
    reject_unknown_keys(j,
                        {"seed", "dataset", "eval_dataset", "crop_epochs", "global_epochs", "batch_size",
                         "learning_rate", "global_lr_scale", "model"},
                        "pretrain config");
    get_key(j, "seed", c.seed);
    get_key(j, "dataset", c.dataset);
    get_key(j, "eval_dataset", c.eval_dataset);
    get_key(j, "crop_epochs", c.crop_epochs);
    get_key(j, "global_epochs", c.global_epochs);
    get_key(j, "batch_size", c.batch_size);
    get_key(j, "learning_rate", c.learning_rate);
    get_key(j, "global_lr_scale", c.global_lr_scale);
    if (j.contains("model")) c.model = parse_model_config(j.at("model"));
    if (c.crop_epochs < 1) throw ConfigError("crop_epochs must be >= 1");
    if (c.global_epochs < 0) throw ConfigError("global_epochs must be >= 0");
    if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(c.learning_rate > 0.0) || !std::isfinite(c.learning_rate)) {
        throw ConfigError("learning_rate must be positive and finite");
    }
    if (!(c.global_lr_scale > 0.0) || c.global_lr_scale > 1.0) {
        throw ConfigError("global_lr_scale must be in (0, 1]");
    }
    return c;
}

inline nlohmann::ordered_json resolved_pretrain_json(const PretrainCliConfig& c) {
    nlohmann::ordered_json j;
    j["seed"] = c.seed;
    j["dataset"] = c.dataset;
    j["eval_dataset"] = c.eval_dataset;
    j["crop_epochs"] = c.crop_epochs;
    j["global_epochs"] = c.global_epochs;
    j["batch_size"] = c.batch_size;
    j["learning_rate"] = c.learning_rate;
    j["global_lr_scale"] = c.global_lr_scale;
    j["model"] = model_config_json(c.model);
    return j;
}

inline int cmd_pretrain(const std::string& config_path, const CliOverrides& ov, const std::string& out_dir) {
    return guarded([&]() -> int {
        PretrainCliConfig cfg = parse_pretrain_config(config_path);
        if (ov.seed) cfg.seed = *ov.seed;

        std::vector<std::string> warnings;
        if (cfg.global_epochs >= cfg.crop_epochs) {
            warnings.push_back("gap induction disabled: global_epochs >= crop_epochs");
            std::fprintf(stderr, "warning: %s\n", warnings.back().c_str());
        }

        const std::vector<Triplet> data = load_dataset_checked(cfg.dataset);
        const std::vector<Triplet> evals = load_dataset_checked(cfg.eval_dataset);
        if (data.empty()) throw ConfigError("pretraining dataset is empty: " + cfg.dataset);
        if (evals.empty()) throw ConfigError("eval dataset is empty: " + cfg.eval_dataset);

        nlohmann::ordered_json hashes;
        hashes["dataset"] = hash_of(cfg.dataset);
        hashes["eval_dataset"] = hash_of(cfg.eval_dataset);
        nlohmann::ordered_json seeds;
        seeds["base"] = cfg.seed;
        seeds["init"] = derive_seed(cfg.seed, "init");
        RunManifest m =
            begin_run(out_dir, "pretrain", resolved_pretrain_json(cfg), seeds, hashes, warnings);

        ParamSet params = init_policy_params(cfg.model, derive_seed(cfg.seed, "init"));
        OptimConfig ocfg;
        ocfg.lr = cfg.learning_rate;
        // Short second-moment memory: six epochs is inside the transient where
        // stale curvature estimates from beta2=0.999 still damp the update.
        ocfg.beta2 = 0.95;
        Optimizer opt(ocfg);

        const int n = static_cast<int>(data.size());
        const int B = std::min(cfg.batch_size, n);
        const int steps_per_epoch = (n + B - 1) / B;

        struct Phase {
            const char* name;
            ViewKind view;
            int epochs;
            double peak_lr;
        };
        const Phase phases[] = {{"crop", ViewKind::crop, cfg.crop_epochs, cfg.learning_rate},
                                {"global", ViewKind::global, cfg.global_epochs,
                                 cfg.learning_rate * cfg.global_lr_scale}};

        std::string losses_csv = "# run_id=" + m.run_id + "\nphase,epoch,mean_nll\n";
        std::vector<int> order(data.size());
        for (const Phase& ph : phases) {
            // Warmup-cosine per phase; constant lr plateaus well short of the
            // regional accuracy the crop stage must hit, and a full-peak restart
            // in the global phase overwrites it.
            const int phase_steps = ph.epochs * steps_per_epoch;
            const int warmup = std::min(50, phase_steps / 10);
            int phase_step = 0;
            for (int epoch = 0; epoch < ph.epochs; ++epoch) {
                std::iota(order.begin(), order.end(), 0);
                Rng shuffle_rng(derive_seed(cfg.seed, std::string("pretrain_") + ph.name,
                                            static_cast<uint64_t>(epoch)));
                for (size_t i = order.size(); i > 1; --i) {
                    std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);
                }
                double loss_sum = 0.0;
                for (int s = 0; s < steps_per_epoch; ++s) {
                    std::vector<NllItem> items;
                    for (int i = s * B; i < std::min(n, (s + 1) * B); ++i) {
                        const Triplet& t = data[order[i]];
                        std::vector<int> target = t.gt_answer;
                        target.push_back(Vocabulary::EOS);
                        items.push_back({&triplet_view(t, ph.view), &t.question, std::move(target)});
                    }
                    GradAccum grads(params);
                    loss_sum += nll_batch_loss(params, cfg.model, items, &grads);
                    if (phase_step < warmup) {
                        opt.set_lr(ph.peak_lr * (phase_step + 1) / warmup);
                    } else {
                        // Decay to a floor rather than zero: the loss is still
                        // falling when the phase ends, so the tail steps must
                        // keep moving.
                        const double t = static_cast<double>(phase_step - warmup) /
                                         std::max(1, phase_steps - warmup);
                        const double floor = 0.1;
                        opt.set_lr(ph.peak_lr *
                                   (floor + (1.0 - floor) * 0.5 *
                                                (1.0 + std::cos(std::numbers::pi * t))));
                    }
                    ++phase_step;
                    opt.step(params, grads);
                }
                losses_csv += std::string(ph.name) + "," + std::to_string(epoch) + "," +
                              format_metric(loss_sum / steps_per_epoch) + "\n";
            }
        }
        write_text_file(m.dir / "losses.csv", losses_csv);

        const GapReport gap = gap_report(params, cfg.model, evals, static_cast<int>(opt.steps_taken()));
        const std::string ckpt_path = (m.dir / "checkpoint.ckpt").string();
        save_checkpoint(Checkpoint{cfg.model, Vocabulary::standard(), params, m.run_id}, ckpt_path);
        m.dataset_hashes["checkpoint.ckpt"] = hash_of(ckpt_path);

        nlohmann::ordered_json gj;
        gj["run_id"] = m.run_id;
        gj["n"] = gap.n;
        gj["step"] = gap.step;
        gj["regional_acc"] = gap.regional_acc;
        gj["global_acc"] = gap.global_acc;
        gj["gap"] = gap.gap;
        write_text_file(m.dir / "gap.json", gj.dump(2) + "\n");
        finish_run(m);

        std::printf("pretrain %s: regional_acc=%.4f global_acc=%.4f gap=%.4f (%d steps)\n",
                    m.run_id.c_str(), gap.regional_acc, gap.global_acc, gap.gap, gap.step);
        if (gap.gap < kPretrainGapFloor) {
            char floor_str[16];
            std::snprintf(floor_str, sizeof floor_str, "%.2f", kPretrainGapFloor);
            last_error() = "pretraining gap target unmet: gap=" + format_metric(gap.gap) + " < " + floor_str;
            std::fprintf(stderr, "error: %s\n", last_error().c_str());
            return kTargetUnmet;
        }
        return kOk;
    });
}

// ---------------------------------------------------------------------------
// train: one objective run from a pretrained checkpoint. Also the unit of
// work for ablate; the effective training seed is derived from the cell key,
// so a 1x1 ablation reproduces cmd_train bit for bit.

struct TrainCliConfig {
    uint64_t seed = 0;
    std::string checkpoint = "runs/pretrain/checkpoint.ckpt";
    std::string dataset = "runs/synth/train.jsonl";
    std::string eval_dataset = "runs/synth/eval.jsonl";
    std::string holdout_dataset;
    std::string external_teacher;
    TrainConfig train;
};

inline DivergenceSpec parse_divergence(const nlohmann::json& j) {
    DivergenceSpec d;
    if (j.is_string()) {
        d.kind = parse_div_kind(j.get<std::string>());
        return d;
    }
    reject_unknown_keys(j, {"kind", "beta", "top_k"}, "divergence config");
    std::string kind = div_kind_name(d.kind);
    get_key(j, "kind", kind);
    d.kind = parse_div_kind(kind);
    get_key(j, "beta", d.beta);
    int k = 0;
    get_key(j, "top_k", k);
    if (k < 0) throw ConfigError("top_k must be >= 0 (0 means full vocabulary)");
    if (k > 0) d.topk = k;
    return d;
}

inline void parse_train_fields(const nlohmann::json& j, TrainCliConfig& c) {
    get_key(j, "seed", c.seed);
    get_key(j, "checkpoint", c.checkpoint);
    get_key(j, "dataset", c.dataset);
    get_key(j, "eval_dataset", c.eval_dataset);
    get_key(j, "holdout_dataset", c.holdout_dataset);
    get_key(j, "external_teacher", c.external_teacher);
    get_key(j, "objective", c.train.objective);
    get_key(j, "teacher", c.train.teacher);
    get_key(j, "teacher_alpha", c.train.teacher_alpha);
    get_key(j, "teacher_epsilon", c.train.teacher_epsilon);
    if (j.contains("divergence")) c.train.divergence = parse_divergence(j.at("divergence"));
    get_key(j, "batch_size", c.train.batch_size);
    get_key(j, "steps", c.train.steps);
    get_key(j, "max_gen_len", c.train.max_gen_len);
    get_key(j, "learning_rate", c.train.learning_rate);
    get_key(j, "group_size", c.train.group_size);
    get_key(j, "eval_every", c.train.eval_every);
}

inline constexpr std::initializer_list<const char*> kTrainKeys = {
    "seed",       "checkpoint",    "dataset",    "eval_dataset",  "holdout_dataset", "external_teacher",
    "objective",  "teacher",       "teacher_alpha", "teacher_epsilon", "divergence",  "batch_size",
    "steps",      "max_gen_len",   "learning_rate", "group_size",  "eval_every"};

inline TrainCliConfig parse_train_config(const std::string& config_path) {
    TrainCliConfig c;
    if (config_path.empty()) return c;
    nlohmann::json j = load_config_file(config_path);
    reject_unknown_keys(j, kTrainKeys, "train config");
    parse_train_fields(j, c);
    return c;
}

inline void apply_train_overrides(TrainCliConfig& c, const CliOverrides& ov) {
    if (ov.seed) c.seed = *ov.seed;
    if (ov.objective) c.train.objective = *ov.objective;
    if (ov.teacher) c.train.teacher = *ov.teacher;
    if (ov.divergence) c.train.divergence.kind = parse_div_kind(*ov.divergence);
    if (ov.gen_len) c.train.max_gen_len = *ov.gen_len;
}

inline nlohmann::ordered_json resolved_train_json(const TrainCliConfig& c) {
    nlohmann::ordered_json j;
    j["seed"] = c.seed;
    j["checkpoint"] = c.checkpoint;
    j["dataset"] = c.dataset;
    j["eval_dataset"] = c.eval_dataset;
    j["holdout_dataset"] = c.holdout_dataset;
    j["external_teacher"] = c.external_teacher;
    j["objective"] = c.train.objective;
    j["teacher"] = c.train.teacher;
    j["teacher_alpha"] = c.train.teacher_alpha;
    j["teacher_epsilon"] = c.train.teacher_epsilon;
    j["divergence"] = {{"kind", div_kind_name(c.train.divergence.kind)},
                       {"beta", c.train.divergence.beta},
                       {"top_k", c.train.divergence.topk ? *c.train.divergence.topk : 0}};
    j["batch_size"] = c.train.batch_size;
    j["steps"] = c.train.steps;
    j["max_gen_len"] = c.train.max_gen_len;
    j["learning_rate"] = c.train.learning_rate;
    j["group_size"] = c.train.group_size;
    j["eval_every"] = c.train.eval_every;
    return j;
}

// Canonical ablation-cell identity; also the derivation tag for the
// effective training seed.
inline std::string cell_key(const TrainConfig& t) {
    return "objective=" + t.objective + ",teacher=" + t.teacher +
           ",divergence=" + std::string(div_kind_name(t.divergence.kind)) +
           ",gen_len=" + std::to_string(t.max_gen_len);
}

struct TrainRunOutcome {
    int code = kOk;
    std::string run_id;
    GapReport final_gap;
};

inline TrainRunOutcome run_train_once(const TrainCliConfig& cfg, const std::filesystem::path& out_dir) {
    cfg.train.validate();
    if (cfg.train.objective == "opd_generic" && cfg.external_teacher.empty()) {
        throw ConfigError("opd_generic requires an external_teacher checkpoint path");
    }
    if (!std::filesystem::exists(cfg.checkpoint)) {
        throw MissingInput("missing checkpoint file: " + cfg.checkpoint);
    }
    Checkpoint ckpt = load_checkpoint(cfg.checkpoint);
    const std::vector<Triplet> data = load_dataset_checked(cfg.dataset);
    const std::vector<Triplet> evals = load_dataset_checked(cfg.eval_dataset);
    if (data.empty()) throw ConfigError("training dataset is empty: " + cfg.dataset);
    if (evals.empty()) throw ConfigError("eval dataset is empty: " + cfg.eval_dataset);
    std::vector<Triplet> holdout;
    if (!cfg.holdout_dataset.empty()) holdout = load_dataset_checked(cfg.holdout_dataset);

    EvalSplit split;
    split.triplets = evals;
    split.holdout_triplets = holdout;
    split.split_seed = cfg.seed;
    check_eval_split(split, data);

    std::optional<ParamSet> external;
    if (cfg.train.objective == "opd_generic") {
        if (!std::filesystem::exists(cfg.external_teacher)) {
            throw MissingInput("missing external teacher checkpoint: " + cfg.external_teacher);
        }
        external = load_checkpoint(cfg.external_teacher, ckpt.config).params;
    }

    TrainConfig tc = cfg.train;
    tc.external_teacher_path = cfg.external_teacher;
    const std::string key = cell_key(cfg.train);
    tc.seed = derive_seed(cfg.seed, "cell", fnv1a64(key));

    nlohmann::ordered_json seeds;
    seeds["base"] = cfg.seed;
    seeds["cell_key"] = key;
    seeds["cell"] = tc.seed;
    nlohmann::ordered_json hashes;
    hashes["checkpoint"] = hash_of(cfg.checkpoint);
    hashes["dataset"] = hash_of(cfg.dataset);
    hashes["eval_dataset"] = hash_of(cfg.eval_dataset);
    if (!cfg.holdout_dataset.empty()) hashes["holdout_dataset"] = hash_of(cfg.holdout_dataset);
    if (!cfg.external_teacher.empty()) hashes["external_teacher"] = hash_of(cfg.external_teacher);

    RunManifest m = begin_run(out_dir, "train", resolved_train_json(cfg), seeds, hashes);
    TrainResult res = train(tc, ckpt.config, ckpt.params, data, evals, external);

    {
        std::ofstream metrics(m.dir / "metrics.csv", std::ios::binary | std::ios::trunc);
        if (!metrics) throw std::runtime_error("cannot write metrics.csv in " + m.dir.string());
        metrics << "# run_id=" << m.run_id << "\n";
        write_metrics_csv(metrics, res.records, res.gaps);
        if (!metrics) throw std::runtime_error("failed writing metrics.csv in " + m.dir.string());
    }

    RunSummary summary;
    summary.run_id = m.run_id;
    summary.config_hash = hex64(m.config_hash);
    summary.dataset_hash = hashes["dataset"].get<std::string>();
    // An abort at the initial eval leaves no gap reports; the summary then
    // carries zeroed finals and an empty series.
    if (!res.gaps.empty()) summary.final_gap = res.gaps.back();
    if (!holdout.empty() && !res.nan_abort) {
        summary.holdout = forgetting_report(ckpt.params, res.params, ckpt.config, holdout);
    }
    summary.gap_series = res.gaps;
    write_summary_json((m.dir / "summary.json").string(), summary);

    const std::string out_ckpt = (m.dir / "checkpoint.ckpt").string();
    save_checkpoint(Checkpoint{ckpt.config, ckpt.vocab, res.params, m.run_id}, out_ckpt);
    m.dataset_hashes["checkpoint.ckpt"] = hash_of(out_ckpt);
    finish_run(m);

    TrainRunOutcome outcome;
    outcome.run_id = m.run_id;
    outcome.final_gap = summary.final_gap;
    if (res.nan_abort) {
        last_error() = "training aborted: " + res.abort_reason;
        std::fprintf(stderr, "error: %s\n", last_error().c_str());
        outcome.code = kTrainAbort;
        return outcome;
    }
    std::printf("train %s [%s]: regional_acc=%.4f global_acc=%.4f gap=%.4f (%zu steps)\n",
                m.run_id.c_str(), key.c_str(), summary.final_gap.regional_acc,
                summary.final_gap.global_acc, summary.final_gap.gap, res.records.size());
    return outcome;
}

inline int cmd_train(const std::string& config_path, const CliOverrides& ov, const std::string& out_dir) {
    return guarded([&]() -> int {
        TrainCliConfig cfg = parse_train_config(config_path);
        apply_train_overrides(cfg, ov);
        return run_train_once(cfg, out_dir).code;
    });
}

// ---------------------------------------------------------------------------
// eval: accuracy of a checkpoint over a dataset under one or both views.

struct EvalCliConfig {
    std::string checkpoint;
    std::string dataset;
    std::string view = "both";
};

inline EvalCliConfig parse_eval_config(const std::string& config_path) {
    EvalCliConfig c;
    if (config_path.empty()) return c;
    nlohmann::json j = load_config_file(config_path);
    reject_unknown_keys(j, {"checkpoint", "dataset", "view"}, "eval config");
    get_key(j, "checkpoint", c.checkpoint);
    get_key(j, "dataset", c.dataset);
    get_key(j, "view", c.view);
    return c;
}

inline int cmd_eval(const std::string& config_path, const CliOverrides& ov, const std::string& out_dir) {
    return guarded([&]() -> int {
        EvalCliConfig cfg = parse_eval_config(config_path);
        if (ov.checkpoint) cfg.checkpoint = *ov.checkpoint;
        if (ov.dataset) cfg.dataset = *ov.dataset;
        if (ov.view) cfg.view = *ov.view;
        if (cfg.view != "global" && cfg.view != "crop" && cfg.view != "both") {
            throw ConfigError("view must be one of global, crop, both");
        }
        if (cfg.checkpoint.empty()) throw ConfigError("missing required config key \"checkpoint\"");
        if (cfg.dataset.empty()) throw ConfigError("missing required config key \"dataset\"");
        if (!std::filesystem::exists(cfg.checkpoint)) {
            throw MissingInput("missing checkpoint file: " + cfg.checkpoint);
        }
        Checkpoint ckpt = load_checkpoint(cfg.checkpoint);
        const std::vector<Triplet> data = load_dataset_checked(cfg.dataset);
        if (data.empty()) throw ConfigError("eval dataset is empty: " + cfg.dataset);

        nlohmann::ordered_json resolved;
        resolved["checkpoint"] = cfg.checkpoint;
        resolved["dataset"] = cfg.dataset;
        resolved["view"] = cfg.view;
        nlohmann::ordered_json hashes;
        hashes["checkpoint"] = hash_of(cfg.checkpoint);
        hashes["dataset"] = hash_of(cfg.dataset);
        RunManifest m =
            begin_run(out_dir, "eval", resolved, nlohmann::ordered_json::object(), hashes);

        nlohmann::ordered_json rj;
        rj["run_id"] = m.run_id;
        rj["view"] = cfg.view;
        rj["n"] = data.size();
        if (cfg.view == "both") {
            const GapReport g = gap_report(ckpt.params, ckpt.config, data, 0);
            rj["regional_acc"] = g.regional_acc;
            rj["global_acc"] = g.global_acc;
            rj["gap"] = g.gap;
            std::printf("eval %s: regional_acc=%.4f global_acc=%.4f gap=%.4f\n", m.run_id.c_str(),
                        g.regional_acc, g.global_acc, g.gap);
        } else {
            const ViewKind kind = cfg.view == "global" ? ViewKind::global : ViewKind::crop;
            const double acc = accuracy(ckpt.params, ckpt.config, data, kind);
            rj[cfg.view == "global" ? "global_acc" : "regional_acc"] = acc;
            std::printf("eval %s: %s_acc=%.4f\n", m.run_id.c_str(),
                        cfg.view == "global" ? "global" : "regional", acc);
        }
        write_text_file(m.dir / "eval.json", rj.dump(2) + "\n");
        finish_run(m);
        return kOk;
    });
}

// ---------------------------------------------------------------------------
// ablate: Cartesian objective x teacher x divergence x gen-len matrix over a
// shared base config and pretrain checkpoint. Cells are isolated: one cell
// failing is recorded and the rest still run.

struct AblateCliConfig {
    TrainCliConfig base;
    std::vector<std::string> objective_axis;
    std::vector<std::string> teacher_axis;
    std::vector<std::string> divergence_axis;
    std::vector<int> gen_len_axis;
};

inline AblateCliConfig parse_ablate_config(const std::string& config_path) {
    AblateCliConfig c;
    if (config_path.empty()) return c;
    nlohmann::json j = load_config_file(config_path);
    std::vector<const char*> allowed(kTrainKeys);
    allowed.push_back("axes");
    if (!j.is_object()) throw ConfigError("ablate config must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find_if(allowed.begin(), allowed.end(),
                         [&](const char* k) { return it.key() == k; }) == allowed.end()) {
            throw ConfigError("unknown config key \"" + it.key() + "\" in ablate config");
        }
    }
    parse_train_fields(j, c.base);
    if (j.contains("axes")) {
        const nlohmann::json& a = j.at("axes");
        reject_unknown_keys(a, {"objective", "teacher", "divergence", "gen_len"}, "axes config");
        get_key(a, "objective", c.objective_axis);
        get_key(a, "teacher", c.teacher_axis);
        get_key(a, "divergence", c.divergence_axis);
        get_key(a, "gen_len", c.gen_len_axis);
    }
    return c;
}

inline int cmd_ablate(const std::string& config_path, const CliOverrides& ov, const std::string& out_dir) {
    return guarded([&]() -> int {
        AblateCliConfig cfg = parse_ablate_config(config_path);
        apply_train_overrides(cfg.base, ov);

        // Absent axes collapse to the base value, so an axis-free config is a
        // 1x1 matrix.
        if (cfg.objective_axis.empty()) cfg.objective_axis = {cfg.base.train.objective};
        if (cfg.teacher_axis.empty()) cfg.teacher_axis = {cfg.base.train.teacher};
        if (cfg.divergence_axis.empty()) {
            cfg.divergence_axis = {div_kind_name(cfg.base.train.divergence.kind)};
        }
        if (cfg.gen_len_axis.empty()) cfg.gen_len_axis = {cfg.base.train.max_gen_len};
        for (const std::string& d : cfg.divergence_axis) parse_div_kind(d);

        struct Cell {
            TrainCliConfig cfg;
            std::string key;
        };
        std::vector<Cell> cells;
        for (const std::string& o : cfg.objective_axis) {
            for (const std::string& t : cfg.teacher_axis) {
                for (const std::string& d : cfg.divergence_axis) {
                    for (int g : cfg.gen_len_axis) {
                        Cell c;
                        c.cfg = cfg.base;
                        c.cfg.train.objective = o;
                        c.cfg.train.teacher = t;
                        c.cfg.train.divergence.kind = parse_div_kind(d);
                        c.cfg.train.max_gen_len = g;
                        c.key = cell_key(c.cfg.train);
                        cells.push_back(std::move(c));
                    }
                }
            }
        }

        nlohmann::ordered_json resolved = resolved_train_json(cfg.base);
        resolved["axes"] = {{"objective", cfg.objective_axis},
                            {"teacher", cfg.teacher_axis},
                            {"divergence", cfg.divergence_axis},
                            {"gen_len", cfg.gen_len_axis}};
        nlohmann::ordered_json seeds;
        seeds["base"] = cfg.base.seed;
        nlohmann::ordered_json cell_seeds;
        for (const Cell& c : cells) {
            cell_seeds[c.key] = derive_seed(cfg.base.seed, "cell", fnv1a64(c.key));
        }
        seeds["cells"] = cell_seeds;
        nlohmann::ordered_json hashes;
        if (!std::filesystem::exists(cfg.base.checkpoint)) {
            throw MissingInput("missing checkpoint file: " + cfg.base.checkpoint);
        }
        hashes["checkpoint"] = hash_of(cfg.base.checkpoint);
        if (!std::filesystem::exists(cfg.base.dataset)) {
            throw MissingInput("missing dataset file: " + cfg.base.dataset);
        }
        hashes["dataset"] = hash_of(cfg.base.dataset);
        RunManifest m = begin_run(out_dir, "ablate", resolved, seeds, hashes);

        struct CellResult {
            std::string key;
            TrainConfig train;
            int code = kOk;
            bool ok = false;
            GapReport final_gap;
            std::string error;
        };
        std::vector<CellResult> results;
        for (const Cell& c : cells) {
            CellResult r;
            r.key = c.key;
            r.train = c.cfg.train;
            try {
                TrainRunOutcome out = run_train_once(c.cfg, m.dir / "cells" / c.key);
                r.code = out.code;
                r.ok = out.code == kOk;
                r.final_gap = out.final_gap;
                if (!r.ok) r.error = last_error();
            } catch (const std::exception& e) {
                r.code = kConfigError;
                r.error = e.what();
                std::fprintf(stderr, "cell %s failed: %s\n", c.key.c_str(), e.what());
            }
            results.push_back(std::move(r));
        }

        // Comparison table: finished cells ranked by final gap then global
        // accuracy, failed cells trailing.
        std::stable_sort(results.begin(), results.end(), [](const CellResult& a, const CellResult& b) {
            if (a.ok != b.ok) return a.ok;
            if (!a.ok) return a.key < b.key;
            if (a.final_gap.gap != b.final_gap.gap) return a.final_gap.gap < b.final_gap.gap;
            if (a.final_gap.global_acc != b.final_gap.global_acc) {
                return a.final_gap.global_acc > b.final_gap.global_acc;
            }
            return a.key < b.key;
        });
        std::string csv = "# run_id=" + m.run_id + "\n";
        csv += "cell,objective,teacher,divergence,gen_len,final_gap,final_global_acc,status\n";
        for (const CellResult& r : results) {
            std::string status = r.ok ? "ok" : (r.code == kTrainAbort ? "abort" : "error: " + r.error);
            for (char& ch : status) {
                if (ch == ',' || ch == '\n') ch = ' ';
            }
            csv += "\"" + r.key + "\"," + r.train.objective + "," + r.train.teacher + "," +
                   div_kind_name(r.train.divergence.kind) + "," + std::to_string(r.train.max_gen_len) +
                   ",";
            if (r.ok) {
                csv += format_metric(r.final_gap.gap) + "," + format_metric(r.final_gap.global_acc);
            } else {
                csv += ",";
            }
            csv += "," + status + "\n";
        }
        write_text_file(m.dir / "comparison.csv", csv);
        finish_run(m);

        int failures = 0;
        for (const CellResult& r : results) {
            if (!r.ok) ++failures;
        }
        std::printf("ablate %s: %zu cells, %d failed\n", m.run_id.c_str(), results.size(), failures);
        if (failures > 0) {
            last_error() = std::to_string(failures) + " ablation cell(s) failed";
            std::fprintf(stderr, "error: %s\n", last_error().c_str());
            return kConfigError;
        }
        return kOk;
    });
}

// ---------------------------------------------------------------------------
// Argument surface. Thin dispatch over the cmd_* entry points; parse errors
// map to the config-error exit code.

inline int run_cli(int argc, const char* const* argv) {
    CLI::App app{"regional-to-global on-policy self-distillation pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    uint64_t seed = 0;
    int n = 0;
    int gen_len = 0;
    std::string objective, teacher, divergence, checkpoint, dataset, view;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON config file (defaults apply when omitted)");
        sub->add_option("--out", out_dir, "output directory");
    };
    auto add_seed = [&](CLI::App* sub) { sub->add_option("--seed", seed, "override the base seed"); };
    auto add_train_flags = [&](CLI::App* sub) {
        sub->add_option("--objective", objective, "training objective");
        sub->add_option("--teacher", teacher, "teacher strategy");
        sub->add_option("--divergence", divergence, "divergence kind");
        sub->add_option("--gen-len", gen_len, "rollout length");
    };

    CLI::App* synth = app.add_subcommand("synth", "generate the synthetic dataset files");
    add_common(synth);
    add_seed(synth);
    synth->add_option("--n", n, "override the training-record count");

    CLI::App* pretrain = app.add_subcommand("pretrain", "asymmetric-exposure supervised pretraining");
    add_common(pretrain);
    add_seed(pretrain);

    CLI::App* train = app.add_subcommand("train", "run one training objective from a checkpoint");
    add_common(train);
    add_seed(train);
    add_train_flags(train);

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    add_common(eval_cmd);
    eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file");
    eval_cmd->add_option("--dataset", dataset, "dataset file");
    eval_cmd->add_option("--view", view, "global, crop, or both");

    CLI::App* ablate = app.add_subcommand("ablate", "run an ablation matrix of training cells");
    add_common(ablate);
    add_seed(ablate);
    add_train_flags(ablate);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kConfigError;
    }

    CLI::App* sub = app.get_subcommands().front();
    auto given = [&](const std::string& flag) {
        const CLI::Option* o = sub->get_option_no_throw(flag);
        return o != nullptr && o->count() > 0;
    };
    CliOverrides ov;
    if (given("--seed")) ov.seed = seed;
    if (given("--n")) ov.n = n;
    if (given("--objective")) ov.objective = objective;
    if (given("--teacher")) ov.teacher = teacher;
    if (given("--divergence")) ov.divergence = divergence;
    if (given("--gen-len")) ov.gen_len = gen_len;
    if (given("--checkpoint")) ov.checkpoint = checkpoint;
    if (given("--dataset")) ov.dataset = dataset;
    if (given("--view")) ov.view = view;

    const std::string name = sub->get_name();
    const std::string out = out_dir.empty() ? "runs/" + name : out_dir;
    if (name == "synth") return cmd_synth(config_path, ov, out);
    if (name == "pretrain") return cmd_pretrain(config_path, ov, out);
    if (name == "train") return cmd_train(config_path, ov, out);
    if (name == "eval") return cmd_eval(config_path, ov, out);
    return cmd_ablate(config_path, ov, out);
}

}  // namespace opdlab::cli
