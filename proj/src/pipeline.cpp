#include "comepress/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace comepress {

namespace {

template <typename E>
[[noreturn]] void rethrow_as(const std::string& stage, const E& e) {
    throw E("stage '" + stage + "': " + e.what());
}

/// Runs fn, prefixing any error message with the stage name and keeping its type.
template <typename F>
auto in_stage(const std::string& stage, F&& fn) {
    try {
        return fn();
    } catch (const CorruptionError& e) {
        rethrow_as(stage, e);
    } catch (const IoError& e) {
        rethrow_as(stage, e);
    } catch (const NumericError& e) {
        rethrow_as(stage, e);
    } catch (const ShapeError& e) {
        rethrow_as(stage, e);
    } catch (const InputError& e) {
        rethrow_as(stage, e);
    } catch (const ContractError& e) {
        rethrow_as(stage, e);
    } catch (const nlohmann::json::exception& e) {
        throw ContractError("stage '" + stage + "': " + e.what());
    }
}

const std::vector<std::string> kStages = {"pretrain", "prune", "distill", "eval"};

}  // namespace

const std::vector<std::string>& prune_methods() {
    static const std::vector<std::string> methods = {"come",   "come-p",   "dlp-mag",  "dlp-taylor",
                                                     "dlp-bi", "dlp-sleb", "wslp-laco"};
    return methods;
}

std::string to_string(NormMode m) { return m == NormMode::average ? "average" : "follow_base"; }
NormMode parse_norm_mode(std::string_view s) {
    if (s == "average") return NormMode::average;
    if (s == "follow_base") return NormMode::follow_base;
    throw ContractError("unknown norm mode '" + std::string(s) + "'");
}
std::string to_string(DistillMode m) { return m == DistillMode::mp ? "mp" : "sp"; }
DistillMode parse_distill_mode(std::string_view s) {
    if (s == "mp") return DistillMode::mp;
    if (s == "sp") return DistillMode::sp;
    throw ContractError("unknown distillation mode '" + std::string(s) + "'");
}
std::string to_string(KlDirection k) { return k == KlDirection::forward ? "forward" : "symmetric"; }
KlDirection parse_kl(std::string_view s) {
    if (s == "forward") return KlDirection::forward;
    if (s == "symmetric") return KlDirection::symmetric;
    throw ContractError("unknown KL direction '" + std::string(s) + "'");
}
std::string to_string(LrSchedule s) { return s == LrSchedule::cosine ? "cosine" : "constant"; }
LrSchedule parse_schedule(std::string_view s) {
    if (s == "cosine") return LrSchedule::cosine;
    if (s == "constant") return LrSchedule::constant;
    throw ContractError("unknown learning-rate schedule '" + std::string(s) + "'");
}

void RunConfig::validate() const {
    model.validate();
    if (stages.empty()) throw ContractError("no stages requested");
    for (const auto& s : stages)
        if (std::find(kStages.begin(), kStages.end(), s) == kStages.end())
            throw ContractError("unknown stage '" + s + "'");
    const auto& methods = prune_methods();
    if (std::find(methods.begin(), methods.end(), prune.method) == methods.end())
        throw ContractError("unknown prune method '" + prune.method + "'");
    if (prune.target_layers < 1 || prune.target_layers > model.n_layers)
        throw ContractError("target layers must lie in [1, n_layers]");
    if (prune.calib_samples == 0) throw ContractError("calibration needs at least one window");
    if (prune.calib_seq > model.max_seq || distill.seq > model.max_seq || eval_seq > model.max_seq ||
        pretrain.seq > model.max_seq)
        throw ContractError("sequence lengths must not exceed max_seq");
    if (eval_split != "val" && eval_split != "test") throw ContractError("eval split must be val or test");
    const bool pretraining = std::find(stages.begin(), stages.end(), "pretrain") != stages.end();
    if (!pretraining && !checkpoint) throw ContractError("a checkpoint is required when pretrain is skipped");
}

Json to_json(const RunConfig& c) {
    Json model;
    nlohmann::json plain = c.model;
    for (const auto& [k, v] : plain.items()) model[k] = v;
    Json j;
    j["seed"] = c.seed;
    j["model"] = model;
    j["corpus"] = c.corpus.string();
    j["out_dir"] = c.out_dir.string();
    j["stages"] = c.stages;
    j["checkpoint"] = c.checkpoint ? Json(c.checkpoint->string()) : Json(nullptr);
    j["pretrain"] = {{"steps", c.pretrain.steps},
                     {"batch", c.pretrain.batch},
                     {"seq", c.pretrain.seq},
                     {"lr", c.pretrain.lr},
                     {"warmup_steps", c.pretrain.warmup_steps},
                     {"clip", c.pretrain.clip},
                     {"weight_decay", c.pretrain.adamw.weight_decay}};
    j["prune"] = {{"method", c.prune.method},         {"target_layers", c.prune.target_layers},
                  {"p", c.prune.p},                   {"rho", c.prune.rho},
                  {"m", c.prune.m},                   {"n", c.prune.n},
                  {"calib_samples", c.prune.calib_samples}, {"calib_seq", c.prune.calib_seq},
                  {"protect_ends", c.prune.protect_ends}, {"norm_mode", to_string(c.prune.norm_mode)}};
    j["distill"] = {{"mode", to_string(c.distill.mode)},
                    {"steps", c.distill.steps},
                    {"lr", c.distill.lr ? Json(*c.distill.lr) : Json(nullptr)},
                    {"kl", to_string(c.distill.kl)},
                    {"batch", c.distill.batch},
                    {"seq", c.distill.seq},
                    {"schedule", to_string(c.distill.schedule)}};
    j["eval"] = {{"split", c.eval_split}, {"seq", c.eval_seq}};
    return j;
}

namespace {

template <typename V>
void take(const Json& j, const char* key, V& out) {
    if (j.contains(key) && !j[key].is_null()) out = j[key].get<V>();
}

}  // namespace

void update_from_json(const Json& j, RunConfig& c) {
    static const std::set<std::string> known = {"seed", "model", "corpus",  "out_dir", "stages",
                                                "checkpoint", "pretrain", "prune", "distill", "eval"};
    for (const auto& [k, v] : j.items())
        if (!known.contains(k)) throw ContractError("unknown config key '" + k + "'");
    take(j, "seed", c.seed);
    if (j.contains("model")) {
        nlohmann::json merged = c.model;
        for (const auto& [k, v] : j["model"].items()) {
            if (!merged.contains(k)) throw ContractError("unknown model config key '" + k + "'");
            merged[k] = v;
        }
        c.model = merged.get<ModelConfig>();
    }
    if (j.contains("corpus")) c.corpus = j["corpus"].get<std::string>();
    if (j.contains("out_dir")) c.out_dir = j["out_dir"].get<std::string>();
    take(j, "stages", c.stages);
    if (j.contains("checkpoint"))
        c.checkpoint = j["checkpoint"].is_null() ? std::nullopt
                                                 : std::optional<std::filesystem::path>(j["checkpoint"].get<std::string>());
    if (j.contains("pretrain")) {
        const auto& p = j["pretrain"];
        take(p, "steps", c.pretrain.steps);
        take(p, "batch", c.pretrain.batch);
        take(p, "seq", c.pretrain.seq);
        take(p, "lr", c.pretrain.lr);
        take(p, "warmup_steps", c.pretrain.warmup_steps);
        take(p, "clip", c.pretrain.clip);
        take(p, "weight_decay", c.pretrain.adamw.weight_decay);
    }
    if (j.contains("prune")) {
        const auto& p = j["prune"];
        take(p, "method", c.prune.method);
        take(p, "target_layers", c.prune.target_layers);
        take(p, "p", c.prune.p);
        take(p, "rho", c.prune.rho);
        take(p, "m", c.prune.m);
        take(p, "n", c.prune.n);
        take(p, "calib_samples", c.prune.calib_samples);
        take(p, "calib_seq", c.prune.calib_seq);
        take(p, "protect_ends", c.prune.protect_ends);
        if (p.contains("norm_mode")) c.prune.norm_mode = parse_norm_mode(p["norm_mode"].get<std::string>());
    }
    if (j.contains("distill")) {
        const auto& d = j["distill"];
        if (d.contains("mode")) c.distill.mode = parse_distill_mode(d["mode"].get<std::string>());
        take(d, "steps", c.distill.steps);
        if (d.contains("lr"))
            c.distill.lr = d["lr"].is_null() ? std::nullopt : std::optional<double>(d["lr"].get<double>());
        if (d.contains("kl")) c.distill.kl = parse_kl(d["kl"].get<std::string>());
        take(d, "batch", c.distill.batch);
        take(d, "seq", c.distill.seq);
        if (d.contains("schedule")) c.distill.schedule = parse_schedule(d["schedule"].get<std::string>());
    }
    if (j.contains("eval")) {
        take(j["eval"], "split", c.eval_split);
        take(j["eval"], "seq", c.eval_seq);
    }
}

std::vector<Window> calibration_windows(std::string_view train_text, std::size_t count, std::size_t seq,
                                        std::uint64_t seed) {
    CounterRng rng = CounterRng(seed).fork(0x63616c69);
    return sample_windows(train_text, seq, count, rng);
}

std::pair<ToyModel, PruneReport> run_prune(const ToyModel& model, const PruneSettings& s,
                                           const PruneData& data) {
    std::pair<ToyModel, PruneReport> out;
    if (s.method == "come") {
        out = progressive_prune(model, data, {s.target_layers, s.m, s.p, s.rho, s.norm_mode});
    } else if (s.method == "come-p") {
        out = posterior_prune(model, data, {s.target_layers, s.n, s.norm_mode});
    } else if (s.method == "dlp-mag") {
        out = dlp_prune(model, magnitude_importance(model), s.target_layers, s.protect_ends, &data);
    } else if (s.method == "dlp-taylor") {
        out = dlp_prune(model, taylor_importance(model, data.calibration), s.target_layers, s.protect_ends, &data);
    } else if (s.method == "dlp-bi") {
        CaptureSpec spec;
        spec.logits = false;
        const auto trace = capture_trace(model, data.calibration, spec);
        out = dlp_prune(model, LayerScoreSet::from_scores("bi", bi_scores(trace)), s.target_layers,
                        s.protect_ends, &data);
    } else if (s.method == "dlp-sleb") {
        out = sleb_prune(model, data, s.target_layers, s.protect_ends);
    } else if (s.method == "wslp-laco") {
        out = laco_prune(model, data, s.target_layers, s.m);
    } else {
        throw ContractError("unknown prune method '" + s.method + "'");
    }
    out.second.method = s.method;
    return out;
}

std::string split_text(const CorpusSplits& splits, std::string_view name) {
    if (name == "train") return splits.train;
    if (name == "val") return splits.val;
    if (name == "test") return splits.test;
    throw ContractError("unknown split '" + std::string(name) + "'");
}

Json run_pipeline(const RunConfig& config) {
    config.validate();
    const auto has = [&](std::string_view s) {
        return std::find(config.stages.begin(), config.stages.end(), s) != config.stages.end();
    };
    const auto& dir = config.out_dir;
    std::filesystem::create_directories(dir);
    emit_report(to_json(config), dir / "run_config.json");

    const CorpusSplits splits = in_stage("load", [&] { return split_corpus(read_corpus(config.corpus)); });

    Json summary;
    summary["method"] = config.prune.method;
    summary["seed"] = config.seed;
    summary["stages"] = config.stages;

    ToyModel base = in_stage("pretrain", [&] {
        if (!has("pretrain")) return load_checkpoint(*config.checkpoint);
        PretrainConfig pc = config.pretrain;
        pc.seed = config.seed;
        auto result = pretrain(init_model(config.model, config.seed), splits.train, pc);
        save_checkpoint(result.model, dir / "base");
        emit_report(Json{{"curve", curve_to_json(result.curve)}}, dir / "pretrain_curve.json");
        return std::move(result.model);
    });

    std::optional<ToyModel> pruned;
    std::optional<LayerMapping> mapping;
    if (has("prune")) {
        in_stage("prune", [&] {
            const auto calib = calibration_windows(splits.train, config.prune.calib_samples,
                                                   config.prune.calib_seq, config.seed);
            const auto val = make_eval_windows(splits.val, config.eval_seq, config.eval_seq);
            auto [model, report] = run_prune(base, config.prune, PruneData{calib, val});
            save_checkpoint(model, dir / "pruned");
            emit_report(to_report_json(report), dir / "prune_report.json");
            summary["mapping"] = to_report_json(report).at("mapping");
            mapping = report.mapping;
            pruned = std::move(model);
            return 0;
        });
    } else if (has("distill")) {
        in_stage("prune", [&] {
            pruned = load_checkpoint(dir / "pruned");
            mapping = load_mapping(dir / "prune_report.json");
            return 0;
        });
    }

    std::optional<ToyModel> distilled;
    if (has("distill")) {
        in_stage("distill", [&] {
            DistillConfig dc;
            dc.mode = config.distill.mode;
            dc.mapping = *mapping;
            dc.steps = config.distill.steps;
            dc.batch = config.distill.batch;
            dc.seq = config.distill.seq;
            dc.kl = config.distill.kl;
            dc.schedule = config.distill.schedule;
            dc.seed = config.seed;
            dc.lr = config.distill.lr.value_or(1e-5);
            dc.pair_lrs = config.distill.lr ? std::vector<double>(mapping->pairs.size(), *config.distill.lr)
                                            : mp_lr_ladder(mapping->pairs.size());
            auto result = distill(base, *pruned, splits.train, dc);
            save_checkpoint(result.model, dir / "distilled");
            emit_report(Json{{"curve", curve_to_json(result.curve)}}, dir / "distill_curve.json");
            distilled = std::move(result.model);
            return 0;
        });
    }

    if (has("eval")) {
        in_stage("eval", [&] {
            const std::string text = split_text(splits, config.eval_split);
            Json ppl;
            ppl["base"] = to_report_json(perplexity(base, text, config.eval_seq));
            if (pruned) ppl["pruned"] = to_report_json(perplexity(*pruned, text, config.eval_seq));
            if (distilled) ppl["distilled"] = to_report_json(perplexity(*distilled, text, config.eval_seq));
            summary["eval_split"] = config.eval_split;
            summary["ppl"] = std::move(ppl);
            return 0;
        });
    }
    emit_report(summary, dir / "summary.json");
    return summary;
}

namespace {

Json ppl_or_null(const Json& summary, const char* key) {
    if (summary.contains("ppl") && summary["ppl"].contains(key)) return summary["ppl"][key]["ppl"];
    return nullptr;
}

}  // namespace

Json compare_runs(std::span<const std::filesystem::path> run_dirs) {
    if (run_dirs.size() < 2) throw ContractError("compare needs at least two runs");
    Json rows = Json::array();
    for (const auto& dir : run_dirs) {
        const auto summary_path = dir / "summary.json";
        if (!std::filesystem::exists(summary_path)) throw IoError("missing run summary " + summary_path.string());
        const Json summary = load_report(summary_path);
        Json row;
        row["method"] = summary.at("method");
        row["run"] = dir.string();
        row["ppl_base"] = ppl_or_null(summary, "base");
        row["ppl_pruned"] = ppl_or_null(summary, "pruned");
        row["ppl_distilled"] = ppl_or_null(summary, "distilled");
        const auto report_path = dir / "prune_report.json";
        if (summary.at("method") == "come-p" && std::filesystem::exists(report_path)) {
            const Json report = load_report(report_path);
            bool dominates = true;
            for (const auto& it : report.at("iterations")) {
                const auto& ppl = it.at("candidate_ppl");
                const double chosen = it.at("chosen_ppl").get<double>();
                dominates = dominates && chosen <= ppl.front().get<double>() && chosen <= ppl.back().get<double>();
            }
            row["posterior_dominance"] = dominates;
        }
        rows.push_back(std::move(row));
    }
    std::vector<Json> sorted(rows.begin(), rows.end());
    std::stable_sort(sorted.begin(), sorted.end(), [](const Json& a, const Json& b) {
        return a["method"].get<std::string>() < b["method"].get<std::string>();
    });
    return Json(sorted);
}

std::string format_comparison(const Json& table) {
    std::ostringstream out;
    const auto cell = [](const Json& v) {
        if (v.is_null()) return std::string("-");
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.4f", v.get<double>());
        return std::string(buf);
    };
    char line[256];
    std::snprintf(line, sizeof line, "%-12s %14s %14s  %s\n", "method", "ppl_pruned", "ppl_distilled", "run");
    out << line;
    for (const auto& row : table) {
        std::snprintf(line, sizeof line, "%-12s %14s %14s  %s\n", row["method"].get<std::string>().c_str(),
                      cell(row["ppl_pruned"]).c_str(), cell(row["ppl_distilled"]).c_str(),
                      row["run"].get<std::string>().c_str());
        out << line;
    }
    return out.str();
}

}  // namespace comepress
