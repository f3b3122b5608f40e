// Command-line front end: pretrain | score | prune | sweep | distill | eval | pipeline | compare.

#include "comepress/pipeline.hpp"
#include "comepress/sweep.hpp"

#include <CLI11.hpp>

#include <cstring>
#include <iostream>

using namespace comepress;

namespace {

constexpr int kConfigError = 2;
constexpr int kNumericError = 3;
constexpr int kIoError = 4;

/// Options shared by the data-driven subcommands.
void add_common(CLI::App* cmd, RunConfig& rc, std::string& config_path) {
    cmd->add_option("--config", config_path, "JSON run config; explicit flags override it");
    cmd->add_option("--seed", rc.seed, "Seed for initialisation, sampling and shuffling");
    cmd->add_option("--corpus", rc.corpus, "Corpus file (split 90/5/5 into train/val/test)");
}

void add_prune_options(CLI::App* cmd, RunConfig& rc) {
    cmd->add_option("--method", rc.prune.method, "Pruning method")
        ->check(CLI::IsMember(prune_methods()));
    cmd->add_option("--target-layers", rc.prune.target_layers, "Layer count after pruning");
    cmd->add_option("--p", rc.prune.p, "Retention-ratio exponent");
    cmd->add_option("--rho", rc.prune.rho, "Minimum retention ratio for the strongest layer (0 disables)");
    cmd->add_option("--m", rc.prune.m, "Extra layers merged per iteration (group size m+1)");
    cmd->add_option("--n", rc.prune.n, "Posterior candidate grid resolution");
    cmd->add_option("--calib-samples", rc.prune.calib_samples, "Calibration windows");
    cmd->add_flag("--protect-ends", rc.prune.protect_ends, "Never remove the first 4 or last 2 layers (dlp; default off)");
}

void add_distill_options(CLI::App* cmd, RunConfig& rc, std::string& mode, std::string& kl,
                         std::string& schedule, double& lr) {
    cmd->add_option("--mode", mode, "Distillation mode")->check(CLI::IsMember({"mp", "sp"}));
    cmd->add_option("--steps", rc.distill.steps, "Steps (per pair for mp)");
    cmd->add_option("--lr", lr, "Learning rate (default: 1e-5 for sp, per-pair ladder for mp)");
    cmd->add_option("--kl", kl, "KL direction")->check(CLI::IsMember({"forward", "symmetric"}));
    cmd->add_option("--batch", rc.distill.batch, "Windows per step");
    cmd->add_option("--seq", rc.distill.seq, "Window length");
    cmd->add_option("--schedule", schedule, "Learning-rate schedule")
        ->check(CLI::IsMember({"cosine", "constant"}));
}

RunConfig load_config(const std::string& path) {
    RunConfig rc;
    rc.corpus = COMEPRESS_DEFAULT_CORPUS;
    if (!path.empty()) update_from_json(load_report(path), rc);
    return rc;
}

/// The config file seeds every default, so it has to be read before the flags are declared.
std::string find_config_arg(int argc, char** argv) {
    for (int i = 1; i < argc; ++i) {
        if (std::strcmp(argv[i], "--config") == 0 && i + 1 < argc) return argv[i + 1];
        if (std::strncmp(argv[i], "--config=", 9) == 0) return argv[i] + 9;
    }
    return {};
}

CorpusSplits load_splits(const RunConfig& rc) { return split_corpus(read_corpus(rc.corpus)); }

void print_eval(const std::string& label, const EvalResult& r) {
    std::cout << label << ": ppl " << r.ppl << " (" << r.token_count << " tokens)\n";
}

int run(int argc, char** argv) {
    std::string config_path = find_config_arg(argc, argv);
    RunConfig rc = load_config(config_path);

    CLI::App app{"Depth compression toolkit for a toy decoder-only transformer"};
    app.option_defaults()->always_capture_default();
    app.require_subcommand(1);

    std::string ckpt, out, report_path, mapping_path, student_path;
    std::string mode = to_string(rc.distill.mode), kl = to_string(rc.distill.kl);
    std::string schedule = to_string(rc.distill.schedule), norm = to_string(rc.prune.norm_mode);
    double distill_lr = rc.distill.lr.value_or(1e-5);

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "Train a toy model from scratch");
    add_common(pre, rc, config_path);
    pre->add_option("--steps", rc.pretrain.steps, "Optimizer steps");
    pre->add_option("--batch", rc.pretrain.batch, "Windows per step");
    pre->add_option("--seq", rc.pretrain.seq, "Window length");
    pre->add_option("--lr", rc.pretrain.lr, "Peak learning rate");
    pre->add_option("--warmup", rc.pretrain.warmup_steps, "Linear warmup steps before cosine decay");
    pre->add_option("--n-layers", rc.model.n_layers, "Decoder layers");
    pre->add_option("--d-model", rc.model.d_model, "Hidden width");
    pre->add_option("--n-heads", rc.model.n_heads, "Attention heads");
    pre->add_option("--d-head", rc.model.d_head, "Per-head width (default: d-model / n-heads)");
    pre->add_option("--d-ff", rc.model.d_ff, "FFN intermediate width");
    out = "ckpt/base";
    pre->add_option("--out", out, "Checkpoint directory");
    pre->add_option("--curve", report_path, "Loss curve file (default: <out>/curve.json)");

    // score
    auto* score = app.add_subcommand("score", "Per-layer importance under several metrics");
    add_common(score, rc, config_path);
    score->add_option("--ckpt", ckpt, "Model checkpoint")->required();
    std::vector<std::string> score_methods = {"bi", "magnitude", "taylor", "posterior_ppl"};
    score->add_option("--methods", score_methods, "Metrics to compute")
        ->delimiter(',')
        ->check(CLI::IsMember({"bi", "magnitude", "taylor", "posterior_ppl"}));
    score->add_option("--calib-samples", rc.prune.calib_samples, "Calibration windows");
    std::string score_out = "scores.json";
    score->add_option("--out", score_out, "Report file");

    // prune
    auto* prune = app.add_subcommand("prune", "Remove or merge layers down to a target depth");
    add_common(prune, rc, config_path);
    prune->add_option("--ckpt", ckpt, "Model checkpoint")->required();
    add_prune_options(prune, rc);
    prune->add_option("--norm-mode", norm, "Norm handling for merged layers")
        ->check(CLI::IsMember({"average", "follow_base"}));
    std::string prune_out = "ckpt/pruned", prune_report = "prune_report.json";
    prune->add_option("--out", prune_out, "Pruned checkpoint directory");
    prune->add_option("--report", prune_report, "Prune report file");

    // sweep
    auto* sweep = app.add_subcommand("sweep", "PPL of a merged adjacent pair across retention ratios");
    add_common(sweep, rc, config_path);
    sweep->add_option("--ckpt", ckpt, "Model checkpoint")->required();
    std::vector<std::size_t> pair;
    sweep->add_option("--pair", pair, "Adjacent layers l,l+1")->delimiter(',')->expected(2)->required();
    std::string structure = "layer", sweep_method = "both";
    sweep->add_option("--structure", structure, "Merged structure")
        ->check(CLI::IsMember({"mha", "ffn", "layer", "all"}));
    sweep->add_option("--method", sweep_method, "Merge method")->check(CLI::IsMember({"alpha", "concat", "both"}));
    std::size_t grid_n = 10;
    sweep->add_option("--grid-n", grid_n, "Ratios i/grid_n for i = 0..grid_n");
    sweep->add_option("--calib-samples", rc.prune.calib_samples, "Calibration windows for channel scores");
    sweep->add_option("--split", rc.eval_split, "Evaluation split")->check(CLI::IsMember({"val", "test"}));
    sweep->add_option("--seq", rc.eval_seq, "Evaluation window length");
    std::string sweep_out = "sweep.json";
    sweep->add_option("--out", sweep_out, "Report file");

    // distill
    auto* dist = app.add_subcommand("distill", "Feature distillation of a pruned student");
    add_common(dist, rc, config_path);
    dist->add_option("--teacher", ckpt, "Original model checkpoint")->required();
    dist->add_option("--student", student_path, "Pruned model checkpoint")->required();
    dist->add_option("--mapping", mapping_path, "Prune report or pipeline summary with the layer mapping")
        ->required();
    add_distill_options(dist, rc, mode, kl, schedule, distill_lr);
    std::string dist_out = "ckpt/distilled";
    dist->add_option("--out", dist_out, "Distilled checkpoint directory");
    dist->add_option("--curve", report_path, "Loss curve file (default: <out>/curve.json)");

    // eval
    auto* ev = app.add_subcommand("eval", "Perplexity on a held-out split");
    add_common(ev, rc, config_path);
    ev->add_option("--ckpt", ckpt, "Model checkpoint")->required();
    ev->add_option("--split", rc.eval_split, "Evaluation split")->check(CLI::IsMember({"val", "test"}));
    ev->add_option("--seq", rc.eval_seq, "Window length (non-overlapping)");
    std::string eval_out;
    ev->add_option("--out", eval_out, "Report file (optional)");

    // pipeline
    auto* pipe = app.add_subcommand("pipeline", "pretrain -> prune -> distill -> eval with one summary");
    add_common(pipe, rc, config_path);
    std::string out_dir = rc.out_dir.string();
    pipe->add_option("--out", out_dir, "Run directory");
    pipe->add_option("--stages", rc.stages, "Stages to run, in pipeline order")
        ->delimiter(',')
        ->check(CLI::IsMember({"pretrain", "prune", "distill", "eval"}));
    pipe->add_option("--ckpt", ckpt, "Base checkpoint when pretrain is skipped");
    pipe->add_option("--pretrain-steps", rc.pretrain.steps, "Pretraining steps");
    add_prune_options(pipe, rc);
    add_distill_options(pipe, rc, mode, kl, schedule, distill_lr);
    pipe->add_option("--split", rc.eval_split, "Evaluation split")->check(CLI::IsMember({"val", "test"}));

    // compare
    auto* cmp = app.add_subcommand("compare", "Tabulate completed pipeline runs");
    std::vector<std::string> runs;
    cmp->add_option("runs", runs, "Run directories")->required()->expected(2, -1);
    std::string cmp_out;
    cmp->add_option("--out", cmp_out, "JSON table file (optional)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kConfigError;
    }

    rc.distill.mode = parse_distill_mode(mode);
    rc.distill.kl = parse_kl(kl);
    rc.distill.schedule = parse_schedule(schedule);
    rc.prune.norm_mode = parse_norm_mode(norm);
    const bool lr_given = (dist->parsed() && dist->count("--lr")) || (pipe->parsed() && pipe->count("--lr"));
    if (lr_given) rc.distill.lr = distill_lr;

    if (pre->parsed()) {
        if (!pre->count("--d-head") && (pre->count("--d-model") || pre->count("--n-heads")) && rc.model.n_heads > 0)
            rc.model.d_head = rc.model.d_model / rc.model.n_heads;
        rc.model.validate();
        const auto splits = load_splits(rc);
        PretrainConfig pc = rc.pretrain;
        pc.seed = rc.seed;
        const std::size_t every = std::max<std::size_t>(1, pc.steps / 20);
        auto result = pretrain(init_model(rc.model, rc.seed), splits.train, pc, [&](const LossPoint& p) {
            if (p.step % every == 0 || p.step + 1 == pc.steps)
                std::cerr << "step " << p.step << " loss " << p.loss << " lr " << p.lr << "\n";
        });
        save_checkpoint(result.model, out);
        emit_report(Json{{"curve", curve_to_json(result.curve)}},
                    report_path.empty() ? std::filesystem::path(out) / "curve.json" : std::filesystem::path(report_path));
        print_eval("val", perplexity(result.model, splits.val, rc.eval_seq));
    } else if (score->parsed()) {
        const ToyModel model = load_checkpoint(ckpt);
        const auto splits = load_splits(rc);
        const auto calib = calibration_windows(splits.train, rc.prune.calib_samples, rc.prune.calib_seq, rc.seed);
        std::vector<LayerScoreSet> sets;
        for (const auto& m : score_methods) {
            if (m == "bi") {
                CaptureSpec spec;
                spec.logits = false;
                sets.push_back(LayerScoreSet::from_scores("bi", bi_scores(capture_trace(model, calib, spec))));
            } else if (m == "magnitude") {
                sets.push_back(magnitude_importance(model));
            } else if (m == "taylor") {
                sets.push_back(taylor_importance(model, std::span<const Window>(calib)));
            } else {
                sets.push_back(posterior_ppl_importance(model, calib));
            }
        }
        emit_report(Json{{"layers", model.layers.size()},
                         {"calibration_windows", calib.size()},
                         {"seed", rc.seed},
                         {"scores", to_report_json(sets)}},
                    score_out);
        for (const auto& s : sets) {
            std::cout << s.method << ":";
            for (double v : s.normalized) std::cout << ' ' << v;
            std::cout << '\n';
        }
    } else if (prune->parsed()) {
        const ToyModel model = load_checkpoint(ckpt);
        const auto splits = load_splits(rc);
        const auto calib = calibration_windows(splits.train, rc.prune.calib_samples, rc.prune.calib_seq, rc.seed);
        const auto val = make_eval_windows(splits.val, rc.eval_seq, rc.eval_seq);
        auto [pruned, report] = run_prune(model, rc.prune, PruneData{calib, val});
        report.hyperparameters["seed"] = rc.seed;
        save_checkpoint(pruned, prune_out);
        emit_report(to_report_json(report), prune_report);
        print_eval("val before", *report.eval_before);
        print_eval("val after", *report.eval_after);
    } else if (sweep->parsed()) {
        if (pair[1] != pair[0] + 1) throw ContractError("--pair must name adjacent layers l,l+1");
        const ToyModel model = load_checkpoint(ckpt);
        const auto splits = load_splits(rc);
        const auto calib = calibration_windows(splits.train, rc.prune.calib_samples, rc.prune.calib_seq, rc.seed);
        const auto eval = make_eval_windows(split_text(splits, rc.eval_split), rc.eval_seq, rc.eval_seq);
        std::vector<SweepStructure> structures;
        if (structure == "all")
            structures = {SweepStructure::mha, SweepStructure::ffn, SweepStructure::layer};
        else
            structures = {parse_structure(structure)};
        std::vector<SweepMethod> methods;
        if (sweep_method == "both")
            methods = {SweepMethod::alpha_blend, SweepMethod::concat};
        else
            methods = {parse_sweep_method(sweep_method)};
        const auto result = ratio_sweep(model, pair[0], structures, methods, grid_n, calib, eval);
        Json doc = to_report_json(result);
        doc["split"] = rc.eval_split;
        doc["seed"] = rc.seed;
        emit_report(doc, sweep_out);
        for (const auto& r : result.records)
            std::cout << to_string(r.structure) << ' ' << to_string(r.method) << ' ' << r.ratio << ' ' << r.ppl << '\n';
    } else if (dist->parsed()) {
        const ToyModel teacher = load_checkpoint(ckpt);
        const ToyModel student = load_checkpoint(student_path);
        const auto splits = load_splits(rc);
        DistillConfig dc;
        dc.mode = rc.distill.mode;
        dc.mapping = load_mapping(mapping_path);
        dc.steps = rc.distill.steps;
        dc.batch = rc.distill.batch;
        dc.seq = rc.distill.seq;
        dc.kl = rc.distill.kl;
        dc.schedule = rc.distill.schedule;
        dc.seed = rc.seed;
        dc.lr = rc.distill.lr.value_or(1e-5);
        dc.pair_lrs = rc.distill.lr ? std::vector<double>(dc.mapping.pairs.size(), *rc.distill.lr)
                                    : mp_lr_ladder(dc.mapping.pairs.size());
        const std::size_t every = std::max<std::size_t>(1, dc.steps / 20);
        auto result = distill(teacher, student, splits.train, dc, [&](const LossPoint& p) {
            if (p.step % every == 0 || p.step + 1 == dc.steps)
                std::cerr << (p.pair ? "pair " + std::to_string(*p.pair) + " " : "") << "step " << p.step
                          << " kl " << p.loss << " lr " << p.lr << "\n";
        });
        save_checkpoint(result.model, dist_out);
        emit_report(Json{{"curve", curve_to_json(result.curve)}},
                    report_path.empty() ? std::filesystem::path(dist_out) / "curve.json"
                                        : std::filesystem::path(report_path));
        print_eval("val before", perplexity(student, splits.val, rc.eval_seq));
        print_eval("val after", perplexity(result.model, splits.val, rc.eval_seq));
    } else if (ev->parsed()) {
        const ToyModel model = load_checkpoint(ckpt);
        const auto splits = load_splits(rc);
        const auto r = perplexity(model, split_text(splits, rc.eval_split), rc.eval_seq);
        print_eval(rc.eval_split, r);
        if (!eval_out.empty()) {
            Json doc = to_report_json(r);
            doc["split"] = rc.eval_split;
            doc["seq"] = rc.eval_seq;
            emit_report(doc, eval_out);
        }
    } else if (pipe->parsed()) {
        rc.out_dir = out_dir;
        if (!ckpt.empty()) rc.checkpoint = ckpt;
        const Json summary = run_pipeline(rc);
        std::cout << summary.dump(2) << '\n';
    } else if (cmp->parsed()) {
        std::vector<std::filesystem::path> dirs(runs.begin(), runs.end());
        const Json table = compare_runs(dirs);
        std::cout << format_comparison(table);
        if (!cmp_out.empty()) emit_report(table, cmp_out);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return kNumericError;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kIoError;
    } catch (const CorruptionError& e) {
        std::cerr << "corrupt checkpoint: " << e.what() << '\n';
        return kIoError;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kIoError;
    } catch (const std::logic_error& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
