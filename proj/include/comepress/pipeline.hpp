#pragma once

#include "comepress/merging.hpp"
#include "comepress/report.hpp"
#include "comepress/training.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace comepress {

struct PruneSettings {
    std::string method = "come";  // come, come-p, dlp-mag, dlp-taylor, dlp-bi, dlp-sleb, wslp-laco
    std::size_t target_layers = 6;
    double p = 1.0;
    double rho = 0.0;
    std::size_t m = 1;
    std::size_t n = 20;
    std::size_t calib_samples = 256;
    std::size_t calib_seq = 128;
    bool protect_ends = false;
    NormMode norm_mode = NormMode::average;
};

struct DistillSettings {
    DistillMode mode = DistillMode::sp;
    std::size_t steps = 1000;
    std::optional<double> lr;  // sp: 1e-5; mp: per-pair ladder
    KlDirection kl = KlDirection::forward;
    std::size_t batch = 16;
    std::size_t seq = 128;
    LrSchedule schedule = LrSchedule::cosine;
};

struct RunConfig {
    std::uint64_t seed = 0;
    ModelConfig model;
    std::filesystem::path corpus;
    std::filesystem::path out_dir = "run";
    std::vector<std::string> stages = {"pretrain", "prune", "distill", "eval"};
    std::optional<std::filesystem::path> checkpoint;  // base model when pretrain is skipped
    PretrainConfig pretrain;
    PruneSettings prune;
    DistillSettings distill;
    std::string eval_split = "test";
    std::size_t eval_seq = 128;

    /// Throws ContractError on unknown stages, methods or inconsistent values.
    void validate() const;
};

Json to_json(const RunConfig& c);
/// Fields missing from `j` keep the values already in `c`.
void update_from_json(const Json& j, RunConfig& c);

const std::vector<std::string>& prune_methods();
std::string to_string(NormMode m);
NormMode parse_norm_mode(std::string_view s);
std::string to_string(DistillMode m);
DistillMode parse_distill_mode(std::string_view s);
std::string to_string(KlDirection k);
KlDirection parse_kl(std::string_view s);
std::string to_string(LrSchedule s);
LrSchedule parse_schedule(std::string_view s);

/// Calibration windows drawn from the training split with a seed-derived stream.
std::vector<Window> calibration_windows(std::string_view train_text, std::size_t count, std::size_t seq,
                                        std::uint64_t seed);

/// Dispatches on settings.method.
std::pair<ToyModel, PruneReport> run_prune(const ToyModel& model, const PruneSettings& settings,
                                           const PruneData& data);

/// Text of the named split ("train", "val" or "test").
std::string split_text(const CorpusSplits& splits, std::string_view name);

/// Runs the configured stages and writes checkpoints, reports and
/// summary.json under out_dir. Returns the summary. Errors are rethrown with
/// the failing stage named in the message.
Json run_pipeline(const RunConfig& config);

/// Method x {PPL after prune, PPL after distill} rows from completed run
/// directories, sorted by method name.
Json compare_runs(std::span<const std::filesystem::path> run_dirs);

/// Fixed-width text rendering of compare_runs output.
std::string format_comparison(const Json& table);

}  // namespace comepress
