#pragma once

#include "comepress/model.hpp"
#include "comepress/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace comepress {

/// Bytes map to ids 0..255; BOS = 256, EOS = 257.
struct ByteTokenizer {
    static constexpr std::int32_t kBos = 256;
    static constexpr std::int32_t kEos = 257;
    static constexpr std::size_t kVocabSize = 258;

    std::vector<std::int32_t> encode(std::string_view bytes) const;
    /// Drops BOS/EOS; throws InputError on ids outside the vocabulary.
    std::string decode(std::span<const std::int32_t> ids) const;
};

std::string read_corpus(const std::filesystem::path& path);

struct CorpusSplits {
    std::string train;
    std::string val;
    std::string test;
};

/// 90/5/5 split at byte boundaries.
CorpusSplits split_corpus(std::string_view bytes);

/// One scored sequence: input = BOS followed by all but the last byte,
/// target = the bytes. Positions before score_from are context only.
struct Window {
    std::vector<std::int32_t> input;
    std::vector<std::int32_t> target;
    std::size_t score_from = 0;
};

/// Consecutive windows of at most `seq` bytes starting every `stride` bytes.
/// With stride < seq each byte is scored exactly once.
std::vector<Window> make_eval_windows(std::string_view text, std::size_t seq, std::size_t stride);

/// `count` windows of exactly `seq` bytes at seeded random offsets.
std::vector<Window> sample_windows(std::string_view text, std::size_t seq, std::size_t count,
                                   CounterRng& rng);

/// Packs equal-length windows into a forward batch.
TokenBatch to_batch(std::span<const Window> windows);
std::vector<std::int32_t> batch_targets(std::span<const Window> windows);

struct EvalResult {
    double ppl = 0.0;
    double nll_per_token = 0.0;
    std::size_t token_count = 0;
};

/// Summed negative log-likelihood of the scored targets of each window.
std::vector<double> window_nll(const ToyModel& model, std::span<const Window> windows,
                               std::size_t batch_size = 16);

/// Mean NLL over all scored tokens with a fixed-order pairwise reduction.
EvalResult perplexity(const ToyModel& model, std::span<const Window> windows,
                      std::size_t batch_size = 16);

/// Non-overlapping windows of `seq` bytes (stride defaults to seq).
EvalResult perplexity(const ToyModel& model, std::string_view text, std::size_t seq,
                      std::size_t stride = 0);

/// Pairwise summation in index order; independent of how values were produced.
double pairwise_sum(std::span<const double> values);

/// Runs `fn(i)` for i in [0, n) on up to `worker_count()` threads.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

/// Worker cap from COMEPRESS_THREADS, defaulting to the hardware concurrency.
std::size_t worker_count();

}  // namespace comepress
