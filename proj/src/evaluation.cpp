#include "comepress/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <thread>

namespace comepress {

std::vector<std::int32_t> ByteTokenizer::encode(std::string_view bytes) const {
    std::vector<std::int32_t> ids;
    ids.reserve(bytes.size());
    for (char c : bytes) ids.push_back(static_cast<std::int32_t>(static_cast<unsigned char>(c)));
    return ids;
}

std::string ByteTokenizer::decode(std::span<const std::int32_t> ids) const {
    std::string out;
    out.reserve(ids.size());
    for (auto id : ids) {
        if (id < 0 || id >= static_cast<std::int32_t>(kVocabSize)) {
            throw InputError("token id " + std::to_string(id) + " outside the byte vocabulary");
        }
        if (id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return out;
}

std::string read_corpus(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open corpus " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.empty()) throw ContractError("corpus " + path.string() + " is empty");
    return bytes;
}

CorpusSplits split_corpus(std::string_view bytes) {
    const std::size_t n = bytes.size();
    const std::size_t train_end = n * 90 / 100;
    const std::size_t val_end = n * 95 / 100;
    return {std::string(bytes.substr(0, train_end)),
            std::string(bytes.substr(train_end, val_end - train_end)),
            std::string(bytes.substr(val_end))};
}

namespace {

Window window_at(std::string_view text, std::size_t start, std::size_t length, std::size_t score_from) {
    static const ByteTokenizer tok;
    Window w;
    w.target = tok.encode(text.substr(start, length));
    w.input.reserve(length);
    w.input.push_back(ByteTokenizer::kBos);
    w.input.insert(w.input.end(), w.target.begin(), w.target.end() - 1);
    w.score_from = score_from;
    return w;
}

}  // namespace

std::vector<Window> make_eval_windows(std::string_view text, std::size_t seq, std::size_t stride) {
    if (text.empty()) throw ContractError("evaluation text is empty");
    if (seq == 0) throw ContractError("window length must be positive");
    if (stride == 0) stride = seq;
    std::vector<Window> windows;
    std::size_t scored_until = 0;
    for (std::size_t start = 0; start < text.size(); start += stride) {
        const std::size_t length = std::min(seq, text.size() - start);
        const std::size_t end = start + length;
        if (end <= scored_until) continue;
        const std::size_t skip = scored_until > start ? scored_until - start : 0;
        windows.push_back(window_at(text, start, length, skip));
        scored_until = end;
        if (end == text.size()) break;
    }
    return windows;
}

std::vector<Window> sample_windows(std::string_view text, std::size_t seq, std::size_t count,
                                   CounterRng& rng) {
    if (text.size() < seq || seq == 0) {
        throw ContractError("text of " + std::to_string(text.size()) +
                            " bytes is too short for windows of " + std::to_string(seq));
    }
    std::vector<Window> windows;
    windows.reserve(count);
    const std::uint64_t span = text.size() - seq + 1;
    for (std::size_t i = 0; i < count; ++i) windows.push_back(window_at(text, rng.below(span), seq, 0));
    return windows;
}

TokenBatch to_batch(std::span<const Window> windows) {
    if (windows.empty()) throw ContractError("empty window batch");
    TokenBatch b;
    b.batch = windows.size();
    b.seq = windows[0].input.size();
    b.tokens.reserve(b.batch * b.seq);
    for (const auto& w : windows) {
        if (w.input.size() != b.seq) throw ShapeError("windows in a batch must share a length");
        b.tokens.insert(b.tokens.end(), w.input.begin(), w.input.end());
    }
    return b;
}

std::vector<std::int32_t> batch_targets(std::span<const Window> windows) {
    std::vector<std::int32_t> t;
    for (const auto& w : windows) t.insert(t.end(), w.target.begin(), w.target.end());
    return t;
}

std::vector<double> window_nll(const ToyModel& model, std::span<const Window> windows,
                               std::size_t batch_size) {
    if (batch_size == 0) batch_size = 1;
    std::vector<double> out(windows.size(), 0.0);
    std::size_t i = 0;
    while (i < windows.size()) {
        std::size_t j = i + 1;
        while (j < windows.size() && j - i < batch_size &&
               windows[j].input.size() == windows[i].input.size())
            ++j;
        const auto group = windows.subspan(i, j - i);
        const auto [logits, trace] = forward(model, to_batch(group), CaptureSpec{});
        const std::size_t seq = group[0].input.size();
        const std::size_t vocab = logits.dim(2);
        for (std::size_t b = 0; b < group.size(); ++b) {
            double total = 0.0;
            for (std::size_t s = group[b].score_from; s < seq; ++s) {
                const float* row = logits.data() + (b * seq + s) * vocab;
                double mx = row[0];
                for (std::size_t v = 1; v < vocab; ++v) mx = std::max(mx, static_cast<double>(row[v]));
                double z = 0.0;
                for (std::size_t v = 0; v < vocab; ++v) z += std::exp(static_cast<double>(row[v]) - mx);
                total += mx + std::log(z) - static_cast<double>(row[group[b].target[s]]);
            }
            out[i + b] = total;
        }
        i = j;
    }
    return out;
}

double pairwise_sum(std::span<const double> values) {
    if (values.empty()) return 0.0;
    if (values.size() <= 8) {
        double s = 0.0;
        for (double v : values) s += v;
        return s;
    }
    const std::size_t half = values.size() / 2;
    return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

EvalResult perplexity(const ToyModel& model, std::span<const Window> windows, std::size_t batch_size) {
    if (windows.empty()) throw ContractError("perplexity over an empty corpus");
    const auto nll = window_nll(model, windows, batch_size);
    std::size_t tokens = 0;
    for (const auto& w : windows) tokens += w.target.size() - w.score_from;
    if (tokens == 0) throw ContractError("perplexity: no scored tokens");
    EvalResult r;
    r.token_count = tokens;
    r.nll_per_token = pairwise_sum(nll) / static_cast<double>(tokens);
    r.ppl = std::exp(r.nll_per_token);
    if (!std::isfinite(r.ppl)) throw NumericError("perplexity is not finite");
    return r;
}

EvalResult perplexity(const ToyModel& model, std::string_view text, std::size_t seq, std::size_t stride) {
    const auto windows = make_eval_windows(text, seq, stride);
    return perplexity(model, windows);
}

std::size_t worker_count() {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("COMEPRESS_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) n = static_cast<std::size_t>(v);
    }
    return n;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers = std::min(worker_count(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(workers);
    {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t i = w; i < n; i += workers) fn(i);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace comepress
