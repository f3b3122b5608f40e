#pragma once

// Small models and data shared by the unit tests.

#include "comepress/evaluation.hpp"
#include "comepress/model.hpp"
#include "comepress/rng.hpp"

#include <unistd.h>

#include <filesystem>
#include <string>
#include <vector>

namespace comepress::testing {

inline ModelConfig tiny_config(std::size_t layers = 4) {
    ModelConfig c;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_head = 8;
    c.d_ff = 32;
    c.n_layers = layers;
    c.max_seq = 16;
    return c;
}

/// Random model whose norm gammas are also perturbed away from 1.
inline ToyModel tiny_model(std::uint64_t seed, std::size_t layers = 4) {
    ToyModel m = init_model(tiny_config(layers), seed);
    CounterRng rng(seed ^ 0x5eed);
    for (auto& l : m.layers) {
        for (auto& g : l.attn_norm_gamma.values()) g = static_cast<float>(1.0 + 0.2 * rng.normal());
        for (auto& g : l.ffn_norm_gamma.values()) g = static_cast<float>(1.0 + 0.2 * rng.normal());
        // Larger output projections make every layer matter.
        for (auto& v : l.o.values()) v *= 4.0f;
        for (auto& v : l.down.values()) v *= 4.0f;
    }
    return m;
}

/// Zeroes the output projections so the layer is an exact residual identity.
template <typename T>
void make_pass_through(BasicToyModel<T>& m, std::size_t layer) {
    for (auto& v : m.layers[layer].o.values()) v = T(0);
    for (auto& v : m.layers[layer].down.values()) v = T(0);
}

inline TokenBatch random_tokens(std::uint64_t seed, std::size_t batch, std::size_t seq,
                                std::size_t vocab = 258) {
    CounterRng rng(seed);
    TokenBatch b{batch, seq, {}};
    for (std::size_t i = 0; i < batch * seq; ++i) b.tokens.push_back(static_cast<std::int32_t>(rng.below(vocab)));
    return b;
}

inline std::string random_text(std::uint64_t seed, std::size_t n) {
    CounterRng rng(seed);
    std::string s;
    for (std::size_t i = 0; i < n; ++i) s.push_back(static_cast<char>('a' + rng.below(26)));
    return s;
}

inline std::vector<Window> random_windows(std::uint64_t seed, std::size_t count, std::size_t seq) {
    const std::string text = random_text(seed, 4 * count * seq + seq);
    CounterRng rng(seed + 1);
    return sample_windows(text, seq, count, rng);
}

/// Fresh directory under the system temp path, removed on destruction.
struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() /
               ("comepress_" + tag + "_" + std::to_string(::getpid()));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
};

}  // namespace comepress::testing
