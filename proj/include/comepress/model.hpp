#pragma once

#include "comepress/autodiff.hpp"
#include "comepress/tensor.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace comepress {

/// Raised when a checkpoint's manifest, config and blob disagree.
class CorruptionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ModelConfig {
    std::size_t vocab_size = 258;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t d_head = 16;
    std::size_t d_ff = 256;
    std::size_t n_layers = 8;
    std::size_t max_seq = 128;
    double rms_eps = 1e-5;
    double rope_base = 10000.0;

    /// Throws ContractError when the invariants do not hold.
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

template <typename T>
struct DecoderLayerWeights {
    Tensor<T> attn_norm_gamma;  // [d_model]
    Tensor<T> q;                // [d_model, d_model], head h owns rows h*d_head..
    Tensor<T> k;
    Tensor<T> v;
    Tensor<T> o;                // [d_model, d_model], head h owns columns h*d_head..
    Tensor<T> ffn_norm_gamma;   // [d_model]
    Tensor<T> gate;             // [d_ff, d_model]
    Tensor<T> up;               // [d_ff, d_model]
    Tensor<T> down;             // [d_model, d_ff]

    static constexpr std::array<std::string_view, 9> kNames = {
        "attn_norm_gamma", "q", "k", "v", "o", "ffn_norm_gamma", "gate", "up", "down"};

    static DecoderLayerWeights zeros(const ModelConfig& c);

    template <typename F>
    void for_each(F&& fn) {
        fn(kNames[0], attn_norm_gamma);
        fn(kNames[1], q);
        fn(kNames[2], k);
        fn(kNames[3], v);
        fn(kNames[4], o);
        fn(kNames[5], ffn_norm_gamma);
        fn(kNames[6], gate);
        fn(kNames[7], up);
        fn(kNames[8], down);
    }
    template <typename F>
    void for_each(F&& fn) const {
        const_cast<DecoderLayerWeights*>(this)->for_each(
            [&](std::string_view n, Tensor<T>& t) { fn(n, static_cast<const Tensor<T>&>(t)); });
    }

    bool operator==(const DecoderLayerWeights&) const = default;
};

/// Decoder-only transformer: pre-norm RMSNorm blocks, rotary attention,
/// SiLU-gated FFN, untied embedding and unembedding, no biases.
template <typename T>
struct BasicToyModel {
    ModelConfig config;
    Tensor<T> embed;  // [vocab, d_model]
    std::vector<DecoderLayerWeights<T>> layers;
    Tensor<T> final_norm_gamma;  // [d_model]
    Tensor<T> unembed;           // [vocab, d_model]

    /// Visits every tensor in checkpoint order with its manifest name.
    template <typename F>
    void for_each_parameter(F&& fn) {
        fn(std::string("embed"), embed);
        for (std::size_t i = 0; i < layers.size(); ++i) {
            layers[i].for_each([&](std::string_view n, Tensor<T>& t) {
                fn("layers." + std::to_string(i) + "." + std::string(n), t);
            });
        }
        fn(std::string("final_norm_gamma"), final_norm_gamma);
        fn(std::string("unembed"), unembed);
    }
    template <typename F>
    void for_each_parameter(F&& fn) const {
        const_cast<BasicToyModel*>(this)->for_each_parameter(
            [&](const std::string& n, Tensor<T>& t) { fn(n, static_cast<const Tensor<T>&>(t)); });
    }

    /// Throws ContractError if any tensor shape disagrees with config.
    void validate() const;
    std::size_t parameter_count() const;

    template <typename U>
    BasicToyModel<U> cast() const;

    bool operator==(const BasicToyModel&) const = default;
};

using ToyModel = BasicToyModel<float>;

/// Expected shape of a named tensor under a config.
Shape expected_shape(const ModelConfig& config, std::string_view name);

/// Seeded random initialisation; output projections are scaled down with depth.
ToyModel init_model(const ModelConfig& config, std::uint64_t seed);

/// Removes decoder layer `index` and updates config.n_layers.
template <typename T>
void remove_layer(BasicToyModel<T>& model, std::size_t index);

/// Tokens for one forward call, row-major [batch, seq].
struct TokenBatch {
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<std::int32_t> tokens;
};

/// Which activations a forward pass keeps. Hidden states are always kept.
struct CaptureSpec {
    bool ffn_intermediate = false;
    bool attn_context = false;
    std::vector<std::size_t> layers;  // empty: all layers
    std::optional<std::size_t> stop_after_layer;
    bool logits = true;

    bool captures(std::size_t layer) const;
};

template <typename T>
struct BasicActivationTrace {
    std::size_t batch = 0;
    std::size_t seq = 0;
    /// hidden[0] is the embedding stream, hidden[l] the output of decoder layer l-1.
    std::vector<Tensor<T>> hidden;
    /// Per layer; empty tensors for layers that were not captured.
    std::vector<Tensor<T>> ffn_intermediate;
    std::vector<Tensor<T>> attn_context;
};

using ActivationTrace = BasicActivationTrace<float>;

/// Differentiable handles for every model tensor.
template <typename T>
struct ModelVars {
    struct Layer {
        std::array<Var<T>, 9> tensors;  // ordered as DecoderLayerWeights::kNames
        const Var<T>& attn_norm_gamma() const { return tensors[0]; }
        const Var<T>& q() const { return tensors[1]; }
        const Var<T>& k() const { return tensors[2]; }
        const Var<T>& v() const { return tensors[3]; }
        const Var<T>& o() const { return tensors[4]; }
        const Var<T>& ffn_norm_gamma() const { return tensors[5]; }
        const Var<T>& gate() const { return tensors[6]; }
        const Var<T>& up() const { return tensors[7]; }
        const Var<T>& down() const { return tensors[8]; }
    };
    Var<T> embed;
    std::vector<Layer> layers;
    Var<T> final_norm_gamma;
    Var<T> unembed;

    template <typename F>
    void for_each(F&& fn) const {
        fn(std::string("embed"), embed);
        for (std::size_t i = 0; i < layers.size(); ++i)
            for (std::size_t k = 0; k < 9; ++k)
                fn("layers." + std::to_string(i) + "." +
                       std::string(DecoderLayerWeights<T>::kNames[k]),
                   layers[i].tensors[k]);
        fn(std::string("final_norm_gamma"), final_norm_gamma);
        fn(std::string("unembed"), unembed);
    }
};

/// Wraps model tensors as graph leaves. Tensors for which `trainable(name)`
/// returns true become gradient-tracking parameters; others are constants.
template <typename T>
ModelVars<T> bind_parameters(const BasicToyModel<T>& model,
                             const std::function<bool(const std::string&)>& trainable);

template <typename T>
struct GraphOutputs {
    Var<T> logits;  // [batch*seq, vocab]; empty when not requested
    std::vector<Var<T>> hidden;
    std::vector<Var<T>> ffn_intermediate;
    std::vector<Var<T>> attn_context;
};

/// Builds the forward graph. Hidden states are [batch*seq, d_model] rows.
template <typename T>
GraphOutputs<T> forward_graph(const ModelVars<T>& vars, const ModelConfig& config,
                              const TokenBatch& tokens, const CaptureSpec& capture);

/// Inference forward pass. Logits come back as [batch, seq, vocab] (empty when
/// capture.logits is false) and trace tensors as [batch, seq, width].
template <typename T>
std::pair<Tensor<T>, BasicActivationTrace<T>> forward(const BasicToyModel<T>& model,
                                                      const TokenBatch& tokens,
                                                      const CaptureSpec& capture = {});

/// Concatenates traces captured on consecutive batches along the batch axis.
template <typename T>
BasicActivationTrace<T> concat_traces(std::span<const BasicActivationTrace<T>> parts);

// Checkpoint directory: config.json, manifest.json, weights.bin (little-endian f32).
inline constexpr std::string_view kConfigFile = "config.json";
inline constexpr std::string_view kManifestFile = "manifest.json";
inline constexpr std::string_view kWeightsFile = "weights.bin";

struct ManifestEntry {
    std::string name;
    std::string dtype;
    Shape shape;
    std::uint64_t offset = 0;
    std::uint64_t length = 0;
};

std::vector<ManifestEntry> build_manifest(const ToyModel& model);
void save_checkpoint(const ToyModel& model, const std::filesystem::path& dir);
ToyModel load_checkpoint(const std::filesystem::path& dir);

}  // namespace comepress
