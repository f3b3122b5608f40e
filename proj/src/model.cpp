#include "comepress/model.hpp"

#include "comepress/rng.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>

namespace comepress {

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ContractError("model config: " + msg); };
    if (vocab_size < 258) fail("vocab_size must be at least 258");
    if (d_model == 0 || n_heads == 0 || d_head == 0 || d_ff == 0 || n_layers == 0 || max_seq == 0)
        fail("all counts must be >= 1");
    if (d_model != n_heads * d_head) fail("d_model must equal n_heads * d_head");
    if (d_head % 2 != 0) fail("d_head must be even for rotary embeddings");
    if (!(rms_eps > 0.0)) fail("rms_eps must be positive");
    if (!(rope_base > 0.0)) fail("rope_base must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                       {"n_heads", c.n_heads},       {"d_head", c.d_head},
                       {"d_ff", c.d_ff},             {"n_layers", c.n_layers},
                       {"max_seq", c.max_seq},       {"rms_eps", c.rms_eps},
                       {"rope_base", c.rope_base}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("d_model").get_to(c.d_model);
    j.at("n_heads").get_to(c.n_heads);
    j.at("d_head").get_to(c.d_head);
    j.at("d_ff").get_to(c.d_ff);
    j.at("n_layers").get_to(c.n_layers);
    j.at("max_seq").get_to(c.max_seq);
    j.at("rms_eps").get_to(c.rms_eps);
    j.at("rope_base").get_to(c.rope_base);
}

template <typename T>
DecoderLayerWeights<T> DecoderLayerWeights<T>::zeros(const ModelConfig& c) {
    DecoderLayerWeights w;
    w.attn_norm_gamma = Tensor<T>(Shape{c.d_model}, T{1});
    w.q = Tensor<T>(Shape{c.d_model, c.d_model});
    w.k = Tensor<T>(Shape{c.d_model, c.d_model});
    w.v = Tensor<T>(Shape{c.d_model, c.d_model});
    w.o = Tensor<T>(Shape{c.d_model, c.d_model});
    w.ffn_norm_gamma = Tensor<T>(Shape{c.d_model}, T{1});
    w.gate = Tensor<T>(Shape{c.d_ff, c.d_model});
    w.up = Tensor<T>(Shape{c.d_ff, c.d_model});
    w.down = Tensor<T>(Shape{c.d_model, c.d_ff});
    return w;
}

Shape expected_shape(const ModelConfig& c, std::string_view name) {
    if (name == "embed" || name == "unembed") return {c.vocab_size, c.d_model};
    if (name == "final_norm_gamma") return {c.d_model};
    const auto dot = name.rfind('.');
    const std::string_view leaf = dot == std::string_view::npos ? name : name.substr(dot + 1);
    if (leaf == "attn_norm_gamma" || leaf == "ffn_norm_gamma") return {c.d_model};
    if (leaf == "q" || leaf == "k" || leaf == "v" || leaf == "o") return {c.d_model, c.d_model};
    if (leaf == "gate" || leaf == "up") return {c.d_ff, c.d_model};
    if (leaf == "down") return {c.d_model, c.d_ff};
    throw ContractError("unknown tensor name: " + std::string(name));
}

template <typename T>
void BasicToyModel<T>::validate() const {
    config.validate();
    if (layers.size() != config.n_layers) {
        throw ContractError("model has " + std::to_string(layers.size()) +
                            " layers but config says " + std::to_string(config.n_layers));
    }
    for_each_parameter([&](const std::string& name, const Tensor<T>& t) {
        const Shape want = expected_shape(config, name);
        if (t.shape() != want) {
            throw ContractError("tensor " + name + " has shape " + shape_to_string(t.shape()) +
                                ", expected " + shape_to_string(want));
        }
    });
}

template <typename T>
std::size_t BasicToyModel<T>::parameter_count() const {
    std::size_t n = 0;
    for_each_parameter([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
}

template <typename T>
template <typename U>
BasicToyModel<U> BasicToyModel<T>::cast() const {
    BasicToyModel<U> out;
    out.config = config;
    out.embed = embed.template cast<U>();
    out.final_norm_gamma = final_norm_gamma.template cast<U>();
    out.unembed = unembed.template cast<U>();
    out.layers.reserve(layers.size());
    for (const auto& l : layers) {
        DecoderLayerWeights<U> w;
        w.attn_norm_gamma = l.attn_norm_gamma.template cast<U>();
        w.q = l.q.template cast<U>();
        w.k = l.k.template cast<U>();
        w.v = l.v.template cast<U>();
        w.o = l.o.template cast<U>();
        w.ffn_norm_gamma = l.ffn_norm_gamma.template cast<U>();
        w.gate = l.gate.template cast<U>();
        w.up = l.up.template cast<U>();
        w.down = l.down.template cast<U>();
        out.layers.push_back(std::move(w));
    }
    return out;
}

ToyModel init_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    CounterRng rng(seed);
    auto gaussian = [&](Shape shape, double stddev) {
        Tensor<float> t(std::move(shape));
        for (auto& v : t.values()) v = static_cast<float>(rng.normal() * stddev);
        return t;
    };
    const double d = static_cast<double>(config.d_model);
    const double ff = static_cast<double>(config.d_ff);
    const double depth_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_layers));

    ToyModel m;
    m.config = config;
    m.embed = gaussian({config.vocab_size, config.d_model}, 1.0);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        DecoderLayerWeights<float> w;
        w.attn_norm_gamma = Tensor<float>(Shape{config.d_model}, 1.0f);
        w.q = gaussian({config.d_model, config.d_model}, 1.0 / std::sqrt(d));
        w.k = gaussian({config.d_model, config.d_model}, 1.0 / std::sqrt(d));
        w.v = gaussian({config.d_model, config.d_model}, 1.0 / std::sqrt(d));
        w.o = gaussian({config.d_model, config.d_model}, depth_scale / std::sqrt(d));
        w.ffn_norm_gamma = Tensor<float>(Shape{config.d_model}, 1.0f);
        w.gate = gaussian({config.d_ff, config.d_model}, 1.0 / std::sqrt(d));
        w.up = gaussian({config.d_ff, config.d_model}, 1.0 / std::sqrt(d));
        w.down = gaussian({config.d_model, config.d_ff}, depth_scale / std::sqrt(ff));
        m.layers.push_back(std::move(w));
    }
    m.final_norm_gamma = Tensor<float>(Shape{config.d_model}, 1.0f);
    m.unembed = gaussian({config.vocab_size, config.d_model}, 0.02);
    return m;
}

template <typename T>
void remove_layer(BasicToyModel<T>& model, std::size_t index) {
    if (index >= model.layers.size()) {
        throw ContractError("remove_layer: index " + std::to_string(index) + " out of range");
    }
    if (model.layers.size() == 1) throw ContractError("remove_layer: cannot remove the last layer");
    model.layers.erase(model.layers.begin() + static_cast<std::ptrdiff_t>(index));
    model.config.n_layers = model.layers.size();
}

bool CaptureSpec::captures(std::size_t layer) const {
    return layers.empty() || std::find(layers.begin(), layers.end(), layer) != layers.end();
}

template <typename T>
ModelVars<T> bind_parameters(const BasicToyModel<T>& model,
                             const std::function<bool(const std::string&)>& trainable) {
    auto wrap = [&](const std::string& name, const Tensor<T>& t) {
        return trainable && trainable(name) ? parameter(t) : constant(t);
    };
    ModelVars<T> vars;
    vars.embed = wrap("embed", model.embed);
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        typename ModelVars<T>::Layer layer;
        std::size_t k = 0;
        model.layers[i].for_each([&](std::string_view n, const Tensor<T>& t) {
            layer.tensors[k++] = wrap("layers." + std::to_string(i) + "." + std::string(n), t);
        });
        vars.layers.push_back(std::move(layer));
    }
    vars.final_norm_gamma = wrap("final_norm_gamma", model.final_norm_gamma);
    vars.unembed = wrap("unembed", model.unembed);
    return vars;
}

template <typename T>
GraphOutputs<T> forward_graph(const ModelVars<T>& vars, const ModelConfig& config,
                              const TokenBatch& tokens, const CaptureSpec& capture) {
    if (tokens.seq == 0 || tokens.batch == 0 || tokens.tokens.size() != tokens.batch * tokens.seq) {
        throw InputError("token batch shape does not match its length");
    }
    if (tokens.seq > config.max_seq) {
        throw InputError("sequence length " + std::to_string(tokens.seq) + " exceeds max_seq " +
                         std::to_string(config.max_seq));
    }
    const std::size_t n_layers = vars.layers.size();
    std::size_t last = n_layers;
    if (capture.stop_after_layer) {
        if (*capture.stop_after_layer >= n_layers) throw ContractError("stop_after_layer out of range");
        last = *capture.stop_after_layer + 1;
    }
    const T eps = static_cast<T>(config.rms_eps);
    const T base = static_cast<T>(config.rope_base);

    GraphOutputs<T> out;
    out.ffn_intermediate.resize(n_layers);
    out.attn_context.resize(n_layers);
    Var<T> h = embedding(vars.embed, std::span<const std::int32_t>(tokens.tokens));
    out.hidden.push_back(h);
    for (std::size_t l = 0; l < last; ++l) {
        const auto& w = vars.layers[l];
        Var<T> x = rms_norm(h, w.attn_norm_gamma(), eps);
        Var<T> q = rope(linear(x, w.q()), tokens.seq, config.n_heads, config.d_head, base);
        Var<T> k = rope(linear(x, w.k()), tokens.seq, config.n_heads, config.d_head, base);
        Var<T> v = linear(x, w.v());
        Var<T> ctx = causal_attention(q, k, v, tokens.seq, config.n_heads, config.d_head);
        if (capture.attn_context && capture.captures(l)) out.attn_context[l] = ctx;
        h = add(h, linear(ctx, w.o()));

        Var<T> y = rms_norm(h, w.ffn_norm_gamma(), eps);
        Var<T> inter = mul(silu(linear(y, w.gate())), linear(y, w.up()));
        if (capture.ffn_intermediate && capture.captures(l)) out.ffn_intermediate[l] = inter;
        h = add(h, linear(inter, w.down()));
        out.hidden.push_back(h);
    }
    if (capture.logits && last == n_layers) {
        out.logits = linear(rms_norm(h, vars.final_norm_gamma, eps), vars.unembed);
    }
    return out;
}

template <typename T>
std::pair<Tensor<T>, BasicActivationTrace<T>> forward(const BasicToyModel<T>& model,
                                                      const TokenBatch& tokens,
                                                      const CaptureSpec& capture) {
    NoGradGuard no_grad;
    const auto vars = bind_parameters<T>(model, {});
    auto graph = forward_graph(vars, model.config, tokens, capture);

    auto as_3d = [&](const Var<T>& v) {
        const Tensor<T>& t = v.value();
        return t.reshaped(Shape{tokens.batch, tokens.seq, t.cols()});
    };
    BasicActivationTrace<T> trace;
    trace.batch = tokens.batch;
    trace.seq = tokens.seq;
    for (const auto& h : graph.hidden) trace.hidden.push_back(as_3d(h));
    trace.ffn_intermediate.resize(model.layers.size());
    trace.attn_context.resize(model.layers.size());
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        if (graph.ffn_intermediate[l]) trace.ffn_intermediate[l] = as_3d(graph.ffn_intermediate[l]);
        if (graph.attn_context[l]) trace.attn_context[l] = as_3d(graph.attn_context[l]);
    }
    Tensor<T> logits;
    if (graph.logits) logits = as_3d(graph.logits);
    return {std::move(logits), std::move(trace)};
}

template <typename T>
BasicActivationTrace<T> concat_traces(std::span<const BasicActivationTrace<T>> parts) {
    if (parts.empty()) throw ContractError("concat_traces of nothing");
    auto join = [&](auto member, std::size_t index) {
        std::size_t rows = 0;
        std::size_t width = 0;
        for (const auto& p : parts) {
            const Tensor<T>& t = (p.*member)[index];
            if (t.empty()) return Tensor<T>();
            rows += t.dim(0);
            width = t.dim(2);
        }
        Tensor<T> out(Shape{rows, parts[0].seq, width});
        std::size_t offset = 0;
        for (const auto& p : parts) {
            const Tensor<T>& t = (p.*member)[index];
            std::copy(t.data(), t.data() + t.size(), out.data() + offset);
            offset += t.size();
        }
        return out;
    };
    BasicActivationTrace<T> out;
    out.seq = parts[0].seq;
    for (const auto& p : parts) {
        if (p.seq != out.seq || p.hidden.size() != parts[0].hidden.size()) {
            throw ShapeError("concat_traces: incompatible traces");
        }
        out.batch += p.batch;
    }
    for (std::size_t i = 0; i < parts[0].hidden.size(); ++i)
        out.hidden.push_back(join(&BasicActivationTrace<T>::hidden, i));
    for (std::size_t i = 0; i < parts[0].ffn_intermediate.size(); ++i) {
        out.ffn_intermediate.push_back(join(&BasicActivationTrace<T>::ffn_intermediate, i));
        out.attn_context.push_back(join(&BasicActivationTrace<T>::attn_context, i));
    }
    return out;
}

// ---- checkpoints -------------------------------------------------------------

std::vector<ManifestEntry> build_manifest(const ToyModel& model) {
    std::vector<ManifestEntry> entries;
    std::uint64_t offset = 0;
    model.for_each_parameter([&](const std::string& name, const Tensor<float>& t) {
        const std::uint64_t length = t.size() * sizeof(float);
        entries.push_back({name, "f32", t.shape(), offset, length});
        offset += length;
    });
    return entries;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw IoError("failed writing " + path.string());
}

nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError(path.string() + ": " + e.what());
    }
}

}  // namespace

void save_checkpoint(const ToyModel& model, const std::filesystem::path& dir) {
    model.validate();
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());

    const auto manifest = build_manifest(model);
    nlohmann::ordered_json mj;
    mj["format"] = "comepress-checkpoint";
    mj["version"] = 1;
    mj["byte_order"] = "little";
    auto& tensors = mj["tensors"] = nlohmann::ordered_json::array();
    for (const auto& e : manifest) {
        tensors.push_back({{"name", e.name},
                           {"dtype", e.dtype},
                           {"shape", e.shape},
                           {"offset", e.offset},
                           {"length", e.length}});
    }
    nlohmann::ordered_json cj = nlohmann::json(model.config);
    write_text(dir / kConfigFile, cj.dump(2) + "\n");
    write_text(dir / kManifestFile, mj.dump(2) + "\n");

    std::string blob;
    blob.reserve(model.parameter_count() * 4);
    model.for_each_parameter([&](const std::string&, const Tensor<float>& t) {
        for (float v : t.values()) {
            const auto bits = std::bit_cast<std::uint32_t>(v);
            for (int b = 0; b < 4; ++b) blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xFFu));
        }
    });
    write_text(dir / kWeightsFile, blob);
}

ToyModel load_checkpoint(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw IoError("no checkpoint directory at " + dir.string());
    ToyModel model;
    try {
        model.config = read_json(dir / kConfigFile).get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError("config: " + std::string(e.what()));
    }
    try {
        model.config.validate();
    } catch (const ContractError& e) {
        throw CorruptionError(e.what());
    }
    const nlohmann::json mj = read_json(dir / kManifestFile);

    std::ifstream in(dir / kWeightsFile, std::ios::binary);
    if (!in) throw IoError("cannot open " + (dir / kWeightsFile).string());
    const std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    model.layers.assign(model.config.n_layers, DecoderLayerWeights<float>::zeros(model.config));
    model.embed = Tensor<float>(expected_shape(model.config, "embed"));
    model.final_norm_gamma = Tensor<float>(expected_shape(model.config, "final_norm_gamma"));
    model.unembed = Tensor<float>(expected_shape(model.config, "unembed"));

    if (!mj.contains("tensors") || !mj["tensors"].is_array()) {
        throw CorruptionError("manifest has no tensor list");
    }
    const auto& entries = mj["tensors"];
    std::size_t index = 0;
    std::uint64_t expected_offset = 0;
    model.for_each_parameter([&](const std::string& name, Tensor<float>& t) {
        if (index >= entries.size()) throw CorruptionError("manifest is missing tensor " + name);
        const auto& e = entries[index++];
        try {
            if (e.at("name").get<std::string>() != name)
                throw CorruptionError("manifest order mismatch at " + name);
            if (e.at("dtype").get<std::string>() != "f32")
                throw CorruptionError("unsupported dtype for " + name);
            if (e.at("shape").get<Shape>() != t.shape())
                throw CorruptionError("shape of " + name + " does not match config");
            const auto offset = e.at("offset").get<std::uint64_t>();
            const auto length = e.at("length").get<std::uint64_t>();
            if (offset != expected_offset || length != t.size() * 4)
                throw CorruptionError("bad offset/length for " + name);
            if (offset + length > blob.size())
                throw CorruptionError("weights.bin truncated at " + name);
            for (std::size_t i = 0; i < t.size(); ++i) {
                std::uint32_t bits = 0;
                for (int b = 0; b < 4; ++b)
                    bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(
                                blob[offset + i * 4 + static_cast<std::size_t>(b)]))
                            << (8 * b);
                t[i] = std::bit_cast<float>(bits);
            }
            expected_offset += length;
        } catch (const nlohmann::json::exception& ex) {
            throw CorruptionError("manifest entry for " + name + ": " + ex.what());
        }
    });
    if (index != entries.size()) throw CorruptionError("manifest lists extra tensors");
    if (expected_offset != blob.size()) throw CorruptionError("weights.bin has trailing bytes");
    return model;
}

#define COMEPRESS_INSTANTIATE(T)                                                                   \
    template struct DecoderLayerWeights<T>;                                                        \
    template struct BasicToyModel<T>;                                                              \
    template void remove_layer<T>(BasicToyModel<T>&, std::size_t);                                 \
    template ModelVars<T> bind_parameters<T>(const BasicToyModel<T>&,                              \
                                             const std::function<bool(const std::string&)>&);      \
    template GraphOutputs<T> forward_graph<T>(const ModelVars<T>&, const ModelConfig&,             \
                                              const TokenBatch&, const CaptureSpec&);              \
    template std::pair<Tensor<T>, BasicActivationTrace<T>> forward<T>(                             \
        const BasicToyModel<T>&, const TokenBatch&, const CaptureSpec&);                           \
    template BasicActivationTrace<T> concat_traces<T>(std::span<const BasicActivationTrace<T>>);

COMEPRESS_INSTANTIATE(float)
COMEPRESS_INSTANTIATE(double)
#undef COMEPRESS_INSTANTIATE

template BasicToyModel<double> BasicToyModel<float>::cast<double>() const;
template BasicToyModel<float> BasicToyModel<double>::cast<float>() const;
template BasicToyModel<float> BasicToyModel<float>::cast<float>() const;

}  // namespace comepress
