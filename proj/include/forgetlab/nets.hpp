#pragma once

// Model components: the tappable feed-forward encoder, the concept-prototype
// embedder (text-tower stand-in), the linear classification head, and the
// concatenated multi-tap feature extractor. Forward passes come in two
// flavors — a no-grad evaluation path and an on-tape training path — built
// from the same kernels so the arithmetic is bit-identical.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "rng.hpp"
#include "tape.hpp"
#include "tensor.hpp"

namespace forgetlab {

enum class Activation { relu, tanh };

inline std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

inline Activation activation_from_string(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    throw TensorError("unknown activation '" + s + "' (expected relu or tanh)");
}

// Layer l < hidden count is hidden (linear + activation); the last layer is
// the linear projection to the embedding, with no activation. Taps index
// into this combined list: a hidden tap exposes the post-activation output,
// the final tap exposes the embedding itself.
struct EncoderSpec {
    std::size_t input_dim = 32;
    std::vector<std::size_t> hidden_widths{64, 64, 64, 64};
    std::size_t embed_dim = 32;
    Activation activation = Activation::tanh;
    std::vector<std::size_t> tap_layers{0, 1, 2, 3, 4};

    std::size_t num_layers() const { return hidden_widths.size() + 1; }

    // Output width of layer l.
    std::size_t layer_width(std::size_t l) const {
        return l < hidden_widths.size() ? hidden_widths[l] : embed_dim;
    }

    void validate() const {
        if (input_dim == 0 || embed_dim == 0)
            throw ShapeError("encoder spec: zero input or embed dim");
        if (hidden_widths.empty())
            throw ShapeError("encoder spec: no hidden layers");
        for (std::size_t w : hidden_widths)
            if (w == 0) throw ShapeError("encoder spec: zero-width hidden layer");
        if (tap_layers.empty())
            throw ShapeError("encoder spec: tap list is empty");
        for (std::size_t i = 0; i < tap_layers.size(); ++i) {
            if (tap_layers[i] >= num_layers())
                throw ShapeError("encoder spec: tap " + std::to_string(tap_layers[i]) +
                                 " out of range for " + std::to_string(num_layers()) + " layers");
            if (i > 0 && tap_layers[i] <= tap_layers[i - 1])
                throw ShapeError("encoder spec: tap list must be strictly increasing");
        }
    }

    std::size_t feature_width() const {
        std::size_t total = 0;
        for (std::size_t l : tap_layers) total += layer_width(l);
        return total;
    }
};

// ---------------------------------------------------------------------------
// Snapshots

struct ParamEntry {
    std::string name;
    Tensor tensor;
};

inline constexpr const char* kEncoderPrefix = "enc.";

// A complete, ordered copy of model parameters at one training instant.
struct ModelSnapshot {
    std::vector<ParamEntry> params;
    double step_fraction = 0.0;
    std::string provenance;

    const Tensor& find(const std::string& name) const {
        for (const auto& p : params)
            if (p.name == name) return p.tensor;
        throw TensorError("snapshot: no parameter named '" + name + "'");
    }

    Tensor& find(const std::string& name) {
        for (auto& p : params)
            if (p.name == name) return p.tensor;
        throw TensorError("snapshot: no parameter named '" + name + "'");
    }

    bool has(const std::string& name) const {
        for (const auto& p : params)
            if (p.name == name) return true;
        return false;
    }

    bool schema_matches(const ModelSnapshot& other) const {
        if (params.size() != other.params.size()) return false;
        for (std::size_t i = 0; i < params.size(); ++i)
            if (params[i].name != other.params[i].name ||
                params[i].tensor.shape != other.params[i].tensor.shape)
                return false;
        return true;
    }

    // Stable textual schema; hashed for the serialization header.
    std::string schema_string() const {
        std::string s;
        for (const auto& p : params) {
            s += p.name;
            s += shape_str(p.tensor.shape);
            s += ';';
        }
        return s;
    }
};

inline std::string encoder_weight_name(std::size_t l) { return "enc.w" + std::to_string(l); }
inline std::string encoder_bias_name(std::size_t l) { return "enc.b" + std::to_string(l); }

// Fresh encoder parameters: Gaussian weights scaled by 1/sqrt(fan_in),
// zero biases. Deterministic per (seed, parameter name).
inline ModelSnapshot init_encoder(const EncoderSpec& spec, std::uint64_t seed) {
    spec.validate();
    ModelSnapshot snap;
    snap.provenance = "init";
    std::size_t in = spec.input_dim;
    for (std::size_t l = 0; l < spec.num_layers(); ++l) {
        std::size_t out = spec.layer_width(l);
        Tensor w = Tensor::zeros({in, out});
        KeyedRng rng(seed, "init/" + encoder_weight_name(l));
        double scale = 1.0 / std::sqrt(static_cast<double>(in));
        for (double& v : w.values) v = scale * rng.gaussian();
        snap.params.push_back({encoder_weight_name(l), std::move(w)});
        snap.params.push_back({encoder_bias_name(l), Tensor::zeros({out})});
        in = out;
    }
    return snap;
}

// ---------------------------------------------------------------------------
// Forward passes

struct EncodeResult {
    Tensor embedding;          // batch x D
    std::vector<Tensor> taps;  // in tap order
};

namespace detail {

inline void check_encode_input(const EncoderSpec& spec, const Tensor& x) {
    if (x.shape.size() != 2 || x.shape[1] != spec.input_dim)
        throw ShapeError("encode: input shape " + shape_str(x.shape) + " does not match input_dim " +
                         std::to_string(spec.input_dim));
}

inline void check_param_shape(const EncoderSpec& spec, const Tensor& t, std::size_t l,
                              std::size_t in, std::size_t out, bool is_weight) {
    Shape want = is_weight ? Shape{in, out} : Shape{out};
    if (t.shape != want)
        throw ShapeError("encode: parameter " +
                         (is_weight ? encoder_weight_name(l) : encoder_bias_name(l)) + " has shape " +
                         shape_str(t.shape) + ", spec wants " + shape_str(want));
    (void)spec;
}

inline void apply_activation(Activation act, Tensor& t) {
    if (act == Activation::relu) {
        for (double& v : t.values) v = v > 0.0 ? v : 0.0;
    } else {
        for (double& v : t.values) v = std::tanh(v);
    }
}

// x @ w + b via the shared kernels; identical arithmetic to the tape path.
inline Tensor linear_value(const Tensor& x, const Tensor& w, const Tensor& b) {
    std::size_t n = x.shape[0], k = x.shape[1], m = w.shape[1];
    Tensor out = Tensor::zeros({n, m});
    k_matmul(x.values.data(), w.values.data(), out.values.data(), n, k, m);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) out.values[r * m + c] += b.values[c];
    if (!out.all_finite()) throw NumericError("linear: non-finite output");
    return out;
}

} // namespace detail

inline EncodeResult encode(const EncoderSpec& spec, const ModelSnapshot& snap, const Tensor& x) {
    spec.validate();
    detail::check_encode_input(spec, x);
    EncodeResult res;
    res.taps.reserve(spec.tap_layers.size());
    Tensor cur = x;
    std::size_t in = spec.input_dim;
    std::vector<Tensor> tap_store(spec.num_layers());
    for (std::size_t l = 0; l < spec.num_layers(); ++l) {
        std::size_t out = spec.layer_width(l);
        const Tensor& w = snap.find(encoder_weight_name(l));
        const Tensor& b = snap.find(encoder_bias_name(l));
        detail::check_param_shape(spec, w, l, in, out, true);
        detail::check_param_shape(spec, b, l, in, out, false);
        cur = detail::linear_value(cur, w, b);
        if (l + 1 < spec.num_layers()) detail::apply_activation(spec.activation, cur);
        tap_store[l] = cur;
        in = out;
    }
    res.embedding = cur;
    for (std::size_t l : spec.tap_layers) res.taps.push_back(tap_store[l]);
    return res;
}

struct TapeEncodeResult {
    Tape::Var embedding;
    std::vector<Tape::Var> taps;
};

using ParamVars = std::unordered_map<std::string, Tape::Var>;

inline TapeEncodeResult encode_on_tape(const EncoderSpec& spec, Tape& tape,
                                       const ParamVars& params, Tape::Var x) {
    spec.validate();
    detail::check_encode_input(spec, tape.value(x));
    auto var_of = [&](const std::string& name) {
        auto it = params.find(name);
        if (it == params.end()) throw TensorError("encode: no parameter var named '" + name + "'");
        return it->second;
    };
    TapeEncodeResult res;
    Tape::Var cur = x;
    std::vector<Tape::Var> tap_store(spec.num_layers());
    for (std::size_t l = 0; l < spec.num_layers(); ++l) {
        Tape::Var z = tape.add_rowvec(tape.matmul(cur, var_of(encoder_weight_name(l))),
                                      var_of(encoder_bias_name(l)));
        if (l + 1 < spec.num_layers())
            cur = spec.activation == Activation::relu ? tape.relu(z) : tape.tanh_act(z);
        else
            cur = z;
        tap_store[l] = cur;
    }
    res.embedding = cur;
    for (std::size_t l : spec.tap_layers) res.taps.push_back(tap_store[l]);
    return res;
}

// ---------------------------------------------------------------------------
// Concatenated multi-tap features

// Row normalization with the same guard the tape op uses.
inline Tensor l2_normalize_rows_value(const Tensor& t) {
    Tensor out = t;
    std::size_t rows = t.shape.size() == 1 ? 1 : t.shape[0];
    std::size_t cols = t.shape.size() == 1 ? t.shape[0] : t.shape[1];
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            double v = t.values[r * cols + c];
            s += v * v;
        }
        double denom = std::max(std::sqrt(s), kNormGuard);
        for (std::size_t c = 0; c < cols; ++c) out.values[r * cols + c] /= denom;
    }
    return out;
}

// Per-tap L2 normalization followed by column concatenation: one feature row
// per sample. Segment widths follow the tap order.
inline Tensor features_concat(const EncoderSpec& spec, const ModelSnapshot& snap, const Tensor& x) {
    EncodeResult enc = encode(spec, snap, x);
    std::size_t batch = x.shape[0];
    std::size_t total = spec.feature_width();
    Tensor out = Tensor::zeros({batch, total});
    std::size_t off = 0;
    for (const Tensor& tap : enc.taps) {
        Tensor seg = l2_normalize_rows_value(tap);
        std::size_t w = seg.shape[1];
        for (std::size_t r = 0; r < batch; ++r)
            for (std::size_t c = 0; c < w; ++c) out.values[r * total + off + c] = seg.values[r * w + c];
        off += w;
    }
    return out;
}

inline Tape::Var features_concat_on_tape(const EncoderSpec& spec, Tape& tape,
                                         const ParamVars& params, Tape::Var x) {
    TapeEncodeResult enc = encode_on_tape(spec, tape, params, x);
    std::vector<Tape::Var> segs;
    segs.reserve(enc.taps.size());
    for (Tape::Var tap : enc.taps) segs.push_back(tape.l2_normalize_rows(tap));
    return tape.concat_cols(segs);
}

// ---------------------------------------------------------------------------
// Concept embedder and linear head

// M x D prototype table; row c is the embedding of universe concept c.
struct ConceptEmbedder {
    Tensor table;
    double temperature = 0.07;

    std::size_t num_concepts() const { return table.rows(); }
    std::size_t dim() const { return table.cols(); }
};

struct LinearHead {
    Tensor weight;                  // D x K
    std::vector<int> class_concepts; // K universe concept ids

    std::size_t num_classes() const { return weight.cols(); }

    void validate() const {
        if (weight.shape.size() != 2)
            throw ShapeError("head: weight must be 2-d, got " + shape_str(weight.shape));
        if (class_concepts.size() != weight.cols())
            throw ShapeError("head: " + std::to_string(class_concepts.size()) + " concepts for " +
                             std::to_string(weight.cols()) + " columns");
        if (weight.cols() < 2) throw ShapeError("head: needs at least 2 classes");
    }
};

// Zero-shot head: prototype rows for the task's concepts, transposed to D x K.
inline LinearHead head_from_embedder(const ConceptEmbedder& emb, const std::vector<int>& concepts) {
    if (concepts.size() < 2) throw ShapeError("head: needs at least 2 classes");
    std::size_t d = emb.dim();
    LinearHead head;
    head.class_concepts = concepts;
    head.weight = Tensor::zeros({d, concepts.size()});
    for (std::size_t k = 0; k < concepts.size(); ++k) {
        int c = concepts[k];
        if (c < 0 || static_cast<std::size_t>(c) >= emb.num_concepts())
            throw ShapeError("head: concept " + std::to_string(c) + " outside universe of " +
                             std::to_string(emb.num_concepts()));
        for (std::size_t j = 0; j < d; ++j)
            head.weight.at(j, k) = emb.table.at(static_cast<std::size_t>(c), j);
    }
    return head;
}

// logits[b,k] = w[:,k] . embedding[b]
inline Tensor zs_logits(const Tensor& embedding, const LinearHead& head) {
    head.validate();
    if (embedding.shape.size() != 2 || embedding.shape[1] != head.weight.rows())
        throw ShapeError("zs_logits: embedding shape " + shape_str(embedding.shape) +
                         " does not match head " + shape_str(head.weight.shape));
    std::size_t n = embedding.shape[0], d = embedding.shape[1], k = head.weight.cols();
    Tensor out = Tensor::zeros({n, k});
    k_matmul(embedding.values.data(), head.weight.values.data(), out.values.data(), n, d, k);
    if (!out.all_finite()) throw NumericError("zs_logits: non-finite output");
    return out;
}

// Lowest index wins ties (determinism rule used everywhere).
inline std::size_t argmax_row(const double* row, std::size_t n) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < n; ++i)
        if (row[i] > row[best]) best = i;
    return best;
}

inline std::vector<int> argmax_rows(const Tensor& logits) {
    std::vector<int> out(logits.rows());
    for (std::size_t r = 0; r < logits.rows(); ++r)
        out[r] = static_cast<int>(argmax_row(logits.values.data() + r * logits.cols(), logits.cols()));
    return out;
}

// ---------------------------------------------------------------------------
// Snapshot algebra

// Squared L2 distance over the encoder parameters only (head and embedder
// excluded by name prefix).
inline double param_sq_distance(const ModelSnapshot& a, const ModelSnapshot& b) {
    if (!a.schema_matches(b))
        throw ShapeError("param_sq_distance: snapshot schemas differ");
    double total = 0.0;
    for (std::size_t i = 0; i < a.params.size(); ++i) {
        if (a.params[i].name.rfind(kEncoderPrefix, 0) != 0) continue;
        const auto& va = a.params[i].tensor.values;
        const auto& vb = b.params[i].tensor.values;
        for (std::size_t j = 0; j < va.size(); ++j) {
            double d = va[j] - vb[j];
            total += d * d;
        }
    }
    return total;
}

// theta = alpha * theta0 + (1 - alpha) * thetaF over every parameter.
// alpha = 1 reproduces theta0 bit-exactly, alpha = 0 thetaF.
inline ModelSnapshot interpolate(const ModelSnapshot& theta0, const ModelSnapshot& thetaF,
                                 double alpha) {
    if (!theta0.schema_matches(thetaF))
        throw ShapeError("interpolate: snapshot schemas differ");
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw TensorError("interpolate: alpha " + std::to_string(alpha) + " outside [0,1]");
    ModelSnapshot out = theta0;
    if (alpha == 1.0) {
        out.provenance = theta0.provenance + "|wiseft_alpha=1";
        return out;
    }
    if (alpha == 0.0) {
        out = thetaF;
        out.provenance = thetaF.provenance + "|wiseft_alpha=0";
        return out;
    }
    for (std::size_t i = 0; i < out.params.size(); ++i) {
        auto& v = out.params[i].tensor.values;
        const auto& vf = thetaF.params[i].tensor.values;
        for (std::size_t j = 0; j < v.size(); ++j)
            v[j] = alpha * v[j] + (1.0 - alpha) * vf[j];
    }
    out.step_fraction = thetaF.step_fraction;
    out.provenance = thetaF.provenance + "|wiseft_alpha=" + std::to_string(alpha);
    return out;
}

} // namespace forgetlab
