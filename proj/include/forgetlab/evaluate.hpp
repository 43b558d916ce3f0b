#pragma once
// Measurement machinery: linear probes on frozen features, zero-shot and
// linear-probe accuracies, forgetting deltas (plain and continual), Wise-FT
// alpha selection, and the metric record schema shared by every run output.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "datagen.hpp"
#include "nets.hpp"
#include "pretrain.hpp"
#include "tensor.hpp"

namespace forgetlab {

// ---------------------------------------------------------------------------
// Probe features

// The probe (and the ZS classifier it is initialized from) operates on the
// row-normalized final embedding. Normalization makes a zero-iteration probe
// reproduce zero-shot predictions exactly: scores against the unit-norm
// prototype columns are cosines up to a common per-row factor.
inline Tensor probe_features(const EncoderSpec& spec, const ModelSnapshot& model,
                             const Tensor& x) {
    return l2_normalize_rows_value(encode(spec, model, x).embedding);
}

inline ConceptEmbedder embedder_from_snapshot(const ModelSnapshot& model) {
    ConceptEmbedder emb;
    emb.table = model.find(kEmbedderParamName);
    return emb;
}

// ---------------------------------------------------------------------------
// Linear probe: deterministic full-batch multinomial logistic regression

struct ProbeConfig {
    std::size_t max_iters = 5000;
    double grad_tol = 1e-6;
    double l2_strength = -1.0; // < 0: default to 1/n
};

struct ProbeResult {
    LinearHead head;
    std::size_t iters = 0;
    bool converged = false; // gradient norm fell below tol before max_iters
    double objective = 0.0; // J at the returned head
};

namespace detail {

// J(W) = (1/n) sum_i [lse(x_i W) - (x_i W)_{y_i}] + (s/2) ||W||^2
inline double probe_objective(const Tensor& x, const std::vector<int>& labels,
                              const std::vector<double>& w, std::size_t d, std::size_t k,
                              double s) {
    std::size_t n = x.shape[0];
    std::vector<double> logits(n * k, 0.0);
    k_matmul(x.values.data(), w.data(), logits.data(), n, d, k);
    double ce = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        const double* row = logits.data() + r * k;
        ce += k_logsumexp(row, k) - row[labels[r]];
    }
    double reg = 0.0;
    for (double v : w) reg += v * v;
    return ce / static_cast<double>(n) + 0.5 * s * reg;
}

// Fills g = (1/n) X^T (P - Y) + s W; returns the objective at w.
inline double probe_obj_grad(const Tensor& x, const std::vector<int>& labels,
                             const std::vector<double>& w, std::size_t d, std::size_t k,
                             double s, std::vector<double>& g) {
    std::size_t n = x.shape[0];
    std::vector<double> logits(n * k, 0.0);
    k_matmul(x.values.data(), w.data(), logits.data(), n, d, k);
    double ce = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        double* row = logits.data() + r * k;
        double lse = k_logsumexp(row, k);
        ce += lse - row[labels[r]];
        for (std::size_t c = 0; c < k; ++c) row[c] = std::exp(row[c] - lse);
        row[labels[r]] -= 1.0; // P - Y, reusing the logits buffer
    }
    double inv_n = 1.0 / static_cast<double>(n);
    std::fill(g.begin(), g.end(), 0.0);
    k_matmul_tn(x.values.data(), logits.data(), g.data(), n, d, k);
    for (std::size_t j = 0; j < g.size(); ++j) g[j] = g[j] * inv_n + s * w[j];
    double reg = 0.0;
    for (double v : w) reg += v * v;
    return ce * inv_n + 0.5 * s * reg;
}

} // namespace detail

// Gradient descent from the given initialization with Barzilai-Borwein step
// sizes safeguarded by Armijo backtracking: every accepted step decreases J,
// so the returned objective never exceeds the initial one. Pure double
// arithmetic in fixed order; bit-identical results for identical inputs.
inline ProbeResult linear_probe(const Tensor& features, const std::vector<int>& labels,
                                const LinearHead& init_head, const ProbeConfig& config = {}) {
    init_head.validate();
    if (features.shape.size() != 2)
        throw ShapeError("linear_probe: features must be 2-d, got " + shape_str(features.shape));
    std::size_t n = features.shape[0], d = features.shape[1], k = init_head.num_classes();
    if (d != init_head.weight.rows())
        throw ShapeError("linear_probe: feature dim " + std::to_string(d) + " vs head rows " +
                         std::to_string(init_head.weight.rows()));
    if (labels.size() != n)
        throw ShapeError("linear_probe: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
    if (n < k) throw ShapeError("linear_probe: fewer samples than classes");
    for (int l : labels)
        if (l < 0 || static_cast<std::size_t>(l) >= k)
            throw ShapeError("linear_probe: label " + std::to_string(l) + " outside [0," +
                             std::to_string(k) + ")");
    double s = config.l2_strength < 0.0 ? 1.0 / static_cast<double>(n) : config.l2_strength;

    std::vector<double> w = init_head.weight.values;
    std::vector<double> g(w.size()), w_prev(w.size()), g_prev(w.size()), w_new(w.size());
    double obj = detail::probe_obj_grad(features, labels, w, d, k, s, g);

    ProbeResult res;
    double step = 1.0;
    bool have_prev = false;
    for (std::size_t it = 0; it < config.max_iters; ++it) {
        double gn2 = 0.0;
        for (double v : g) gn2 += v * v;
        if (std::sqrt(gn2) < config.grad_tol) {
            res.converged = true;
            break;
        }
        if (have_prev) {
            double ss = 0.0, sy = 0.0;
            for (std::size_t j = 0; j < w.size(); ++j) {
                double dw = w[j] - w_prev[j];
                ss += dw * dw;
                sy += dw * (g[j] - g_prev[j]);
            }
            step = sy > 0.0 ? std::clamp(ss / sy, 1e-12, 1e12) : 1.0;
        }
        double obj_new = 0.0;
        bool accepted = false;
        for (int bt = 0; bt < 60; ++bt) {
            for (std::size_t j = 0; j < w.size(); ++j) w_new[j] = w[j] - step * g[j];
            obj_new = detail::probe_objective(features, labels, w_new, d, k, s);
            if (obj_new <= obj - 1e-4 * step * gn2) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break; // no decreasing step representable; stop where we are
        w_prev = w;
        g_prev = g;
        w = w_new;
        have_prev = true;
        obj = detail::probe_obj_grad(features, labels, w, d, k, s, g);
        res.iters = it + 1;
    }
    res.objective = obj;
    res.head.class_concepts = init_head.class_concepts;
    res.head.weight = Tensor({d, k}, std::move(w));
    return res;
}

// ---------------------------------------------------------------------------
// Accuracies (percent, lowest-index tie-breaking via argmax_rows)

inline double percent_correct(const Tensor& logits, const std::vector<int>& labels) {
    return 100.0 * accuracy(logits, labels);
}

// Zero-shot accuracy with an explicit prototype head.
inline double a_zs(const EncoderSpec& spec, const ModelSnapshot& model, const LinearHead& head,
                   const SplitData& split) {
    EncodeResult enc = encode(spec, model, split.x);
    return percent_correct(zs_logits(enc.embedding, head), split.labels);
}

// Zero-shot accuracy on the task's test split, head built from the model's
// own embedder table.
inline double a_zs(const EncoderSpec& spec, const ModelSnapshot& model, const TaskDataset& task) {
    LinearHead head = head_from_embedder(embedder_from_snapshot(model), task.concept_ids);
    return a_zs(spec, model, head, task.test);
}

// Probe trained on the task's train split from the ZS initialization.
inline ProbeResult train_probe(const EncoderSpec& spec, const ModelSnapshot& model,
                               const TaskDataset& task, const ProbeConfig& config = {}) {
    LinearHead init = head_from_embedder(embedder_from_snapshot(model), task.concept_ids);
    Tensor feats = probe_features(spec, model, task.train.x);
    return linear_probe(feats, task.train.labels, init, config);
}

inline double a_lp_on_split(const EncoderSpec& spec, const ModelSnapshot& model,
                            const TaskDataset& task, const SplitData& split,
                            const ProbeConfig& config = {}) {
    ProbeResult probe = train_probe(spec, model, task, config);
    Tensor feats = probe_features(spec, model, split.x);
    Tensor logits = Tensor::zeros({feats.shape[0], probe.head.num_classes()});
    k_matmul(feats.values.data(), probe.head.weight.values.data(), logits.values.data(),
             feats.shape[0], feats.shape[1], probe.head.num_classes());
    return percent_correct(logits, split.labels);
}

// LP accuracy: probe on train, report test.
inline double a_lp(const EncoderSpec& spec, const ModelSnapshot& model, const TaskDataset& task,
                   const ProbeConfig& config = {}) {
    return a_lp_on_split(spec, model, task, task.test, config);
}

// ---------------------------------------------------------------------------
// Forgetting deltas (signed percentage points)

inline double delta_lp(const EncoderSpec& spec, const TaskDataset& task,
                       const ModelSnapshot& finetuned, const ModelSnapshot& pretrained,
                       const ProbeConfig& config = {}) {
    return a_lp(spec, finetuned, task, config) - a_lp(spec, pretrained, task, config);
}

inline double delta_zs(const EncoderSpec& spec, const TaskDataset& task,
                       const ModelSnapshot& finetuned, const ModelSnapshot& pretrained) {
    return a_zs(spec, finetuned, task) - a_zs(spec, pretrained, task);
}

// Max rule over already-measured accuracies.
inline double continual_delta_from_accuracies(double final_acc,
                                              const std::vector<double>& prior_accs) {
    if (prior_accs.empty())
        throw TensorError("continual_delta: no prior accuracies");
    return final_acc - *std::max_element(prior_accs.begin(), prior_accs.end());
}

// Continual forgetting: final accuracy minus the best accuracy any prior
// model (index 0 = pre-trained) achieved on the same task.
inline double continual_delta_lp(const EncoderSpec& spec, const TaskDataset& task,
                                 const ModelSnapshot& final_model,
                                 const std::vector<const ModelSnapshot*>& prior_models,
                                 const ProbeConfig& config = {}) {
    if (prior_models.empty())
        throw TensorError("continual_delta_lp: no prior models");
    std::vector<double> prior_accs;
    prior_accs.reserve(prior_models.size());
    for (const ModelSnapshot* m : prior_models)
        prior_accs.push_back(a_lp(spec, *m, task, config));
    return continual_delta_from_accuracies(a_lp(spec, final_model, task, config), prior_accs);
}

// ---------------------------------------------------------------------------
// Wise-FT alpha selection

inline std::vector<double> default_alpha_grid() {
    std::vector<double> grid(11);
    for (int i = 0; i <= 10; ++i) grid[i] = static_cast<double>(i) / 10.0;
    return grid;
}

struct WiseFtResult {
    double alpha = 0.0;
    ModelSnapshot snapshot;
    std::vector<double> val_accuracy; // one per grid point, grid order
};

// Picks the alpha whose interpolated model maximizes LP accuracy on the
// task's validation split; ties go to the smaller alpha (closer to the
// fine-tuned endpoint).
inline WiseFtResult wise_ft_select(const EncoderSpec& spec, const ModelSnapshot& theta0,
                                   const ModelSnapshot& thetaF, const TaskDataset& val_task,
                                   const std::vector<double>& alpha_grid = default_alpha_grid(),
                                   const ProbeConfig& config = {}) {
    if (alpha_grid.empty()) throw TensorError("wise_ft_select: empty alpha grid");
    WiseFtResult res;
    double best_acc = -1.0, best_alpha = 2.0;
    for (double alpha : alpha_grid) {
        ModelSnapshot snap = interpolate(theta0, thetaF, alpha);
        double acc = a_lp_on_split(spec, snap, val_task, val_task.val, config);
        res.val_accuracy.push_back(acc);
        if (acc > best_acc || (acc == best_acc && alpha < best_alpha)) {
            best_acc = acc;
            best_alpha = alpha;
        }
    }
    res.alpha = best_alpha;
    res.snapshot = interpolate(theta0, thetaF, best_alpha);
    return res;
}

// ---------------------------------------------------------------------------
// Metric records

struct MetricRecord {
    std::string run_id;
    std::string method;
    std::string ft_dataset;
    std::string eval_dataset;
    double checkpoint_fraction = 0.0;
    double a_zs = 0.0;
    double a_lp = 0.0;
    double delta_zs = 0.0;
    double delta_lp = 0.0;
    double param_dist = 0.0;
    double feat_dist = 0.0;
};

inline constexpr const char* kMetricsCsvHeader =
    "run_id,method,ft_dataset,eval_dataset,checkpoint_fraction,"
    "a_zs,a_lp,delta_zs,delta_lp,param_dist,feat_dist";

// 17 significant digits: enough to round-trip any double exactly.
inline std::string format_g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string metric_csv_row(const MetricRecord& r) {
    std::string row = r.run_id + "," + r.method + "," + r.ft_dataset + "," + r.eval_dataset;
    for (double v : {r.checkpoint_fraction, r.a_zs, r.a_lp, r.delta_zs, r.delta_lp, r.param_dist,
                     r.feat_dist}) {
        row += ',';
        row += format_g17(v);
    }
    return row;
}

} // namespace forgetlab
