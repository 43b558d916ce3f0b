#pragma once
// Fine-tuning methods and losses: ZS/LP head initialization, plain
// cross-entropy, parameter-space (L2SP) and feature-space (LDIFS, plus its
// last-layer ablation) regularization, two-tower contrastive fine-tuning
// (FLYP and FLYP-CE), distillation baselines (LwF, LFL), and joint training
// on a task union. One training loop drives all of them: AdamW with linear
// warmup into a cosine schedule, seeded epoch shuffling, and checkpoints at
// configured fractions of training.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "datagen.hpp"
#include "evaluate.hpp"
#include "nets.hpp"
#include "pretrain.hpp"
#include "tape.hpp"
#include "tensor.hpp"

namespace forgetlab {

// ---------------------------------------------------------------------------
// Methods

enum class FinetuneMethod {
    zs_init_ce,
    lp_init_ce,
    zs_init_l2sp,
    lp_init_l2sp,
    zs_init_ldifs,
    lp_init_ldifs,
    ldifs_last_layer,
    flyp,
    flyp_ce,
    lwf,
    lfl,
    joint,
};

inline const std::vector<FinetuneMethod>& all_methods() {
    static const std::vector<FinetuneMethod> ms{
        FinetuneMethod::zs_init_ce,   FinetuneMethod::lp_init_ce,
        FinetuneMethod::zs_init_l2sp, FinetuneMethod::lp_init_l2sp,
        FinetuneMethod::zs_init_ldifs, FinetuneMethod::lp_init_ldifs,
        FinetuneMethod::ldifs_last_layer, FinetuneMethod::flyp,
        FinetuneMethod::flyp_ce,      FinetuneMethod::lwf,
        FinetuneMethod::lfl,          FinetuneMethod::joint,
    };
    return ms;
}

inline std::string to_string(FinetuneMethod m) {
    switch (m) {
        case FinetuneMethod::zs_init_ce: return "zs_init_ce";
        case FinetuneMethod::lp_init_ce: return "lp_init_ce";
        case FinetuneMethod::zs_init_l2sp: return "zs_init_l2sp";
        case FinetuneMethod::lp_init_l2sp: return "lp_init_l2sp";
        case FinetuneMethod::zs_init_ldifs: return "zs_init_ldifs";
        case FinetuneMethod::lp_init_ldifs: return "lp_init_ldifs";
        case FinetuneMethod::ldifs_last_layer: return "ldifs_last_layer";
        case FinetuneMethod::flyp: return "flyp";
        case FinetuneMethod::flyp_ce: return "flyp_ce";
        case FinetuneMethod::lwf: return "lwf";
        case FinetuneMethod::lfl: return "lfl";
        case FinetuneMethod::joint: return "joint";
    }
    throw TensorError("unknown finetune method");
}

inline FinetuneMethod method_from_string(const std::string& s) {
    for (FinetuneMethod m : all_methods())
        if (to_string(m) == s) return m;
    throw TensorError("unknown finetune method '" + s + "'");
}

inline bool uses_lp_init(FinetuneMethod m) {
    return m == FinetuneMethod::lp_init_ce || m == FinetuneMethod::lp_init_l2sp ||
           m == FinetuneMethod::lp_init_ldifs || m == FinetuneMethod::ldifs_last_layer;
}

inline bool uses_l2sp(FinetuneMethod m) {
    return m == FinetuneMethod::zs_init_l2sp || m == FinetuneMethod::lp_init_l2sp;
}

inline bool uses_ldifs(FinetuneMethod m) {
    return m == FinetuneMethod::zs_init_ldifs || m == FinetuneMethod::lp_init_ldifs ||
           m == FinetuneMethod::ldifs_last_layer;
}

inline bool is_flyp(FinetuneMethod m) {
    return m == FinetuneMethod::flyp || m == FinetuneMethod::flyp_ce;
}

// ---------------------------------------------------------------------------
// Config

struct FinetuneConfig {
    FinetuneMethod method = FinetuneMethod::zs_init_ce;
    // Calibrated so the default L2SP run lands between plain CE and LDIFS on
    // transfer retention rather than clamping the encoder outright.
    double lambda_l2sp = 0.05;
    double lambda_ldifs = 10.0;
    double lwf_temperature = 2.0;
    std::size_t epochs = 10;
    std::size_t batch_size = 128;
    double learning_rate = 1e-3;
    double weight_decay = 0.1;
    std::size_t warmup_steps = 50;
    std::vector<double> checkpoint_fractions{0.2, 0.4, 0.6, 0.8, 1.0};
    std::uint64_t seed = 0;

    // Lambdas that the method ignores stay recorded as given; only shared
    // rates and counts are constrained.
    void validate() const {
        if (epochs == 0) throw TensorError("finetune config: epochs must be positive");
        if (batch_size == 0) throw TensorError("finetune config: batch_size must be positive");
        if (warmup_steps == 0) throw TensorError("finetune config: warmup_steps must be positive");
        if (!(learning_rate > 0.0)) throw TensorError("finetune config: learning_rate must be positive");
        if (!(weight_decay >= 0.0)) throw TensorError("finetune config: weight_decay must be nonnegative");
        if (!(lambda_l2sp >= 0.0)) throw TensorError("finetune config: lambda_l2sp must be nonnegative");
        if (!(lambda_ldifs >= 0.0)) throw TensorError("finetune config: lambda_ldifs must be nonnegative");
        if (!(lwf_temperature > 0.0)) throw TensorError("finetune config: lwf_temperature must be positive");
        for (std::size_t i = 0; i < checkpoint_fractions.size(); ++i) {
            double f = checkpoint_fractions[i];
            if (!(f > 0.0 && f <= 1.0))
                throw TensorError("finetune config: checkpoint fraction " + std::to_string(f) +
                                  " outside (0,1]");
            if (i > 0 && f <= checkpoint_fractions[i - 1])
                throw TensorError("finetune config: checkpoint fractions must increase");
        }
    }
};

struct LossRow {
    std::size_t step = 0;  // 1-based
    std::size_t epoch = 0; // 0-based
    double lr = 0.0;
    double total = 0.0;
    double ce = 0.0;  // primary term (contrastive for flyp)
    double reg = 0.0; // regularizer term, 0 when absent
};

inline void write_loss_log_csv(std::ostream& out, const std::vector<LossRow>& rows) {
    out << "step,epoch,lr,loss_total,loss_ce,loss_reg\n";
    for (const LossRow& r : rows)
        out << r.step << ',' << r.epoch << ',' << format_g17(r.lr) << ',' << format_g17(r.total)
            << ',' << format_g17(r.ce) << ',' << format_g17(r.reg) << '\n';
}

struct FinetuneTrajectory {
    FinetuneConfig config;
    ModelSnapshot initial;
    std::vector<std::pair<double, ModelSnapshot>> checkpoints; // sorted by fraction
    std::vector<LossRow> loss_log;
    ModelSnapshot final_snapshot;
};

inline constexpr const char* kHeadParamName = "head.w";

// ---------------------------------------------------------------------------
// Joint-training task union

// Union of several tasks: concepts are the sorted unique union, split rows
// are concatenated in task order with labels remapped to union indices.
// Style metadata is cleared; the merged splits are already materialized.
inline TaskDataset make_union_task(const std::vector<TaskDataset>& tasks) {
    if (tasks.empty()) throw TensorError("make_union_task: no tasks");
    std::size_t d = tasks[0].input_dim();
    std::set<int> concept_set;
    for (const TaskDataset& t : tasks) {
        if (t.input_dim() != d) throw ShapeError("make_union_task: input dims differ");
        concept_set.insert(t.concept_ids.begin(), t.concept_ids.end());
    }
    std::vector<int> concepts(concept_set.begin(), concept_set.end());
    auto union_index = [&](int concept_id) {
        return static_cast<int>(std::lower_bound(concepts.begin(), concepts.end(), concept_id) -
                                concepts.begin());
    };

    TaskDataset out;
    out.concept_ids = concepts;
    out.style_shift = Tensor::zeros({d});
    out.style_transform = Tensor();
    out.noise_sigma = 0.0;
    out.seed = 0;
    std::string id = "joint(";
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        if (i) id += '+';
        id += tasks[i].task_id;
    }
    out.task_id = id + ")";

    auto merge = [&](SplitData TaskDataset::*split) {
        std::size_t total = 0;
        for (const TaskDataset& t : tasks) total += (t.*split).size();
        SplitData merged;
        merged.x = Tensor::zeros({total, d});
        merged.labels.reserve(total);
        std::size_t row = 0;
        for (const TaskDataset& t : tasks) {
            const SplitData& s = t.*split;
            std::copy(s.x.values.begin(), s.x.values.end(), merged.x.values.begin() + row * d);
            for (int l : s.labels) merged.labels.push_back(union_index(t.concept_ids[l]));
            row += s.size();
        }
        return merged;
    };
    out.train = merge(&TaskDataset::train);
    out.val = merge(&TaskDataset::val);
    out.test = merge(&TaskDataset::test);
    return out;
}

// ---------------------------------------------------------------------------
// Head initialization

enum class HeadInit { zs, lp };

// ZS: prototype columns straight from the model's embedder table.
// LP: the evaluate module's probe, trained on the task from the ZS init.
inline LinearHead init_head(const EncoderSpec& spec, const ModelSnapshot& model,
                            const TaskDataset& task, HeadInit mode,
                            const ProbeConfig& probe_config = {}) {
    if (mode == HeadInit::zs)
        return head_from_embedder(embedder_from_snapshot(model), task.concept_ids);
    return train_probe(spec, model, task, probe_config).head;
}

// ---------------------------------------------------------------------------
// Loss pieces

// Softmax over rows, computed exactly as the tape's cross-entropy backward
// does (max-subtracted exponentials).
inline Tensor softmax_rows_value(const Tensor& logits) {
    if (logits.shape.size() != 2)
        throw ShapeError("softmax_rows: logits must be 2-d, got " + shape_str(logits.shape));
    Tensor out = logits;
    std::size_t rows = logits.rows(), cols = logits.cols();
    for (std::size_t r = 0; r < rows; ++r) {
        double lse = k_logsumexp(out.values.data() + r * cols, cols);
        for (std::size_t c = 0; c < cols; ++c)
            out.values[r * cols + c] = std::exp(out.values[r * cols + c] - lse);
    }
    return out;
}

// Raw dot-product logits row_i . table_j, the value-path twin of the tape's
// matmul_nt against a constant table.
inline Tensor dot_logits_value(const Tensor& emb, const Tensor& table) {
    Tensor out = Tensor::zeros({emb.rows(), table.rows()});
    k_matmul_nt(emb.values.data(), table.values.data(), out.values.data(), emb.rows(), emb.cols(),
                table.rows());
    if (!out.all_finite()) throw NumericError("dot_logits: non-finite output");
    return out;
}

// Sum over encoder parameters of ||p - p0||^2, differentiable in p.
inline Tape::Var l2sp_penalty_on_tape(Tape& tape, const ParamVars& enc_vars,
                                      const std::vector<std::string>& enc_names,
                                      const ModelSnapshot& origin) {
    if (enc_names.empty()) throw TensorError("l2sp: no encoder parameters");
    Tape::Var total = -1;
    bool first = true;
    for (const std::string& name : enc_names) {
        Tape::Var d = tape.sub(enc_vars.at(name), tape.constant(origin.find(name)));
        Tape::Var sq = tape.l2_norm_sq(d);
        total = first ? sq : tape.add(total, sq);
        first = false;
    }
    return total;
}

// Concatenated multi-tap feature vector, or just the normalized final
// embedding for the last-layer ablation.
inline Tape::Var phi_on_tape(Tape& tape, const TapeEncodeResult& enc, bool last_layer_only) {
    if (last_layer_only) return tape.l2_normalize_rows(enc.embedding);
    std::vector<Tape::Var> segs;
    segs.reserve(enc.taps.size());
    for (Tape::Var t : enc.taps) segs.push_back(tape.l2_normalize_rows(t));
    return segs.size() == 1 ? segs[0] : tape.concat_cols(segs);
}

inline Tensor phi_value(const EncoderSpec& spec, const ModelSnapshot& model, const Tensor& x,
                        bool last_layer_only) {
    if (last_layer_only) return l2_normalize_rows_value(encode(spec, model, x).embedding);
    return features_concat(spec, model, x);
}

// d = (1/N) sum_i ||Phi_current(x_i) - Phi_origin(x_i)||^2
inline double feature_distance(const EncoderSpec& spec, const ModelSnapshot& current,
                               const ModelSnapshot& origin, const Tensor& batch_x,
                               bool last_layer_only = false) {
    if (batch_x.shape.size() != 2 || batch_x.shape[0] == 0)
        throw ShapeError("feature_distance: batch must be a nonempty 2-d tensor, got " +
                         shape_str(batch_x.shape));
    Tensor fc = phi_value(spec, current, batch_x, last_layer_only);
    Tensor fo = phi_value(spec, origin, batch_x, last_layer_only);
    double total = 0.0;
    for (std::size_t i = 0; i < fc.values.size(); ++i) {
        double d = fc.values[i] - fo.values[i];
        total += d * d;
    }
    return total / static_cast<double>(batch_x.shape[0]);
}

// Same quantity with gradients flowing into the current features only.
inline Tape::Var feature_distance_on_tape(Tape& tape, Tape::Var phi_current,
                                          const Tensor& phi_origin) {
    std::size_t rows = phi_origin.shape.size() == 2 ? phi_origin.shape[0] : 1;
    Tape::Var d = tape.sub(phi_current, tape.constant(phi_origin));
    return tape.scale(tape.l2_norm_sq(d), 1.0 / static_cast<double>(rows));
}

// LwF: T^2-weighted cross-entropy between the temperature-softened teacher
// distribution and the student's softened logits.
inline Tape::Var lwf_on_tape(Tape& tape, Tape::Var student_logits, const Tensor& teacher_logits,
                             double temperature) {
    if (!(temperature > 0.0))
        throw TensorError("lwf: temperature must be positive, got " + std::to_string(temperature));
    double inv_t = 1.0 / temperature;
    Tensor soft_teacher = teacher_logits;
    for (double& v : soft_teacher.values) v *= inv_t;
    soft_teacher = softmax_rows_value(soft_teacher);
    Tape::Var scaled = tape.scale(student_logits, inv_t);
    return tape.scale(tape.soft_cross_entropy(scaled, std::move(soft_teacher)),
                      temperature * temperature);
}

// LFL: mean squared L2 distance between raw (unnormalized) final embeddings.
inline Tape::Var lfl_on_tape(Tape& tape, Tape::Var student_embedding,
                             const Tensor& teacher_embedding) {
    std::size_t rows = teacher_embedding.shape[0];
    if (rows == 0) throw ShapeError("lfl: empty teacher batch");
    Tape::Var d = tape.sub(student_embedding, tape.constant(teacher_embedding));
    return tape.scale(tape.l2_norm_sq(d), 1.0 / static_cast<double>(rows));
}

// ---------------------------------------------------------------------------
// Per-step loss graph

namespace detail {

// Everything frozen for the duration of one run: the starting snapshot (the
// regularization origin), its embedder table, and the contrastive
// temperature. Teacher quantities are recomputed per batch from here.
struct FrozenOrigin {
    const ModelSnapshot* start = nullptr;
    Tensor table;
    double temperature = 0.07;
};

struct StepGraph {
    Tape::Var total = -1;
    Tape::Var ce = -1;
    Tape::Var reg = -1;
    bool has_reg = false;
};

// Builds the complete per-step loss for any method. The training loop and
// the gradient-check tests share this construction, so what is tested is
// what trains. `head_var` is the D x K head for CE-family methods and the
// K x D embedder row slice for the FLYP pair.
inline StepGraph build_step_loss(Tape& tape, const EncoderSpec& spec, const FinetuneConfig& cfg,
                                 const ParamVars& enc_vars,
                                 const std::vector<std::string>& enc_names, Tape::Var head_var,
                                 const Tensor& batch_x, const std::vector<int>& batch_y,
                                 const FrozenOrigin& origin) {
    StepGraph g;
    Tape::Var x = tape.constant(batch_x);
    TapeEncodeResult enc = encode_on_tape(spec, tape, enc_vars, x);

    if (cfg.method == FinetuneMethod::flyp) {
        g.ce = infonce_on_tape(tape, enc.embedding, head_var, batch_y, origin.temperature);
    } else if (cfg.method == FinetuneMethod::flyp_ce) {
        Tape::Var emb_n = tape.l2_normalize_rows(enc.embedding);
        Tape::Var rows_n = tape.l2_normalize_rows(head_var);
        Tape::Var logits =
            tape.scale(tape.matmul_nt(emb_n, rows_n), 1.0 / origin.temperature);
        g.ce = tape.softmax_cross_entropy(logits, batch_y);
    } else {
        Tape::Var logits = tape.matmul(enc.embedding, head_var);
        g.ce = tape.softmax_cross_entropy(logits, batch_y);
    }

    if (uses_l2sp(cfg.method) && cfg.lambda_l2sp > 0.0) {
        Tape::Var pen = l2sp_penalty_on_tape(tape, enc_vars, enc_names, *origin.start);
        g.reg = tape.scale(pen, cfg.lambda_l2sp);
        g.has_reg = true;
    } else if (uses_ldifs(cfg.method) && cfg.lambda_ldifs > 0.0) {
        bool last_only = cfg.method == FinetuneMethod::ldifs_last_layer;
        Tensor phi0 = phi_value(spec, *origin.start, batch_x, last_only);
        Tape::Var phi = phi_on_tape(tape, enc, last_only);
        g.reg = tape.scale(feature_distance_on_tape(tape, phi, phi0), cfg.lambda_ldifs);
        g.has_reg = true;
    } else if (cfg.method == FinetuneMethod::lwf) {
        // Teacher and student are scored the way the contrastive model
        // actually classifies: cosine similarity against the frozen concept
        // table, sharpened by the contrastive temperature. Both sides use
        // the same ops so the penalty's gradient vanishes exactly when the
        // student still matches the teacher.
        Tensor table_n = l2_normalize_rows_value(origin.table);
        Tensor teacher_emb =
            l2_normalize_rows_value(encode(spec, *origin.start, batch_x).embedding);
        Tensor teacher_logits = dot_logits_value(teacher_emb, table_n);
        for (double& v : teacher_logits.values) v *= 1.0 / origin.temperature;
        Tape::Var student_logits =
            tape.scale(tape.matmul_nt(tape.l2_normalize_rows(enc.embedding),
                                      tape.constant(table_n)),
                       1.0 / origin.temperature);
        g.reg = lwf_on_tape(tape, student_logits, teacher_logits, cfg.lwf_temperature);
        g.has_reg = true;
    } else if (cfg.method == FinetuneMethod::lfl) {
        Tensor teacher_emb = encode(spec, *origin.start, batch_x).embedding;
        g.reg = lfl_on_tape(tape, enc.embedding, teacher_emb);
        g.has_reg = true;
    }

    g.total = g.has_reg ? tape.add(g.ce, g.reg) : g.ce;
    return g;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Optimizer and schedule

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

// Decoupled weight decay: p -= lr * (mhat / (sqrt(vhat) + eps) + wd * p).
inline void adamw_update(std::vector<double>& p, const std::vector<double>& g,
                         std::vector<double>& m, std::vector<double>& v, std::size_t t, double lr,
                         double weight_decay) {
    double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(t));
    for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = kAdamBeta1 * m[i] + (1.0 - kAdamBeta1) * g[i];
        v[i] = kAdamBeta2 * v[i] + (1.0 - kAdamBeta2) * g[i] * g[i];
        double mhat = m[i] / bc1;
        double vhat = v[i] / bc2;
        p[i] -= lr * (mhat / (std::sqrt(vhat) + kAdamEps) + weight_decay * p[i]);
    }
}

// Linear warmup to the peak rate, then cosine decay to zero. A run shorter
// than the warmup stays on the (strictly increasing) warmup ramp throughout.
inline double lr_at(const FinetuneConfig& cfg, std::size_t step, std::size_t total_steps) {
    if (step < cfg.warmup_steps)
        return cfg.learning_rate * static_cast<double>(step + 1) /
               static_cast<double>(cfg.warmup_steps);
    if (total_steps <= cfg.warmup_steps) return cfg.learning_rate;
    double progress = static_cast<double>(step - cfg.warmup_steps) /
                      static_cast<double>(total_steps - cfg.warmup_steps);
    return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// Mathematical ceil(f * total) with a guard against the product landing one
// ulp above an exact integer.
inline std::size_t checkpoint_step(double fraction, std::size_t total_steps) {
    return static_cast<std::size_t>(
        std::ceil(fraction * static_cast<double>(total_steps) - 1e-9));
}

// ---------------------------------------------------------------------------
// The training loop

// `start` must hold the encoder parameters and the embedder table; it is
// both the initialization and the regularization origin. Non-joint methods
// take exactly one task; joint trains on the union of all given tasks.
inline FinetuneTrajectory finetune(const EncoderSpec& spec, const ModelSnapshot& start,
                                   const std::vector<TaskDataset>& tasks,
                                   const FinetuneConfig& cfg,
                                   const ProbeConfig& probe_config = {}) {
    cfg.validate();
    spec.validate();
    if (tasks.empty()) throw TensorError("finetune: no tasks");
    if (cfg.method != FinetuneMethod::joint && tasks.size() != 1)
        throw TensorError("finetune: method " + to_string(cfg.method) + " takes exactly one task");

    TaskDataset union_storage;
    const TaskDataset* task_ptr = &tasks[0];
    if (cfg.method == FinetuneMethod::joint && tasks.size() > 1) {
        union_storage = make_union_task(tasks);
        task_ptr = &union_storage;
    }
    const TaskDataset& task = *task_ptr;
    if (task.input_dim() != spec.input_dim)
        throw ShapeError("finetune: task input dim " + std::to_string(task.input_dim()) +
                         " vs encoder " + std::to_string(spec.input_dim));

    // Working copies of everything trainable.
    std::vector<ParamEntry> work_enc;
    std::vector<std::string> enc_names;
    for (const ParamEntry& p : start.params)
        if (p.name.rfind(kEncoderPrefix, 0) == 0) {
            work_enc.push_back(p);
            enc_names.push_back(p.name);
        }
    if (work_enc.empty()) throw TensorError("finetune: start snapshot has no encoder parameters");
    Tensor start_table = start.find(kEmbedderParamName);

    detail::FrozenOrigin origin;
    origin.start = &start;
    origin.table = start_table;
    origin.temperature = 0.07;

    const bool flyp_mode = is_flyp(cfg.method);
    LinearHead head;
    Tensor slice; // K x D trainable embedder rows (FLYP only)
    if (flyp_mode) {
        std::size_t k = task.num_classes(), d = start_table.cols();
        slice = Tensor::zeros({k, d});
        for (std::size_t r = 0; r < k; ++r) {
            int c = task.concept_ids[r];
            if (c < 0 || static_cast<std::size_t>(c) >= start_table.rows())
                throw ShapeError("finetune: concept " + std::to_string(c) + " outside table");
            for (std::size_t j = 0; j < d; ++j)
                slice.values[r * d + j] = start_table.at(static_cast<std::size_t>(c), j);
        }
    } else {
        head = init_head(spec, start, task,
                         uses_lp_init(cfg.method) ? HeadInit::lp : HeadInit::zs, probe_config);
    }

    auto snapshot_now = [&](double frac) {
        ModelSnapshot s;
        s.params = work_enc;
        Tensor table = start_table;
        Tensor head_w;
        if (flyp_mode) {
            std::size_t d = table.cols();
            head_w = Tensor::zeros({d, task.num_classes()});
            for (std::size_t r = 0; r < slice.rows(); ++r) {
                int c = task.concept_ids[r];
                for (std::size_t j = 0; j < d; ++j) {
                    table.at(static_cast<std::size_t>(c), j) = slice.values[r * d + j];
                    head_w.at(j, r) = slice.values[r * d + j];
                }
            }
        } else {
            head_w = head.weight;
        }
        s.params.push_back({kEmbedderParamName, std::move(table)});
        s.params.push_back({kHeadParamName, std::move(head_w)});
        s.step_fraction = frac;
        s.provenance = start.provenance + "|ft:" + to_string(cfg.method) + ":" + task.task_id +
                       ":s" + std::to_string(cfg.seed);
        return s;
    };

    FinetuneTrajectory traj;
    traj.config = cfg;
    traj.initial = snapshot_now(0.0);

    const SplitData& train = task.train;
    std::size_t n = train.size();
    std::size_t d_in = spec.input_dim;
    std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    std::size_t total_steps = cfg.epochs * steps_per_epoch;

    // Trainables, in a fixed order: encoder parameters then the head/slice.
    std::vector<Tensor*> trainables;
    for (ParamEntry& p : work_enc) trainables.push_back(&p.tensor);
    trainables.push_back(flyp_mode ? &slice : &head.weight);
    std::vector<std::vector<double>> opt_m(trainables.size()), opt_v(trainables.size());
    for (std::size_t i = 0; i < trainables.size(); ++i) {
        opt_m[i].assign(trainables[i]->size(), 0.0);
        opt_v[i].assign(trainables[i]->size(), 0.0);
    }

    std::vector<std::size_t> order(n);
    std::size_t steps_done = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        KeyedRng shuffle_rng(cfg.seed, "ft/shuffle/" + std::to_string(epoch));
        shuffle_rng.shuffle(order);

        for (std::size_t b = 0; b < steps_per_epoch; ++b) {
            std::size_t lo = b * cfg.batch_size;
            std::size_t hi = std::min(n, lo + cfg.batch_size);
            Tensor bx = Tensor::zeros({hi - lo, d_in});
            std::vector<int> by(hi - lo);
            for (std::size_t i = lo; i < hi; ++i) {
                std::size_t src = order[i];
                std::copy(train.x.values.begin() + src * d_in,
                          train.x.values.begin() + (src + 1) * d_in,
                          bx.values.begin() + (i - lo) * d_in);
                by[i - lo] = train.labels[src];
            }

            double lr = lr_at(cfg, steps_done, total_steps);
            try {
                Tape tape;
                ParamVars enc_vars;
                std::vector<Tape::Var> leaf_vars(trainables.size());
                for (std::size_t i = 0; i < work_enc.size(); ++i) {
                    Tensor t = work_enc[i].tensor;
                    t.requires_grad = true;
                    leaf_vars[i] = tape.leaf(std::move(t));
                    enc_vars[enc_names[i]] = leaf_vars[i];
                }
                {
                    Tensor t = flyp_mode ? slice : head.weight;
                    t.requires_grad = true;
                    leaf_vars.back() = tape.leaf(std::move(t));
                }

                detail::StepGraph g = detail::build_step_loss(
                    tape, spec, cfg, enc_vars, enc_names, leaf_vars.back(), bx, by, origin);
                auto grads = tape.backward(g.total);

                std::size_t t_adam = steps_done + 1;
                for (std::size_t i = 0; i < trainables.size(); ++i) {
                    auto it = grads.find(leaf_vars[i]);
                    const std::vector<double>* gp = it != grads.end() ? &it->second : nullptr;
                    if (gp == nullptr) {
                        // Disconnected parameter: decay-only update.
                        std::vector<double> zeros(trainables[i]->size(), 0.0);
                        adamw_update(trainables[i]->values, zeros, opt_m[i], opt_v[i], t_adam, lr,
                                     cfg.weight_decay);
                    } else {
                        adamw_update(trainables[i]->values, *gp, opt_m[i], opt_v[i], t_adam, lr,
                                     cfg.weight_decay);
                    }
                    if (!trainables[i]->all_finite())
                        throw NumericError("non-finite parameter after update");
                }

                LossRow row;
                row.step = steps_done + 1;
                row.epoch = epoch;
                row.lr = lr;
                row.total = tape.value(g.total).values[0];
                row.ce = tape.value(g.ce).values[0];
                row.reg = g.has_reg ? tape.value(g.reg).values[0] : 0.0;
                if (!std::isfinite(row.total))
                    throw NumericError("non-finite loss " + std::to_string(row.total));
                traj.loss_log.push_back(row);
            } catch (const NumericError& e) {
                throw NumericError("finetune step " + std::to_string(steps_done + 1) + ": " +
                                   e.what());
            }

            ++steps_done;
            for (double f : cfg.checkpoint_fractions)
                if (checkpoint_step(f, total_steps) == steps_done)
                    traj.checkpoints.emplace_back(f, snapshot_now(f));
        }
    }

    traj.final_snapshot = snapshot_now(1.0);
    return traj;
}

} // namespace forgetlab
