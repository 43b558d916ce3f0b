#pragma once

// Synthetic concept universe and task builder. Everything here is a pure
// function of seeds: the same seed always regenerates byte-identical data,
// and train/val/test draw from distinct named streams so the splits can
// never collide.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace forgetlab {

struct ConceptUniverse {
    std::uint64_t seed = 0;
    std::size_t num_concepts = 40;
    std::size_t input_dim = 32;
    Tensor concept_means;            // M x d_in, unit-norm rows
    double within_concept_scale = 0.15;
};

struct SplitData {
    Tensor x;                // n x d_in
    std::vector<int> labels; // n, in [0, K)

    std::size_t size() const { return labels.size(); }
};

struct TaskDataset {
    std::string task_id;
    std::vector<int> concept_ids;  // K universe concept ids; labels index this
    Tensor style_shift;            // [d_in]
    Tensor style_transform;        // [d_in, d_in], orthogonal
    double noise_sigma = 0.0;
    SplitData train, val, test;
    std::uint64_t seed = 0;        // style seed

    std::size_t num_classes() const { return concept_ids.size(); }
    std::size_t input_dim() const { return style_shift.shape[0]; }
};

namespace detail {

// Unit-norm gaussian direction.
inline std::vector<double> random_unit(KeyedRng& rng, std::size_t d) {
    std::vector<double> v(d);
    double norm = 0.0;
    do {
        norm = 0.0;
        for (double& x : v) {
            x = rng.gaussian();
            norm += x * x;
        }
        norm = std::sqrt(norm);
    } while (norm < 1e-8);
    for (double& x : v) x /= norm;
    return v;
}

// Orthogonal matrix: QR of a gaussian matrix via modified Gram-Schmidt with
// the R diagonal forced positive (makes Q a deterministic function of the
// gaussian draw).
inline Tensor random_orthogonal(KeyedRng& rng, std::size_t d) {
    Tensor q = Tensor::zeros({d, d});
    for (double& v : q.values) v = rng.gaussian();
    for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t i = 0; i < j; ++i) {
            double dot = 0.0;
            for (std::size_t r = 0; r < d; ++r) dot += q.at(r, i) * q.at(r, j);
            for (std::size_t r = 0; r < d; ++r) q.at(r, j) -= dot * q.at(r, i);
        }
        double norm = 0.0;
        for (std::size_t r = 0; r < d; ++r) norm += q.at(r, j) * q.at(r, j);
        norm = std::sqrt(norm);
        if (norm < 1e-10)
            throw NumericError("random_orthogonal: degenerate column during QR");
        for (std::size_t r = 0; r < d; ++r) q.at(r, j) /= norm;
    }
    return q;
}

// Per-class sample counts that differ by at most one, larger classes first.
inline std::vector<std::size_t> balanced_counts(std::size_t n, std::size_t k) {
    std::vector<std::size_t> counts(k, n / k);
    for (std::size_t i = 0; i < n % k; ++i) ++counts[i];
    return counts;
}

} // namespace detail

// Rejection-sample unit-norm concept means until every pair is separated by
// cosine distance > 0.03 (angle >= 15 degrees).
inline ConceptUniverse make_universe(std::uint64_t seed, std::size_t M = 40,
                                     std::size_t d_in = 32) {
    if (M < 4 || d_in < 4)
        throw ShapeError("make_universe: M and d_in must both be at least 4");
    ConceptUniverse u;
    u.seed = seed;
    u.num_concepts = M;
    u.input_dim = d_in;
    u.concept_means = Tensor::zeros({M, d_in});
    KeyedRng rng(seed, "universe/means");
    const double max_cos = 1.0 - 0.03;
    for (std::size_t c = 0; c < M; ++c) {
        for (int attempt = 0;; ++attempt) {
            if (attempt > 10000)
                throw NumericError("make_universe: cannot separate " + std::to_string(M) +
                                   " concepts in " + std::to_string(d_in) + " dims");
            std::vector<double> cand = detail::random_unit(rng, d_in);
            bool ok = true;
            for (std::size_t p = 0; p < c && ok; ++p) {
                double dot = 0.0;
                for (std::size_t j = 0; j < d_in; ++j) dot += cand[j] * u.concept_means.at(p, j);
                if (dot > max_cos) ok = false;
            }
            if (ok) {
                for (std::size_t j = 0; j < d_in; ++j) u.concept_means.at(c, j) = cand[j];
                break;
            }
        }
    }
    return u;
}

namespace detail {

// One split: class-balanced, class-major order, consuming only its own
// named stream. sample = Q (mean + within*g1) + shift + noise*g2.
inline SplitData make_split(const ConceptUniverse& u, const TaskDataset& task,
                            std::size_t n, const std::string& stream_name) {
    std::size_t d = u.input_dim;
    std::size_t k = task.num_classes();
    SplitData split;
    split.x = Tensor::zeros({n, d});
    split.labels.reserve(n);
    KeyedRng rng(u.seed ^ detail::splitmix64_finalize(task.seed), stream_name);
    std::vector<std::size_t> counts = balanced_counts(n, k);
    std::vector<double> raw(d), g2(d);
    std::size_t row = 0;
    bool identity = task.style_transform.size() == 0;
    for (std::size_t c = 0; c < k; ++c) {
        std::size_t concept_row = static_cast<std::size_t>(task.concept_ids[c]);
        for (std::size_t s = 0; s < counts[c]; ++s, ++row) {
            for (std::size_t j = 0; j < d; ++j)
                raw[j] = u.concept_means.at(concept_row, j) + u.within_concept_scale * rng.gaussian();
            for (std::size_t j = 0; j < d; ++j) g2[j] = rng.gaussian();
            double* out = split.x.values.data() + row * d;
            if (identity) {
                for (std::size_t j = 0; j < d; ++j) out[j] = raw[j];
            } else {
                for (std::size_t i = 0; i < d; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < d; ++j) acc += task.style_transform.at(i, j) * raw[j];
                    out[i] = acc;
                }
            }
            for (std::size_t j = 0; j < d; ++j)
                out[j] += task.style_shift.values[j] + task.noise_sigma * g2[j];
            split.labels.push_back(static_cast<int>(c));
        }
    }
    return split;
}

} // namespace detail

// Scale of the task's random domain shift vector relative to the unit-norm
// concept means.
inline constexpr double kStyleShiftScale = 0.5;

inline TaskDataset make_task(const ConceptUniverse& u, const std::string& task_id,
                             const std::vector<int>& concept_ids, std::uint64_t style_seed,
                             double noise_sigma, std::size_t n_train, std::size_t n_val,
                             std::size_t n_test) {
    if (concept_ids.size() < 2) throw ShapeError("make_task: needs at least 2 concepts");
    for (int c : concept_ids)
        if (c < 0 || static_cast<std::size_t>(c) >= u.num_concepts)
            throw ShapeError("make_task: concept " + std::to_string(c) + " outside universe of " +
                             std::to_string(u.num_concepts));
    std::size_t k = concept_ids.size();
    if (n_train < k || n_val < k || n_test < k)
        throw ShapeError("make_task: each split needs at least one sample per class");
    if (noise_sigma < 0.0) throw TensorError("make_task: negative noise_sigma");

    TaskDataset task;
    task.task_id = task_id;
    task.concept_ids = concept_ids;
    task.noise_sigma = noise_sigma;
    task.seed = style_seed;

    KeyedRng style_rng(u.seed, "style/" + std::to_string(style_seed));
    task.style_transform = detail::random_orthogonal(style_rng, u.input_dim);
    task.style_shift = Tensor::zeros({u.input_dim});
    for (double& v : task.style_shift.values) v = kStyleShiftScale * style_rng.gaussian();

    task.train = detail::make_split(u, task, n_train, "split/train");
    task.val = detail::make_split(u, task, n_val, "split/val");
    task.test = detail::make_split(u, task, n_test, "split/test");
    return task;
}

// Identity-style dataset over the whole universe: no transform, no shift, no
// observation noise; labels are universe concept ids. Validation and test
// splits are sized at 1/10 and 1/5 of the train count per concept.
inline TaskDataset make_pretrain_corpus(const ConceptUniverse& u, std::size_t n_per_concept,
                                        std::uint64_t seed) {
    if (n_per_concept < 2) throw ShapeError("make_pretrain_corpus: n_per_concept must be >= 2");
    TaskDataset task;
    task.task_id = "pretrain_corpus";
    task.concept_ids.resize(u.num_concepts);
    for (std::size_t c = 0; c < u.num_concepts; ++c) task.concept_ids[c] = static_cast<int>(c);
    task.noise_sigma = 0.0;
    task.seed = seed;
    task.style_shift = Tensor::zeros({u.input_dim});
    task.style_transform = Tensor(); // empty = identity
    std::size_t n_val = std::max<std::size_t>(1, n_per_concept / 10);
    std::size_t n_test = std::max<std::size_t>(1, n_per_concept / 5);
    task.train = detail::make_split(u, task, n_per_concept * u.num_concepts, "split/train");
    task.val = detail::make_split(u, task, n_val * u.num_concepts, "split/val");
    task.test = detail::make_split(u, task, n_test * u.num_concepts, "split/test");
    return task;
}

// CSV dump: split,label,x_0..x_{d-1} with 17-significant-digit floats.
inline void dump_dataset_csv(const TaskDataset& task, std::ostream& out) {
    std::size_t d = task.input_dim();
    out << "split,label";
    for (std::size_t j = 0; j < d; ++j) out << ",x_" << j;
    out << '\n';
    auto emit = [&](const char* name, const SplitData& split) {
        char buf[64];
        for (std::size_t r = 0; r < split.size(); ++r) {
            out << name << ',' << split.labels[r];
            for (std::size_t j = 0; j < d; ++j) {
                std::snprintf(buf, sizeof buf, "%.17g", split.x.values[r * d + j]);
                out << ',' << buf;
            }
            out << '\n';
        }
    };
    emit("train", task.train);
    emit("val", task.val);
    emit("test", task.test);
}

inline void dump_dataset_csv(const TaskDataset& task, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw TensorError("dump_dataset_csv: cannot open " + path);
    dump_dataset_csv(task, out);
}

} // namespace forgetlab
