// Concept universe and task generation: determinism, balance, separation,
// split disjointness, and the degenerate-generator identity.

#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <set>
#include <sstream>

#include "forgetlab/datagen.hpp"
#include "forgetlab/rng.hpp"

using namespace forgetlab;

namespace {

bool bit_equal(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

double row_cosine(const Tensor& m, std::size_t a, std::size_t b) {
    double dot = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) dot += m.at(a, j) * m.at(b, j);
    return dot;
}

std::uint64_t hash_row(const double* row, std::size_t d) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    const unsigned char* bytes = reinterpret_cast<const unsigned char*>(row);
    for (std::size_t i = 0; i < d * sizeof(double); ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Test-side multinomial logistic regression on raw inputs: full-batch
// gradient descent with a bias column, no regularization. Written against
// plain arrays on purpose — it is the oracle, not the library.
double oracle_lr_accuracy(const SplitData& train, const SplitData& test, std::size_t k) {
    std::size_t n = train.size(), d = train.x.cols();
    std::vector<double> w((d + 1) * k, 0.0); // row-major (d+1) x k, last row = bias
    std::vector<double> logits(k), probs(k), grad((d + 1) * k);
    const double lr = 0.5;
    for (int iter = 0; iter < 400; ++iter) {
        std::fill(grad.begin(), grad.end(), 0.0);
        for (std::size_t r = 0; r < n; ++r) {
            const double* x = train.x.values.data() + r * d;
            for (std::size_t c = 0; c < k; ++c) {
                double z = w[d * k + c]; // bias
                for (std::size_t j = 0; j < d; ++j) z += x[j] * w[j * k + c];
                logits[c] = z;
            }
            double m = *std::max_element(logits.begin(), logits.end());
            double s = 0.0;
            for (std::size_t c = 0; c < k; ++c) {
                probs[c] = std::exp(logits[c] - m);
                s += probs[c];
            }
            for (std::size_t c = 0; c < k; ++c) {
                double delta = probs[c] / s - (static_cast<int>(c) == train.labels[r] ? 1.0 : 0.0);
                for (std::size_t j = 0; j < d; ++j) grad[j * k + c] += delta * x[j];
                grad[d * k + c] += delta;
            }
        }
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * grad[i] / static_cast<double>(n);
    }
    std::size_t correct = 0;
    for (std::size_t r = 0; r < test.size(); ++r) {
        const double* x = test.x.values.data() + r * d;
        std::size_t best = 0;
        double best_z = -1e300;
        for (std::size_t c = 0; c < k; ++c) {
            double z = w[d * k + c];
            for (std::size_t j = 0; j < d; ++j) z += x[j] * w[j * k + c];
            if (z > best_z) {
                best_z = z;
                best = c;
            }
        }
        if (static_cast<int>(best) == test.labels[r]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(test.size());
}

} // namespace

// ---------------------------------------------------------------------------
// universe

TEST_CASE("universe: same seed and sizes give byte-identical means") {
    ConceptUniverse a = make_universe(123);
    ConceptUniverse b = make_universe(123);
    REQUIRE(bit_equal(a.concept_means.values, b.concept_means.values));
    ConceptUniverse c = make_universe(124);
    REQUIRE_FALSE(bit_equal(a.concept_means.values, c.concept_means.values));
}

TEST_CASE("universe: minimal size produces four unit-norm means") {
    ConceptUniverse u = make_universe(7, 4, 4);
    REQUIRE(u.concept_means.shape == Shape{4, 4});
    for (std::size_t c = 0; c < 4; ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < 4; ++j) s += u.concept_means.at(c, j) * u.concept_means.at(c, j);
        REQUIRE_THAT(std::sqrt(s), Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
    REQUIRE_THROWS_AS(make_universe(7, 3, 4), ShapeError);
    REQUIRE_THROWS_AS(make_universe(7, 4, 3), ShapeError);
}

TEST_CASE("universe: exhaustive pair scan stays below cosine 0.97") {
    ConceptUniverse u = make_universe(2026);
    REQUIRE(u.num_concepts == 40);
    REQUIRE(u.input_dim == 32);
    double worst = -1.0;
    for (std::size_t a = 0; a < u.num_concepts; ++a) {
        double norm = 0.0;
        for (std::size_t j = 0; j < u.input_dim; ++j) norm += u.concept_means.at(a, j) * u.concept_means.at(a, j);
        REQUIRE_THAT(std::sqrt(norm), Catch::Matchers::WithinAbs(1.0, 1e-12));
        for (std::size_t b = a + 1; b < u.num_concepts; ++b)
            worst = std::max(worst, row_cosine(u.concept_means, a, b));
    }
    REQUIRE(worst < 1.0 - 0.03); // min pairwise cosine distance > 0.03
}

// ---------------------------------------------------------------------------
// tasks

TEST_CASE("task: degenerate generator collapses every sample onto its class point") {
    ConceptUniverse u = make_universe(55, 8, 6);
    u.within_concept_scale = 0.0;
    TaskDataset t = make_task(u, "degenerate", {1, 3, 5}, 9, 0.0, 6, 3, 3);

    // Expected class point: transform(mean) + shift, computed independently.
    for (std::size_t r = 0; r < t.train.size(); ++r) {
        std::size_t mean_row = static_cast<std::size_t>(t.concept_ids[static_cast<std::size_t>(t.train.labels[r])]);
        for (std::size_t i = 0; i < u.input_dim; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < u.input_dim; ++j)
                acc += t.style_transform.at(i, j) * u.concept_means.at(mean_row, j);
            acc += t.style_shift.values[i];
            REQUIRE(t.train.x.at(r, i) == acc);
        }
    }
}

TEST_CASE("task: n_train equal to K gives exactly one sample per class") {
    ConceptUniverse u = make_universe(56, 8, 6);
    TaskDataset t = make_task(u, "tiny", {0, 2, 4, 6}, 10, 0.05, 4, 4, 4);
    REQUIRE(t.train.labels == std::vector<int>{0, 1, 2, 3});
}

TEST_CASE("task: identical seeds rebuild identical datasets") {
    ConceptUniverse u = make_universe(57);
    TaskDataset a = make_task(u, "t", {1, 2, 3, 4, 5, 6, 7, 8}, 11, 0.05, 80, 24, 40);
    TaskDataset b = make_task(u, "t", {1, 2, 3, 4, 5, 6, 7, 8}, 11, 0.05, 80, 24, 40);
    REQUIRE(bit_equal(a.train.x.values, b.train.x.values));
    REQUIRE(bit_equal(a.val.x.values, b.val.x.values));
    REQUIRE(bit_equal(a.test.x.values, b.test.x.values));
    REQUIRE(a.train.labels == b.train.labels);
    REQUIRE(bit_equal(a.style_shift.values, b.style_shift.values));
    REQUIRE(bit_equal(a.style_transform.values, b.style_transform.values));

    TaskDataset c = make_task(u, "t", {1, 2, 3, 4, 5, 6, 7, 8}, 12, 0.05, 80, 24, 40);
    REQUIRE_FALSE(bit_equal(a.train.x.values, c.train.x.values));
}

TEST_CASE("task: class counts differ by at most one and come out class-major") {
    ConceptUniverse u = make_universe(58);
    TaskDataset t = make_task(u, "bal", {0, 1, 2}, 13, 0.05, 11, 5, 7);
    std::vector<int> counts(3, 0);
    int prev = -1;
    for (int l : t.train.labels) {
        REQUIRE(l >= prev); // class-major order
        prev = l;
        ++counts[static_cast<std::size_t>(l)];
    }
    REQUIRE(counts == std::vector<int>{4, 4, 3});
    int mn = *std::min_element(counts.begin(), counts.end());
    int mx = *std::max_element(counts.begin(), counts.end());
    REQUIRE(mx - mn <= 1);
}

TEST_CASE("task: style transform is orthogonal") {
    ConceptUniverse u = make_universe(59);
    TaskDataset t = make_task(u, "orth", {0, 1}, 14, 0.0, 2, 2, 2);
    const Tensor& q = t.style_transform;
    for (std::size_t a = 0; a < u.input_dim; ++a)
        for (std::size_t b = 0; b < u.input_dim; ++b) {
            double dot = 0.0;
            for (std::size_t r = 0; r < u.input_dim; ++r) dot += q.at(r, a) * q.at(r, b);
            REQUIRE_THAT(dot, Catch::Matchers::WithinAbs(a == b ? 1.0 : 0.0, 1e-12));
        }
}

TEST_CASE("task: argument validation") {
    ConceptUniverse u = make_universe(60, 8, 6);
    REQUIRE_THROWS_AS(make_task(u, "x", {0, 99}, 1, 0.05, 8, 8, 8), ShapeError);
    REQUIRE_THROWS_AS(make_task(u, "x", {0}, 1, 0.05, 8, 8, 8), ShapeError);
    REQUIRE_THROWS_AS(make_task(u, "x", {0, 1, 2}, 1, 0.05, 2, 8, 8), ShapeError);
    REQUIRE_THROWS_AS(make_task(u, "x", {0, 1}, 1, -0.5, 8, 8, 8), TensorError);
}

TEST_CASE("task: train/val/test draw from distinct streams and never share rows") {
    ConceptUniverse u = make_universe(61);
    // The three split streams have distinct keys by construction.
    std::uint64_t kt = detail::stream_key(u.seed, "split/train");
    std::uint64_t kv = detail::stream_key(u.seed, "split/val");
    std::uint64_t ks = detail::stream_key(u.seed, "split/test");
    REQUIRE(kt != kv);
    REQUIRE(kv != ks);
    REQUIRE(kt != ks);

    TaskDataset t = make_task(u, "disjoint", {0, 1, 2, 3, 4, 5, 6, 7}, 15, 0.05, 800, 200, 400);
    auto collect = [&](const SplitData& s) {
        std::set<std::uint64_t> hashes;
        for (std::size_t r = 0; r < s.size(); ++r)
            hashes.insert(hash_row(s.x.values.data() + r * u.input_dim, u.input_dim));
        return hashes;
    };
    std::set<std::uint64_t> train_h = collect(t.train), val_h = collect(t.val), test_h = collect(t.test);
    for (std::uint64_t h : val_h) REQUIRE(train_h.count(h) == 0);
    for (std::uint64_t h : test_h) {
        REQUIRE(train_h.count(h) == 0);
        REQUIRE(val_h.count(h) == 0);
    }
}

TEST_CASE("task: raw-input logistic regression separates any default 8-concept task") {
    ConceptUniverse u = make_universe(2026);
    // Three different concept subsets and style seeds, worst allowed noise.
    std::vector<std::vector<int>> subsets{
        {0, 1, 2, 3, 4, 5, 6, 7},
        {8, 12, 16, 20, 24, 28, 32, 36},
        {5, 11, 17, 23, 29, 35, 39, 2},
    };
    for (std::size_t i = 0; i < subsets.size(); ++i) {
        TaskDataset t = make_task(u, "sep" + std::to_string(i), subsets[i],
                                  100 + i, 0.1, 800, 200, 400);
        double acc = oracle_lr_accuracy(t.train, t.test, 8);
        INFO("subset " << i << " accuracy " << acc);
        REQUIRE(acc >= 0.95);
    }
}

// ---------------------------------------------------------------------------
// pretrain corpus

TEST_CASE("pretrain corpus: sizes, determinism, identity style") {
    ConceptUniverse u = make_universe(77);
    TaskDataset c = make_pretrain_corpus(u, 50, 5);
    REQUIRE(c.train.size() == 2000);
    REQUIRE(c.train.x.shape == Shape{2000, 32});
    REQUIRE(c.val.size() > 0);
    REQUIRE(c.test.size() > 0);
    REQUIRE(c.concept_ids.size() == 40);
    for (std::size_t i = 0; i < 40; ++i) REQUIRE(c.concept_ids[i] == static_cast<int>(i));
    for (double v : c.style_shift.values) REQUIRE(v == 0.0);

    TaskDataset c2 = make_pretrain_corpus(u, 50, 5);
    REQUIRE(bit_equal(c.train.x.values, c2.train.x.values));
    REQUIRE_THROWS_AS(make_pretrain_corpus(u, 1, 5), ShapeError);
}

TEST_CASE("pretrain corpus: class-conditional means approach the concept means") {
    ConceptUniverse u = make_universe(78);
    const std::size_t n_per = 200;
    TaskDataset c = make_pretrain_corpus(u, n_per, 6);
    // RMS per-coordinate error of the class mean should sit well inside
    // 3*sigma/sqrt(n); the estimator's RMS error concentrates at sigma/sqrt(n).
    double bound = 3.0 * u.within_concept_scale / std::sqrt(static_cast<double>(n_per));
    std::vector<std::vector<double>> sums(40, std::vector<double>(32, 0.0));
    std::vector<std::size_t> counts(40, 0);
    for (std::size_t r = 0; r < c.train.size(); ++r) {
        auto concept_row = static_cast<std::size_t>(c.train.labels[r]);
        ++counts[concept_row];
        for (std::size_t j = 0; j < 32; ++j) sums[concept_row][j] += c.train.x.at(r, j);
    }
    for (std::size_t concept_row = 0; concept_row < 40; ++concept_row) {
        REQUIRE(counts[concept_row] == n_per);
        double sq = 0.0;
        for (std::size_t j = 0; j < 32; ++j) {
            double err = sums[concept_row][j] / static_cast<double>(n_per) -
                         u.concept_means.at(concept_row, j);
            sq += err * err;
        }
        REQUIRE(std::sqrt(sq / 32.0) < bound);
    }
}

// ---------------------------------------------------------------------------
// CSV dump

TEST_CASE("dataset csv dump: schema, row count, and 17-digit round-trip") {
    ConceptUniverse u = make_universe(79, 8, 6);
    TaskDataset t = make_task(u, "csv", {0, 1, 2}, 16, 0.05, 6, 3, 3);
    std::ostringstream out;
    dump_dataset_csv(t, out);
    std::istringstream in(out.str());
    std::string line;
    REQUIRE(std::getline(in, line));
    REQUIRE(line == "split,label,x_0,x_1,x_2,x_3,x_4,x_5");
    std::size_t rows = 0;
    std::string first_data;
    while (std::getline(in, line)) {
        if (rows == 0) first_data = line;
        ++rows;
    }
    REQUIRE(rows == 6 + 3 + 3);
    REQUIRE(first_data.substr(0, 8) == "train,0,");
    // Round-trip the first value through strtod: 17 significant digits must
    // reproduce the exact double.
    std::size_t comma = first_data.find(',', 8);
    std::string field = first_data.substr(8, comma - 8);
    REQUIRE(std::strtod(field.c_str(), nullptr) == t.train.x.at(0, 0));
}
