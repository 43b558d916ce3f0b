// Contrastive pre-training: InfoNCE against a brute-force oracle, training
// determinism, the zero-shot sanity gate, and persistence.

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstring>
#include <map>
#include <set>

#include "forgetlab/grad_check.hpp"
#include "forgetlab/pretrain.hpp"

using namespace forgetlab;

namespace {

bool bit_equal(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

Tensor random_matrix(std::size_t n, std::size_t d, std::uint64_t seed, const char* stream) {
    KeyedRng rng(seed, stream);
    Tensor t = Tensor::zeros({n, d});
    for (double& v : t.values) v = rng.gaussian();
    return t;
}

// Brute-force reimplementation of the symmetric InfoNCE with plain loops and
// materialized softmax probabilities. This is the oracle the fused op must
// match.
double oracle_infonce(const Tensor& emb, const Tensor& table, const std::vector<int>& labels,
                      double tau) {
    std::size_t n = emb.rows(), m = table.rows(), d = emb.cols();
    auto normalize = [&](const Tensor& t) {
        std::vector<std::vector<double>> rows(t.rows(), std::vector<double>(t.cols()));
        for (std::size_t r = 0; r < t.rows(); ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < t.cols(); ++c) s += t.at(r, c) * t.at(r, c);
            double denom = std::max(std::sqrt(s), 1e-12);
            for (std::size_t c = 0; c < t.cols(); ++c) rows[r][c] = t.at(r, c) / denom;
        }
        return rows;
    };
    auto e = normalize(emb);
    auto w = normalize(table);

    // direction 1: sample -> concept over the whole table
    double dir1 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> p(m);
        double mx = -1e300;
        for (std::size_t c = 0; c < m; ++c) {
            double dot = 0.0;
            for (std::size_t k = 0; k < d; ++k) dot += e[i][k] * w[c][k];
            p[c] = dot / tau;
            mx = std::max(mx, p[c]);
        }
        double z = 0.0;
        for (std::size_t c = 0; c < m; ++c) z += std::exp(p[c] - mx);
        dir1 += -(p[static_cast<std::size_t>(labels[i])] - mx - std::log(z));
    }
    dir1 /= static_cast<double>(n);

    // direction 2: represented concept -> samples; all samples of that
    // concept are positives (softmax mass summed over them)
    std::set<int> present(labels.begin(), labels.end());
    double dir2 = 0.0;
    for (int c : present) {
        std::vector<double> p(n);
        double mx = -1e300;
        for (std::size_t j = 0; j < n; ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < d; ++k) dot += w[static_cast<std::size_t>(c)][k] * e[j][k];
            p[j] = dot / tau;
            mx = std::max(mx, p[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += std::exp(p[j] - mx);
        double pos_mass = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            if (labels[j] == c) pos_mass += std::exp(p[j] - mx) / z;
        dir2 += -std::log(pos_mass);
    }
    dir2 /= static_cast<double>(present.size());
    return 0.5 * (dir1 + dir2);
}

ConceptUniverse small_universe() { return make_universe(301, 8, 8); }

EncoderSpec small_spec() {
    EncoderSpec spec;
    spec.input_dim = 8;
    spec.hidden_widths = {12, 12};
    spec.embed_dim = 8;
    spec.tap_layers = {0, 1, 2};
    return spec;
}

} // namespace

// ---------------------------------------------------------------------------
// infonce

TEST_CASE("infonce: single sample against a single concept costs nothing") {
    ConceptEmbedder emb;
    emb.table = Tensor({1, 4}, {0.3, -0.1, 0.9, 0.2});
    emb.temperature = 0.07;
    Tensor e({1, 4}, {1.0, 2.0, -0.5, 0.0});
    REQUIRE(infonce_loss(e, emb, {0}) == 0.0);
}

TEST_CASE("infonce matches the brute-force oracle on random batches") {
    for (std::uint64_t seed : {401, 402, 403}) {
        Tensor e = random_matrix(9, 5, seed, "emb");
        ConceptEmbedder emb;
        emb.table = random_matrix(6, 5, seed, "table");
        emb.temperature = 0.07;
        KeyedRng lr(seed, "labels");
        std::vector<int> labels;
        for (int i = 0; i < 9; ++i) labels.push_back(static_cast<int>(lr.below(6)));
        double got = infonce_loss(e, emb, labels);
        double want = oracle_infonce(e, emb.table, labels, emb.temperature);
        REQUIRE(got >= 0.0);
        REQUIRE_THAT(got, Catch::Matchers::WithinAbs(want, 1e-12));

        emb.temperature = 1.3;
        REQUIRE_THAT(infonce_loss(e, emb, labels),
                     Catch::Matchers::WithinAbs(oracle_infonce(e, emb.table, labels, 1.3), 1e-12));
    }
}

TEST_CASE("infonce rejects bad labels and temperatures") {
    Tensor e = random_matrix(3, 4, 405, "emb");
    ConceptEmbedder emb;
    emb.table = random_matrix(5, 4, 405, "table");
    emb.temperature = 0.07;
    REQUIRE_THROWS_AS(infonce_loss(e, emb, {0, 1, 5}), ShapeError);
    REQUIRE_THROWS_AS(infonce_loss(e, emb, {0, -1, 2}), ShapeError);
    REQUIRE_THROWS_AS(infonce_loss(e, emb, {0, 1}), ShapeError);
    emb.temperature = 0.0;
    REQUIRE_THROWS_AS(infonce_loss(e, emb, {0, 1, 2}), TensorError);
    ConceptEmbedder narrow;
    narrow.table = random_matrix(5, 3, 405, "t2");
    narrow.temperature = 0.07;
    REQUIRE_THROWS_AS(infonce_loss(e, narrow, {0, 1, 2}), ShapeError);
}

TEST_CASE("infonce gradients pass finite differences through both towers") {
    Tensor e = random_matrix(6, 4, 406, "emb");
    e.requires_grad = true;
    Tensor table = random_matrix(5, 4, 406, "table");
    table.requires_grad = true;
    std::vector<int> labels{0, 1, 1, 4, 2, 0};
    auto build = [labels](Tape& t, const std::vector<Tape::Var>& v) {
        return infonce_on_tape(t, v[0], v[1], labels, 0.2);
    };
    REQUIRE(max_rel_grad_err({e, table}, build) < 1e-5);
}

// ---------------------------------------------------------------------------
// pretraining loop

TEST_CASE("pretrain with zero epochs returns the raw initialization") {
    ConceptUniverse u = small_universe();
    EncoderSpec spec = small_spec();
    PretrainConfig cfg;
    cfg.epochs = 0;
    cfg.corpus_per_concept = 4;
    cfg.seed = 5;
    FoundationModel fm = pretrain(u, spec, cfg);

    ModelSnapshot init = init_encoder(spec, 5);
    REQUIRE(fm.encoder.params.size() == init.params.size());
    for (std::size_t i = 0; i < init.params.size(); ++i)
        REQUIRE(bit_equal(fm.encoder.params[i].tensor.values, init.params[i].tensor.values));

    Tensor table = random_matrix(8, 8, 5, "init/emb.table");
    Tensor expect = l2_normalize_rows_value(l2_normalize_rows_value(table));
    REQUIRE(bit_equal(fm.embedder.table.values, expect.values));
}

TEST_CASE("pretrain is deterministic in its seed") {
    ConceptUniverse u = small_universe();
    EncoderSpec spec = small_spec();
    PretrainConfig cfg;
    cfg.epochs = 30;
    cfg.corpus_per_concept = 6;
    cfg.batch_size = 16;
    cfg.learning_rate = 0.05; // tiny corpus needs a hotter schedule to clear the gate
    cfg.seed = 6;
    std::vector<double> l1, l2;
    FoundationModel a = pretrain(u, spec, cfg, &l1);
    FoundationModel b = pretrain(u, spec, cfg, &l2);
    REQUIRE(l1 == l2);
    REQUIRE(bit_equal(a.embedder.table.values, b.embedder.table.values));
    for (std::size_t i = 0; i < a.encoder.params.size(); ++i)
        REQUIRE(bit_equal(a.encoder.params[i].tensor.values, b.encoder.params[i].tensor.values));

    PretrainConfig other = cfg;
    other.seed = 7;
    FoundationModel c = pretrain(u, spec, other);
    REQUIRE_FALSE(bit_equal(a.embedder.table.values, c.embedder.table.values));
}

TEST_CASE("default pretraining clears the zero-shot gate and keeps improving") {
    ConceptUniverse u = make_universe(2026);
    EncoderSpec spec; // defaults: 32 -> 64x4 -> 32
    PretrainConfig cfg;
    cfg.seed = 1;
    std::vector<double> losses;
    FoundationModel fm = pretrain(u, spec, cfg, &losses);

    // Loss strictly decreases across the first five epochs (per-epoch mean).
    REQUIRE(losses.size() == cfg.epochs);
    for (std::size_t e = 1; e < 5; ++e) REQUIRE(losses[e] < losses[e - 1]);
    for (double l : losses) REQUIRE(l >= 0.0);

    // Prototype rows are unit-norm after the final renormalization.
    for (std::size_t r = 0; r < fm.embedder.table.rows(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < fm.embedder.table.cols(); ++c)
            s += fm.embedder.table.at(r, c) * fm.embedder.table.at(r, c);
        REQUIRE_THAT(std::sqrt(s), Catch::Matchers::WithinAbs(1.0, 1e-9));
    }

    // The gate already passed inside pretrain; verify independently on a
    // *different* fresh identity-style task.
    TaskDataset probe = make_identity_task(u, "probe", {1, 6, 11, 16, 21, 26, 31, 36},
                                           999, 16, 16, 400);
    double acc = zs_accuracy(spec, fm.encoder, fm.embedder, probe, probe.test);
    INFO("independent ZS accuracy " << acc);
    REQUIRE(acc >= 0.85);
    REQUIRE(fm.attempts >= 1);
}

// ---------------------------------------------------------------------------
// persistence

TEST_CASE("foundation model round-trips through blob plus sidecar") {
    ConceptUniverse u = small_universe();
    EncoderSpec spec = small_spec();
    PretrainConfig cfg;
    cfg.epochs = 30;
    cfg.corpus_per_concept = 6;
    cfg.batch_size = 16;
    cfg.learning_rate = 0.05;
    cfg.seed = 8;
    FoundationModel fm = pretrain(u, spec, cfg);

    std::string prefix = "foundation_io_test";
    save_foundation(fm, prefix);
    FoundationModel back = load_foundation(prefix);

    REQUIRE(back.config.epochs == cfg.epochs);
    REQUIRE(back.config.temperature == cfg.temperature);
    REQUIRE(back.config.seed == cfg.seed);
    REQUIRE(back.universe_seed == u.seed);
    REQUIRE(back.spec.hidden_widths == spec.hidden_widths);
    REQUIRE(back.spec.tap_layers == spec.tap_layers);
    REQUIRE(to_string(back.spec.activation) == to_string(spec.activation));
    REQUIRE(bit_equal(back.embedder.table.values, fm.embedder.table.values));
    REQUIRE(back.encoder.params.size() == fm.encoder.params.size());
    for (std::size_t i = 0; i < fm.encoder.params.size(); ++i) {
        REQUIRE(back.encoder.params[i].name == fm.encoder.params[i].name);
        REQUIRE(bit_equal(back.encoder.params[i].tensor.values,
                          fm.encoder.params[i].tensor.values));
    }

    std::remove((prefix + ".snap").c_str());
    std::remove((prefix + ".json").c_str());
    REQUIRE_THROWS_AS(load_foundation(prefix), IoError);
}

TEST_CASE("identity task generation is deterministic and unstyled") {
    ConceptUniverse u = small_universe();
    TaskDataset a = make_identity_task(u, "id", {0, 2, 4}, 77, 6, 3, 9);
    TaskDataset b = make_identity_task(u, "id", {0, 2, 4}, 77, 6, 3, 9);
    REQUIRE(bit_equal(a.train.x.values, b.train.x.values));
    REQUIRE(bit_equal(a.test.x.values, b.test.x.values));
    REQUIRE(a.style_transform.size() == 0);
    for (double v : a.style_shift.values) REQUIRE(v == 0.0);
    REQUIRE(a.test.size() == 9);
    REQUIRE_THROWS_AS(make_identity_task(u, "id", {0, 99}, 1, 4, 4, 4), ShapeError);
}
