#pragma once
// Built-in self-checks, shared by the command-line `verify` verb and the
// acceptance harness: every per-step loss graph against central differences,
// every reported metric against a brute-force reimplementation, and the
// degenerate configurations whose outcomes are forced by construction.

#include <cmath>
#include <cstdio>
#include <cstring>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "forgetlab/finetune.hpp"
#include "forgetlab/grad_check.hpp"
#include "forgetlab/pretrain.hpp"

namespace forgetlab {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

namespace detail {

inline std::string fmt_err(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2e", v);
    return buf;
}

inline Tensor chk_random(std::vector<std::size_t> shape, std::uint64_t seed, const char* key) {
    Tensor t = Tensor::zeros(std::move(shape));
    KeyedRng rng(seed, key);
    for (double& v : t.values) v = rng.gaussian();
    return t;
}

// Two hidden layers, taps on every layer: small enough for exhaustive
// finite differences, deep enough that multi-tap penalties are nontrivial.
inline EncoderSpec chk_spec() {
    EncoderSpec s;
    s.input_dim = 10;
    s.hidden_widths = {8, 7};
    s.embed_dim = 6;
    s.tap_layers = {0, 1, 2};
    return s;
}

inline ModelSnapshot chk_snapshot(std::uint64_t seed) {
    ModelSnapshot snap = init_encoder(chk_spec(), seed);
    Tensor table = l2_normalize_rows_value(chk_random({12, 6}, seed, "table"));
    snap.params.push_back({kEmbedderParamName, std::move(table)});
    return snap;
}

inline bool chk_params_equal(const ModelSnapshot& a, const ModelSnapshot& b) {
    if (!a.schema_matches(b)) return false;
    for (std::size_t i = 0; i < a.params.size(); ++i) {
        const auto& va = a.params[i].tensor.values;
        const auto& vb = b.params[i].tensor.values;
        if (std::memcmp(va.data(), vb.data(), va.size() * sizeof(double)) != 0) return false;
    }
    return true;
}

// Symmetric InfoNCE with plain loops and materialized softmax probabilities,
// independent of the tape ops the production loss is built from.
inline double chk_infonce_reference(const Tensor& emb, const Tensor& table,
                                    const std::vector<int>& labels, double tau) {
    std::size_t n = emb.rows(), m = table.rows(), d = emb.cols();
    auto normalize = [&](const Tensor& t) {
        std::vector<std::vector<double>> rows(t.rows(), std::vector<double>(t.cols()));
        for (std::size_t r = 0; r < t.rows(); ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < t.cols(); ++c) s += t.at(r, c) * t.at(r, c);
            double denom = std::max(std::sqrt(s), kNormGuard);
            for (std::size_t c = 0; c < t.cols(); ++c) rows[r][c] = t.at(r, c) / denom;
        }
        return rows;
    };
    auto e = normalize(emb);
    auto w = normalize(table);

    // sample -> concept over the full table
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

    // represented concept -> samples, all same-class samples positive
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
        double pos = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            if (labels[j] == c) pos += std::exp(p[j] - mx) / z;
        dir2 += -std::log(pos);
    }
    dir2 /= static_cast<double>(present.size());
    return 0.5 * (dir1 + dir2);
}

// Per-sample feature distance with its own normalization loops: encodes one
// row at a time and concatenates tap segments by hand.
inline double chk_feature_distance_reference(const EncoderSpec& spec, const ModelSnapshot& cur,
                                             const ModelSnapshot& org, const Tensor& batch_x,
                                             bool last_layer_only) {
    std::size_t n = batch_x.rows(), d = batch_x.cols();
    auto phi_row = [&](const ModelSnapshot& m, std::size_t i) {
        Tensor xi = Tensor::zeros({1, d});
        std::copy(batch_x.values.begin() + i * d, batch_x.values.begin() + (i + 1) * d,
                  xi.values.begin());
        EncodeResult enc = encode(spec, m, xi);
        std::vector<Tensor> segs;
        if (last_layer_only)
            segs.push_back(enc.embedding);
        else
            segs = enc.taps;
        std::vector<double> phi;
        for (const Tensor& seg : segs) {
            double s = 0.0;
            for (double v : seg.values) s += v * v;
            double denom = std::max(std::sqrt(s), kNormGuard);
            for (double v : seg.values) phi.push_back(v / denom);
        }
        return phi;
    };
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> pc = phi_row(cur, i), po = phi_row(org, i);
        for (std::size_t j = 0; j < pc.size(); ++j) {
            double diff = pc[j] - po[j];
            total += diff * diff;
        }
    }
    return total / static_cast<double>(n);
}

} // namespace detail

// ---------------------------------------------------------------------------
// 1. Gradients: all eight per-step loss graphs vs central differences

// Fresh random batch per method; FD step 1e-5 because the L2SP term makes
// the loss O(10) and a smaller step would sit at the roundoff floor.
inline CheckResult check_gradients(double tol = 1e-5) {
    CheckResult res;
    res.name = "gradients";

    EncoderSpec spec = detail::chk_spec();
    ModelSnapshot origin_snap = detail::chk_snapshot(42);
    ModelSnapshot current = detail::chk_snapshot(43);
    std::vector<std::string> names;
    for (const ParamEntry& p : current.params)
        if (p.name.rfind(kEncoderPrefix, 0) == 0) names.push_back(p.name);

    detail::FrozenOrigin origin;
    origin.start = &origin_snap;
    origin.table = origin_snap.find(kEmbedderParamName);
    origin.temperature = 0.07;

    struct Case {
        FinetuneMethod method;
        bool flyp_head;
    };
    const Case cases[] = {
        {FinetuneMethod::zs_init_ce, false},    {FinetuneMethod::lp_init_l2sp, false},
        {FinetuneMethod::lp_init_ldifs, false}, {FinetuneMethod::ldifs_last_layer, false},
        {FinetuneMethod::lwf, false},           {FinetuneMethod::lfl, false},
        {FinetuneMethod::flyp, true},           {FinetuneMethod::flyp_ce, true},
    };

    double worst = 0.0;
    std::string worst_method = "-";
    for (std::size_t i = 0; i < std::size(cases); ++i) {
        const Case& c = cases[i];
        std::uint64_t seed = 300 + i;
        Tensor bx = detail::chk_random({8, 10}, seed, "x");
        KeyedRng label_rng(seed, "y");
        std::vector<int> by(8);
        for (int& y : by) y = static_cast<int>(label_rng.below(4));
        Tensor head = detail::chk_random({6, 4}, seed, "head");
        Tensor slice = detail::chk_random({4, 6}, seed, "slice");

        FinetuneConfig cfg;
        cfg.method = c.method;
        cfg.lambda_l2sp = 0.7;
        cfg.lambda_ldifs = 3.0;
        LossBuilder build = [&, cfg](Tape& tape, const std::vector<Tape::Var>& vars) {
            ParamVars pv;
            for (std::size_t j = 0; j < names.size(); ++j) pv[names[j]] = vars[j];
            return detail::build_step_loss(tape, spec, cfg, pv, names, vars.back(), bx, by, origin)
                .total;
        };
        std::vector<Tensor> inputs;
        for (const std::string& n : names) {
            inputs.push_back(current.find(n));
            inputs.back().requires_grad = true;
        }
        inputs.push_back(c.flyp_head ? slice : head);
        inputs.back().requires_grad = true;

        double err = max_rel_grad_err(inputs, build, 1e-5);
        if (err > worst) {
            worst = err;
            worst_method = to_string(c.method);
        }
    }

    res.pass = worst < tol;
    res.detail = "worst rel err " + detail::fmt_err(worst) + " (" + worst_method +
                 ") over 8 methods, tol " + detail::fmt_err(tol);
    return res;
}

// ---------------------------------------------------------------------------
// 2. Metric oracles: reported numbers vs brute-force reimplementations

inline CheckResult check_metric_oracles(double tol = 1e-9) {
    CheckResult res;
    res.name = "metric oracles";

    double worst = 0.0;
    std::string worst_metric = "-";
    std::size_t instances = 0;
    auto consider = [&](const char* metric, double got, double want) {
        double err = std::fabs(got - want);
        ++instances;
        if (err > worst) {
            worst = err;
            worst_metric = metric;
        }
    };

    EncoderSpec spec = detail::chk_spec();

    // param_sq_distance: naive sum over encoder-prefixed entries only
    for (std::uint64_t k = 0; k < 20; ++k) {
        ModelSnapshot a = detail::chk_snapshot(1000 + k);
        ModelSnapshot b = detail::chk_snapshot(2000 + k);
        double naive = 0.0;
        for (std::size_t i = 0; i < a.params.size(); ++i) {
            if (a.params[i].name.rfind(kEncoderPrefix, 0) != 0) continue;
            const auto& va = a.params[i].tensor.values;
            const auto& vb = b.params[i].tensor.values;
            for (std::size_t j = 0; j < va.size(); ++j) {
                double d = va[j] - vb[j];
                naive += d * d;
            }
        }
        consider("param_sq_distance", param_sq_distance(a, b), naive);
    }

    // feature_distance: per-row encode + hand-rolled normalization, both modes
    for (std::uint64_t k = 0; k < 20; ++k) {
        ModelSnapshot cur = detail::chk_snapshot(3000 + k);
        ModelSnapshot org = detail::chk_snapshot(4000 + k);
        Tensor bx = detail::chk_random({5, 10}, 5000 + k, "fx");
        bool last_only = (k % 2) == 1;
        consider("feature_distance", feature_distance(spec, cur, org, bx, last_only),
                 detail::chk_feature_distance_reference(spec, cur, org, bx, last_only));
    }

    // infonce_loss: materialized-softmax reference at varying shapes
    for (std::uint64_t k = 0; k < 20; ++k) {
        std::size_t n = 3 + k % 6, m = 4 + k % 5, d = 5 + k % 4;
        Tensor emb = detail::chk_random({n, d}, 6000 + k, "emb");
        ConceptEmbedder embedder;
        embedder.table = detail::chk_random({m, d}, 6000 + k, "tbl");
        embedder.temperature = 0.05 + 0.01 * static_cast<double>(k);
        KeyedRng lrng(6000 + k, "lbl");
        std::vector<int> labels(n);
        for (int& l : labels) l = static_cast<int>(lrng.below(m));
        consider("infonce_loss", infonce_loss(emb, embedder, labels),
                 detail::chk_infonce_reference(emb, embedder.table, labels,
                                               embedder.temperature));
    }

    // delta_lp / continual_delta_lp: recomposed from individual accuracies
    ConceptUniverse universe = make_universe(17, 12, 10);
    TaskDataset task = make_task(universe, "chk", {0, 2, 5, 7}, 303, 0.1, 48, 16, 24);
    ProbeConfig pc;
    pc.max_iters = 200;
    for (std::uint64_t k = 0; k < 20; ++k) {
        ModelSnapshot ft = detail::chk_snapshot(7000 + k);
        ModelSnapshot pre = detail::chk_snapshot(8000 + k);
        consider("delta_lp", delta_lp(spec, task, ft, pre, pc),
                 a_lp(spec, ft, task, pc) - a_lp(spec, pre, task, pc));
    }
    for (std::uint64_t k = 0; k < 20; ++k) {
        ModelSnapshot fin = detail::chk_snapshot(9000 + k);
        ModelSnapshot p0 = detail::chk_snapshot(9100 + k);
        ModelSnapshot p1 = detail::chk_snapshot(9200 + k);
        ModelSnapshot p2 = detail::chk_snapshot(9300 + k);
        double best = std::max({a_lp(spec, p0, task, pc), a_lp(spec, p1, task, pc),
                                a_lp(spec, p2, task, pc)});
        consider("continual_delta_lp",
                 continual_delta_lp(spec, task, fin, {&p0, &p1, &p2}, pc),
                 a_lp(spec, fin, task, pc) - best);
    }

    res.pass = worst < tol;
    res.detail = "worst abs err " + detail::fmt_err(worst) + " (" + worst_metric + ") over " +
                 std::to_string(instances) + " instances, tol " + detail::fmt_err(tol);
    return res;
}

// ---------------------------------------------------------------------------
// 3. Trivial cases: outcomes forced by construction

inline CheckResult check_trivial_cases() {
    CheckResult res;
    res.name = "trivial cases";
    std::vector<std::string> failed;
    auto expect = [&](bool ok, const char* what) {
        if (!ok) failed.emplace_back(what);
    };

    EncoderSpec spec = detail::chk_spec();
    ConceptUniverse universe = make_universe(17, 12, 10);
    TaskDataset task = make_task(universe, "triv", {0, 2, 5, 7}, 303, 0.1, 48, 16, 24);
    ModelSnapshot start = detail::chk_snapshot(42);
    ProbeConfig pc;
    pc.max_iters = 200;

    // lambda_LDIFS = 0 must reproduce plain LP-init CE bit for bit
    {
        FinetuneConfig ce;
        ce.method = FinetuneMethod::lp_init_ce;
        ce.epochs = 1;
        ce.batch_size = 16;
        ce.warmup_steps = 4;
        ce.checkpoint_fractions = {1.0};
        ce.seed = 5;
        FinetuneConfig ld = ce;
        ld.method = FinetuneMethod::lp_init_ldifs;
        ld.lambda_ldifs = 0.0;
        FinetuneTrajectory r_ce = finetune(spec, start, {task}, ce, pc);
        FinetuneTrajectory r_ld = finetune(spec, start, {task}, ld, pc);
        expect(detail::chk_params_equal(r_ce.final_snapshot, r_ld.final_snapshot),
               "ldifs0 params == ce params");
        bool logs = r_ce.loss_log.size() == r_ld.loss_log.size();
        for (std::size_t i = 0; logs && i < r_ce.loss_log.size(); ++i) {
            const LossRow &a = r_ce.loss_log[i], &b = r_ld.loss_log[i];
            logs = a.step == b.step && a.epoch == b.epoch && a.lr == b.lr &&
                   a.total == b.total && a.ce == b.ce && a.reg == b.reg;
        }
        expect(logs, "ldifs0 loss log == ce loss log");
    }

    // interpolation endpoints are exact copies
    {
        ModelSnapshot theta0 = detail::chk_snapshot(42);
        ModelSnapshot thetaF = detail::chk_snapshot(43);
        expect(detail::chk_params_equal(interpolate(theta0, thetaF, 1.0), theta0),
               "interpolate(1) == theta0");
        expect(detail::chk_params_equal(interpolate(theta0, thetaF, 0.0), thetaF),
               "interpolate(0) == thetaF");
    }

    // every distance and delta vanishes between a model and itself
    {
        expect(param_sq_distance(start, start) == 0.0, "param dist self == 0");
        expect(feature_distance(spec, start, start, task.test.x) == 0.0, "feat dist self == 0");
        expect(delta_lp(spec, task, start, start, pc) == 0.0, "delta_lp self == 0");
        expect(delta_zs(spec, task, start, start) == 0.0, "delta_zs self == 0");
    }

    // a zero-iteration probe IS the zero-shot head
    {
        ProbeConfig zero;
        zero.max_iters = 0;
        LinearHead probed = train_probe(spec, start, task, zero).head;
        LinearHead zs = head_from_embedder(embedder_from_snapshot(start), task.concept_ids);
        bool same = probed.weight.shape == zs.weight.shape &&
                    std::memcmp(probed.weight.values.data(), zs.weight.values.data(),
                                zs.weight.values.size() * sizeof(double)) == 0;
        expect(same, "0-iter probe head == zs head");
        expect(a_lp(spec, start, task, zero) == a_zs(spec, start, task), "0-iter a_lp == a_zs");
    }

    res.pass = failed.empty();
    if (res.pass) {
        res.detail = "10/10 forced outcomes held";
    } else {
        res.detail = "failed:";
        for (const std::string& f : failed) res.detail += " [" + f + "]";
    }
    return res;
}

// ---------------------------------------------------------------------------
// Driver

inline std::vector<CheckResult> run_all_checks() {
    return {check_gradients(), check_metric_oracles(), check_trivial_cases()};
}

// One line per check plus a verdict; true iff everything passed.
inline bool print_check_results(std::ostream& out, const std::vector<CheckResult>& results) {
    bool all = true;
    for (const CheckResult& r : results) {
        out << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << ": " << r.detail << "\n";
        all = all && r.pass;
    }
    out << (all ? "all checks passed" : "CHECKS FAILED") << "\n";
    return all;
}

} // namespace forgetlab
