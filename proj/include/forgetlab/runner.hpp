#pragma once

// Experiment runner: declarative plans, an append-only run registry, and the
// orchestration that turns many fine-tuning runs into one comparable table.
//
// A plan pins everything that matters: universe seed, foundation training,
// the task roster, fine-tune jobs, continual sequences, and the Wise-FT
// ablation. Given the same plan the runner reproduces every output byte;
// the only timestamps live in the registry. Runs flush metric records per
// checkpoint, so a crash loses at most the checkpoint in flight, and a
// rerun skips whatever the registry already marks completed.

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "datagen.hpp"
#include "evaluate.hpp"
#include "finetune.hpp"
#include "nets.hpp"
#include "pretrain.hpp"
#include "snapshot_io.hpp"

#include <nlohmann/json.hpp>

namespace forgetlab {

// ---------------------------------------------------------------------------
// Plan types

struct TaskSpec {
    std::string id;
    std::vector<int> concept_ids;
    std::uint64_t style_seed = 0;
    double noise_sigma = 0.1;
    std::size_t n_train = 800;
    std::size_t n_val = 200;
    std::size_t n_test = 400;
};

struct FinetuneJob {
    std::string run_id;
    FinetuneMethod method = FinetuneMethod::zs_init_ce;
    std::string ft_task;
    FinetuneConfig config; // complete, seed included
};

// One sequence entry expands into an independent pass per method; each pass
// chains stages so that a stage starts from the previous stage's final model.
struct SequenceJob {
    std::string id;
    std::vector<std::string> task_ids;
    std::vector<FinetuneMethod> methods;
};

struct WiseFtJob {
    std::string base_run; // single-task run supplying the two endpoints
    std::vector<double> alpha_grid;
};

namespace detail {

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline bool valid_id(const std::string& s) {
    if (s.empty()) return false;
    for (char c : s)
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.'))
            return false;
    return true;
}

} // namespace detail

// Seeds for individual runs are derived from the plan seed and a purpose
// string, never from execution order, so adding or removing jobs leaves
// every other run untouched.
inline std::uint64_t derived_seed(std::uint64_t plan_seed, const std::string& purpose) {
    return detail::fnv1a64(std::to_string(plan_seed) + "/" + purpose);
}

// The purpose string deliberately omits the run id: a one-task sequence
// stage and the plain single-task job for the same method and task derive
// the same seed and therefore the same trajectory.
inline std::uint64_t run_seed(std::uint64_t plan_seed, FinetuneMethod method,
                              const std::string& task_id) {
    return derived_seed(plan_seed, "finetune/" + to_string(method) + "/" + task_id);
}

struct ExperimentPlan {
    std::uint64_t seed = 1;
    std::string out_dir = "out";
    std::uint64_t universe_seed = 2026;
    std::size_t universe_concepts = 40;
    EncoderSpec encoder;
    PretrainConfig foundation;
    FinetuneConfig defaults; // used by sequences and as the base for jobs
    std::vector<TaskSpec> tasks;
    std::vector<std::string> eval_tasks;
    std::vector<FinetuneJob> jobs;
    std::vector<SequenceJob> sequences;
    std::vector<WiseFtJob> wiseft;

    const TaskSpec* find_task(const std::string& id) const {
        for (const TaskSpec& t : tasks)
            if (t.id == id) return &t;
        return nullptr;
    }

    const FinetuneJob* find_job(const std::string& run_id) const {
        for (const FinetuneJob& j : jobs)
            if (j.run_id == run_id) return &j;
        return nullptr;
    }

    void validate() const;
};

inline std::string sequence_stage_run_id(const SequenceJob& seq, FinetuneMethod m,
                                         std::size_t stage) {
    return seq.id + "-" + to_string(m) + "-k" + std::to_string(stage + 1);
}

inline std::string wiseft_run_id(const WiseFtJob& w) { return w.base_run + "-wiseft"; }

// Every run id the plan will produce, in the order their records enter
// metrics.csv: jobs first, then sequence stages, then Wise-FT rows.
inline std::vector<std::string> plan_run_order(const ExperimentPlan& plan) {
    std::vector<std::string> ids;
    for (const FinetuneJob& j : plan.jobs) ids.push_back(j.run_id);
    for (const SequenceJob& s : plan.sequences)
        for (FinetuneMethod m : s.methods)
            for (std::size_t k = 0; k < s.task_ids.size(); ++k)
                ids.push_back(sequence_stage_run_id(s, m, k));
    for (const WiseFtJob& w : plan.wiseft) ids.push_back(wiseft_run_id(w));
    return ids;
}

inline void ExperimentPlan::validate() const {
    if (out_dir.empty()) throw TensorError("plan: empty out_dir");
    if (universe_concepts < 4) throw TensorError("plan: universe needs at least 4 concepts");
    encoder.validate();
    defaults.validate();
    std::set<std::string> task_ids;
    for (const TaskSpec& t : tasks) {
        if (!detail::valid_id(t.id)) throw TensorError("plan: bad task id '" + t.id + "'");
        if (!task_ids.insert(t.id).second)
            throw TensorError("plan: duplicate task id '" + t.id + "'");
        for (int c : t.concept_ids)
            if (c < 0 || static_cast<std::size_t>(c) >= universe_concepts)
                throw TensorError("plan: task '" + t.id + "' references concept " +
                                  std::to_string(c) + " outside the universe");
        if (t.n_train == 0 || t.n_val == 0 || t.n_test == 0)
            throw TensorError("plan: task '" + t.id + "' has an empty split");
    }
    for (const std::string& e : eval_tasks)
        if (!find_task(e)) throw TensorError("plan: eval task '" + e + "' not in the roster");
    bool needs_evals = !jobs.empty() || !sequences.empty() || !wiseft.empty();
    if (needs_evals && eval_tasks.empty())
        throw TensorError("plan: jobs present but eval_tasks is empty");
    std::set<std::string> run_ids;
    auto claim = [&run_ids](const std::string& id) {
        if (!detail::valid_id(id)) throw TensorError("plan: bad run id '" + id + "'");
        if (!run_ids.insert(id).second)
            throw TensorError("plan: duplicate run id '" + id + "'");
    };
    for (const FinetuneJob& j : jobs) {
        claim(j.run_id);
        if (!find_task(j.ft_task))
            throw TensorError("plan: job '" + j.run_id + "' targets unknown task '" + j.ft_task +
                              "'");
        j.config.validate();
        if (j.config.method != j.method)
            throw TensorError("plan: job '" + j.run_id + "' method disagrees with its config");
    }
    for (const SequenceJob& s : sequences) {
        if (!detail::valid_id(s.id)) throw TensorError("plan: bad sequence id '" + s.id + "'");
        if (s.task_ids.empty())
            throw TensorError("plan: sequence '" + s.id + "' has no tasks");
        if (s.methods.empty())
            throw TensorError("plan: sequence '" + s.id + "' has no methods");
        for (const std::string& t : s.task_ids)
            if (!find_task(t))
                throw TensorError("plan: sequence '" + s.id + "' uses unknown task '" + t + "'");
        for (FinetuneMethod m : s.methods)
            for (std::size_t k = 0; k < s.task_ids.size(); ++k)
                claim(sequence_stage_run_id(s, m, k));
    }
    for (const WiseFtJob& w : wiseft) {
        if (!find_job(w.base_run))
            throw TensorError("plan: wise-ft entry references unknown job '" + w.base_run + "'");
        claim(wiseft_run_id(w));
        if (w.alpha_grid.empty())
            throw TensorError("plan: wise-ft entry for '" + w.base_run + "' has an empty grid");
        for (double a : w.alpha_grid)
            if (!(a >= 0.0 && a <= 1.0))
                throw TensorError("plan: wise-ft alpha " + std::to_string(a) +
                                  " outside [0, 1]");
    }
}

// ---------------------------------------------------------------------------
// Default plan: nine 8-concept tasks, every method on every task, three
// 3-task sequences for a representative method subset, and a Wise-FT
// ablation on the plain fine-tuning runs.

inline ExperimentPlan default_plan() {
    ExperimentPlan p;
    p.seed = 1;
    p.universe_seed = 2026;
    p.foundation.seed = 1;
    const std::vector<std::vector<int>> concept_sets = {
        {0, 3, 7, 12, 19, 24, 31, 36},  {1, 5, 9, 14, 21, 27, 33, 38},
        {2, 6, 11, 16, 22, 28, 34, 39}, {4, 8, 13, 17, 23, 29, 30, 37},
        {0, 5, 10, 15, 20, 25, 30, 35}, {1, 6, 13, 18, 26, 32, 36, 39},
        {2, 7, 9, 15, 23, 28, 35, 37},  {3, 8, 10, 14, 20, 27, 31, 39},
        {4, 6, 12, 18, 21, 26, 33, 38},
    };
    for (std::size_t i = 0; i < concept_sets.size(); ++i) {
        TaskSpec t;
        t.id = "t" + std::to_string(i);
        t.concept_ids = concept_sets[i];
        t.style_seed = 100 + i;
        t.noise_sigma = 0.1;
        p.tasks.push_back(std::move(t));
        p.eval_tasks.push_back(p.tasks.back().id);
    }
    for (const TaskSpec& t : p.tasks)
        for (FinetuneMethod m : all_methods()) {
            FinetuneJob j;
            j.run_id = "ft-" + to_string(m) + "-" + t.id;
            j.method = m;
            j.ft_task = t.id;
            j.config = p.defaults;
            j.config.method = m;
            j.config.seed = run_seed(p.seed, m, t.id);
            p.jobs.push_back(std::move(j));
        }
    const std::vector<FinetuneMethod> seq_methods = {
        FinetuneMethod::zs_init_ce,
        FinetuneMethod::lp_init_ldifs,
        FinetuneMethod::lwf,
        FinetuneMethod::joint,
    };
    for (int s = 0; s < 3; ++s) {
        SequenceJob seq;
        seq.id = "seq" + std::to_string(s);
        for (int k = 0; k < 3; ++k) seq.task_ids.push_back("t" + std::to_string(3 * s + k));
        seq.methods = seq_methods;
        p.sequences.push_back(std::move(seq));
    }
    for (int i = 0; i < 3; ++i) {
        WiseFtJob w;
        w.base_run = "ft-zs_init_ce-t" + std::to_string(i);
        w.alpha_grid = default_alpha_grid();
        p.wiseft.push_back(std::move(w));
    }
    return p;
}

// ---------------------------------------------------------------------------
// Plan <-> JSON. Parsing is strict: an unknown key anywhere is an error, so
// a typo in a plan file fails loudly instead of silently running defaults.

namespace detail {

inline void require_keys(const nlohmann::json& j, const char* ctx,
                         std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw IoError(std::string("plan: ") + ctx + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed)
            if (it.key() == k) {
                known = true;
                break;
            }
        if (!known)
            throw IoError("plan: unknown key '" + it.key() + "' in " + ctx);
    }
}

template <typename T>
inline void maybe_get(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

} // namespace detail

inline nlohmann::json finetune_config_to_json(const FinetuneConfig& c) {
    nlohmann::json j;
    j["lambda_l2sp"] = c.lambda_l2sp;
    j["lambda_ldifs"] = c.lambda_ldifs;
    j["lwf_temperature"] = c.lwf_temperature;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["learning_rate"] = c.learning_rate;
    j["weight_decay"] = c.weight_decay;
    j["warmup_steps"] = c.warmup_steps;
    j["checkpoint_fractions"] = c.checkpoint_fractions;
    j["seed"] = c.seed;
    return j;
}

// Partial override: absent keys keep the base value. The method never lives
// here; it is fixed by the job or sequence that owns the config.
inline FinetuneConfig finetune_config_from_json(const nlohmann::json& j,
                                                const FinetuneConfig& base) {
    detail::require_keys(j, "finetune config",
                         {"lambda_l2sp", "lambda_ldifs", "lwf_temperature", "epochs",
                          "batch_size", "learning_rate", "weight_decay", "warmup_steps",
                          "checkpoint_fractions", "seed"});
    FinetuneConfig c = base;
    detail::maybe_get(j, "lambda_l2sp", c.lambda_l2sp);
    detail::maybe_get(j, "lambda_ldifs", c.lambda_ldifs);
    detail::maybe_get(j, "lwf_temperature", c.lwf_temperature);
    detail::maybe_get(j, "epochs", c.epochs);
    detail::maybe_get(j, "batch_size", c.batch_size);
    detail::maybe_get(j, "learning_rate", c.learning_rate);
    detail::maybe_get(j, "weight_decay", c.weight_decay);
    detail::maybe_get(j, "warmup_steps", c.warmup_steps);
    detail::maybe_get(j, "checkpoint_fractions", c.checkpoint_fractions);
    detail::maybe_get(j, "seed", c.seed);
    return c;
}

inline nlohmann::json plan_to_json(const ExperimentPlan& p) {
    nlohmann::json j;
    j["seed"] = p.seed;
    j["out_dir"] = p.out_dir;
    j["universe_seed"] = p.universe_seed;
    j["universe_concepts"] = p.universe_concepts;
    j["encoder"] = {{"input_dim", p.encoder.input_dim},
                    {"hidden_widths", p.encoder.hidden_widths},
                    {"embed_dim", p.encoder.embed_dim},
                    {"activation", to_string(p.encoder.activation)},
                    {"tap_layers", p.encoder.tap_layers}};
    j["foundation"] = {{"epochs", p.foundation.epochs},
                       {"batch_size", p.foundation.batch_size},
                       {"learning_rate", p.foundation.learning_rate},
                       {"temperature", p.foundation.temperature},
                       {"corpus_per_concept", p.foundation.corpus_per_concept},
                       {"seed", p.foundation.seed}};
    j["finetune_defaults"] = finetune_config_to_json(p.defaults);
    j["tasks"] = nlohmann::json::array();
    for (const TaskSpec& t : p.tasks)
        j["tasks"].push_back({{"id", t.id},
                              {"concept_ids", t.concept_ids},
                              {"style_seed", t.style_seed},
                              {"noise_sigma", t.noise_sigma},
                              {"n_train", t.n_train},
                              {"n_val", t.n_val},
                              {"n_test", t.n_test}});
    j["eval_tasks"] = p.eval_tasks;
    j["jobs"] = nlohmann::json::array();
    for (const FinetuneJob& job : p.jobs)
        j["jobs"].push_back({{"run_id", job.run_id},
                             {"method", to_string(job.method)},
                             {"ft_task", job.ft_task},
                             {"config", finetune_config_to_json(job.config)}});
    j["sequences"] = nlohmann::json::array();
    for (const SequenceJob& s : p.sequences) {
        nlohmann::json methods = nlohmann::json::array();
        for (FinetuneMethod m : s.methods) methods.push_back(to_string(m));
        j["sequences"].push_back({{"id", s.id}, {"tasks", s.task_ids}, {"methods", methods}});
    }
    j["wiseft"] = nlohmann::json::array();
    for (const WiseFtJob& w : p.wiseft)
        j["wiseft"].push_back({{"base_run", w.base_run}, {"alpha_grid", w.alpha_grid}});
    return j;
}

inline ExperimentPlan plan_from_json(const nlohmann::json& j) {
    try {
        detail::require_keys(j, "plan",
                             {"seed", "out_dir", "universe_seed", "universe_concepts", "encoder",
                              "foundation", "finetune_defaults", "tasks", "eval_tasks", "jobs",
                              "sequences", "wiseft"});
        ExperimentPlan p;
        p.tasks.clear();
        p.eval_tasks.clear();
        p.jobs.clear();
        detail::maybe_get(j, "seed", p.seed);
        detail::maybe_get(j, "out_dir", p.out_dir);
        detail::maybe_get(j, "universe_seed", p.universe_seed);
        detail::maybe_get(j, "universe_concepts", p.universe_concepts);
        if (j.contains("encoder")) {
            const nlohmann::json& e = j.at("encoder");
            detail::require_keys(
                e, "encoder",
                {"input_dim", "hidden_widths", "embed_dim", "activation", "tap_layers"});
            detail::maybe_get(e, "input_dim", p.encoder.input_dim);
            detail::maybe_get(e, "hidden_widths", p.encoder.hidden_widths);
            detail::maybe_get(e, "embed_dim", p.encoder.embed_dim);
            if (e.contains("activation"))
                p.encoder.activation = activation_from_string(e.at("activation").get<std::string>());
            detail::maybe_get(e, "tap_layers", p.encoder.tap_layers);
        }
        if (j.contains("foundation")) {
            const nlohmann::json& f = j.at("foundation");
            detail::require_keys(f, "foundation",
                                 {"epochs", "batch_size", "learning_rate", "temperature",
                                  "corpus_per_concept", "seed"});
            detail::maybe_get(f, "epochs", p.foundation.epochs);
            detail::maybe_get(f, "batch_size", p.foundation.batch_size);
            detail::maybe_get(f, "learning_rate", p.foundation.learning_rate);
            detail::maybe_get(f, "temperature", p.foundation.temperature);
            detail::maybe_get(f, "corpus_per_concept", p.foundation.corpus_per_concept);
            detail::maybe_get(f, "seed", p.foundation.seed);
        }
        if (j.contains("finetune_defaults"))
            p.defaults = finetune_config_from_json(j.at("finetune_defaults"), p.defaults);
        if (j.contains("tasks"))
            for (const nlohmann::json& t : j.at("tasks")) {
                detail::require_keys(t, "task",
                                     {"id", "concept_ids", "style_seed", "noise_sigma", "n_train",
                                      "n_val", "n_test"});
                TaskSpec s;
                s.id = t.at("id").get<std::string>();
                s.concept_ids = t.at("concept_ids").get<std::vector<int>>();
                detail::maybe_get(t, "style_seed", s.style_seed);
                detail::maybe_get(t, "noise_sigma", s.noise_sigma);
                detail::maybe_get(t, "n_train", s.n_train);
                detail::maybe_get(t, "n_val", s.n_val);
                detail::maybe_get(t, "n_test", s.n_test);
                p.tasks.push_back(std::move(s));
            }
        if (j.contains("eval_tasks"))
            p.eval_tasks = j.at("eval_tasks").get<std::vector<std::string>>();
        if (j.contains("jobs"))
            for (const nlohmann::json& job : j.at("jobs")) {
                detail::require_keys(job, "job", {"run_id", "method", "ft_task", "config"});
                FinetuneJob f;
                f.method = method_from_string(job.at("method").get<std::string>());
                f.ft_task = job.at("ft_task").get<std::string>();
                f.run_id = "ft-" + to_string(f.method) + "-" + f.ft_task;
                detail::maybe_get(job, "run_id", f.run_id);
                f.config = p.defaults;
                if (job.contains("config"))
                    f.config = finetune_config_from_json(job.at("config"), p.defaults);
                f.config.method = f.method;
                if (!job.contains("config") || !job.at("config").contains("seed"))
                    f.config.seed = run_seed(p.seed, f.method, f.ft_task);
                p.jobs.push_back(std::move(f));
            }
        if (j.contains("sequences"))
            for (const nlohmann::json& s : j.at("sequences")) {
                detail::require_keys(s, "sequence", {"id", "tasks", "methods"});
                SequenceJob seq;
                seq.id = s.at("id").get<std::string>();
                seq.task_ids = s.at("tasks").get<std::vector<std::string>>();
                for (const nlohmann::json& m : s.at("methods"))
                    seq.methods.push_back(method_from_string(m.get<std::string>()));
                p.sequences.push_back(std::move(seq));
            }
        if (j.contains("wiseft"))
            for (const nlohmann::json& w : j.at("wiseft")) {
                detail::require_keys(w, "wiseft", {"base_run", "alpha_grid"});
                WiseFtJob wf;
                wf.base_run = w.at("base_run").get<std::string>();
                wf.alpha_grid = default_alpha_grid();
                detail::maybe_get(w, "alpha_grid", wf.alpha_grid);
                p.wiseft.push_back(std::move(wf));
            }
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("plan: malformed JSON: ") + e.what());
    }
}

inline ExperimentPlan load_plan(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_plan: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("load_plan: " + path + ": " + e.what());
    }
    return plan_from_json(j);
}

// Hash of the canonical JSON dump; recorded with every registry event so
// outputs can be traced back to the exact plan that produced them. The
// output directory is excluded: the same experiment written to two places
// is still the same experiment.
inline std::string plan_hash(const ExperimentPlan& p) {
    nlohmann::json j = plan_to_json(p);
    j.erase("out_dir");
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(detail::fnv1a64(j.dump())));
    return buf;
}

// ---------------------------------------------------------------------------
// Output layout

inline std::string fraction_label(double f) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", f);
    return buf;
}

struct OutputLayout {
    std::filesystem::path root;

    explicit OutputLayout(const std::string& out_dir) : root(out_dir) {}

    std::filesystem::path plan_file() const { return root / "plan.json"; }
    std::filesystem::path registry_file() const { return root / "registry.jsonl"; }
    std::filesystem::path metrics_file() const { return root / "metrics.csv"; }
    std::filesystem::path sequences_file() const { return root / "sequences.csv"; }
    std::filesystem::path report_txt() const { return root / "report.txt"; }
    std::filesystem::path report_csv() const { return root / "report.csv"; }
    std::filesystem::path foundation_prefix() const { return (root / "foundation").string(); }
    std::filesystem::path records_file(const std::string& run_id) const {
        return root / "records" / (run_id + ".csv");
    }
    std::filesystem::path losses_file(const std::string& run_id) const {
        return root / "losses" / (run_id + ".csv");
    }
    std::filesystem::path snapshot_dir(const std::string& run_id) const {
        return root / "snapshots" / run_id;
    }
    std::filesystem::path snapshot_file(const std::string& run_id, const std::string& label) const {
        return snapshot_dir(run_id) / (label + ".bin");
    }
    std::filesystem::path summary_file(const std::string& seq_id, FinetuneMethod m) const {
        return root / "summaries" / (seq_id + "-" + to_string(m) + ".csv");
    }

    void prepare() const {
        std::filesystem::create_directories(root / "records");
        std::filesystem::create_directories(root / "losses");
        std::filesystem::create_directories(root / "snapshots");
        std::filesystem::create_directories(root / "summaries");
    }
};

// ---------------------------------------------------------------------------
// Run registry: append-only JSONL, one event per line. This file is the one
// place timestamps are allowed; everything else the runner writes is a pure
// function of the plan.

class RunRegistry {
  public:
    explicit RunRegistry(std::filesystem::path path) : path_(std::move(path)) { reload(); }

    std::string status(const std::string& run_id) const {
        std::lock_guard<std::mutex> lock(mu_);
        auto it = latest_.find(run_id);
        return it == latest_.end() ? std::string() : it->second;
    }

    bool completed(const std::string& run_id) const { return status(run_id) == "completed"; }

    // Marks a run in flight. Returns false and writes nothing when the run
    // already completed: finished runs are immutable and a rerun must skip
    // them rather than redo them.
    bool begin(const std::string& run_id, const std::string& plan_hash) {
        std::lock_guard<std::mutex> lock(mu_);
        auto it = latest_.find(run_id);
        if (it != latest_.end() && it->second == "completed") return false;
        append_locked(run_id, plan_hash, "running", {});
        return true;
    }

    void complete(const std::string& run_id, const std::string& plan_hash,
                  const std::map<std::string, std::string>& artifacts) {
        std::lock_guard<std::mutex> lock(mu_);
        auto it = latest_.find(run_id);
        if (it != latest_.end() && it->second == "completed")
            throw IoError("registry: run '" + run_id + "' already completed");
        nlohmann::json extra;
        extra["artifacts"] = artifacts;
        append_locked(run_id, plan_hash, "completed", extra);
    }

    void fail(const std::string& run_id, const std::string& plan_hash,
              const std::string& error) {
        std::lock_guard<std::mutex> lock(mu_);
        auto it = latest_.find(run_id);
        if (it != latest_.end() && it->second == "completed")
            throw IoError("registry: run '" + run_id + "' already completed");
        nlohmann::json extra;
        extra["error"] = error;
        append_locked(run_id, plan_hash, "failed", extra);
    }

  private:
    static std::string utc_now() {
        std::time_t t = std::time(nullptr);
        std::tm tm{};
        gmtime_r(&t, &tm);
        char buf[32];
        std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
        return buf;
    }

    void append_locked(const std::string& run_id, const std::string& plan_hash,
                       const std::string& status, const nlohmann::json& extra) {
        nlohmann::json j = extra;
        j["ts"] = utc_now();
        j["run_id"] = run_id;
        j["plan"] = plan_hash;
        j["status"] = status;
        std::ofstream out(path_, std::ios::app);
        if (!out) throw IoError("registry: cannot open " + path_.string());
        out << j.dump() << '\n';
        out.flush();
        if (!out) throw IoError("registry: cannot append to " + path_.string());
        latest_[run_id] = status;
    }

    void reload() {
        latest_.clear();
        std::ifstream in(path_);
        if (!in) return; // no registry yet
        std::vector<std::string> lines;
        for (std::string line; std::getline(in, line);)
            if (!line.empty()) lines.push_back(line);
        for (std::size_t i = 0; i < lines.size(); ++i) {
            nlohmann::json j = nlohmann::json::parse(lines[i], nullptr, false);
            if (j.is_discarded()) {
                // A torn final line is what a crash mid-append leaves behind;
                // anything earlier means the file was edited by hand.
                if (i + 1 == lines.size()) break;
                throw IoError("registry: corrupt line " + std::to_string(i + 1) + " in " +
                              path_.string());
            }
            latest_[j.at("run_id").get<std::string>()] = j.at("status").get<std::string>();
        }
    }

    std::filesystem::path path_;
    mutable std::mutex mu_;
    std::map<std::string, std::string> latest_;
};

// ---------------------------------------------------------------------------
// Evaluation context: the task roster materialized once, plus pre-trained
// reference accuracies so each record's deltas come from a single shared
// baseline instead of being re-probed per run.

struct EvalContext {
    EncoderSpec spec;
    ModelSnapshot foundation;
    std::vector<TaskDataset> tasks; // plan order
    std::unordered_map<std::string, std::size_t> index;
    std::vector<std::string> eval_ids;
    std::vector<double> pre_zs, pre_lp; // indexed like tasks; filled for eval ids
    ProbeConfig probe;

    const TaskDataset& task(const std::string& id) const {
        auto it = index.find(id);
        if (it == index.end()) throw TensorError("eval context: unknown task '" + id + "'");
        return tasks[it->second];
    }
};

inline EvalContext build_eval_context(const ExperimentPlan& plan, const ConceptUniverse& u,
                                      const FoundationModel& fm) {
    EvalContext ctx;
    ctx.spec = fm.spec;
    ctx.foundation = foundation_to_snapshot(fm);
    ctx.eval_ids = plan.eval_tasks;
    for (const TaskSpec& t : plan.tasks) {
        ctx.index[t.id] = ctx.tasks.size();
        ctx.tasks.push_back(make_task(u, t.id, t.concept_ids, t.style_seed, t.noise_sigma,
                                      t.n_train, t.n_val, t.n_test));
    }
    ctx.pre_zs.assign(ctx.tasks.size(), 0.0);
    ctx.pre_lp.assign(ctx.tasks.size(), 0.0);
    for (const std::string& id : ctx.eval_ids) {
        std::size_t i = ctx.index.at(id);
        ctx.pre_zs[i] = a_zs(ctx.spec, ctx.foundation, ctx.tasks[i]);
        ctx.pre_lp[i] = a_lp(ctx.spec, ctx.foundation, ctx.tasks[i], ctx.probe);
    }
    return ctx;
}

// One record per evaluation task for a single checkpoint. Parameter and
// feature distances are measured against the run's own origin; deltas are
// measured against the pre-trained foundation.
inline std::vector<MetricRecord> evaluate_checkpoint(const EvalContext& ctx,
                                                     const std::string& run_id,
                                                     const std::string& method,
                                                     const std::string& ft_task, double fraction,
                                                     const ModelSnapshot& snap,
                                                     const ModelSnapshot& run_origin) {
    std::vector<MetricRecord> out;
    double pdist = param_sq_distance(snap, run_origin);
    for (const std::string& eid : ctx.eval_ids) {
        std::size_t ti = ctx.index.at(eid);
        const TaskDataset& t = ctx.tasks[ti];
        MetricRecord r;
        r.run_id = run_id;
        r.method = method;
        r.ft_dataset = ft_task;
        r.eval_dataset = eid;
        r.checkpoint_fraction = fraction;
        r.a_zs = a_zs(ctx.spec, snap, t);
        r.a_lp = a_lp(ctx.spec, snap, t, ctx.probe);
        r.delta_zs = r.a_zs - ctx.pre_zs[ti];
        r.delta_lp = r.a_lp - ctx.pre_lp[ti];
        r.param_dist = pdist;
        r.feat_dist = feature_distance(ctx.spec, snap, run_origin, t.train.x);
        out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Single run execution

struct RunResult {
    bool skipped = false; // registry already had the run completed
    std::size_t records = 0;
    ModelSnapshot initial;
    ModelSnapshot final_snapshot;
};

// Runs one fine-tuning pass end to end: train, store snapshots and the loss
// log, evaluate every checkpoint, and flush the records after each one so a
// crash never loses a finished checkpoint. A run the registry already marks
// completed is reloaded from disk instead of re-run.
inline RunResult run_one(const EvalContext& ctx, const OutputLayout& out, RunRegistry& reg,
                         const std::string& hash, const std::string& run_id,
                         const std::vector<std::string>& ft_ids, const std::string& label_task,
                         const ModelSnapshot& origin, const FinetuneConfig& cfg) {
    RunResult res;
    if (!reg.begin(run_id, hash)) {
        res.skipped = true;
        res.initial = load_snapshot(out.snapshot_file(run_id, "0").string());
        res.final_snapshot = load_snapshot(out.snapshot_file(run_id, "1").string());
        return res;
    }
    try {
        std::vector<TaskDataset> fts;
        for (const std::string& id : ft_ids) fts.push_back(ctx.task(id));
        FinetuneTrajectory traj = finetune(ctx.spec, origin, fts, cfg, ctx.probe);

        std::filesystem::create_directories(out.snapshot_dir(run_id));
        save_snapshot(traj.initial, out.snapshot_file(run_id, "0").string());
        {
            std::ofstream losses(out.losses_file(run_id), std::ios::trunc);
            if (!losses) throw IoError("cannot write " + out.losses_file(run_id).string());
            write_loss_log_csv(losses, traj.loss_log);
        }

        std::ofstream rec(out.records_file(run_id), std::ios::trunc);
        if (!rec) throw IoError("cannot write " + out.records_file(run_id).string());
        bool saved_final = false;
        for (const auto& [frac, snap] : traj.checkpoints) {
            save_snapshot(snap, out.snapshot_file(run_id, fraction_label(frac)).string());
            if (frac == 1.0) saved_final = true;
            for (const MetricRecord& r : evaluate_checkpoint(
                     ctx, run_id, to_string(cfg.method), label_task, frac, snap, traj.initial)) {
                rec << metric_csv_row(r) << '\n';
                ++res.records;
            }
            rec.flush();
        }
        // The final model is always stored under "1" so sequences and
        // Wise-FT can chain from it even when 1.0 is not a checkpoint.
        if (!saved_final)
            save_snapshot(traj.final_snapshot, out.snapshot_file(run_id, "1").string());
        if (!rec) throw IoError("cannot write " + out.records_file(run_id).string());

        std::map<std::string, std::string> artifacts;
        artifacts["records"] = out.records_file(run_id).string();
        artifacts["losses"] = out.losses_file(run_id).string();
        artifacts["snapshots"] = out.snapshot_dir(run_id).string();
        reg.complete(run_id, hash, artifacts);
        res.initial = std::move(traj.initial);
        res.final_snapshot = std::move(traj.final_snapshot);
        return res;
    } catch (const std::exception& e) {
        reg.fail(run_id, hash, e.what());
        throw;
    }
}

inline RunResult run_single_task(const EvalContext& ctx, const OutputLayout& out,
                                 RunRegistry& reg, const std::string& hash,
                                 const FinetuneJob& job) {
    return run_one(ctx, out, reg, hash, job.run_id, {job.ft_task}, job.ft_task, ctx.foundation,
                   job.config);
}

// ---------------------------------------------------------------------------
// Sequences: stages chain (each stage starts from the previous final model),
// the joint method accumulates all data seen so far, and the pass ends with
// a summary of continual forgetting on the sequence tasks.

inline constexpr const char* kSequenceCsvHeader =
    "sequence,method,task,a_lp_final,continual_delta_lp";

// One pass of one method through a sequence. Returns how many stages were
// executed (vs. reloaded from a previous run).
inline std::size_t run_sequence_pass(const EvalContext& ctx, const OutputLayout& out,
                                     RunRegistry& reg, const std::string& hash,
                                     const ExperimentPlan& plan, const SequenceJob& seq,
                                     FinetuneMethod m) {
    std::size_t executed = 0;
    std::vector<ModelSnapshot> finals;
    std::vector<std::string> seen_tasks;
    for (std::size_t k = 0; k < seq.task_ids.size(); ++k) {
        const std::string& tid = seq.task_ids[k];
        seen_tasks.push_back(tid);
        std::vector<std::string> ft_ids =
            (m == FinetuneMethod::joint) ? seen_tasks : std::vector<std::string>{tid};
        FinetuneConfig cfg = plan.defaults;
        cfg.method = m;
        cfg.seed = run_seed(plan.seed, m, tid);
        const ModelSnapshot& origin = finals.empty() ? ctx.foundation : finals.back();
        RunResult r = run_one(ctx, out, reg, hash, sequence_stage_run_id(seq, m, k), ft_ids, tid,
                              origin, cfg);
        if (!r.skipped) ++executed;
        finals.push_back(std::move(r.final_snapshot));
    }

    // Continual summary for the final model. Priors are the pre-trained
    // foundation plus every stage final before the last; the drop is taken
    // from the best of those. Cheap and idempotent, so it is recomputed on
    // every pass rather than tracked in the registry.
    const ModelSnapshot& final_model = finals.back();
    std::ostringstream rows;
    for (const std::string& tid : seq.task_ids) {
        const TaskDataset& t = ctx.task(tid);
        std::vector<double> prior_accs{a_lp(ctx.spec, ctx.foundation, t, ctx.probe)};
        for (std::size_t k = 0; k + 1 < finals.size(); ++k)
            prior_accs.push_back(a_lp(ctx.spec, finals[k], t, ctx.probe));
        double alf = a_lp(ctx.spec, final_model, t, ctx.probe);
        double dlpc = continual_delta_from_accuracies(alf, prior_accs);
        rows << seq.id << ',' << to_string(m) << ',' << tid << ',' << format_g17(alf) << ','
             << format_g17(dlpc) << '\n';
    }
    std::vector<double> other_alp, other_dlp;
    for (const std::string& eid : ctx.eval_ids) {
        if (std::find(seq.task_ids.begin(), seq.task_ids.end(), eid) != seq.task_ids.end())
            continue;
        std::size_t ti = ctx.index.at(eid);
        double alf = a_lp(ctx.spec, final_model, ctx.tasks[ti], ctx.probe);
        other_alp.push_back(alf);
        other_dlp.push_back(alf - ctx.pre_lp[ti]);
    }
    if (!other_alp.empty()) {
        double ma = 0.0, md = 0.0;
        for (double v : other_alp) ma += v;
        for (double v : other_dlp) md += v;
        ma /= static_cast<double>(other_alp.size());
        md /= static_cast<double>(other_dlp.size());
        rows << seq.id << ',' << to_string(m) << ",others," << format_g17(ma) << ','
             << format_g17(md) << '\n';
    }
    std::ofstream sum(out.summary_file(seq.id, m), std::ios::trunc);
    if (!sum) throw IoError("cannot write " + out.summary_file(seq.id, m).string());
    sum << rows.str();
    return executed;
}

// ---------------------------------------------------------------------------
// Wise-FT ablation: interpolate between a completed run's origin and final
// model, pick alpha on the fine-tuned task's validation split, and record
// the interpolated model against the full evaluation suite. The records use
// the base run's id with a "-wiseft" suffix and the method name gains a
// "+wiseft" tag, so the report shows with/without side by side.

inline RunResult run_wise_ft_ablation(const EvalContext& ctx, const OutputLayout& out,
                                      RunRegistry& reg, const std::string& hash,
                                      const ExperimentPlan& plan, const WiseFtJob& wj) {
    const FinetuneJob* base = plan.find_job(wj.base_run);
    if (!base) throw TensorError("wise-ft: unknown base run '" + wj.base_run + "'");
    std::string run_id = wiseft_run_id(wj);
    RunResult res;
    if (!reg.begin(run_id, hash)) {
        res.skipped = true;
        return res;
    }
    try {
        if (!reg.completed(wj.base_run))
            throw IoError("wise-ft: base run '" + wj.base_run + "' has not completed");
        ModelSnapshot theta0 = load_snapshot(out.snapshot_file(wj.base_run, "0").string());
        ModelSnapshot thetaF = load_snapshot(out.snapshot_file(wj.base_run, "1").string());
        const TaskDataset& ft = ctx.task(base->ft_task);
        WiseFtResult w = wise_ft_select(ctx.spec, theta0, thetaF, ft, wj.alpha_grid, ctx.probe);

        std::ofstream rec(out.records_file(run_id), std::ios::trunc);
        if (!rec) throw IoError("cannot write " + out.records_file(run_id).string());
        for (const MetricRecord& r :
             evaluate_checkpoint(ctx, run_id, to_string(base->method) + "+wiseft", base->ft_task,
                                 1.0, w.snapshot, theta0)) {
            rec << metric_csv_row(r) << '\n';
            ++res.records;
        }
        rec.flush();
        if (!rec) throw IoError("cannot write " + out.records_file(run_id).string());

        std::map<std::string, std::string> artifacts;
        artifacts["records"] = out.records_file(run_id).string();
        artifacts["alpha"] = format_g17(w.alpha);
        reg.complete(run_id, hash, artifacts);
        res.final_snapshot = std::move(w.snapshot);
        res.initial = std::move(theta0);
        return res;
    } catch (const std::exception& e) {
        reg.fail(run_id, hash, e.what());
        throw;
    }
}

// ---------------------------------------------------------------------------
// Assembly: metrics.csv and sequences.csv are regenerated from the per-run
// scratch files in plan order, so their bytes depend only on the plan and
// the set of completed runs, never on scheduling.

inline void assemble_metrics_csv(const ExperimentPlan& plan, const OutputLayout& out,
                                 const RunRegistry& reg) {
    std::ofstream m(out.metrics_file(), std::ios::trunc);
    if (!m) throw IoError("cannot write " + out.metrics_file().string());
    m << kMetricsCsvHeader << '\n';
    for (const std::string& id : plan_run_order(plan)) {
        if (!reg.completed(id)) continue;
        std::ifstream in(out.records_file(id));
        if (!in)
            throw IoError("metrics: run '" + id + "' is completed but its records are missing");
        std::ostringstream buf;
        buf << in.rdbuf();
        m << buf.str();
    }
    if (!m) throw IoError("cannot write " + out.metrics_file().string());
}

inline void assemble_sequences_csv(const ExperimentPlan& plan, const OutputLayout& out) {
    std::ofstream s(out.sequences_file(), std::ios::trunc);
    if (!s) throw IoError("cannot write " + out.sequences_file().string());
    s << kSequenceCsvHeader << '\n';
    for (const SequenceJob& seq : plan.sequences)
        for (FinetuneMethod m : seq.methods) {
            std::ifstream in(out.summary_file(seq.id, m));
            if (!in) continue; // pass not finished yet
            std::ostringstream buf;
            buf << in.rdbuf();
            s << buf.str();
        }
    if (!s) throw IoError("cannot write " + out.sequences_file().string());
}

// ---------------------------------------------------------------------------
// Report: final-checkpoint summary per (fine-tuned task, method). The text
// table marks the best (least negative) mean delta per task with **...**;
// the CSV carries full precision plus the same best flag.

struct ReportRow {
    std::string ft_task;
    std::string method;
    double a_lp_self = 0.0;
    double mean_delta_lp_others = 0.0;
    bool has_self = false;
    std::size_t n_others = 0;
    bool best = false;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    fields.push_back(cur);
    return fields;
}

} // namespace detail

// Reduces metrics.csv to one row per (ft task, method) over final
// checkpoints: self A_LP plus the mean delta on the other tasks, with the
// best mean delta per task flagged (ties share the flag).
inline std::vector<ReportRow> summarize_metrics(const std::string& metrics_path) {
    std::ifstream in(metrics_path);
    if (!in) throw IoError("report: cannot open " + metrics_path);
    std::string line;
    if (!std::getline(in, line) || line != kMetricsCsvHeader)
        throw IoError("report: " + metrics_path + " has an unexpected header");
    std::vector<ReportRow> rows;
    std::map<std::pair<std::string, std::string>, std::size_t> slot;
    std::vector<double> other_sums;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f = detail::split_csv_line(line);
        if (f.size() != 11)
            throw IoError("report: malformed record in " + metrics_path + ": " + line);
        if (std::stod(f[4]) != 1.0) continue; // final checkpoints only
        std::pair<std::string, std::string> key{f[2], f[1]};
        auto it = slot.find(key);
        if (it == slot.end()) {
            it = slot.emplace(key, rows.size()).first;
            ReportRow r;
            r.ft_task = f[2];
            r.method = f[1];
            rows.push_back(std::move(r));
            other_sums.push_back(0.0);
        }
        ReportRow& r = rows[it->second];
        if (f[3] == f[2]) {
            r.a_lp_self = std::stod(f[6]);
            r.has_self = true;
        } else {
            other_sums[it->second] += std::stod(f[8]);
            ++r.n_others;
        }
    }
    for (std::size_t i = 0; i < rows.size(); ++i)
        if (rows[i].n_others > 0)
            rows[i].mean_delta_lp_others = other_sums[i] / static_cast<double>(rows[i].n_others);
    // Regroup so every method of a task sits in one block (interpolation
    // rows arrive after all the plain jobs); task blocks keep the order the
    // tasks first appeared in, methods keep their order within each block.
    std::map<std::string, std::size_t> task_rank;
    for (const ReportRow& r : rows) task_rank.emplace(r.ft_task, task_rank.size());
    std::stable_sort(rows.begin(), rows.end(), [&](const ReportRow& a, const ReportRow& b) {
        return task_rank.at(a.ft_task) < task_rank.at(b.ft_task);
    });
    // Flag the best mean delta within each ft task.
    std::map<std::string, double> best;
    for (const ReportRow& r : rows) {
        auto it = best.find(r.ft_task);
        if (it == best.end() || r.mean_delta_lp_others > it->second)
            best[r.ft_task] = r.mean_delta_lp_others;
    }
    for (ReportRow& r : rows) r.best = (r.mean_delta_lp_others == best.at(r.ft_task));
    return rows;
}

inline void write_report(const OutputLayout& out, const std::string& hash) {
    std::vector<ReportRow> rows = summarize_metrics(out.metrics_file().string());

    std::ofstream csv(out.report_csv(), std::ios::trunc);
    if (!csv) throw IoError("cannot write " + out.report_csv().string());
    csv << "ft_dataset,method,a_lp_self,mean_delta_lp_others,best\n";
    for (const ReportRow& r : rows)
        csv << r.ft_task << ',' << r.method << ',' << format_g17(r.a_lp_self) << ','
            << format_g17(r.mean_delta_lp_others) << ',' << (r.best ? 1 : 0) << '\n';
    if (!csv) throw IoError("cannot write " + out.report_csv().string());

    std::ofstream txt(out.report_txt(), std::ios::trunc);
    if (!txt) throw IoError("cannot write " + out.report_txt().string());
    txt << "forgetting report\n";
    txt << "plan " << hash << "\n\n";
    txt << "per-task fine-tuning, final checkpoints\n";
    txt << "A_LP(self): probe accuracy on the fine-tuned task;"
           " dLP(others): mean probe-accuracy change on the remaining tasks\n";
    txt << "the best dLP per task is marked **...**\n";
    std::string current_task;
    char buf[160];
    for (const ReportRow& r : rows) {
        if (r.ft_task != current_task) {
            current_task = r.ft_task;
            txt << "\ntask " << current_task << "\n";
            std::snprintf(buf, sizeof buf, "  %-24s %12s %18s\n", "method", "A_LP(self)",
                          "mean dLP(others)");
            txt << buf;
        }
        std::string dlp;
        std::snprintf(buf, sizeof buf, "%.2f", r.mean_delta_lp_others);
        dlp = r.best ? "**" + std::string(buf) + "**" : std::string(buf);
        std::snprintf(buf, sizeof buf, "  %-24s %12.2f %18s\n", r.method.c_str(), r.a_lp_self,
                      dlp.c_str());
        txt << buf;
    }

    // Continual sequences, if any were run.
    std::ifstream seq(out.sequences_file());
    if (seq) {
        std::string line;
        std::getline(seq, line); // header
        bool any = false;
        std::string current;
        while (std::getline(seq, line)) {
            if (line.empty()) continue;
            std::vector<std::string> f = detail::split_csv_line(line);
            if (f.size() != 5)
                throw IoError("report: malformed row in " + out.sequences_file().string());
            if (!any) {
                txt << "\ncontinual sequences, final model\n";
                txt << "A_LP: probe accuracy after the last stage;"
                       " dLPc: drop from the best earlier model\n";
                any = true;
            }
            std::string head = f[0] + ", " + f[1];
            if (head != current) {
                current = head;
                txt << "\nsequence " << head << "\n";
            }
            if (f[2] == "others") {
                std::snprintf(buf, sizeof buf, "  %-10s mean A_LP %8.2f   mean dLP %8.2f\n",
                              f[2].c_str(), std::stod(f[3]), std::stod(f[4]));
            } else {
                std::snprintf(buf, sizeof buf, "  %-10s      A_LP %8.2f       dLPc %8.2f\n",
                              f[2].c_str(), std::stod(f[3]), std::stod(f[4]));
            }
            txt << buf;
        }
    }
    if (!txt) throw IoError("cannot write " + out.report_txt().string());
}

// ---------------------------------------------------------------------------
// Plan orchestration

enum class PlanPhase { pretrain, singles, sequences, wiseft, report };

struct PlanOutcome {
    std::string hash;
    std::size_t executed = 0;
    std::size_t skipped = 0;
    std::vector<std::pair<std::string, std::string>> failures; // (unit, error)
};

namespace detail {

// Runs fn over [0, n) on a small thread pool. Exceptions are collected per
// item, not propagated, so one failed run never takes down the batch.
inline void parallel_for(std::size_t n, std::size_t workers,
                         const std::function<std::string(std::size_t)>& name_of,
                         const std::function<void(std::size_t)>& fn,
                         std::vector<std::pair<std::string, std::string>>& failures) {
    if (workers == 0) workers = 1;
    workers = std::min(workers, n == 0 ? std::size_t{1} : n);
    std::atomic<std::size_t> next{0};
    std::mutex fail_mu;
    auto body = [&]() {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(fail_mu);
                failures.emplace_back(name_of(i), e.what());
            }
        }
    };
    if (workers <= 1) {
        body();
        return;
    }
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(body);
    for (std::thread& t : pool) t.join();
}

} // namespace detail

// Executes a plan through the requested phase. The foundation model is
// trained once and cached in the output directory; jobs run in parallel
// (each writes disjoint files), CSV assembly is single-threaded and ordered
// by the plan, so reruns are byte-identical outside the registry.
inline PlanOutcome run_plan(const ExperimentPlan& plan, std::size_t workers = 1,
                            std::ostream* log = nullptr,
                            PlanPhase upto = PlanPhase::report) {
    plan.validate();
    OutputLayout out(plan.out_dir);
    std::filesystem::create_directories(out.root);
    out.prepare();
    PlanOutcome outcome;
    outcome.hash = plan_hash(plan);
    {
        std::ofstream pj(out.plan_file(), std::ios::trunc);
        if (!pj) throw IoError("cannot write " + out.plan_file().string());
        pj << plan_to_json(plan).dump(2) << '\n';
    }
    RunRegistry reg(out.registry_file());
    std::mutex log_mu;
    auto say = [&](const std::string& msg) {
        if (!log) return;
        std::lock_guard<std::mutex> lock(log_mu);
        (*log) << "[runner] " << msg << '\n';
        log->flush();
    };

    FoundationModel fm;
    if (std::filesystem::exists(out.foundation_prefix().string() + ".snap")) {
        fm = load_foundation(out.foundation_prefix().string());
        if (fm.universe_seed != plan.universe_seed || fm.config.seed != plan.foundation.seed)
            throw IoError("run_plan: " + plan.out_dir +
                          " holds a foundation trained with different seeds");
        say("foundation: reusing " + out.foundation_prefix().string() + ".snap");
    } else {
        say("foundation: pretraining (universe seed " + std::to_string(plan.universe_seed) +
            ")");
        ConceptUniverse u =
            make_universe(plan.universe_seed, plan.universe_concepts, plan.encoder.input_dim);
        fm = pretrain(u, plan.encoder, plan.foundation);
        save_foundation(fm, out.foundation_prefix().string());
    }
    if (upto == PlanPhase::pretrain) return outcome;

    ConceptUniverse u =
        make_universe(plan.universe_seed, plan.universe_concepts, plan.encoder.input_dim);
    EvalContext ctx = build_eval_context(plan, u, fm);
    std::atomic<std::size_t> executed{0}, skipped{0};

    detail::parallel_for(
        plan.jobs.size(), workers, [&](std::size_t i) { return plan.jobs[i].run_id; },
        [&](std::size_t i) {
            RunResult r = run_single_task(ctx, out, reg, outcome.hash, plan.jobs[i]);
            (r.skipped ? skipped : executed).fetch_add(1);
            say(plan.jobs[i].run_id + (r.skipped ? ": skipped (already completed)"
                                                 : ": completed, " +
                                                       std::to_string(r.records) + " records"));
        },
        outcome.failures);
    assemble_metrics_csv(plan, out, reg);

    if (upto != PlanPhase::singles) {
        std::vector<std::pair<const SequenceJob*, FinetuneMethod>> passes;
        for (const SequenceJob& s : plan.sequences)
            for (FinetuneMethod m : s.methods) passes.emplace_back(&s, m);
        detail::parallel_for(
            passes.size(), workers,
            [&](std::size_t i) { return passes[i].first->id + "-" + to_string(passes[i].second); },
            [&](std::size_t i) {
                std::size_t ran = run_sequence_pass(ctx, out, reg, outcome.hash, plan,
                                                    *passes[i].first, passes[i].second);
                executed.fetch_add(ran);
                skipped.fetch_add(passes[i].first->task_ids.size() - ran);
                say(passes[i].first->id + "-" + to_string(passes[i].second) +
                    ": pass complete (" + std::to_string(ran) + " stages executed)");
            },
            outcome.failures);
        assemble_metrics_csv(plan, out, reg);
        assemble_sequences_csv(plan, out);
    }

    if (upto == PlanPhase::wiseft || upto == PlanPhase::report) {
        detail::parallel_for(
            plan.wiseft.size(), workers,
            [&](std::size_t i) { return wiseft_run_id(plan.wiseft[i]); },
            [&](std::size_t i) {
                RunResult r =
                    run_wise_ft_ablation(ctx, out, reg, outcome.hash, plan, plan.wiseft[i]);
                (r.skipped ? skipped : executed).fetch_add(1);
                say(wiseft_run_id(plan.wiseft[i]) +
                    (r.skipped ? ": skipped (already completed)" : ": completed"));
            },
            outcome.failures);
        assemble_metrics_csv(plan, out, reg);
    }

    if (upto == PlanPhase::report) write_report(out, outcome.hash);

    outcome.executed = executed.load();
    outcome.skipped = skipped.load();
    if (!outcome.failures.empty())
        say(std::to_string(outcome.failures.size()) + " unit(s) failed; see registry");
    return outcome;
}

} // namespace forgetlab
