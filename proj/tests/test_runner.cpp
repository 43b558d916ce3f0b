#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "forgetlab/runner.hpp"

using namespace forgetlab;
using Catch::Matchers::ContainsSubstring;
namespace fs = std::filesystem;

namespace {

// One real foundation shared by every test, cached on disk so run_plan can
// load it instead of re-pretraining per output directory.
const FoundationModel& shared_foundation() {
    static FoundationModel fm = [] {
        ConceptUniverse u = make_universe(7, 40, 32);
        PretrainConfig pc;
        pc.seed = 3;
        return pretrain(u, EncoderSpec{}, pc);
    }();
    return fm;
}

fs::path foundation_cache_prefix() {
    static fs::path prefix = [] {
        fs::path dir = fs::temp_directory_path() / "forgetlab_runner_cache";
        fs::create_directories(dir);
        save_foundation(shared_foundation(), (dir / "foundation").string());
        return dir / "foundation";
    }();
    return prefix;
}

fs::path fresh_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("forgetlab_runner_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Drops the cached foundation into an output directory so run_plan loads it.
void seed_foundation(const fs::path& out_dir) {
    fs::create_directories(out_dir);
    fs::copy_file(foundation_cache_prefix().string() + ".snap", out_dir / "foundation.snap",
                  fs::copy_options::overwrite_existing);
    fs::copy_file(foundation_cache_prefix().string() + ".json", out_dir / "foundation.json",
                  fs::copy_options::overwrite_existing);
}

// Three small 4-concept tasks on the shared universe; two fast epochs with a
// mid-run checkpoint. Jobs, sequences, and ablations are added per test.
ExperimentPlan tiny_plan(const fs::path& out_dir) {
    ExperimentPlan p;
    p.seed = 5;
    p.out_dir = out_dir.string();
    p.universe_seed = 7;
    p.foundation.seed = 3;
    p.defaults.epochs = 2;
    p.defaults.batch_size = 48;
    p.defaults.warmup_steps = 4;
    p.defaults.checkpoint_fractions = {0.5, 1.0};
    auto add_task = [&p](const std::string& id, std::vector<int> c, std::uint64_t style) {
        TaskSpec t;
        t.id = id;
        t.concept_ids = std::move(c);
        t.style_seed = style;
        t.noise_sigma = 0.1;
        t.n_train = 96;
        t.n_val = 32;
        t.n_test = 48;
        p.tasks.push_back(std::move(t));
        p.eval_tasks.push_back(p.tasks.back().id);
    };
    add_task("ta", {0, 2, 4, 6}, 11);
    add_task("tb", {1, 3, 5, 7}, 12);
    add_task("tc", {8, 9, 10, 11}, 13);
    return p;
}

FinetuneJob make_job(const ExperimentPlan& p, FinetuneMethod m, const std::string& task) {
    FinetuneJob j;
    j.method = m;
    j.ft_task = task;
    j.run_id = "ft-" + to_string(m) + "-" + task;
    j.config = p.defaults;
    j.config.method = m;
    j.config.seed = run_seed(p.seed, m, task);
    return j;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> csv_lines(const fs::path& path) {
    std::ifstream in(path);
    REQUIRE(in);
    std::vector<std::string> out;
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) out.push_back(line);
    return out;
}

std::vector<std::string> fields_of(const std::string& line) {
    std::vector<std::string> f;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            f.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    f.push_back(cur);
    return f;
}

// Rebuilds the task a plan describes, for oracle-side evaluation.
TaskDataset oracle_task(const ExperimentPlan& p, const std::string& id) {
    ConceptUniverse u = make_universe(p.universe_seed, p.universe_concepts, p.encoder.input_dim);
    const TaskSpec* t = p.find_task(id);
    REQUIRE(t != nullptr);
    return make_task(u, t->id, t->concept_ids, t->style_seed, t->noise_sigma, t->n_train,
                     t->n_val, t->n_test);
}

} // namespace

TEST_CASE("default plan is well formed") {
    ExperimentPlan p = default_plan();
    REQUIRE_NOTHROW(p.validate());
    REQUIRE(p.tasks.size() == 9);
    REQUIRE(p.eval_tasks.size() == 9);
    REQUIRE(p.jobs.size() == 9 * all_methods().size());
    REQUIRE(p.sequences.size() == 3);
    REQUIRE(p.wiseft.size() == 3);

    std::vector<std::string> order = plan_run_order(p);
    std::set<std::string> unique(order.begin(), order.end());
    REQUIRE(order.size() == 147);
    REQUIRE(unique.size() == order.size());
    REQUIRE(unique.count("ft-zs_init_ce-t0") == 1);
    REQUIRE(unique.count("seq2-joint-k3") == 1);
    REQUIRE(unique.count("ft-zs_init_ce-t0-wiseft") == 1);

    // Job seeds are derived from (plan seed, method, task), nothing else.
    for (const FinetuneJob& j : p.jobs)
        REQUIRE(j.config.seed == run_seed(p.seed, j.method, j.ft_task));
    REQUIRE(run_seed(1, FinetuneMethod::zs_init_ce, "t0") !=
            run_seed(1, FinetuneMethod::zs_init_ce, "t1"));
    REQUIRE(run_seed(1, FinetuneMethod::zs_init_ce, "t0") !=
            run_seed(1, FinetuneMethod::lp_init_ce, "t0"));
    REQUIRE(run_seed(1, FinetuneMethod::zs_init_ce, "t0") !=
            run_seed(2, FinetuneMethod::zs_init_ce, "t0"));
}

TEST_CASE("plan json round trips exactly") {
    ExperimentPlan p = default_plan();
    std::string dump1 = plan_to_json(p).dump();
    ExperimentPlan q = plan_from_json(nlohmann::json::parse(dump1));
    REQUIRE(plan_to_json(q).dump() == dump1);
    REQUIRE(plan_hash(q) == plan_hash(p));
    REQUIRE(q.jobs.size() == p.jobs.size());
    REQUIRE(q.jobs[5].config.seed == p.jobs[5].config.seed);
    REQUIRE(q.sequences[1].methods == p.sequences[1].methods);

    // The hash names the experiment, not its output location.
    ExperimentPlan moved = p;
    moved.out_dir = "somewhere/else";
    REQUIRE(plan_hash(moved) == plan_hash(p));
}

TEST_CASE("plan json parsing is strict") {
    auto parse = [](const std::string& s) { return plan_from_json(nlohmann::json::parse(s)); };

    REQUIRE_THROWS_WITH(parse(R"({"sed": 1})"), ContainsSubstring("unknown key 'sed'"));
    REQUIRE_THROWS_WITH(parse(R"({"encoder": {"hidden": [4]}})"),
                        ContainsSubstring("unknown key 'hidden'"));
    REQUIRE_THROWS_WITH(parse(R"({"foundation": {"temp": 0.1}})"),
                        ContainsSubstring("unknown key 'temp'"));
    REQUIRE_THROWS_WITH(parse(R"({"tasks": [{"id": "x", "concept_ids": [0,1], "noise": 0.2}]})"),
                        ContainsSubstring("unknown key 'noise'"));
    REQUIRE_THROWS_WITH(
        parse(R"({"jobs": [{"method": "zs_init_ce", "ft_task": "x", "config": {"lr": 1.0}}]})"),
        ContainsSubstring("unknown key 'lr'"));
    REQUIRE_THROWS_WITH(parse(R"({"sequences": [{"id": "s", "tasks": ["x"], "method": []}]})"),
                        ContainsSubstring("unknown key 'method'"));
    REQUIRE_THROWS_WITH(parse(R"({"wiseft": [{"base_run": "r", "alphas": []}]})"),
                        ContainsSubstring("unknown key 'alphas'"));
    REQUIRE_THROWS_AS(parse(R"({"seed": "one"})"), IoError);
    REQUIRE_THROWS_AS(parse(R"({"tasks": [{"concept_ids": [0,1]}]})"), IoError); // id missing
    REQUIRE_THROWS_AS(load_plan("/nonexistent/plan.json"), IoError);

    // An empty object is a valid (if useless) plan built from defaults.
    ExperimentPlan empty = parse("{}");
    REQUIRE(empty.tasks.empty());
    REQUIRE(empty.seed == 1);

    // Jobs fill in canonical run ids and derived seeds when absent, and keep
    // explicit ones when given.
    ExperimentPlan j1 = parse(R"({
        "seed": 9,
        "tasks": [{"id": "x", "concept_ids": [0, 1]}],
        "eval_tasks": ["x"],
        "jobs": [{"method": "lp_init_ce", "ft_task": "x"},
                 {"method": "lp_init_ce", "ft_task": "x", "run_id": "mine",
                  "config": {"seed": 42, "epochs": 1}}]
    })");
    REQUIRE(j1.jobs[0].run_id == "ft-lp_init_ce-x");
    REQUIRE(j1.jobs[0].config.seed == run_seed(9, FinetuneMethod::lp_init_ce, "x"));
    REQUIRE(j1.jobs[1].run_id == "mine");
    REQUIRE(j1.jobs[1].config.seed == 42);
    REQUIRE(j1.jobs[1].config.epochs == 1);
    REQUIRE(j1.jobs[1].config.batch_size == j1.defaults.batch_size);
}

TEST_CASE("plan validation catches structural mistakes") {
    auto base = [] {
        ExperimentPlan p = tiny_plan("unused");
        p.jobs.push_back(make_job(p, FinetuneMethod::zs_init_ce, "ta"));
        return p;
    };

    ExperimentPlan p = base();
    REQUIRE_NOTHROW(p.validate());

    p = base();
    p.tasks.push_back(p.tasks[0]);
    REQUIRE_THROWS_WITH(p.validate(), ContainsSubstring("duplicate task id"));

    p = base();
    p.eval_tasks.push_back("ghost");
    REQUIRE_THROWS_WITH(p.validate(), ContainsSubstring("eval task 'ghost'"));

    p = base();
    p.jobs[0].ft_task = "ghost";
    REQUIRE_THROWS_WITH(p.validate(), ContainsSubstring("unknown task 'ghost'"));

    p = base();
    p.jobs.push_back(p.jobs[0]);
    REQUIRE_THROWS_WITH(p.validate(), ContainsSubstring("duplicate run id"));

    p = base();
    p.jobs[0].method = FinetuneMethod::lwf; // config still says zs_init_ce
    REQUIRE_THROWS_WITH(p.validate(), ContainsSubstring("disagrees"));

    p = base();
    p.tasks[0].concept_ids[0] = 40;
    REQUIRE_THROWS_WITH(p.validate(), ContainsSubstring("outside the universe"));

    p = base();
    p.tasks[0].concept_ids[0] = -1;
    REQUIRE_THROWS_AS(p.validate(), TensorError);

    p = base();
    p.sequences.push_back({"sq", {"ta", "ghost"}, {FinetuneMethod::zs_init_ce}});
    REQUIRE_THROWS_WITH(p.validate(), ContainsSubstring("unknown task 'ghost'"));

    p = base();
    p.sequences.push_back({"sq", {"ta"}, {}});
    REQUIRE_THROWS_WITH(p.validate(), ContainsSubstring("no methods"));

    p = base();
    p.wiseft.push_back({"ghost", default_alpha_grid()});
    REQUIRE_THROWS_WITH(p.validate(), ContainsSubstring("unknown job 'ghost'"));

    p = base();
    p.wiseft.push_back({p.jobs[0].run_id, {0.0, 1.5}});
    REQUIRE_THROWS_WITH(p.validate(), ContainsSubstring("outside [0, 1]"));

    p = base();
    p.jobs[0].run_id = "a b";
    REQUIRE_THROWS_WITH(p.validate(), ContainsSubstring("bad run id"));

    p = base();
    p.out_dir.clear();
    REQUIRE_THROWS_WITH(p.validate(), ContainsSubstring("out_dir"));

    p = base();
    p.eval_tasks.clear();
    REQUIRE_THROWS_WITH(p.validate(), ContainsSubstring("eval_tasks is empty"));
}

TEST_CASE("run registry is append-only with immutable completions") {
    fs::path dir = fresh_dir("registry");
    fs::path file = dir / "registry.jsonl";

    {
        RunRegistry reg(file);
        REQUIRE(reg.status("r1").empty());
        REQUIRE_FALSE(reg.completed("r1"));
        REQUIRE(reg.begin("r1", "hash1"));
        REQUIRE(reg.status("r1") == "running");
        reg.complete("r1", "hash1", {{"records", "x.csv"}});
        REQUIRE(reg.completed("r1"));

        // Completed runs are immutable: no new attempt, no overwrite.
        REQUIRE_FALSE(reg.begin("r1", "hash1"));
        REQUIRE_THROWS_AS(reg.complete("r1", "hash1", {}), IoError);
        REQUIRE_THROWS_AS(reg.fail("r1", "hash1", "boom"), IoError);

        REQUIRE(reg.begin("r2", "hash1"));
        reg.fail("r2", "hash1", "boom");
        REQUIRE(reg.status("r2") == "failed");
        REQUIRE(reg.begin("r2", "hash1")); // failed runs may retry
    }

    // A new registry instance reloads the same truth from disk.
    {
        RunRegistry reg(file);
        REQUIRE(reg.completed("r1"));
        REQUIRE(reg.status("r2") == "running");
    }

    // Events carry timestamp, run id, plan hash, and status.
    std::vector<std::string> lines = csv_lines(file);
    REQUIRE(lines.size() == 5);
    nlohmann::json ev = nlohmann::json::parse(lines[1]);
    REQUIRE(ev.at("run_id") == "r1");
    REQUIRE(ev.at("plan") == "hash1");
    REQUIRE(ev.at("status") == "completed");
    REQUIRE(ev.at("artifacts").at("records") == "x.csv");
    std::string ts = ev.at("ts").get<std::string>();
    REQUIRE(ts.size() == 20);
    REQUIRE(ts[10] == 'T');
    REQUIRE(ts.back() == 'Z');

    // A torn trailing line (crash mid-append) is tolerated; garbage anywhere
    // else is corruption and must be loud.
    {
        std::ofstream app(file, std::ios::app);
        app << R"({"run_id": "r3", "status": "run)"; // truncated
    }
    REQUIRE_NOTHROW(RunRegistry(file));
    REQUIRE(RunRegistry(file).status("r3").empty());
    {
        std::ofstream app(file, std::ios::app);
        app << "\n" << R"({"run_id": "r4", "plan": "h", "status": "running", "ts": "x"})" << "\n";
    }
    REQUIRE_THROWS_WITH(RunRegistry(file), ContainsSubstring("corrupt line"));
}

TEST_CASE("single-task run writes records, snapshots, and losses") {
    fs::path dir = fresh_dir("single");
    seed_foundation(dir);
    ExperimentPlan p = tiny_plan(dir);
    p.jobs.push_back(make_job(p, FinetuneMethod::zs_init_ce, "ta"));
    const std::string run = p.jobs[0].run_id;

    PlanOutcome outcome = run_plan(p, 1, nullptr, PlanPhase::singles);
    REQUIRE(outcome.failures.empty());
    REQUIRE(outcome.executed == 1);
    REQUIRE(outcome.skipped == 0);

    OutputLayout out(p.out_dir);
    REQUIRE(fs::exists(out.plan_file()));
    REQUIRE(fs::exists(out.snapshot_file(run, "0")));
    REQUIRE(fs::exists(out.snapshot_file(run, "0.5")));
    REQUIRE(fs::exists(out.snapshot_file(run, "1")));
    REQUIRE(RunRegistry(out.registry_file()).completed(run));

    std::vector<std::string> losses = csv_lines(out.losses_file(run));
    REQUIRE(losses[0] == "step,epoch,lr,loss_total,loss_ce,loss_reg");
    REQUIRE(losses.size() == 1 + 4); // 2 epochs x 96/48 steps

    // One record per checkpoint and evaluation task, checkpoint-major in the
    // evaluation order of the plan.
    std::vector<std::string> rec = csv_lines(out.records_file(run));
    REQUIRE(rec.size() == 2 * 3);
    for (std::size_t i = 0; i < rec.size(); ++i) {
        std::vector<std::string> f = fields_of(rec[i]);
        REQUIRE(f.size() == 11);
        REQUIRE(f[0] == run);
        REQUIRE(f[1] == "zs_init_ce");
        REQUIRE(f[2] == "ta");
        REQUIRE(f[3] == p.eval_tasks[i % 3]);
        REQUIRE(f[4] == (i < 3 ? "0.5" : "1"));
    }

    // metrics.csv is exactly the header plus the run's records.
    REQUIRE(slurp(out.metrics_file()) ==
            std::string(kMetricsCsvHeader) + "\n" + slurp(out.records_file(run)));

    // Oracle re-derivation of one final-checkpoint record from stored
    // artifacts alone: accuracies, deltas, and distances must match the CSV
    // to the last bit.
    ModelSnapshot snap1 = load_snapshot(out.snapshot_file(run, "1").string());
    ModelSnapshot snap0 = load_snapshot(out.snapshot_file(run, "0").string());
    FoundationModel fm = load_foundation(out.foundation_prefix().string());
    ModelSnapshot foundation = foundation_to_snapshot(fm);
    TaskDataset tb = oracle_task(p, "tb");

    std::vector<std::string> f = fields_of(rec[4]); // fraction 1.0, eval tb
    REQUIRE(f[3] == "tb");
    REQUIRE(std::stod(f[5]) == a_zs(fm.spec, snap1, tb));
    REQUIRE(std::stod(f[6]) == a_lp(fm.spec, snap1, tb));
    REQUIRE(std::stod(f[7]) == std::stod(f[5]) - a_zs(fm.spec, foundation, tb));
    REQUIRE(std::stod(f[8]) == std::stod(f[6]) - a_lp(fm.spec, foundation, tb));
    REQUIRE(std::stod(f[9]) == param_sq_distance(snap1, snap0));
    REQUIRE(std::stod(f[10]) == feature_distance(fm.spec, snap1, snap0, tb.train.x));
}

TEST_CASE("failed runs are recorded and a rerun recovers") {
    fs::path dir = fresh_dir("failure");
    seed_foundation(dir);
    ExperimentPlan p = tiny_plan(dir);
    p.jobs.push_back(make_job(p, FinetuneMethod::zs_init_ce, "ta"));
    p.jobs[0].config.learning_rate = 1e200; // blows up in a step or two
    const std::string run = p.jobs[0].run_id;

    PlanOutcome bad = run_plan(p, 1, nullptr, PlanPhase::singles);
    REQUIRE(bad.failures.size() == 1);
    REQUIRE(bad.failures[0].first == run);
    REQUIRE_THAT(bad.failures[0].second, ContainsSubstring("finetune step"));

    OutputLayout out(p.out_dir);
    REQUIRE(RunRegistry(out.registry_file()).status(run) == "failed");
    REQUIRE(csv_lines(out.metrics_file()).size() == 1); // header only

    // Same run id with a sane config re-executes and completes.
    p.jobs[0].config.learning_rate = 1e-3;
    PlanOutcome good = run_plan(p, 1, nullptr, PlanPhase::singles);
    REQUIRE(good.failures.empty());
    REQUIRE(good.executed == 1);
    REQUIRE(RunRegistry(out.registry_file()).completed(run));
    REQUIRE(csv_lines(out.metrics_file()).size() == 1 + 6);
}

namespace {

// Shared plan for the end-to-end tests: two jobs, a two-stage sequence with
// two methods, and one Wise-FT ablation.
ExperimentPlan full_tiny_plan(const fs::path& dir) {
    ExperimentPlan p = tiny_plan(dir);
    p.jobs.push_back(make_job(p, FinetuneMethod::zs_init_ce, "ta"));
    p.jobs.push_back(make_job(p, FinetuneMethod::lp_init_l2sp, "tb"));
    p.sequences.push_back(
        {"sq", {"ta", "tb"}, {FinetuneMethod::zs_init_ce, FinetuneMethod::joint}});
    p.wiseft.push_back({"ft-zs_init_ce-ta", {0.0, 0.5, 1.0}});
    return p;
}

} // namespace

TEST_CASE("rerun of a completed plan is a no-op with identical bytes") {
    fs::path dir = fresh_dir("rerun");
    seed_foundation(dir);
    ExperimentPlan p = full_tiny_plan(dir);

    PlanOutcome first = run_plan(p, 2, nullptr, PlanPhase::report);
    REQUIRE(first.failures.empty());
    REQUIRE(first.executed == 7); // 2 jobs + 2x2 stages + 1 wiseft
    OutputLayout out(p.out_dir);
    std::string metrics = slurp(out.metrics_file());
    std::string sequences = slurp(out.sequences_file());
    std::string report_txt = slurp(out.report_txt());
    std::string report_csv = slurp(out.report_csv());
    std::string registry = slurp(out.registry_file());

    PlanOutcome second = run_plan(p, 2, nullptr, PlanPhase::report);
    REQUIRE(second.failures.empty());
    REQUIRE(second.executed == 0);
    REQUIRE(second.skipped == 7);
    REQUIRE(slurp(out.metrics_file()) == metrics);
    REQUIRE(slurp(out.sequences_file()) == sequences);
    REQUIRE(slurp(out.report_txt()) == report_txt);
    REQUIRE(slurp(out.report_csv()) == report_csv);
    // Skipping writes nothing, so even the registry is untouched.
    REQUIRE(slurp(out.registry_file()) == registry);
}

TEST_CASE("fresh directories and worker counts reproduce outputs byte for byte") {
    fs::path da = fresh_dir("det_a");
    fs::path db = fresh_dir("det_b");
    seed_foundation(da);
    seed_foundation(db);
    ExperimentPlan pa = full_tiny_plan(da);
    ExperimentPlan pb = full_tiny_plan(db);

    REQUIRE(run_plan(pa, 1, nullptr, PlanPhase::report).failures.empty());
    REQUIRE(run_plan(pb, 3, nullptr, PlanPhase::report).failures.empty());

    OutputLayout oa(pa.out_dir), ob(pb.out_dir);
    REQUIRE(slurp(oa.metrics_file()) == slurp(ob.metrics_file()));
    REQUIRE(slurp(oa.sequences_file()) == slurp(ob.sequences_file()));
    REQUIRE(slurp(oa.report_txt()) == slurp(ob.report_txt()));
    REQUIRE(slurp(oa.report_csv()) == slurp(ob.report_csv()));
    REQUIRE(slurp(oa.records_file("sq-joint-k2")) == slurp(ob.records_file("sq-joint-k2")));
}

TEST_CASE("one-task sequence reproduces the single-task run") {
    fs::path dir = fresh_dir("seq1");
    seed_foundation(dir);
    ExperimentPlan p = tiny_plan(dir);
    p.jobs.push_back(make_job(p, FinetuneMethod::lp_init_ce, "ta"));
    p.sequences.push_back({"solo", {"ta"}, {FinetuneMethod::lp_init_ce}});

    REQUIRE(run_plan(p, 1, nullptr, PlanPhase::sequences).failures.empty());
    OutputLayout out(p.out_dir);
    std::vector<std::string> job_rows = csv_lines(out.records_file("ft-lp_init_ce-ta"));
    std::vector<std::string> seq_rows = csv_lines(out.records_file("solo-lp_init_ce-k1"));
    REQUIRE(job_rows.size() == seq_rows.size());
    for (std::size_t i = 0; i < job_rows.size(); ++i) {
        // Identical except the run id column.
        REQUIRE(job_rows[i].substr(job_rows[i].find(',')) ==
                seq_rows[i].substr(seq_rows[i].find(',')));
    }
}

TEST_CASE("sequence stages chain and joint stages accumulate data") {
    fs::path dir = fresh_dir("seqchain");
    seed_foundation(dir);
    ExperimentPlan p = tiny_plan(dir);
    p.sequences.push_back(
        {"sq", {"ta", "tb"}, {FinetuneMethod::zs_init_ce, FinetuneMethod::joint}});

    REQUIRE(run_plan(p, 1, nullptr, PlanPhase::sequences).failures.empty());
    OutputLayout out(p.out_dir);

    // Stage 2 starts from stage 1's final encoder.
    ModelSnapshot k1_final = load_snapshot(out.snapshot_file("sq-zs_init_ce-k1", "1").string());
    ModelSnapshot k2_initial = load_snapshot(out.snapshot_file("sq-zs_init_ce-k2", "0").string());
    REQUIRE(param_sq_distance(k2_initial, k1_final) == 0.0);

    // The joint method sees the union of all data so far: twice the training
    // rows means twice the steps per epoch.
    auto epoch0_steps = [&out](const std::string& run) {
        std::vector<std::string> rows = csv_lines(out.losses_file(run));
        std::size_t n = 0;
        for (std::size_t i = 1; i < rows.size(); ++i)
            if (fields_of(rows[i])[1] == "0") ++n;
        return n;
    };
    REQUIRE(epoch0_steps("sq-zs_init_ce-k2") == 2); // 96 rows / 48
    REQUIRE(epoch0_steps("sq-joint-k2") == 4);      // 192 rows / 48
    REQUIRE(epoch0_steps("sq-joint-k1") == 2);
}

TEST_CASE("continual summary matches brute force from stored snapshots") {
    fs::path dir = fresh_dir("continual");
    seed_foundation(dir);
    ExperimentPlan p = tiny_plan(dir);
    p.sequences.push_back({"sq", {"ta", "tb"}, {FinetuneMethod::zs_init_ce}});

    REQUIRE(run_plan(p, 1, nullptr, PlanPhase::sequences).failures.empty());
    OutputLayout out(p.out_dir);

    FoundationModel fm = load_foundation(out.foundation_prefix().string());
    ModelSnapshot foundation = foundation_to_snapshot(fm);
    ModelSnapshot k1 = load_snapshot(out.snapshot_file("sq-zs_init_ce-k1", "1").string());
    ModelSnapshot k2 = load_snapshot(out.snapshot_file("sq-zs_init_ce-k2", "1").string());

    std::vector<std::string> rows = csv_lines(out.sequences_file());
    REQUIRE(rows[0] == std::string(kSequenceCsvHeader));
    REQUIRE(rows.size() == 1 + 3); // ta, tb, others

    // Row for the first task, which stage 2 may have eroded.
    std::vector<std::string> fa = fields_of(rows[1]);
    REQUIRE(fa[0] == "sq");
    REQUIRE(fa[1] == "zs_init_ce");
    REQUIRE(fa[2] == "ta");
    TaskDataset ta = oracle_task(p, "ta");
    double alf = a_lp(fm.spec, k2, ta);
    double best_prior = std::max(a_lp(fm.spec, foundation, ta), a_lp(fm.spec, k1, ta));
    REQUIRE(std::stod(fa[3]) == alf);
    REQUIRE(std::stod(fa[4]) == alf - best_prior);

    // For the task of the final stage the priors never saw it trained, so
    // its continual delta is measured against their best anyway.
    std::vector<std::string> fb = fields_of(rows[2]);
    REQUIRE(fb[2] == "tb");
    TaskDataset tb = oracle_task(p, "tb");
    REQUIRE(std::stod(fb[3]) == a_lp(fm.spec, k2, tb));

    // The "others" row averages the final model's standing on the tasks the
    // sequence never touched (here: tc alone).
    std::vector<std::string> fo = fields_of(rows[3]);
    REQUIRE(fo[2] == "others");
    TaskDataset tc = oracle_task(p, "tc");
    double alf_tc = a_lp(fm.spec, k2, tc);
    REQUIRE(std::stod(fo[3]) == alf_tc);
    REQUIRE(std::stod(fo[4]) == alf_tc - a_lp(fm.spec, foundation, tc));
}

TEST_CASE("wise-ft ablation selects on validation and pairs with its base") {
    fs::path dir = fresh_dir("wiseft");
    seed_foundation(dir);
    ExperimentPlan p = tiny_plan(dir);
    p.jobs.push_back(make_job(p, FinetuneMethod::zs_init_ce, "ta"));
    const std::string base = p.jobs[0].run_id;
    p.wiseft.push_back({base, {0.0, 0.5, 1.0}});

    REQUIRE(run_plan(p, 1, nullptr, PlanPhase::wiseft).failures.empty());
    OutputLayout out(p.out_dir);
    const std::string wrun = base + "-wiseft";
    REQUIRE(RunRegistry(out.registry_file()).completed(wrun));

    std::vector<std::string> rows = csv_lines(out.records_file(wrun));
    REQUIRE(rows.size() == 3); // one per eval task, final fraction only
    for (const std::string& row : rows) {
        std::vector<std::string> f = fields_of(row);
        REQUIRE(f[0] == wrun);
        REQUIRE(f[1] == "zs_init_ce+wiseft");
        REQUIRE(f[2] == "ta");
        REQUIRE(f[4] == "1");
    }

    // Oracle: redo the selection from the stored endpoints.
    ModelSnapshot theta0 = load_snapshot(out.snapshot_file(base, "0").string());
    ModelSnapshot thetaF = load_snapshot(out.snapshot_file(base, "1").string());
    FoundationModel fm = load_foundation(out.foundation_prefix().string());
    TaskDataset ta = oracle_task(p, "ta");
    WiseFtResult w = wise_ft_select(fm.spec, theta0, thetaF, ta, {0.0, 0.5, 1.0});
    REQUIRE(w.val_accuracy.size() == 3);
    REQUIRE(std::stod(fields_of(rows[0])[6]) == a_lp(fm.spec, w.snapshot, ta));

    // Both rows of the pair live in metrics.csv: the base run's final
    // checkpoint and the interpolated model.
    std::string metrics = slurp(out.metrics_file());
    REQUIRE_THAT(metrics, ContainsSubstring(base + ",zs_init_ce,ta,ta,1,"));
    REQUIRE_THAT(metrics, ContainsSubstring(wrun + ",zs_init_ce+wiseft,ta,ta,1,"));
}

TEST_CASE("wise-ft with alpha zero reproduces the fine-tuned endpoint") {
    fs::path dir = fresh_dir("wiseft0");
    seed_foundation(dir);
    ExperimentPlan p = tiny_plan(dir);
    p.jobs.push_back(make_job(p, FinetuneMethod::zs_init_ce, "ta"));
    const std::string base = p.jobs[0].run_id;
    p.wiseft.push_back({base, {0.0}}); // alpha 0 is the fine-tuned model

    REQUIRE(run_plan(p, 1, nullptr, PlanPhase::wiseft).failures.empty());
    OutputLayout out(p.out_dir);

    std::vector<std::string> base_rows = csv_lines(out.records_file(base));
    std::vector<std::string> w_rows = csv_lines(out.records_file(base + "-wiseft"));
    REQUIRE(w_rows.size() == 3);
    // Base rows 3..5 are the final checkpoint; numeric columns must agree
    // exactly with the interpolated rows.
    for (std::size_t i = 0; i < 3; ++i) {
        std::vector<std::string> fb = fields_of(base_rows[3 + i]);
        std::vector<std::string> fw = fields_of(w_rows[i]);
        for (std::size_t c = 2; c < 11; ++c) REQUIRE(fw[c] == fb[c]);
    }
}

TEST_CASE("wise-ft on an unfinished base run fails loudly") {
    fs::path dir = fresh_dir("wiseft_nobase");
    seed_foundation(dir);
    ExperimentPlan p = tiny_plan(dir);
    p.jobs.push_back(make_job(p, FinetuneMethod::zs_init_ce, "ta"));
    p.wiseft.push_back({p.jobs[0].run_id, {0.0, 1.0}});

    OutputLayout out(p.out_dir);
    out.prepare();
    RunRegistry reg(out.registry_file());
    FoundationModel fm = load_foundation(out.foundation_prefix().string());
    ConceptUniverse u = make_universe(p.universe_seed, p.universe_concepts, p.encoder.input_dim);
    EvalContext ctx = build_eval_context(p, u, fm);

    REQUIRE_THROWS_WITH(run_wise_ft_ablation(ctx, out, reg, "h", p, p.wiseft[0]),
                        ContainsSubstring("has not completed"));
    REQUIRE(reg.status(p.wiseft[0].base_run + "-wiseft") == "failed");
}

TEST_CASE("metric assembly is plan-ordered and excludes incomplete runs") {
    fs::path dir = fresh_dir("assembly");
    ExperimentPlan p = tiny_plan(dir);
    p.jobs.push_back(make_job(p, FinetuneMethod::zs_init_ce, "ta"));
    p.jobs.push_back(make_job(p, FinetuneMethod::zs_init_ce, "tb"));
    OutputLayout out(p.out_dir);
    out.prepare();
    RunRegistry reg(out.registry_file());

    auto fake_records = [&out](const std::string& run, const std::string& content) {
        std::ofstream rec(out.records_file(run), std::ios::trunc);
        rec << content;
    };
    fake_records(p.jobs[0].run_id, "first-run-row\n");
    fake_records(p.jobs[1].run_id, "second-run-row\n");

    // Only completed runs enter the table.
    REQUIRE(reg.begin(p.jobs[1].run_id, "h"));
    reg.complete(p.jobs[1].run_id, "h", {});
    assemble_metrics_csv(p, out, reg);
    REQUIRE(slurp(out.metrics_file()) == std::string(kMetricsCsvHeader) + "\nsecond-run-row\n");

    // Completing the first job slots its rows before the second: plan order,
    // not completion order.
    REQUIRE(reg.begin(p.jobs[0].run_id, "h"));
    reg.complete(p.jobs[0].run_id, "h", {});
    assemble_metrics_csv(p, out, reg);
    REQUIRE(slurp(out.metrics_file()) ==
            std::string(kMetricsCsvHeader) + "\nfirst-run-row\nsecond-run-row\n");

    // A completed run whose records vanished is corruption, not data.
    fs::remove(out.records_file(p.jobs[0].run_id));
    REQUIRE_THROWS_WITH(assemble_metrics_csv(p, out, reg),
                        ContainsSubstring("records are missing"));
}

TEST_CASE("report summarizes final checkpoints with best flags") {
    fs::path dir = fresh_dir("report");
    OutputLayout out(dir.string());
    out.prepare();

    // Hand-built metrics: two tasks, two methods plus a wiseft variant.
    // Mid-run rows carry absurd values to prove only fraction 1 counts, and
    // the tasks interleave to prove the summary regroups them into blocks.
    std::ofstream m(out.metrics_file(), std::ios::trunc);
    m << kMetricsCsvHeader << '\n';
    auto row = [&m](const std::string& run, const std::string& method, const std::string& ft,
                    const std::string& ev, const std::string& frac, double alp, double dlp) {
        m << run << ',' << method << ',' << ft << ',' << ev << ',' << frac << ",0,"
          << format_g17(alp) << ",0," << format_g17(dlp) << ",0,0\n";
    };
    row("r1", "m1", "tx", "tx", "0.5", 1.0, -99.0);
    row("r1", "m1", "tx", "tx", "1", 91.0, 0.0);
    row("r1", "m1", "tx", "ty", "1", 0.0, -4.0);
    row("r1", "m1", "tx", "tz", "1", 0.0, -6.0);
    row("r3", "m1", "ty", "ty", "1", 84.0, 0.0);
    row("r3", "m1", "ty", "tx", "1", 0.0, -1.0);
    row("r2", "m2", "tx", "tx", "1", 88.0, 0.0);
    row("r2", "m2", "tx", "ty", "1", 0.0, -1.0);
    row("r2", "m2", "tx", "tz", "1", 0.0, -2.0);
    row("r4", "m2+wiseft", "ty", "ty", "1", 80.0, 0.0);
    row("r4", "m2+wiseft", "ty", "tx", "1", 0.0, -1.0);
    m.close();

    std::vector<ReportRow> rows = summarize_metrics(out.metrics_file().string());
    REQUIRE(rows.size() == 4);
    REQUIRE(rows[0].ft_task == "tx");
    REQUIRE(rows[0].method == "m1");
    REQUIRE(rows[0].a_lp_self == 91.0);
    REQUIRE(rows[0].mean_delta_lp_others == -5.0);
    REQUIRE_FALSE(rows[0].best);
    REQUIRE(rows[1].method == "m2");
    REQUIRE(rows[1].mean_delta_lp_others == -1.5);
    REQUIRE(rows[1].best);
    // Exact tie on ty: both methods carry the flag.
    REQUIRE(rows[2].best);
    REQUIRE(rows[3].best);
    REQUIRE(rows[3].method == "m2+wiseft");

    write_report(out, "deadbeef00000000");
    std::string txt = slurp(out.report_txt());
    REQUIRE_THAT(txt, ContainsSubstring("plan deadbeef00000000"));
    REQUIRE_THAT(txt, ContainsSubstring("task tx"));
    REQUIRE_THAT(txt, ContainsSubstring("**-1.50**"));
    REQUIRE_THAT(txt, !ContainsSubstring("**-5.00**"));

    std::vector<std::string> rcsv = csv_lines(out.report_csv());
    REQUIRE(rcsv[0] == "ft_dataset,method,a_lp_self,mean_delta_lp_others,best");
    REQUIRE(rcsv[1] == "tx,m1," + format_g17(91.0) + "," + format_g17(-5.0) + ",0");
    REQUIRE(rcsv[2] == "tx,m2," + format_g17(88.0) + "," + format_g17(-1.5) + ",1");

    // A foreign header means the file is not ours to summarize.
    std::ofstream bad(out.metrics_file(), std::ios::trunc);
    bad << "something,else\n";
    bad.close();
    REQUIRE_THROWS_WITH(summarize_metrics(out.metrics_file().string()),
                        ContainsSubstring("unexpected header"));
}

TEST_CASE("run_plan honors phase boundaries and reuses the foundation") {
    fs::path dir = fresh_dir("phases");
    seed_foundation(dir);
    ExperimentPlan p = full_tiny_plan(dir);
    OutputLayout out(p.out_dir);

    std::ostringstream log;
    run_plan(p, 1, &log, PlanPhase::pretrain);
    REQUIRE_THAT(log.str(), ContainsSubstring("reusing"));
    REQUIRE(fs::exists(out.foundation_prefix().string() + ".snap"));
    REQUIRE_FALSE(fs::exists(out.metrics_file()));

    run_plan(p, 2, nullptr, PlanPhase::singles);
    REQUIRE(fs::exists(out.metrics_file()));
    REQUIRE_FALSE(fs::exists(out.sequences_file()));

    run_plan(p, 2, nullptr, PlanPhase::sequences);
    REQUIRE(fs::exists(out.sequences_file()));
    REQUIRE_FALSE(fs::exists(out.records_file("ft-zs_init_ce-ta-wiseft")));

    run_plan(p, 2, nullptr, PlanPhase::report);
    REQUIRE(fs::exists(out.records_file("ft-zs_init_ce-ta-wiseft")));
    REQUIRE(fs::exists(out.report_txt()));

    // A directory holding a foundation trained under different seeds must
    // not be silently reused.
    ExperimentPlan other = full_tiny_plan(dir);
    other.universe_seed = 8;
    REQUIRE_THROWS_WITH(run_plan(other, 1, nullptr, PlanPhase::pretrain),
                        ContainsSubstring("different seeds"));
}
