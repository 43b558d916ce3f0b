// forgetlab: drive concept-forgetting experiments from a plan document.
//
// Verbs advance one experiment directory through its phases — `pretrain`
// trains or loads the shared foundation, `run` executes the single-task
// fine-tuning jobs, `sequence` the continual sequences, `wiseft` the
// interpolation ablations. Completed runs are skipped via the registry, so
// each verb is safe to re-issue. `report` regenerates the summary tables
// from the CSVs already on disk; `verify` runs the built-in self-checks.
#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <memory>
#include <set>

#include "forgetlab/checks.hpp"
#include "forgetlab/runner.hpp"

using namespace forgetlab;

namespace {

struct CommonOpts {
    std::string plan_path;
    std::string out_dir;
    std::size_t workers = 1;
    std::uint64_t seed = 0;
    bool seed_given = false;
    std::vector<std::string> methods;
};

// Keep only the named methods: drop other single-task jobs, interpolation
// jobs whose base run is gone, and sequence passes for filtered methods.
void filter_methods(ExperimentPlan& plan, const std::vector<std::string>& names) {
    std::set<std::string> keep;
    for (const std::string& n : names) {
        method_from_string(n); // typo check before anything is touched
        keep.insert(n);
    }
    std::erase_if(plan.jobs,
                  [&](const FinetuneJob& j) { return keep.count(to_string(j.method)) == 0; });
    std::set<std::string> run_ids;
    for (const FinetuneJob& j : plan.jobs) run_ids.insert(j.run_id);
    std::erase_if(plan.wiseft,
                  [&](const WiseFtJob& w) { return run_ids.count(w.base_run) == 0; });
    for (SequenceJob& s : plan.sequences)
        std::erase_if(s.methods,
                      [&](FinetuneMethod m) { return keep.count(to_string(m)) == 0; });
    std::erase_if(plan.sequences, [](const SequenceJob& s) { return s.methods.empty(); });
    if (plan.jobs.empty() && plan.sequences.empty() && plan.wiseft.empty())
        throw std::runtime_error("method filter leaves nothing to run");
}

ExperimentPlan load_or_default(const CommonOpts& opts) {
    ExperimentPlan plan = opts.plan_path.empty() ? default_plan() : load_plan(opts.plan_path);
    if (!opts.out_dir.empty()) plan.out_dir = opts.out_dir;
    if (opts.seed_given) {
        plan.seed = opts.seed;
        for (FinetuneJob& j : plan.jobs)
            j.config.seed = run_seed(plan.seed, j.method, j.ft_task);
    }
    if (!opts.methods.empty()) filter_methods(plan, opts.methods);
    plan.validate();
    return plan;
}

int run_phase(const CommonOpts& opts, PlanPhase upto) {
    ExperimentPlan plan = load_or_default(opts);
    PlanOutcome outcome = run_plan(plan, opts.workers, &std::cout, upto);
    if (!outcome.failures.empty()) {
        std::cerr << outcome.failures.size() << " unit(s) failed:\n";
        for (const auto& [unit, error] : outcome.failures)
            std::cerr << "  " << unit << ": " << error << "\n";
        return 1;
    }
    std::cout << "plan " << outcome.hash << ": " << outcome.executed << " executed, "
              << outcome.skipped << " skipped\n";
    return 0;
}

int regenerate_report(const CommonOpts& opts) {
    ExperimentPlan plan = load_or_default(opts);
    OutputLayout out(plan.out_dir);
    write_report(out, plan_hash(plan));
    std::ifstream txt(out.report_txt());
    std::cout << txt.rdbuf();
    std::cout << "\nwrote " << out.report_txt().string() << " and " << out.report_csv().string()
              << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale laboratory for concept forgetting during fine-tuning"};
    app.require_subcommand(1);
    int exit_code = 0;

    auto add_plan_flags = [](CLI::App* sub, const std::shared_ptr<CommonOpts>& o,
                             bool with_workers) {
        sub->add_option("--plan", o->plan_path,
                        "plan document (JSON); omitted: the built-in default plan")
            ->check(CLI::ExistingFile);
        sub->add_option("--out", o->out_dir, "output directory (overrides the plan's)");
        if (with_workers)
            sub->add_option("--workers", o->workers, "parallel run workers")
                ->check(CLI::Range(std::size_t{1}, std::size_t{64}));
        sub->add_option("--seed", o->seed,
                        "override the plan seed (re-derives every run seed)")
            ->each([o](const std::string&) { o->seed_given = true; });
        sub->add_option("--methods", o->methods,
                        "comma-separated method filter for fine-tuning jobs")
            ->delimiter(',');
    };

    auto phase_verb = [&](const char* name, const char* desc, PlanPhase phase) {
        CLI::App* sub = app.add_subcommand(name, desc);
        auto opts = std::make_shared<CommonOpts>();
        add_plan_flags(sub, opts, true);
        sub->callback([&exit_code, opts, phase]() { exit_code = run_phase(*opts, phase); });
    };
    phase_verb("pretrain", "train or load the shared foundation model", PlanPhase::pretrain);
    phase_verb("run", "execute the single-task fine-tuning jobs", PlanPhase::singles);
    phase_verb("sequence", "continue through the continual-learning sequences",
               PlanPhase::sequences);
    phase_verb("wiseft", "continue through the weight-interpolation ablations",
               PlanPhase::wiseft);

    {
        CLI::App* sub =
            app.add_subcommand("report", "regenerate summary tables from existing CSVs");
        auto opts = std::make_shared<CommonOpts>();
        add_plan_flags(sub, opts, false);
        sub->callback([&exit_code, opts]() { exit_code = regenerate_report(*opts); });
    }
    {
        CLI::App* sub =
            app.add_subcommand("verify", "run the built-in oracle and invariant self-checks");
        sub->callback([&exit_code]() {
            exit_code = print_check_results(std::cout, run_all_checks()) ? 0 : 1;
        });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return exit_code;
}
