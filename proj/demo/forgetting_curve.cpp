// Forgetting in motion: fine-tune on one task and watch the linear-probe
// accuracy on a task the model is NOT training on decay checkpoint by
// checkpoint — then watch a feature-space regularizer hold it in place.
#include <cstdio>

#include "forgetlab/evaluate.hpp"
#include "forgetlab/finetune.hpp"
#include "forgetlab/pretrain.hpp"

using namespace forgetlab;

int main() {
    ConceptUniverse u = make_universe(2026);
    EncoderSpec spec;
    PretrainConfig pc;
    pc.seed = 1;
    std::printf("pretraining foundation (40 concepts)...\n");
    ModelSnapshot base = foundation_to_snapshot(pretrain(u, spec, pc));

    TaskDataset ft = make_task(u, "ft", {0, 3, 7, 12, 19, 24, 31, 36}, 100, 0.1, 800, 200, 400);
    TaskDataset held = make_task(u, "held", {1, 5, 9, 14, 21, 27, 33, 38}, 101, 0.1, 800, 200, 400);
    double pre_ft = a_lp(spec, base, ft);
    double pre_held = a_lp(spec, base, held);
    std::printf("foundation A_LP: %.2f on the fine-tune task, %.2f on the held-out task\n\n",
                pre_ft, pre_held);

    for (FinetuneMethod m : {FinetuneMethod::zs_init_ce, FinetuneMethod::lp_init_ldifs}) {
        FinetuneConfig cfg;
        cfg.method = m;
        cfg.seed = 7;
        cfg.checkpoint_fractions = {0.1, 0.2, 0.4, 0.6, 0.8, 1.0};
        FinetuneTrajectory traj = finetune(spec, base, {ft}, cfg);

        std::printf("%s\n", to_string(m).c_str());
        std::printf("  %8s %12s %14s %12s\n", "fraction", "A_LP(ft)", "A_LP(held)", "dLP(held)");
        for (const auto& [frac, snap] : traj.checkpoints) {
            double on_held = a_lp(spec, snap, held);
            std::printf("  %8.2f %12.2f %14.2f %+12.2f\n", frac, a_lp(spec, snap, ft), on_held,
                        on_held - pre_held);
        }
        std::printf("\n");
    }
    return 0;
}
