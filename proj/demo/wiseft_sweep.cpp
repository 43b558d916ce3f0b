// The Wise-FT tradeoff curve: interpolate between the foundation weights
// and a plainly fine-tuned model, and print what each mixing ratio buys on
// the fine-tune task versus a task the run never saw. alpha = 0 is the
// fine-tuned endpoint, alpha = 1 the foundation.
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
    double pre_held = a_lp(spec, base, held);

    FinetuneConfig cfg;
    cfg.seed = 7; // zs_init_ce: the baseline that forgets the most
    FinetuneTrajectory traj = finetune(spec, base, {ft}, cfg);

    WiseFtResult sel =
        wise_ft_select(spec, traj.initial, traj.final_snapshot, ft, default_alpha_grid());

    std::printf("\n%7s %10s %12s %14s\n", "alpha", "val(ft)", "A_LP(held)", "dLP(held)");
    std::vector<double> grid = default_alpha_grid();
    for (std::size_t i = 0; i < grid.size(); ++i) {
        ModelSnapshot mix = interpolate(traj.initial, traj.final_snapshot, grid[i]);
        double on_held = a_lp(spec, mix, held);
        std::printf("%7.1f %10.2f %12.2f %+14.2f%s\n", grid[i], sel.val_accuracy[i], on_held,
                    on_held - pre_held, grid[i] == sel.alpha ? "   <- selected" : "");
    }
    std::printf("\nselected alpha %.1f by validation accuracy on the fine-tune task\n", sel.alpha);
    return 0;
}
