// Every fine-tuning method on one task, side by side: downstream accuracy,
// retention on two unseen tasks, and how far the encoder moved in parameter
// and feature space. The desk-scale version of a methods-comparison table.
#include <cstdio>
#include <vector>

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
    std::vector<TaskDataset> others = {
        make_task(u, "o1", {1, 5, 9, 14, 21, 27, 33, 38}, 101, 0.1, 800, 200, 400),
        make_task(u, "o2", {2, 6, 11, 16, 22, 28, 34, 39}, 102, 0.1, 800, 200, 400),
    };
    std::vector<double> pre;
    for (const TaskDataset& t : others) pre.push_back(a_lp(spec, base, t));

    std::printf("\n%-18s %10s %12s %10s %10s\n", "method", "A_LP(ft)", "dLP(others)", "pdist",
                "fdist");
    for (FinetuneMethod m :
         {FinetuneMethod::zs_init_ce, FinetuneMethod::lp_init_ce, FinetuneMethod::lp_init_l2sp,
          FinetuneMethod::lp_init_ldifs, FinetuneMethod::ldifs_last_layer, FinetuneMethod::lwf,
          FinetuneMethod::lfl, FinetuneMethod::flyp}) {
        FinetuneConfig cfg;
        cfg.method = m;
        cfg.seed = 7;
        FinetuneTrajectory traj = finetune(spec, base, {ft}, cfg);
        const ModelSnapshot& fin = traj.final_snapshot;

        double dlp = 0.0;
        for (std::size_t i = 0; i < others.size(); ++i)
            dlp += (a_lp(spec, fin, others[i]) - pre[i]) / others.size();
        std::printf("%-18s %10.2f %+12.2f %10.4f %10.4f\n", to_string(m).c_str(),
                    a_lp(spec, fin, ft), dlp, param_sq_distance(fin, traj.initial),
                    feature_distance(spec, fin, base, ft.train.x));
    }
    return 0;
}
