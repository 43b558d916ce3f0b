#pragma once

// Contrastive pre-training of the foundation model: encoder and concept
// prototype table trained jointly (two towers) with a symmetric InfoNCE
// loss over cosine similarities, then frozen for all downstream work.

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "datagen.hpp"
#include "nets.hpp"
#include "rng.hpp"
#include "snapshot_io.hpp"
#include "tape.hpp"
#include "tensor.hpp"

namespace forgetlab {

struct PretrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 64;
    double learning_rate = 1e-3; // plain gradient descent, cosine decay
    double temperature = 0.07;
    std::size_t corpus_per_concept = 50;
    std::uint64_t seed = 0;
};

struct FoundationModel {
    ModelSnapshot encoder; // theta_v(0): enc.* parameters only
    ConceptEmbedder embedder;
    EncoderSpec spec;
    PretrainConfig config;
    std::uint64_t universe_seed = 0;
    int attempts = 1; // pretraining attempts consumed by the sanity gate
};

inline constexpr const char* kEmbedderParamName = "emb.table";

inline double accuracy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rows() != labels.size())
        throw ShapeError("accuracy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(logits.rows()) + " rows");
    std::size_t correct = 0;
    std::vector<int> pred = argmax_rows(logits);
    for (std::size_t i = 0; i < pred.size(); ++i)
        if (pred[i] == labels[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

// ---------------------------------------------------------------------------
// InfoNCE

// Symmetric contrastive loss on the tape. Both towers are L2-normalized
// here; labels are universe concept ids (rows of the table).
//   direction 1: each sample against every table row (cross-entropy);
//   direction 2: each represented concept against the batch, where all
//   samples carrying that concept are positives.
inline Tape::Var infonce_on_tape(Tape& tape, Tape::Var embeddings, Tape::Var table,
                                 const std::vector<int>& labels, double temperature) {
    if (temperature <= 0.0)
        throw TensorError("infonce: temperature must be positive, got " +
                          std::to_string(temperature));
    const Tensor& emb = tape.value(embeddings);
    const Tensor& tab = tape.value(table);
    if (emb.shape.size() != 2 || tab.shape.size() != 2 || emb.shape[1] != tab.shape[1])
        throw ShapeError("infonce: embeddings " + shape_str(emb.shape) + " vs table " +
                         shape_str(tab.shape));
    if (labels.size() != emb.shape[0])
        throw ShapeError("infonce: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(emb.shape[0]) + " embeddings");
    for (int l : labels)
        if (l < 0 || static_cast<std::size_t>(l) >= tab.shape[0])
            throw ShapeError("infonce: label " + std::to_string(l) + " outside table of " +
                             std::to_string(tab.shape[0]) + " rows");

    Tape::Var emb_n = tape.l2_normalize_rows(embeddings);
    Tape::Var tab_n = tape.l2_normalize_rows(table);
    double inv_t = 1.0 / temperature;

    // sample -> concept
    Tape::Var logits1 = tape.scale(tape.matmul_nt(emb_n, tab_n), inv_t);
    Tape::Var dir1 = tape.softmax_cross_entropy(logits1, labels);

    // concept -> samples, over the batch's represented concepts
    std::set<int> present(labels.begin(), labels.end());
    std::vector<int> represented(present.begin(), present.end());
    std::vector<std::vector<int>> positives(represented.size());
    for (std::size_t r = 0; r < represented.size(); ++r)
        for (std::size_t j = 0; j < labels.size(); ++j)
            if (labels[j] == represented[r]) positives[r].push_back(static_cast<int>(j));
    Tape::Var gathered = tape.gather_rows(tab_n, represented);
    Tape::Var logits2 = tape.scale(tape.matmul_nt(gathered, emb_n), inv_t);
    Tape::Var dir2 = tape.info_nce_rows(logits2, positives);

    return tape.scale(tape.add(dir1, dir2), 0.5);
}

// Value-only evaluation of the same loss.
inline double infonce_loss(const Tensor& embeddings, const ConceptEmbedder& embedder,
                           const std::vector<int>& labels) {
    Tape tape;
    Tape::Var e = tape.constant(embeddings);
    Tape::Var t = tape.constant(embedder.table);
    return tape.value(infonce_on_tape(tape, e, t, labels, embedder.temperature)).values[0];
}

// ---------------------------------------------------------------------------
// Identity-style task (used by the sanity gate and by evaluation probes that
// need "fresh pre-training-like" data)

inline TaskDataset make_identity_task(const ConceptUniverse& u, const std::string& task_id,
                                      const std::vector<int>& concept_ids, std::uint64_t seed,
                                      std::size_t n_train, std::size_t n_val, std::size_t n_test) {
    if (concept_ids.size() < 2) throw ShapeError("make_identity_task: needs at least 2 concepts");
    for (int c : concept_ids)
        if (c < 0 || static_cast<std::size_t>(c) >= u.num_concepts)
            throw ShapeError("make_identity_task: concept " + std::to_string(c) +
                             " outside universe");
    TaskDataset task;
    task.task_id = task_id;
    task.concept_ids = concept_ids;
    task.noise_sigma = 0.0;
    task.seed = seed;
    task.style_shift = Tensor::zeros({u.input_dim});
    task.style_transform = Tensor(); // identity
    task.train = detail::make_split(u, task, n_train, "identity/train");
    task.val = detail::make_split(u, task, n_val, "identity/val");
    task.test = detail::make_split(u, task, n_test, "identity/test");
    return task;
}

// Zero-shot accuracy of an encoder + embedder pair on one split, classifying
// among the task's concepts.
inline double zs_accuracy(const EncoderSpec& spec, const ModelSnapshot& encoder,
                          const ConceptEmbedder& embedder, const TaskDataset& task,
                          const SplitData& split) {
    EncodeResult enc = encode(spec, encoder, split.x);
    LinearHead head = head_from_embedder(embedder, task.concept_ids);
    return accuracy(zs_logits(enc.embedding, head), split.labels);
}

// ---------------------------------------------------------------------------
// Pre-training

namespace detail {

struct PretrainRun {
    ModelSnapshot encoder;
    Tensor table;
    std::vector<double> epoch_losses;
};

inline PretrainRun pretrain_once(const ConceptUniverse& universe, const EncoderSpec& spec,
                                 const PretrainConfig& config, std::uint64_t eff_seed) {
    TaskDataset corpus = make_pretrain_corpus(universe, config.corpus_per_concept, eff_seed);
    ModelSnapshot enc = init_encoder(spec, eff_seed);
    enc.provenance = "foundation";

    Tensor table = Tensor::zeros({universe.num_concepts, spec.embed_dim});
    {
        KeyedRng rng(eff_seed, "init/emb.table");
        for (double& v : table.values) v = rng.gaussian();
        table = l2_normalize_rows_value(table);
    }

    std::size_t n = corpus.train.size();
    std::size_t d = universe.input_dim;
    std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
    std::size_t total_steps = steps_per_epoch * config.epochs;
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    PretrainRun run;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        KeyedRng shuffle_rng(eff_seed, "pretrain/shuffle/" + std::to_string(epoch));
        shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < n; start += config.batch_size, ++step) {
            std::size_t bsz = std::min(config.batch_size, n - start);
            Tensor bx = Tensor::zeros({bsz, d});
            std::vector<int> by(bsz);
            for (std::size_t i = 0; i < bsz; ++i) {
                std::size_t src = order[start + i];
                std::copy_n(corpus.train.x.values.data() + src * d, d,
                            bx.values.data() + i * d);
                by[i] = corpus.train.labels[src];
            }

            Tape tape;
            ParamVars vars;
            for (auto& p : enc.params) {
                p.tensor.requires_grad = true;
                vars[p.name] = tape.leaf(p.tensor);
            }
            table.requires_grad = true;
            Tape::Var table_var = tape.leaf(table);
            TapeEncodeResult fwd = encode_on_tape(spec, tape, vars, tape.constant(bx));
            Tape::Var loss =
                infonce_on_tape(tape, fwd.embedding, table_var, by, config.temperature);
            epoch_loss += tape.value(loss).values[0] * static_cast<double>(bsz);
            tape.backward(loss);

            double lr = config.learning_rate * 0.5 *
                        (1.0 + std::cos(M_PI * static_cast<double>(step) /
                                        static_cast<double>(total_steps)));
            for (auto& p : enc.params) {
                const auto& g = tape.grad(vars[p.name]);
                for (std::size_t i = 0; i < p.tensor.size(); ++i) p.tensor.values[i] -= lr * g[i];
            }
            const auto& gt = tape.grad(table_var);
            for (std::size_t i = 0; i < table.size(); ++i) table.values[i] -= lr * gt[i];
        }
        run.epoch_losses.push_back(epoch_loss / static_cast<double>(n));
    }

    for (auto& p : enc.params) p.tensor.requires_grad = false;
    table.requires_grad = false;
    run.encoder = std::move(enc);
    run.table = std::move(table);
    return run;
}

} // namespace detail

inline constexpr double kZsSanityGate = 0.85;

// Trains the two towers, renormalizes the prototype table, and checks the
// zero-shot sanity gate on a fresh identity-style 8-concept task. A failing
// gate triggers a re-pretrain with a shifted seed, at most 3 reseeds.
// epoch_losses_out, when given, receives the per-epoch mean training loss of
// the accepted attempt.
inline FoundationModel pretrain(const ConceptUniverse& universe, const EncoderSpec& spec,
                                const PretrainConfig& config,
                                std::vector<double>* epoch_losses_out = nullptr) {
    spec.validate();
    if (universe.input_dim != spec.input_dim)
        throw ShapeError("pretrain: universe d_in " + std::to_string(universe.input_dim) +
                         " != encoder input_dim " + std::to_string(spec.input_dim));
    if (config.batch_size == 0 || config.learning_rate <= 0.0)
        throw TensorError("pretrain: bad config (batch size or learning rate)");

    std::vector<int> gate_concepts;
    for (std::size_t i = 0; i < 8; ++i)
        gate_concepts.push_back(static_cast<int>((i * universe.num_concepts) / 8));

    const int max_reseeds = 3;
    for (int attempt = 0; attempt <= max_reseeds; ++attempt) {
        std::uint64_t eff_seed = config.seed + static_cast<std::uint64_t>(attempt);
        detail::PretrainRun run = detail::pretrain_once(universe, spec, config, eff_seed);

        FoundationModel fm;
        fm.encoder = std::move(run.encoder);
        fm.embedder.table = l2_normalize_rows_value(run.table);
        fm.embedder.temperature = config.temperature;
        fm.spec = spec;
        fm.config = config;
        fm.universe_seed = universe.seed;
        fm.attempts = attempt + 1;

        if (config.epochs == 0) {
            // Degenerate run: parameters stay at initialization; the sanity
            // gate only applies to a trained model.
            if (epoch_losses_out) *epoch_losses_out = run.epoch_losses;
            return fm;
        }

        TaskDataset gate = make_identity_task(universe, "sanity_gate", gate_concepts,
                                              eff_seed + 101, 16, 16, 400);
        double acc = zs_accuracy(spec, fm.encoder, fm.embedder, gate, gate.test);
        if (acc >= kZsSanityGate) {
            if (epoch_losses_out) *epoch_losses_out = run.epoch_losses;
            return fm;
        }
    }
    throw NumericError("pretrain: zero-shot sanity gate below " + std::to_string(kZsSanityGate) +
                       " after " + std::to_string(max_reseeds + 1) + " attempts");
}

// ---------------------------------------------------------------------------
// Persistence: snapshot blob (encoder + embedder table) + JSON sidecar.

// The snapshot used on disk carries the embedder table as one extra
// parameter row next to the encoder weights.
inline ModelSnapshot foundation_to_snapshot(const FoundationModel& fm) {
    ModelSnapshot snap = fm.encoder;
    snap.params.push_back({kEmbedderParamName, fm.embedder.table});
    snap.provenance = "foundation";
    snap.step_fraction = 0.0;
    return snap;
}

void save_foundation(const FoundationModel& fm, const std::string& path_prefix);
FoundationModel load_foundation(const std::string& path_prefix);

} // namespace forgetlab

// JSON sidecar lives in a separate include section so translation units that
// never persist a foundation model do not pay for the JSON header.
#include <nlohmann/json.hpp>

namespace forgetlab {

inline void save_foundation(const FoundationModel& fm, const std::string& path_prefix) {
    save_snapshot(foundation_to_snapshot(fm), path_prefix + ".snap");
    nlohmann::json j;
    j["epochs"] = fm.config.epochs;
    j["batch_size"] = fm.config.batch_size;
    j["learning_rate"] = fm.config.learning_rate;
    j["temperature"] = fm.config.temperature;
    j["corpus_per_concept"] = fm.config.corpus_per_concept;
    j["seed"] = fm.config.seed;
    j["universe_seed"] = fm.universe_seed;
    j["attempts"] = fm.attempts;
    j["spec"] = {
        {"input_dim", fm.spec.input_dim},
        {"hidden_widths", fm.spec.hidden_widths},
        {"embed_dim", fm.spec.embed_dim},
        {"activation", to_string(fm.spec.activation)},
        {"tap_layers", fm.spec.tap_layers},
    };
    std::ofstream out(path_prefix + ".json", std::ios::trunc);
    if (!out) throw IoError("save_foundation: cannot open " + path_prefix + ".json");
    out << j.dump(2) << '\n';
}

inline FoundationModel load_foundation(const std::string& path_prefix) {
    std::ifstream in(path_prefix + ".json");
    if (!in) throw IoError("load_foundation: cannot open " + path_prefix + ".json");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("load_foundation: bad sidecar " + path_prefix + ".json: " + e.what());
    }
    FoundationModel fm;
    try {
        fm.config.epochs = j.at("epochs").get<std::size_t>();
        fm.config.batch_size = j.at("batch_size").get<std::size_t>();
        fm.config.learning_rate = j.at("learning_rate").get<double>();
        fm.config.temperature = j.at("temperature").get<double>();
        fm.config.corpus_per_concept = j.at("corpus_per_concept").get<std::size_t>();
        fm.config.seed = j.at("seed").get<std::uint64_t>();
        fm.universe_seed = j.at("universe_seed").get<std::uint64_t>();
        fm.attempts = j.at("attempts").get<int>();
        const auto& s = j.at("spec");
        fm.spec.input_dim = s.at("input_dim").get<std::size_t>();
        fm.spec.hidden_widths = s.at("hidden_widths").get<std::vector<std::size_t>>();
        fm.spec.embed_dim = s.at("embed_dim").get<std::size_t>();
        fm.spec.activation = activation_from_string(s.at("activation").get<std::string>());
        fm.spec.tap_layers = s.at("tap_layers").get<std::vector<std::size_t>>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError("load_foundation: missing field in " + path_prefix + ".json: " + e.what());
    }
    fm.spec.validate();

    ModelSnapshot snap = load_snapshot(path_prefix + ".snap");
    bool have_table = false;
    for (auto& p : snap.params) {
        if (p.name == kEmbedderParamName) {
            fm.embedder.table = std::move(p.tensor);
            have_table = true;
        } else {
            fm.encoder.params.push_back(std::move(p));
        }
    }
    if (!have_table)
        throw IoError("load_foundation: snapshot lacks " + std::string(kEmbedderParamName));
    fm.encoder.provenance = snap.provenance;
    fm.embedder.temperature = fm.config.temperature;
    return fm;
}

} // namespace forgetlab
