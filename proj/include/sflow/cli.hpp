#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sflow/synth_gen.hpp"
#include "sflow/trainer.hpp"

namespace sflow {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// SceneSpec JSON. The ego motion is either {"yaw": r, "translation": [..]}
// or {"rotation": [[..],[..],[..]], "translation": [..]}.
// ---------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const SceneSpec& s) {
    const Mat3& R = s.ego_motion.rotation;
    const Vec3& t = s.ego_motion.translation;
    j = {{"seed", s.seed},
         {"n_background", s.n_background},
         {"n_movers", s.n_movers},
         {"points_per_mover", s.points_per_mover},
         {"mover_speed_min", s.mover_speed_min},
         {"mover_speed_max", s.mover_speed_max},
         {"mover_max_yaw", s.mover_max_yaw},
         {"mover_range_min", s.mover_range_min},
         {"mover_range_max", s.mover_range_max},
         {"noise_sigma", s.noise_sigma},
         {"extent", s.extent},
         {"sensor_height", s.sensor_height},
         {"ego_motion",
          {{"rotation", {{R(0, 0), R(0, 1), R(0, 2)}, {R(1, 0), R(1, 1), R(1, 2)}, {R(2, 0), R(2, 1), R(2, 2)}}},
           {"translation", {t.x(), t.y(), t.z()}}}}};
}

inline void from_json(const nlohmann::json& j, SceneSpec& s) {
    static const std::vector<std::string> known = {
        "seed",         "n_background",    "n_movers",        "points_per_mover", "mover_speed_min",
        "mover_speed_max", "mover_max_yaw", "mover_range_min", "mover_range_max", "noise_sigma",
        "extent",       "sensor_height",   "ego_motion"};
    for (const auto& [k, v] : j.items())
        if (std::find(known.begin(), known.end(), k) == known.end())
            throw Error(ErrorCode::InvalidArgument, "unknown scene key '" + k + "'");
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    get("seed", s.seed);
    get("n_background", s.n_background);
    get("n_movers", s.n_movers);
    get("points_per_mover", s.points_per_mover);
    get("mover_speed_min", s.mover_speed_min);
    get("mover_speed_max", s.mover_speed_max);
    get("mover_max_yaw", s.mover_max_yaw);
    get("mover_range_min", s.mover_range_min);
    get("mover_range_max", s.mover_range_max);
    get("noise_sigma", s.noise_sigma);
    get("extent", s.extent);
    get("sensor_height", s.sensor_height);
    if (j.contains("ego_motion")) {
        const auto& e = j.at("ego_motion");
        Vec3 t = Vec3::Zero();
        if (e.contains("translation")) {
            const auto v = e.at("translation").get<std::vector<double>>();
            if (v.size() != 3) throw Error(ErrorCode::InvalidArgument, "ego translation needs 3 values");
            t = Vec3(v[0], v[1], v[2]);
        }
        if (e.contains("yaw") && e.contains("rotation"))
            throw Error(ErrorCode::InvalidArgument, "give either yaw or rotation, not both");
        if (e.contains("rotation")) {
            const auto rows = e.at("rotation").get<std::vector<std::vector<double>>>();
            if (rows.size() != 3) throw Error(ErrorCode::InvalidArgument, "ego rotation needs 3 rows");
            RigidTransform T;
            for (int r = 0; r < 3; ++r) {
                if (rows[r].size() != 3) throw Error(ErrorCode::InvalidArgument, "ego rotation rows need 3 values");
                for (int c = 0; c < 3; ++c) T.rotation(r, c) = rows[r][c];
            }
            T.translation = t;
            s.ego_motion = T;
        } else {
            s.ego_motion = RigidTransform::from_yaw(e.value("yaw", 0.0), t);
        }
    }
}

// ---------------------------------------------------------------------------
// Data layout helpers
// ---------------------------------------------------------------------------

inline bool is_frame_file(const fs::path& p) {
    if (!fs::is_regular_file(p)) return false;
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".sfpc" || ext == ".csv";
}

inline std::vector<fs::path> sorted_entries(const fs::path& dir) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

inline std::vector<fs::path> frame_files(const fs::path& dir) {
    std::vector<fs::path> out;
    for (const auto& p : sorted_entries(dir))
        if (is_frame_file(p)) out.push_back(p);
    return out;
}

/// A directory holding frame files is one sequence; otherwise each
/// subdirectory holding frame files is one sequence. Filenames sort in time
/// order.
inline std::vector<std::vector<fs::path>> find_sequences(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw Error(ErrorCode::IoFailure, "not a directory: " + dir.string());
    std::vector<std::vector<fs::path>> seqs;
    if (auto files = frame_files(dir); !files.empty()) {
        seqs.push_back(std::move(files));
        return seqs;
    }
    for (const auto& p : sorted_entries(dir)) {
        if (!fs::is_directory(p)) continue;
        if (auto files = frame_files(p); files.size() >= 2) seqs.push_back(std::move(files));
    }
    if (seqs.empty()) throw Error(ErrorCode::IoFailure, "no frame sequences under " + dir.string());
    return seqs;
}

inline std::vector<PointCloud> read_sequence(const std::vector<fs::path>& files) {
    std::vector<PointCloud> frames;
    for (const auto& f : files) frames.push_back(read_frame(f));
    return frames;
}

/// Pairs and their precomputation for every sequence under `dir`.
/// Sequences of three or more frames get temporally refined clusters.
struct LoadedData {
    std::vector<FramePair> pairs;
    std::vector<PreparedPair> prepared;
};

inline LoadedData load_training_data(const fs::path& dir, const TrainConfig& cfg) {
    LoadedData out;
    for (const auto& files : find_sequences(dir)) {
        auto pairs = pairs_of_sequence(read_sequence(files));
        if (pairs.size() >= 2) {
            const auto coarse = label_sequence(pairs, cfg.labeler);
            for (std::size_t t = 0; t < pairs.size(); ++t)
                out.prepared.push_back(prepare_pair(pairs[t], cfg, &coarse[t].clusters));
        } else {
            for (const auto& p : pairs) out.prepared.push_back(prepare_pair(p, cfg));
        }
        for (auto& p : pairs) out.pairs.push_back(std::move(p));
    }
    return out;
}

inline std::vector<SyntheticPair> synthetic_set(const SceneSpec& base, int count) {
    std::vector<SyntheticPair> out;
    for (int k = 0; k < count; ++k) {
        SceneSpec s = base;
        s.seed = base.seed + static_cast<std::uint64_t>(k);
        out.push_back(generate_pair(s));
    }
    return out;
}

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string loss_curve_csv(const std::vector<EpochLoss>& curve) {
    std::string out = "epoch,loss_total,loss_cd,loss_bf,loss_rigid,loss_smc,loss_dom\n";
    for (const auto& e : curve) {
        out += std::to_string(e.epoch);
        for (double v : {e.total, e.cd, e.bf, e.rigid, e.smc, e.dom}) out += "," + format_double(v);
        out += "\n";
    }
    return out;
}

inline void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
    f << text;
    if (!f) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

inline nlohmann::json read_json(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, path.string() + ": " + e.what());
    }
}

inline TrainConfig load_config(const std::string& path) {
    TrainConfig cfg;
    if (!path.empty()) {
        try {
            cfg = read_json(path).get<TrainConfig>();
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::InvalidArgument, path + ": " + e.what());
        }
    }
    return cfg;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << "row,cd,bf,rigid,smc,dom,epe_3way,epe_bs,epe_fs,epe_fd,ap,pq,precision,recall,miou,ri,final_loss\n";
    for (const auto& r : rows) {
        os << r.id << ',' << r.cd << ',' << r.bf << ',' << r.rigid << ',' << r.smc << ',' << r.dom;
        for (double v : {r.eval.epe.three_way, r.eval.epe.bs, r.eval.epe.fs, r.eval.epe.fd, r.eval.seg.ap,
                         r.eval.seg.pq, r.eval.seg.precision, r.eval.seg.recall, r.eval.seg.miou, r.eval.seg.ri,
                         r.final_loss})
            os << ',' << format_double(v);
        os << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

namespace cli {

struct GenArgs {
    std::string spec, out;
    int count = 1;
};

inline int run_gen(const GenArgs& a) {
    SceneSpec spec;
    if (!a.spec.empty()) {
        try {
            spec = read_json(a.spec).get<SceneSpec>();
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::InvalidArgument, a.spec + ": " + e.what());
        }
    }
    spec.validate();
    const fs::path root(a.out);
    for (int k = 0; k < a.count; ++k) {
        SceneSpec s = spec;
        s.seed = spec.seed + static_cast<std::uint64_t>(k);
        const SyntheticPair sp = generate_pair(s);
        char name[32];
        std::snprintf(name, sizeof name, "pair_%04d", k);
        const fs::path dir = root / name;
        fs::create_directories(dir);
        write_frame(sp.pair.source, dir / "frame_000000.sfpc");
        write_frame(sp.pair.target, dir / "frame_000001.sfpc");
    }
    return 0;
}

struct LabelArgs {
    std::string frames, out, config;
};

/// Pseudo-labels for every frame that has a successor; the written frames
/// carry the source points and the labels.
inline int run_label(const LabelArgs& a) {
    const TrainConfig cfg = load_config(a.config);
    cfg.validate();
    const auto files = frame_files(a.frames);
    if (files.size() < 2) throw Error(ErrorCode::IoFailure, "need at least two frames in " + a.frames);
    const auto pairs = pairs_of_sequence(read_sequence(files));
    const auto coarse = label_sequence(pairs, cfg.labeler);
    fs::create_directories(a.out);
    for (std::size_t t = 0; t < pairs.size(); ++t) {
        PointCloud c;
        c.points = pairs[t].source.points;
        c.gt_labels = coarse[t].pseudo.labels;
        write_frame(c, fs::path(a.out) / files[t].filename().replace_extension(".sfpc"));
    }
    return 0;
}

struct TrainArgs {
    std::string config, data, out, loss_csv;
    std::optional<int> epochs;
    std::optional<double> lr;
    std::optional<std::uint64_t> seed;
    bool dump_config = false;
};

inline int run_train(const TrainArgs& a) {
    TrainConfig cfg = load_config(a.config);
    if (a.epochs) cfg.epochs = *a.epochs;
    if (a.lr) cfg.learning_rate = *a.lr;
    if (a.seed) cfg.seed = *a.seed;
    cfg.validate();
    if (a.dump_config) {
        std::cout << nlohmann::json(cfg).dump(2) << "\n";
        return 0;
    }
    if (a.data.empty() || a.out.empty()) {
        std::cerr << "train: --data and --out are required\n";
        return 1;
    }
    const LoadedData data = load_training_data(a.data, cfg);
    const TrainResult tr = train_prepared(data.prepared, cfg);
    write_checkpoint(tr.params, a.out);
    if (!a.loss_csv.empty()) write_text(a.loss_csv, loss_curve_csv(tr.curve));
    return 0;
}

struct InferArgs {
    std::string checkpoint, config, source, target, out;
};

/// Without a checkpoint the freshly initialised model of the config is
/// used, which is what training with a zero learning rate leaves behind.
inline int run_infer(const InferArgs& a) {
    const TrainConfig cfg = load_config(a.config);
    cfg.validate();
    const ModelParams params =
        a.checkpoint.empty() ? ModelParams::initialize(cfg.model, cfg.seed) : read_checkpoint(a.checkpoint);
    FramePair pair;
    pair.source = read_frame(a.source);
    pair.target = read_frame(a.target);
    pair.source.frame_index = 0;
    pair.target.frame_index = 1;
    const Inference inf = infer(params, pair, cfg.labeler, cfg.weights);
    PointCloud out;
    out.points = pair.source.points;
    out.gt_labels = inf.labels;
    out.gt_flow = inf.total.vectors;
    write_frame(out, a.out);
    return 0;
}

struct EvalArgs {
    std::string pred, gt, out;
};

/// pred/gt are two frames or two directories matched by filename. EPE is
/// pooled over all points; segmentation metrics are averaged over frames
/// whose prediction carries labels.
inline int run_eval(const EvalArgs& a) {
    std::vector<std::pair<fs::path, fs::path>> matched;
    if (fs::is_directory(a.pred) != fs::is_directory(a.gt))
        throw Error(ErrorCode::InvalidArgument, "pred and gt must both be files or both be directories");
    if (fs::is_directory(a.gt)) {
        for (const auto& g : frame_files(a.gt)) {
            const fs::path p = fs::path(a.pred) / g.filename();
            if (!fs::exists(p)) throw Error(ErrorCode::IoFailure, "missing prediction " + p.string());
            matched.emplace_back(p, g);
        }
        if (matched.empty()) throw Error(ErrorCode::IoFailure, "no frames in " + a.gt);
    } else {
        matched.emplace_back(a.pred, a.gt);
    }
    EpeAccumulator acc;
    std::vector<SegReport> segs;
    for (const auto& [pp, gp] : matched) {
        const PointCloud pred = read_frame(pp);
        const PointCloud gt = read_frame(gp);
        if (!gt.gt_flow || !gt.gt_labels)
            throw Error(ErrorCode::InvalidArgument, gp.string() + " lacks flow or labels");
        if (!pred.gt_flow) throw Error(ErrorCode::InvalidArgument, pp.string() + " lacks flow");
        if (pred.size() != gt.size()) throw Error(ErrorCode::LengthMismatch, pp.string() + " point count differs");
        acc.add(epe_accumulate(gt.points, *pred.gt_flow, *gt.gt_flow, *gt.gt_labels));
        if (pred.gt_labels) segs.push_back(seg_metrics(*pred.gt_labels, *gt.gt_labels));
    }
    nlohmann::json j = {{"epe", to_json(acc.report())}, {"frames", matched.size()}};
    if (!segs.empty()) j["seg"] = to_json(mean_seg(segs));
    const std::string text = j.dump(2) + "\n";
    if (a.out.empty())
        std::cout << text;
    else
        write_text(a.out, text);
    return 0;
}

struct AblateArgs {
    std::string config, train, heldout, scene, csv;
    int synthetic = 0, holdout = 10;
};

/// Trains the five cumulative loss rows and evaluates each on the held-out
/// pairs, either from directories or from a seeded synthetic set whose last
/// `holdout` pairs are held out.
inline int run_ablate(const AblateArgs& a) {
    const TrainConfig cfg = load_config(a.config);
    cfg.validate();
    std::vector<PreparedPair> train_prep, held_prep;
    std::vector<FramePair> held;
    if (a.synthetic > 0) {
        if (a.holdout < 1 || a.holdout >= a.synthetic) {
            std::cerr << "ablate: --holdout must be in [1, --synthetic)\n";
            return 1;
        }
        SceneSpec spec;
        if (!a.scene.empty()) spec = read_json(a.scene).get<SceneSpec>();
        spec.validate();
        const auto set = synthetic_set(spec, a.synthetic);
        const auto n_train = static_cast<std::size_t>(a.synthetic - a.holdout);
        for (std::size_t i = 0; i < set.size(); ++i) {
            if (i < n_train) {
                train_prep.push_back(prepare_pair(set[i].pair, cfg));
            } else {
                held.push_back(set[i].pair);
                held_prep.push_back(prepare_pair(set[i].pair, cfg));
            }
        }
    } else {
        if (a.train.empty() || a.heldout.empty()) {
            std::cerr << "ablate: give --train and --heldout, or --synthetic\n";
            return 1;
        }
        train_prep = load_training_data(a.train, cfg).prepared;
        LoadedData h = load_training_data(a.heldout, cfg);
        held = std::move(h.pairs);
        held_prep = std::move(h.prepared);
    }
    const std::string table = ablation_table(run_ablation(train_prep, held_prep, held, cfg));
    std::cout << table;
    if (!a.csv.empty()) write_text(a.csv, table);
    return 0;
}

}  // namespace cli

/// Exit codes: 0 success, 1 usage error, 2 data error.
inline int cli_main(int argc, char** argv) {
    CLI::App app{"Self-supervised scene flow and motion segmentation"};
    app.require_subcommand(1);

    cli::GenArgs gen;
    auto* g = app.add_subcommand("gen", "Write synthetic frame pairs");
    g->add_option("--spec", gen.spec, "SceneSpec JSON (defaults when omitted)");
    g->add_option("--out", gen.out, "Output directory")->required();
    g->add_option("--count", gen.count, "Number of pairs; seeds increase from the spec seed")
        ->check(CLI::PositiveNumber);

    cli::LabelArgs label;
    auto* l = app.add_subcommand("label", "Write pseudo-labels for a frame sequence");
    l->add_option("--frames", label.frames, "Directory of time-ordered frames")->required();
    l->add_option("--out", label.out, "Output directory")->required();
    l->add_option("--config", label.config, "TrainConfig JSON (labeler section is used)");

    cli::TrainArgs train;
    auto* t = app.add_subcommand("train", "Train a model");
    t->add_option("--config", train.config, "TrainConfig JSON");
    t->add_option("--data", train.data, "Sequence directory, or a directory of sequence directories");
    t->add_option("--out", train.out, "Checkpoint path");
    t->add_option("--loss-csv", train.loss_csv, "Per-epoch loss curve");
    t->add_option("--epochs", train.epochs, "Override epochs");
    t->add_option("--lr", train.lr, "Override learning rate");
    t->add_option("--seed", train.seed, "Override seed");
    t->add_flag("--dump-config", train.dump_config, "Print the effective config and exit");

    cli::InferArgs inf;
    auto* i = app.add_subcommand("infer", "Predict flow and instance labels for one pair");
    i->add_option("--checkpoint", inf.checkpoint, "Checkpoint (fresh model from --config when omitted)");
    i->add_option("--config", inf.config, "TrainConfig JSON");
    i->add_option("--source", inf.source, "Source frame")->required();
    i->add_option("--target", inf.target, "Target frame")->required();
    i->add_option("--out", inf.out, "Output SFPC with labels and total flow")->required();

    cli::EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Score predictions against ground truth");
    e->add_option("--pred", ev.pred, "Predicted frame or directory")->required();
    e->add_option("--gt", ev.gt, "Ground-truth frame or directory")->required();
    e->add_option("--out", ev.out, "Metrics JSON (stdout when omitted)");

    cli::AblateArgs ab;
    auto* a = app.add_subcommand("ablate", "Run the cumulative loss-toggle grid");
    a->add_option("--config", ab.config, "TrainConfig JSON");
    a->add_option("--train", ab.train, "Training data directory");
    a->add_option("--heldout", ab.heldout, "Held-out data directory");
    a->add_option("--synthetic", ab.synthetic, "Generate this many pairs instead of reading data");
    a->add_option("--holdout", ab.holdout, "Synthetic pairs held out for evaluation");
    a->add_option("--scene", ab.scene, "SceneSpec JSON for --synthetic");
    a->add_option("--csv", ab.csv, "Also write the table here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int rc = app.exit(err);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (*g) return cli::run_gen(gen);
        if (*l) return cli::run_label(label);
        if (*t) return cli::run_train(train);
        if (*i) return cli::run_infer(inf);
        if (*e) return cli::run_eval(ev);
        if (*a) return cli::run_ablate(ab);
    } catch (const Error& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 2;
    } catch (const fs::filesystem_error& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 2;
    } catch (const nlohmann::json::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 2;
    }
    return 1;
}

}  // namespace sflow
