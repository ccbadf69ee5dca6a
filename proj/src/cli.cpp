#include "mde/cli.hpp"

#include <algorithm>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <utility>

#include <CLI11.hpp>
#include <json.hpp>

#include "mde/errors.hpp"
#include "mde/hash.hpp"
#include "mde/kernels.hpp"
#include "mde/losses.hpp"
#include "mde/model.hpp"
#include "mde/optim.hpp"
#include "mde/traineval.hpp"

namespace mde {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct ResolvedPaths {
    std::string interactions;
    std::string features_visual;
    std::string features_textual;
    fs::path out_dir;
};

ResolvedPaths resolve_paths(const RunConfig& cfg) {
    ResolvedPaths p;
    p.out_dir = cfg.paths.output_dir.empty() ? fs::path("out")
                                             : fs::path(cfg.paths.output_dir);
    auto pick = [&](const std::string& given, const char* fallback) {
        return given.empty() ? (p.out_dir / fallback).string() : given;
    };
    p.interactions = pick(cfg.paths.interactions, "interactions.tsv");
    p.features_visual = pick(cfg.paths.features_visual, "features_visual.bin");
    p.features_textual = pick(cfg.paths.features_textual, "features_textual.bin");
    return p;
}

std::string sibling_user_map(const std::string& interactions) {
    return interactions + ".users.tsv";
}
std::string sibling_item_map(const std::string& interactions) {
    return interactions + ".items.tsv";
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw DataError("cannot open for write: " + path.string());
    out << text;
    if (!out)
        throw DataError("write failed: " + path.string());
}

TrainConfig make_train_config(const RunConfig& cfg) {
    TrainConfig t;
    t.embed_dim = cfg.model.embed_dim;
    t.layers = cfg.model.layers;
    t.loss = cfg.losses;
    t.adam.lr = cfg.optim.lr;
    t.batch_size = cfg.optim.batch_size;
    t.max_epochs = cfg.optim.max_epochs;
    t.patience = cfg.optim.patience;
    t.early_stopping = cfg.optim.early_stopping;
    t.early_stop_k = cfg.eval.early_stop_k;
    t.seed = cfg.seed;
    t.ablation = cfg.ablation;
    return t;
}

void print_resolved(const RunConfig& cfg, std::ostream& out) {
    out << "seed: " << cfg.seed << "\n";
    out << "kernels: " << kernels::backend_name(kernels::active_backend()) << "\n";
    out << "resolved config:\n" << config_to_json(cfg);
}

json metrics_to_json(const MetricReport& r) {
    json j = json::object();
    j["k"] = r.k;
    j["rec@" + std::to_string(r.k)] = r.recall;
    j["prec@" + std::to_string(r.k)] = r.precision;
    j["map@" + std::to_string(r.k)] = r.map;
    j["ndcg@" + std::to_string(r.k)] = r.ndcg;
    j["users"] = r.num_users;
    return j;
}

/// One graph cache slot: binary payload plus a JSON sidecar identifying the
/// inputs it was built from.
struct CacheSlot {
    const char* name;
    json want;
};

SparseAdjacency load_or_build(const CacheSlot& slot, const fs::path& out_dir,
                              const std::function<SparseAdjacency()>& build,
                              std::ostream& log, std::size_t& hits,
                              std::size_t& builds) {
    const fs::path bin = out_dir / (std::string("cache_") + slot.name + ".bin");
    const fs::path side = out_dir / (std::string("cache_") + slot.name + ".json");
    if (fs::exists(bin) && fs::exists(side)) {
        try {
            json have = json::parse(std::ifstream(side));
            if (have == slot.want) {
                SparseAdjacency a = load_csr(bin.string());
                log << "[prepare] cache hit: " << slot.name << " (" << a.nnz()
                    << " nnz)\n";
                ++hits;
                return a;
            }
            log << "[prepare] cache stale: " << slot.name << ", rebuilding\n";
        } catch (const std::exception& e) {
            log << "[prepare] warning: cache for " << slot.name
                << " unreadable (" << e.what() << "), rebuilding\n";
        }
    }
    SparseAdjacency a = build();
    save_csr(bin.string(), a);
    write_text(side, slot.want.dump(2) + "\n");
    log << "[prepare] built: " << slot.name << " (" << a.nnz() << " nnz)\n";
    ++builds;
    return a;
}

} // namespace

PreparedData ensure_prepared(const RunConfig& cfg, std::ostream& log) {
    const ResolvedPaths paths = resolve_paths(cfg);
    fs::create_directories(paths.out_dir);

    const std::string umap = sibling_user_map(paths.interactions);
    const std::string imap = sibling_item_map(paths.interactions);
    LoadResult loaded;
    if (fs::exists(umap) && fs::exists(imap)) {
        loaded = load_interactions_mapped(paths.interactions, load_id_map(umap),
                                          load_id_map(imap));
        log << "[prepare] loaded " << paths.interactions << " against its id maps\n";
    } else {
        loaded = load_interactions(paths.interactions);
        log << "[prepare] loaded " << paths.interactions << " (first-appearance ids)\n";
    }
    if (loaded.stats.duplicates > 0)
        log << "[prepare] warning: dropped " << loaded.stats.duplicates
            << " duplicate edges\n";
    if (loaded.stats.dropped_users > 0)
        log << "[prepare] warning: dropped " << loaded.stats.dropped_users
            << " users without a train edge (" << loaded.stats.dropped_edges
            << " edges)\n";

    PreparedData prep;
    prep.dataset = std::move(loaded.dataset);
    if (prep.dataset.all_unsplit()) {
        prep.dataset = split_dataset(prep.dataset, cfg.split_ratios, cfg.seed);
        log << "[prepare] split " << prep.dataset.edges.size() << " edges "
            << cfg.split_ratios[0] << "/" << cfg.split_ratios[1] << "/"
            << cfg.split_ratios[2] << " (seed " << cfg.seed << ")\n";
    } else {
        log << "[prepare] input already carries split tags\n";
    }

    prep.visual = load_features(paths.features_visual);
    prep.textual = load_features(paths.features_textual);
    if (prep.visual.modality != "visual")
        throw DataError("expected visual features in " + paths.features_visual +
                        ", found modality '" + prep.visual.modality + "'");
    if (prep.textual.modality != "textual")
        throw DataError("expected textual features in " + paths.features_textual +
                        ", found modality '" + prep.textual.modality + "'");
    prep.visual.validate(prep.dataset.num_items);
    prep.textual.validate(prep.dataset.num_items);

    prep.data_hash = dataset_hash(prep.dataset);
    prep.prep_hash = cfg.prep_hash(prep.data_hash);

    save_interactions((paths.out_dir / "interactions_split.tsv").string(), prep.dataset);
    save_id_map((paths.out_dir / "user_ids.tsv").string(), prep.dataset.user_ids);
    save_id_map((paths.out_dir / "item_ids.tsv").string(), prep.dataset.item_ids);

    const std::string data_hex = hash_hex(prep.data_hash);
    const std::string prep_hex = hash_hex(prep.prep_hash);
    auto sidecar = [&](const char* kind, std::size_t k, const char* modality,
                       std::uint64_t fhash) {
        json j = json::object();
        j["kind"] = kind;
        j["data_hash"] = data_hex;
        j["prep_hash"] = prep_hex;
        j["k"] = k;
        if (modality) {
            j["modality"] = modality;
            j["feature_hash"] = hash_hex(fhash);
        }
        return j;
    };

    GraphBundle& g = prep.graphs;
    g.num_users = prep.dataset.num_users;
    g.num_items = prep.dataset.num_items;
    g.hetero = load_or_build(
        {"hetero", sidecar("hetero", 0, nullptr, 0)}, paths.out_dir,
        [&] { return normalize_symmetric(build_bipartite(prep.dataset)); }, log,
        prep.cache_hits, prep.cache_builds);
    g.item_homo[kVisual] = load_or_build(
        {"item_knn_visual",
         sidecar("item_knn_visual", cfg.model.knn_item, "visual",
                 feature_hash(prep.visual))},
        paths.out_dir, [&] { return build_item_knn(prep.visual, cfg.model.knn_item); },
        log, prep.cache_hits, prep.cache_builds);
    g.item_homo[kTextual] = load_or_build(
        {"item_knn_textual",
         sidecar("item_knn_textual", cfg.model.knn_item, "textual",
                 feature_hash(prep.textual))},
        paths.out_dir, [&] { return build_item_knn(prep.textual, cfg.model.knn_item); },
        log, prep.cache_hits, prep.cache_builds);
    g.user_homo = load_or_build(
        {"user_cooc", sidecar("user_cooc", cfg.model.knn_user, nullptr, 0)},
        paths.out_dir,
        [&] { return build_user_cooccurrence(prep.dataset, cfg.model.knn_user); }, log,
        prep.cache_hits, prep.cache_builds);
    g.finalize_transposes();

    prep.index = build_user_index(prep.dataset);
    return prep;
}

int cmd_prepare(const RunConfig& cfg, std::ostream& out) {
    print_resolved(cfg, out);
    PreparedData prep = ensure_prepared(cfg, out);
    const InteractionDataset& ds = prep.dataset;
    out << "[prepare] users: " << ds.num_users << ", items: " << ds.num_items
        << ", edges: " << ds.edges.size() << " (train "
        << ds.count_edges(Split::train) << ", val " << ds.count_edges(Split::val)
        << ", test " << ds.count_edges(Split::test) << ")\n";
    out << "[prepare] data hash: " << hash_hex(prep.data_hash)
        << ", prep hash: " << hash_hex(prep.prep_hash) << "\n";
    out << "[prepare] caches: " << prep.cache_hits << " hit, " << prep.cache_builds
        << " built\n";
    return 0;
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
    print_resolved(cfg, out);
    PreparedData prep = ensure_prepared(cfg, out);
    const fs::path out_dir = resolve_paths(cfg).out_dir;

    std::ofstream step_log(out_dir / "train_log.jsonl", std::ios::trunc);
    std::ofstream epoch_log(out_dir / "epochs.jsonl", std::ios::trunc);
    if (!step_log || !epoch_log)
        throw DataError("cannot open training logs under " + out_dir.string());

    const TrainConfig tc = make_train_config(cfg);
    TrainResult result = train(
        prep.dataset, prep.index, prep.visual, prep.textual, prep.graphs, tc,
        [&](std::size_t step, const LossBreakdown& lb) {
            json j = json::object();
            j["step"] = step;
            j["L_g"] = lb.bpr;
            j["L_v"] = lb.bpr_visual;
            j["L_t"] = lb.bpr_textual;
            j["L_diff"] = lb.mda;
            j["L_cl"] = lb.msa;
            j["reg"] = lb.reg;
            j["total"] = lb.total;
            step_log << j.dump() << "\n";
        },
        [&](const EpochRecord& rec) {
            json j = json::object();
            j["epoch"] = rec.epoch;
            j["mean_total"] = rec.mean_total_loss;
            j["val_recall"] = rec.val_recall;
            j["improved"] = rec.improved;
            epoch_log << j.dump() << "\n";
        });

    const std::uint64_t chash = cfg.config_hash();
    save_checkpoint((out_dir / "checkpoint.bin").string(), result.best_params, chash,
                    prep.prep_hash);
    save_checkpoint((out_dir / "checkpoint_final.bin").string(), result.final_params,
                    chash, prep.prep_hash);

    json summary = json::object();
    summary["epochs_run"] = result.epochs_run;
    summary["steps"] = result.steps;
    summary["best_epoch"] = result.best_epoch;
    summary["best_val_recall"] = result.best_val_recall;
    summary["diverged"] = result.diverged;
    summary["config_hash"] = hash_hex(chash);
    summary["prep_hash"] = hash_hex(prep.prep_hash);
    write_text(out_dir / "train_summary.json", summary.dump(2) + "\n");

    out << "[train] epochs: " << result.epochs_run << ", steps: " << result.steps
        << ", best val rec@" << tc.early_stop_k << ": " << result.best_val_recall
        << " (epoch " << result.best_epoch << ")\n";
    out << "[train] checkpoint: " << (out_dir / "checkpoint.bin").string() << "\n";
    if (result.diverged)
        throw NumericError("training diverged; last good checkpoint kept");
    return 0;
}

int cmd_eval(const RunConfig& cfg, std::ostream& out) {
    print_resolved(cfg, out);
    Split split;
    if (cfg.eval_split == "val")
        split = Split::val;
    else if (cfg.eval_split == "test")
        split = Split::test;
    else
        throw UsageError("eval split must be val or test, got '" + cfg.eval_split + "'");

    PreparedData prep = ensure_prepared(cfg, out);
    const fs::path out_dir = resolve_paths(cfg).out_dir;
    const std::string ckpt_path = cfg.eval_checkpoint.empty()
                                      ? (out_dir / "checkpoint.bin").string()
                                      : cfg.eval_checkpoint;
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    const std::uint64_t chash = cfg.config_hash();
    if (ckpt.config_hash != chash)
        throw DataError("checkpoint config hash " + hash_hex(ckpt.config_hash) +
                        " does not match current config " + hash_hex(chash));
    if (ckpt.prep_hash != prep.prep_hash)
        throw DataError("checkpoint prep hash " + hash_hex(ckpt.prep_hash) +
                        " does not match prepared data " + hash_hex(prep.prep_hash));

    ForwardOptions fo = forward_options(make_train_config(cfg));
    ForwardState st = forward(ckpt.params, prep.visual, prep.textual, prep.graphs, fo);
    MetricReport rep =
        evaluate(st.fused_user, st.fused_item, prep.index, split, cfg.eval.k, true);

    const std::string tsv = format_metrics_tsv(rep);
    write_text(out_dir / ("metrics_" + cfg.eval_split + ".tsv"), tsv);
    write_text(out_dir / ("metrics_" + cfg.eval_split + ".json"),
               metrics_to_json(rep).dump(2) + "\n");
    out << "[eval] split " << cfg.eval_split << ", " << rep.num_users << " users\n";
    out << tsv;
    return 0;
}

int cmd_ablate(const RunConfig& cfg, std::ostream& out) {
    print_resolved(cfg, out);
    PreparedData prep = ensure_prepared(cfg, out);
    const fs::path out_dir = resolve_paths(cfg).out_dir;

    std::vector<std::uint64_t> seeds = cfg.ablate.seeds;
    if (seeds.empty())
        seeds = {cfg.seed, cfg.seed + 1, cfg.seed + 2};
    std::vector<AblationSpec> variants = cfg.ablate.variants;
    if (variants.empty()) {
        AblationSpec a;
        a.disable_mda = true;
        variants.push_back(a);
        AblationSpec b;
        b.disable_msa = true;
        variants.push_back(b);
        AblationSpec c;
        c.disable_nlt = true;
        variants.push_back(c);
    }

    AblationTable table = run_ablation(
        prep.dataset, prep.index, prep.visual, prep.textual, prep.graphs,
        make_train_config(cfg), variants, seeds, cfg.eval.k,
        [&](const std::string& line) { out << "[ablate] " << line << "\n"; });
    const std::string tsv = format_ablation_tsv(table);
    write_text(out_dir / "ablation.tsv", tsv);
    out << tsv;
    return 0;
}

int cmd_gen_synth(const RunConfig& cfg, std::ostream& out) {
    print_resolved(cfg, out);
    const ResolvedPaths paths = resolve_paths(cfg);
    fs::create_directories(paths.out_dir);

    SynthConfig sc = cfg.synth;
    sc.seed = cfg.seed;
    SyntheticData synth = generate_synthetic(sc);

    save_interactions(paths.interactions, synth.dataset);
    save_id_map(sibling_user_map(paths.interactions), synth.dataset.user_ids);
    save_id_map(sibling_item_map(paths.interactions), synth.dataset.item_ids);
    save_features(paths.features_visual, synth.visual);
    save_features(paths.features_textual, synth.textual);

    out << "[gen-synth] users: " << synth.dataset.num_users
        << ", items: " << synth.dataset.num_items
        << ", edges: " << synth.dataset.edges.size() << "\n";
    out << "[gen-synth] interactions: " << paths.interactions << "\n";
    out << "[gen-synth] features: " << paths.features_visual << ", "
        << paths.features_textual << "\n";
    return 0;
}

int cmd_grad_check(const RunConfig& cfg, std::ostream& out) {
    print_resolved(cfg, out);
    PreparedData prep = ensure_prepared(cfg, out);
    const fs::path out_dir = resolve_paths(cfg).out_dir;

    ModelParams params = init_params(prep.dataset, prep.visual, prep.textual,
                                     cfg.model.embed_dim, cfg.seed);
    if (cfg.ablation.independent_weights)
        enable_independent_nlt(params);
    SeedStreams streams(cfg.seed);
    // Zero-initialized preference logits sit exactly on the |p_v - p_t| kink
    // where the absolute value has no derivative; jitter moves them off it.
    Rng jitter = streams.stream("gradcheck-jitter");
    for (double& v : params.pref_user.data)
        v = jitter.uniform_range(-0.5, 0.5);
    for (double& v : params.pref_item.data)
        v = jitter.uniform_range(-0.5, 0.5);
    if (params.has_nlt_logits())
        for (double& v : params.nlt_logits.data)
            v = jitter.uniform_range(-0.5, 0.5);

    std::vector<std::pair<std::uint32_t, std::uint32_t>> positives;
    for (const Edge& e : prep.dataset.edges)
        if (e.tag == Split::train)
            positives.emplace_back(e.user, e.item);
    std::vector<std::size_t> order(positives.size());
    for (std::size_t i = 0; i < order.size(); ++i)
        order[i] = i;
    Rng shuffle_rng = streams.stream("shuffle", 1);
    shuffle_rng.shuffle(order);
    const std::size_t bsz = std::min(cfg.optim.batch_size, positives.size());
    std::vector<std::pair<std::uint32_t, std::uint32_t>> batch_pos;
    for (std::size_t p = 0; p < bsz; ++p)
        batch_pos.push_back(positives[order[p]]);
    Rng neg_rng = streams.stream("negatives");
    TripletBatch batch = sample_negatives(prep.dataset, prep.index, batch_pos, neg_rng);

    const TrainConfig tc = make_train_config(cfg);
    GradCheckReport report =
        grad_check(params, prep.visual, prep.textual, prep.graphs, batch, tc.loss,
                   forward_options(tc), cfg.gradcheck_samples, cfg.seed);

    out << format_grad_check_table(report);
    json j = json::object();
    j["max_rel_err"] = report.max_rel_err;
    j["mean_rel_err"] = report.mean_rel_err;
    j["num_checked"] = report.num_checked;
    json per = json::array();
    for (const GradCheckEntry& e : report.per_tensor_worst) {
        json r = json::object();
        r["tensor"] = e.tensor;
        r["coord"] = e.coord;
        r["analytic"] = e.analytic;
        r["numeric"] = e.numeric;
        r["rel_err"] = e.rel_err;
        per.push_back(r);
    }
    j["per_tensor_worst"] = per;
    write_text(out_dir / "gradcheck.json", j.dump(2) + "\n");

    const double threshold = 1e-4;
    if (report.passed(threshold)) {
        out << "max rel err < 1e-4: PASS\n";
        return 0;
    }
    out << "max rel err >= 1e-4: FAIL\n";
    throw NumericError("gradient check failed: max relative error " +
                       std::to_string(report.max_rel_err));
}

namespace {

struct SubContext {
    CLI::App* sub = nullptr;
    std::string name;
    std::string config_path;
    std::vector<std::string> sets;
    std::string output_dir;
    std::string kernels_name;
    std::uint64_t seed = 0;
    std::string checkpoint;
    std::string split = "test";
    CLI::Option* seed_opt = nullptr;
    CLI::Option* out_opt = nullptr;
    CLI::Option* split_opt = nullptr;
};

} // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"multi-modal graph recommender"};
    app.require_subcommand(1);

    const std::pair<const char*, const char*> commands[] = {
        {"prepare", "load data, split, build graph caches"},
        {"train", "train a model and write checkpoints and logs"},
        {"eval", "rank and score a checkpoint on val or test"},
        {"ablate", "train the full model and its variants across seeds"},
        {"gen-synth", "write a clustered synthetic dataset"},
        {"grad-check", "compare analytic gradients against finite differences"},
    };
    std::deque<SubContext> ctxs;
    for (const auto& [name, desc] : commands) {
        SubContext& c = ctxs.emplace_back();
        c.name = name;
        c.sub = app.add_subcommand(name, desc);
        c.sub->add_option("--config", c.config_path, "JSON config file");
        c.seed_opt = c.sub->add_option("--seed", c.seed, "root seed (overrides config)");
        c.out_opt = c.sub->add_option("--output-dir", c.output_dir,
                                      "artifact directory (overrides config)")
                        ->envname("MDE_OUTPUT_DIR");
        c.sub->add_option("--set", c.sets,
                          "config override as section.key=value (repeatable)");
        c.sub->add_option("--kernels", c.kernels_name, "force backend: scalar or avx2");
        if (c.name == "eval") {
            c.sub->add_option("--checkpoint", c.checkpoint,
                              "checkpoint path (default <output-dir>/checkpoint.bin)");
            c.split_opt = c.sub->add_option("--split", c.split, "val or test");
        }
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 1;
    }

    try {
        SubContext* active = nullptr;
        for (SubContext& c : ctxs)
            if (app.got_subcommand(c.sub))
                active = &c;
        if (!active)
            throw UsageError("no subcommand given");

        if (!active->kernels_name.empty()) {
            if (active->kernels_name == "scalar")
                kernels::set_backend(kernels::Backend::scalar);
            else if (active->kernels_name == "avx2")
                kernels::set_backend(kernels::Backend::avx2);
            else
                throw UsageError("unknown kernel backend '" + active->kernels_name +
                                 "' (expected scalar or avx2)");
        }

        RunConfig cfg = active->config_path.empty()
                            ? RunConfig{}
                            : load_config_file(active->config_path);
        for (const std::string& kv : active->sets) {
            const std::size_t eq = kv.find('=');
            if (eq == std::string::npos)
                throw UsageError("--set expects section.key=value, got '" + kv + "'");
            apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
        }
        if (active->seed_opt->count() > 0)
            cfg.seed = active->seed;
        if (active->out_opt->count() > 0 || !active->output_dir.empty())
            cfg.paths.output_dir = active->output_dir;
        cfg.eval_checkpoint = active->checkpoint;
        cfg.eval_split = active->split;
        cfg.validate();

        if (active->name == "prepare")
            return cmd_prepare(cfg, out);
        if (active->name == "train")
            return cmd_train(cfg, out);
        if (active->name == "eval")
            return cmd_eval(cfg, out);
        if (active->name == "ablate")
            return cmd_ablate(cfg, out);
        if (active->name == "gen-synth")
            return cmd_gen_synth(cfg, out);
        if (active->name == "grad-check")
            return cmd_grad_check(cfg, out);
        throw UsageError("unknown subcommand");
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        err << "error: " << e.what() << "\n";
        return 3;
    }
}

} // namespace mde
