#include "mde/traineval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "mde/errors.hpp"
#include "mde/kernels.hpp"

namespace mde {

MetricReport evaluate(const Matrix& fused_user, const Matrix& fused_item,
                      const UserItemIndex& index, Split split, std::size_t k,
                      bool exclude_train) {
    if (k == 0)
        throw UsageError("evaluate: k must be positive");
    if (split == Split::unsplit)
        throw UsageError("evaluate: pick a concrete split");
    const std::size_t m = fused_user.rows;
    const std::size_t n = fused_item.rows;
    if (index.all_items.size() != m)
        throw DataError("evaluate: index size does not match user count");

    const auto& gt_lists = index.by_split(split);
    MetricReport rep;
    rep.k = k;

    std::vector<std::pair<double, std::uint32_t>> cand;
    cand.reserve(n);
    for (std::size_t u = 0; u < m; ++u) {
        const auto& gt = gt_lists[u];
        if (gt.empty())
            continue;
        cand.clear();
        for (std::size_t i = 0; i < n; ++i) {
            if (exclude_train &&
                sorted_contains(index.train_items[u], static_cast<std::uint32_t>(i)))
                continue;
            const double s = kernels::dot(fused_user.row(u), fused_item.row(i),
                                          fused_user.cols);
            // negated score so the default pair ordering ranks higher scores
            // first and breaks ties toward the lower index
            cand.emplace_back(-s, static_cast<std::uint32_t>(i));
        }
        const std::size_t kk = std::min(k, cand.size());
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(kk),
                          cand.end());

        std::size_t hits = 0;
        double ap_sum = 0.0;
        double dcg = 0.0;
        for (std::size_t r = 0; r < kk; ++r) {
            if (sorted_contains(gt, cand[r].second)) {
                ++hits;
                ap_sum += static_cast<double>(hits) / static_cast<double>(r + 1);
                dcg += 1.0 / std::log2(static_cast<double>(r + 2));
            }
        }
        const std::size_t ideal = std::min(k, gt.size());
        double idcg = 0.0;
        for (std::size_t r = 0; r < ideal; ++r)
            idcg += 1.0 / std::log2(static_cast<double>(r + 2));

        rep.recall += static_cast<double>(hits) / static_cast<double>(gt.size());
        rep.precision += static_cast<double>(hits) / static_cast<double>(k);
        rep.map += ap_sum / static_cast<double>(ideal);
        rep.ndcg += idcg > 0.0 ? dcg / idcg : 0.0;
        ++rep.num_users;
    }
    if (rep.num_users == 0)
        throw DataError(std::string("evaluate: split '") + split_name(split) +
                        "' has no ground truth");
    const double users = static_cast<double>(rep.num_users);
    rep.recall /= users;
    rep.precision /= users;
    rep.map /= users;
    rep.ndcg /= users;
    return rep;
}

void AblationSpec::validate() const {
    if (fixed_pref_weight && (*fixed_pref_weight < 0.0 || *fixed_pref_weight > 1.0))
        throw UsageError("fixed preference weight must lie in [0, 1]");
    if (fixed_pref_weight && independent_weights)
        throw UsageError("fixed preferences and independent weights conflict");
    if (disable_nlt && independent_weights)
        throw UsageError("disabled trade-off and independent weights conflict");
}

std::string AblationSpec::display_name() const {
    if (!name.empty())
        return name;
    std::vector<std::string> parts;
    if (disable_mda)
        parts.push_back("w/o MDA");
    if (disable_msa)
        parts.push_back("w/o MSA");
    if (disable_nlt)
        parts.push_back("w/o NLT");
    if (fixed_pref_weight) {
        char buf[48];
        std::snprintf(buf, sizeof(buf), "fixed-pref(%g)", *fixed_pref_weight);
        parts.push_back(buf);
    }
    if (independent_weights)
        parts.push_back("indep-weights");
    if (parts.empty())
        return "MDE";
    std::string out = parts[0];
    for (std::size_t i = 1; i < parts.size(); ++i)
        out += "+" + parts[i];
    return out;
}

void TrainConfig::validate() const {
    if (embed_dim == 0)
        throw UsageError("embed_dim must be positive");
    if (layers < 0)
        throw UsageError("layers must be non-negative");
    if (batch_size == 0)
        throw UsageError("batch_size must be positive");
    if (max_epochs == 0)
        throw UsageError("max_epochs must be positive");
    if (early_stop_k == 0)
        throw UsageError("early_stop_k must be positive");
    loss.validate();
    ablation.validate();
}

ForwardOptions forward_options(const TrainConfig& cfg) {
    ForwardOptions fo;
    fo.layers = cfg.layers;
    fo.fixed_pref_weight = cfg.ablation.fixed_pref_weight;
    fo.independent_nlt = cfg.ablation.independent_weights;
    fo.unit_nlt = cfg.ablation.disable_nlt;
    return fo;
}

TrainResult train(const InteractionDataset& ds, const UserItemIndex& index,
                  const ModalityFeatures& visual, const ModalityFeatures& textual,
                  const GraphBundle& graphs, const TrainConfig& cfg,
                  const StepLogFn& on_step, const EpochLogFn& on_epoch) {
    cfg.validate();
    LossConfig loss_cfg = cfg.loss;
    if (cfg.ablation.disable_mda)
        loss_cfg.sigma_diff = 0.0;
    if (cfg.ablation.disable_msa)
        loss_cfg.sigma_cl = 0.0;
    const ForwardOptions fo = forward_options(cfg);

    std::vector<std::pair<std::uint32_t, std::uint32_t>> positives;
    for (const Edge& e : ds.edges)
        if (e.tag == Split::train)
            positives.emplace_back(e.user, e.item);
    if (positives.empty())
        throw DataError("train: dataset has no train edges (split it first)");

    bool has_val = false;
    for (const auto& v : index.val_items)
        if (!v.empty()) {
            has_val = true;
            break;
        }

    ModelParams params = init_params(ds, visual, textual, cfg.embed_dim, cfg.seed);
    if (cfg.ablation.independent_weights)
        enable_independent_nlt(params);
    AdamState adam = AdamState::init(params, cfg.adam);

    SeedStreams streams(cfg.seed);
    Rng neg_rng = streams.stream("negatives");
    Rng anchor_rng = streams.stream("anchors");

    TrainResult result;
    result.best_params = params;
    result.final_params = params;
    double best = -std::numeric_limits<double>::infinity();
    std::size_t bad_epochs = 0;

    std::vector<std::size_t> order(positives.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<std::pair<std::uint32_t, std::uint32_t>> batch_pos;

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        Rng shuffle_rng = streams.stream("shuffle", epoch);
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size() && !result.diverged;
             start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            batch_pos.clear();
            for (std::size_t p = start; p < end; ++p)
                batch_pos.push_back(positives[order[p]]);
            TripletBatch batch = sample_negatives(ds, index, batch_pos, neg_rng);
            try {
                GradientResult gr = gradients(params, visual, textual, graphs, batch,
                                              loss_cfg, fo, &anchor_rng);
                adam_step(params, gr.grads, adam);
                ++result.steps;
                loss_sum += gr.losses.total;
                ++batches;
                if (on_step)
                    on_step(result.steps, gr.losses);
            } catch (const NumericError&) {
                result.diverged = true;
            }
        }
        if (result.diverged)
            break;

        EpochRecord rec;
        rec.epoch = epoch;
        rec.mean_total_loss = batches > 0 ? loss_sum / static_cast<double>(batches) : 0.0;
        if (has_val) {
            ForwardState st = forward(params, visual, textual, graphs, fo);
            rec.val_recall = evaluate(st.fused_user, st.fused_item, index, Split::val,
                                      cfg.early_stop_k, true)
                                 .recall;
        }
        rec.improved = rec.val_recall > best;
        if (rec.improved) {
            best = rec.val_recall;
            result.best_val_recall = rec.val_recall;
            result.best_epoch = epoch;
            result.best_params = params;
            bad_epochs = 0;
        } else {
            ++bad_epochs;
        }
        result.final_params = params;
        result.epochs_run = epoch;
        result.epochs.push_back(rec);
        if (on_epoch)
            on_epoch(rec);

        if (cfg.early_stopping && has_val && bad_epochs > cfg.patience)
            break;
    }
    if (!has_val)
        result.best_params = result.final_params;
    return result;
}

AblationTable run_ablation(const InteractionDataset& ds, const UserItemIndex& index,
                           const ModalityFeatures& visual, const ModalityFeatures& textual,
                           const GraphBundle& graphs, const TrainConfig& base,
                           const std::vector<AblationSpec>& variants,
                           const std::vector<std::uint64_t>& seeds, std::size_t eval_k,
                           const std::function<void(const std::string&)>& progress) {
    if (seeds.empty())
        throw UsageError("run_ablation: need at least one seed");
    AblationTable table;
    table.k = eval_k;
    table.seeds = seeds;

    std::vector<AblationSpec> specs;
    specs.push_back(AblationSpec{});
    specs.back().name = "MDE";
    specs.insert(specs.end(), variants.begin(), variants.end());

    for (const AblationSpec& spec : specs) {
        spec.validate();
        MetricReport avg;
        avg.k = eval_k;
        for (std::uint64_t seed : seeds) {
            TrainConfig cfg = base;
            cfg.seed = seed;
            cfg.ablation = spec;
            TrainResult r = train(ds, index, visual, textual, graphs, cfg);
            ForwardState st =
                forward(r.best_params, visual, textual, graphs, forward_options(cfg));
            MetricReport met =
                evaluate(st.fused_user, st.fused_item, index, Split::test, eval_k, true);
            avg.recall += met.recall;
            avg.precision += met.precision;
            avg.map += met.map;
            avg.ndcg += met.ndcg;
            avg.num_users = met.num_users;
            if (progress) {
                char buf[160];
                std::snprintf(buf, sizeof(buf),
                              "%s seed %llu: test rec@%zu %.4f (%zu epochs%s)",
                              spec.display_name().c_str(),
                              static_cast<unsigned long long>(seed), eval_k, met.recall,
                              r.epochs_run, r.diverged ? ", diverged" : "");
                progress(buf);
            }
        }
        const double s = static_cast<double>(seeds.size());
        avg.recall /= s;
        avg.precision /= s;
        avg.map /= s;
        avg.ndcg /= s;
        table.rows.push_back({spec.display_name(), avg});
    }
    return table;
}

std::string format_metrics_tsv(const MetricReport& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "rec@%zu\tprec@%zu\tmap@%zu\tndcg@%zu\tusers\n"
                  "%.6f\t%.6f\t%.6f\t%.6f\t%zu\n",
                  r.k, r.k, r.k, r.k, r.recall, r.precision, r.map, r.ndcg, r.num_users);
    return buf;
}

std::string format_ablation_tsv(const AblationTable& t) {
    std::string out;
    char buf[256];
    std::snprintf(buf, sizeof(buf), "config\trec@%zu\tprec@%zu\tmap@%zu\tndcg@%zu\n",
                  t.k, t.k, t.k, t.k);
    out += buf;
    for (const AblationRow& row : t.rows) {
        std::snprintf(buf, sizeof(buf), "%s\t%.6f\t%.6f\t%.6f\t%.6f\n", row.name.c_str(),
                      row.metrics.recall, row.metrics.precision, row.metrics.map,
                      row.metrics.ndcg);
        out += buf;
    }
    return out;
}

} // namespace mde
