// End-to-end acceptance checks. Each check prints one PASS/FAIL line with its
// measured numbers; the process exits with the number of failures. Check 6 is
// a known architectural bound, documented in README.md under "Known
// limitations": it runs anyway and reports the honest numbers.

#include <algorithm>
#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "oracles.hpp"

#include "mde/cli.hpp"
#include "mde/data.hpp"
#include "mde/errors.hpp"
#include "mde/graph.hpp"
#include "mde/losses.hpp"
#include "mde/model.hpp"
#include "mde/optim.hpp"
#include "mde/rng.hpp"
#include "mde/traineval.hpp"

using namespace mde;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool ok = false;
    std::string detail;
};

std::string fmt(const char* pattern, ...) {
    char buf[512];
    va_list args;
    va_start(args, pattern);
    std::vsnprintf(buf, sizeof buf, pattern, args);
    va_end(args);
    return buf;
}

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

// ---- shared fixtures ----

struct Instance {
    InteractionDataset ds;
    UserItemIndex index;
    ModalityFeatures visual;
    ModalityFeatures textual;
    GraphBundle graphs;
};

Instance make_instance(std::size_t users, std::size_t items, std::size_t clusters,
                       std::size_t dv, std::size_t dt, std::size_t k_item,
                       std::size_t k_user, std::uint64_t seed) {
    SynthConfig sc;
    sc.num_users = users;
    sc.num_items = items;
    sc.clusters = clusters;
    sc.dim_visual = dv;
    sc.dim_textual = dt;
    sc.seed = seed;
    SyntheticData sd = generate_synthetic(sc);
    Instance inst;
    inst.ds = split_dataset(sd.dataset, {0.8, 0.1, 0.1}, seed);
    inst.index = build_user_index(inst.ds);
    inst.visual = std::move(sd.visual);
    inst.textual = std::move(sd.textual);
    inst.graphs = build_graphs(inst.ds, inst.visual, inst.textual, k_item, k_user);
    return inst;
}

TripletBatch train_batch(const Instance& inst, std::uint64_t seed) {
    std::vector<std::pair<std::uint32_t, std::uint32_t>> positives;
    for (const Edge& e : inst.ds.edges)
        if (e.tag == Split::train)
            positives.emplace_back(e.user, e.item);
    Rng neg = SeedStreams(seed).stream("negatives");
    return sample_negatives(inst.ds, inst.index, positives, neg);
}

// ---- check 1: sparse propagation against dense linear algebra ----

Outcome check_propagation() {
    const auto t0 = Clock::now();
    Instance inst = make_instance(20, 30, 3, 10, 7, 8, 10, 42);
    const std::size_t d = 6;
    const std::size_t mn = inst.ds.num_users + inst.ds.num_items;

    Rng rng = SeedStreams(42).stream("acceptance-embeds");
    Matrix e0(mn, d);
    oracle::fill_random(e0, rng);

    const Matrix fast = propagate_hetero(e0, inst.graphs.hetero, 2);
    const Matrix dense_a = oracle::dense_from_csr(inst.graphs.hetero);
    const Matrix e1 = oracle::dense_matmul(dense_a, e0);
    const Matrix e2 = oracle::dense_matmul(dense_a, e1);
    Matrix avg(mn, d);
    for (std::size_t i = 0; i < avg.data.size(); ++i)
        avg.data[i] = (e0.data[i] + e1.data[i] + e2.data[i]) / 3.0;
    double worst = oracle::max_rel_err(fast, avg);

    Matrix hbar(mn, d);
    oracle::fill_random(hbar, rng);
    Matrix hbar_users(inst.ds.num_users, d);
    Matrix hbar_items(inst.ds.num_items, d);
    for (std::size_t u = 0; u < inst.ds.num_users; ++u)
        for (std::size_t k = 0; k < d; ++k)
            hbar_users(u, k) = hbar(u, k);
    for (std::size_t i = 0; i < inst.ds.num_items; ++i)
        for (std::size_t k = 0; k < d; ++k)
            hbar_items(i, k) = hbar(inst.ds.num_users + i, k);

    for (std::size_t m = 0; m < kNumModalities; ++m) {
        const auto [hs_user, hs_item] = propagate_homo(hbar, inst.graphs, m);
        const Matrix du = oracle::dense_matmul(
            oracle::dense_from_csr(inst.graphs.user_homo), hbar_users);
        const Matrix di = oracle::dense_matmul(
            oracle::dense_from_csr(inst.graphs.item_homo[m]), hbar_items);
        worst = std::max(worst, oracle::max_rel_err(hs_user, du));
        worst = std::max(worst, oracle::max_rel_err(hs_item, di));
    }

    const double elapsed = ms_since(t0);
    return {worst <= 1e-10 && elapsed < 1000.0,
            fmt("two-hop propagation vs dense oracle: max rel err %.2e "
                "(bound 1e-10), %.0f ms (budget 1000)",
                worst, elapsed)};
}

// ---- check 2: analytic gradients against finite differences ----

Outcome check_gradients() {
    const auto t0 = Clock::now();
    Instance inst = make_instance(5, 8, 2, 6, 4, 3, 2, 7);
    ModelParams params = init_params(inst.ds, inst.visual, inst.textual, 4, 7);
    // zero logits sit on the |p_v - p_t| kink; move the check off it
    Rng jitter = SeedStreams(7).stream("gradcheck-jitter");
    for (double& v : params.pref_user.data)
        v = jitter.uniform_range(-0.5, 0.5);
    for (double& v : params.pref_item.data)
        v = jitter.uniform_range(-0.5, 0.5);

    const TripletBatch batch = train_batch(inst, 7);
    LossConfig loss; // defaults: sigma_diff 0.1, sigma_cl 0.01, sigma_reg 1e-4, tau 0.2
    ForwardOptions opts;
    const GradCheckReport report = grad_check(params, inst.visual, inst.textual,
                                              inst.graphs, batch, loss, opts, 200, 7);

    const double elapsed = ms_since(t0);
    return {report.passed(1e-4) && elapsed < 30000.0,
            fmt("all loss terms, %zu coordinates across %zu tensors vs central "
                "differences: max rel err %.2e (bound 1e-4), %.0f ms (budget 30000)",
                report.num_checked, report.per_tensor_worst.size(),
                report.max_rel_err, elapsed)};
}

// ---- check 3: loss components against scalar double-loop oracles ----

Outcome check_losses() {
    Rng rng = SeedStreams(2026).stream("acceptance-losses");
    double worst = 0.0;
    for (std::size_t trial = 0; trial < 100; ++trial) {
        const std::size_t n = 2 + rng.uniform_index(9); // <= 10 items
        const std::size_t d = 1 + rng.uniform_index(8); // <= 8 dims
        Matrix hv(n, d), ht(n, d);
        oracle::fill_random(hv, rng, -2.0, 2.0);
        oracle::fill_random(ht, rng, -2.0, 2.0);
        std::vector<double> w(n);
        for (double& x : w)
            x = rng.uniform_range(0.0, 1.5);
        const double sigma = rng.uniform_range(0.0, 2.0);
        const double tau = rng.uniform_range(0.05, 1.0);
        const bool squared = trial % 2 == 1;

        worst = std::max(worst, std::fabs(mda_loss(hv, ht, w, sigma, squared) -
                                          oracle::mda(hv, ht, w, sigma, squared)));

        std::vector<std::uint32_t> all(n);
        for (std::size_t i = 0; i < n; ++i)
            all[i] = static_cast<std::uint32_t>(i);
        worst = std::max(worst,
                         std::fabs(msa_loss(hv, ht, w, sigma, tau, ClScope::full, {}) -
                                   oracle::msa(hv, ht, w, sigma, tau, all)));
        std::vector<std::uint32_t> evens;
        for (std::size_t i = 0; i < n; i += 2)
            evens.push_back(static_cast<std::uint32_t>(i));
        worst = std::max(
            worst, std::fabs(msa_loss(hv, ht, w, sigma, tau, ClScope::in_batch, evens) -
                             oracle::msa(hv, ht, w, sigma, tau, evens)));

        const std::size_t users = 2 + rng.uniform_index(5);
        Matrix fu(users, d), fi(n, d);
        oracle::fill_random(fu, rng);
        oracle::fill_random(fi, rng);
        TripletBatch batch;
        const std::size_t bsz = 1 + rng.uniform_index(20);
        for (std::size_t b = 0; b < bsz; ++b)
            batch.triples.push_back(
                {static_cast<std::uint32_t>(rng.uniform_index(users)),
                 static_cast<std::uint32_t>(rng.uniform_index(n)),
                 static_cast<std::uint32_t>(rng.uniform_index(n))});
        worst = std::max(worst,
                         std::fabs(bpr_loss(fu, fi, batch) - oracle::bpr(fu, fi, batch)));
        worst = std::max(worst, std::fabs(modality_bpr_loss(fu, fi, batch) -
                                          bpr_loss(fu, fi, batch)));
    }
    return {worst <= 1e-10,
            fmt("mda/msa(full,in_batch)/bpr/modality-bpr vs double-loop oracles, "
                "100 trials: worst abs diff %.2e (bound 1e-10)",
                worst)};
}

// ---- check 4: ranking metrics against a brute-force oracle ----

Outcome check_metrics() {
    Rng rng = SeedStreams(123).stream("acceptance-metrics");
    double worst = 0.0;
    for (std::size_t trial = 0; trial < 50; ++trial) {
        const std::size_t users = 2 + rng.uniform_index(5);
        const std::size_t items = 6 + rng.uniform_index(10);
        const std::size_t k = 1 + rng.uniform_index(5);
        const std::size_t d = 1 + rng.uniform_index(4);
        const bool exclude = trial % 2 == 0;

        UserItemIndex idx;
        idx.train_items.resize(users);
        idx.val_items.resize(users);
        idx.test_items.resize(users);
        idx.all_items.resize(users);
        for (std::size_t u = 0; u < users; ++u) {
            std::vector<std::uint32_t> perm(items);
            for (std::size_t i = 0; i < items; ++i)
                perm[i] = static_cast<std::uint32_t>(i);
            rng.shuffle(perm);
            std::size_t n_train = rng.uniform_index(3);
            std::size_t n_test = rng.uniform_index(3);
            if (u == 0 && n_test == 0)
                n_test = 1; // the split must never be entirely empty
            idx.train_items[u].assign(perm.begin(), perm.begin() + n_train);
            idx.test_items[u].assign(perm.begin() + n_train,
                                     perm.begin() + n_train + n_test);
            std::sort(idx.train_items[u].begin(), idx.train_items[u].end());
            std::sort(idx.test_items[u].begin(), idx.test_items[u].end());
            idx.all_items[u] = idx.train_items[u];
            idx.all_items[u].insert(idx.all_items[u].end(), idx.test_items[u].begin(),
                                    idx.test_items[u].end());
            std::sort(idx.all_items[u].begin(), idx.all_items[u].end());
        }

        Matrix fu(users, d), fi(items, d);
        oracle::fill_random(fu, rng);
        oracle::fill_random(fi, rng);
        const MetricReport rep = evaluate(fu, fi, idx, Split::test, k, exclude);

        double rec = 0.0, prec = 0.0, map = 0.0, ndcg = 0.0;
        std::size_t counted = 0;
        for (std::size_t u = 0; u < users; ++u) {
            if (idx.test_items[u].empty())
                continue;
            std::vector<double> scores(items);
            for (std::size_t i = 0; i < items; ++i)
                scores[i] = score(fu, fi, u, i);
            const std::vector<std::uint32_t> none;
            const oracle::UserMetrics m = oracle::user_metrics(
                scores, idx.test_items[u], exclude ? idx.train_items[u] : none, k);
            rec += m.recall;
            prec += m.precision;
            map += m.ap;
            ndcg += m.ndcg;
            ++counted;
        }
        worst = std::max(worst, std::fabs(rep.recall - rec / counted));
        worst = std::max(worst, std::fabs(rep.precision - prec / counted));
        worst = std::max(worst, std::fabs(rep.map - map / counted));
        worst = std::max(worst, std::fabs(rep.ndcg - ndcg / counted));
        if (rep.num_users != counted)
            return {false, fmt("trial %zu: evaluate counted %zu users, oracle %zu",
                               trial, rep.num_users, counted)};
    }

    // perfect ranking: three relevant items on top, K = 5
    UserItemIndex idx;
    idx.train_items.resize(1);
    idx.val_items.resize(1);
    idx.test_items.resize(1);
    idx.all_items.resize(1);
    idx.test_items[0] = {1, 4, 7};
    idx.all_items[0] = {1, 4, 7};
    Matrix fu(1, 1, 1.0), fi(10, 1);
    for (std::size_t i = 0; i < 10; ++i)
        fi(i, 0) = -static_cast<double>(i);
    fi(1, 0) = 30.0;
    fi(4, 0) = 20.0;
    fi(7, 0) = 10.0;
    const MetricReport top = evaluate(fu, fi, idx, Split::test, 5, true);
    const bool trivial_ok = std::fabs(top.recall - 1.0) < 1e-15 &&
                            std::fabs(top.precision - 3.0 / 5.0) < 1e-15 &&
                            std::fabs(top.map - 1.0) < 1e-15 &&
                            std::fabs(top.ndcg - 1.0) < 1e-15;

    return {worst <= 1e-12 && trivial_ok,
            fmt("50 random rankings vs per-user oracle: worst abs diff %.2e "
                "(bound 1e-12); perfect ranking gives rec/map/ndcg 1 and prec "
                "min(|rel|,K)/K: %s",
                worst, trivial_ok ? "yes" : "NO")};
}

// ---- check 5: trade-off weight invariants ----

Outcome check_tradeoff() {
    Rng rng = SeedStreams(55).stream("acceptance-tradeoff");
    Matrix logits(1000, 2);
    oracle::fill_random(logits, rng, -10.0, 10.0);
    const TradeoffWeights tw = tradeoff_weights(softmax_rows2(logits));
    double worst = 0.0;
    bool in_range = true;
    for (std::size_t i = 0; i < 1000; ++i) {
        worst = std::max(worst, std::fabs(tw.w_diff[i] + tw.w_cl[i] - 1.0));
        in_range = in_range && tw.w_diff[i] >= 0.0 && tw.w_diff[i] <= 1.0 &&
                   tw.w_cl[i] >= 0.0 && tw.w_cl[i] <= 1.0;
    }

    Matrix equal(3, 2, 0.0);
    equal(1, 0) = 5.0;
    equal(1, 1) = 5.0;
    equal(2, 0) = -7.0;
    equal(2, 1) = -7.0;
    const TradeoffWeights te = tradeoff_weights(softmax_rows2(equal));
    const bool exact_zero =
        te.w_diff[0] == 0.0 && te.w_diff[1] == 0.0 && te.w_diff[2] == 0.0;

    return {worst <= 1e-9 && in_range && exact_zero,
            fmt("1000 random rows: worst |w_diff+w_cl-1| %.2e (bound 1e-9), "
                "ranges ok: %s; equal logits give w_diff exactly 0: %s",
                worst, in_range ? "yes" : "NO", exact_zero ? "yes" : "NO")};
}

// ---- check 6: train-set overfit target ----

double truncated_train_recall(const Matrix& fused_user, const Matrix& fused_item,
                              const UserItemIndex& idx, std::size_t k) {
    const Matrix scores = full_scores(fused_user, fused_item);
    double acc = 0.0;
    std::size_t counted = 0;
    for (std::size_t u = 0; u < idx.train_items.size(); ++u) {
        const auto& gt = idx.train_items[u];
        if (gt.empty())
            continue;
        std::vector<std::pair<double, std::uint32_t>> order;
        order.reserve(scores.cols);
        for (std::size_t i = 0; i < scores.cols; ++i)
            order.emplace_back(-scores(u, i), static_cast<std::uint32_t>(i));
        std::partial_sort(order.begin(), order.begin() + k, order.end());
        std::size_t hits = 0;
        for (std::size_t r = 0; r < k; ++r)
            if (sorted_contains(gt, order[r].second))
                ++hits;
        acc += static_cast<double>(hits) /
               static_cast<double>(std::min(k, gt.size()));
        ++counted;
    }
    return acc / static_cast<double>(counted);
}

Outcome check_overfit() {
    const auto t0 = Clock::now();
    // dataset and the most memorization-friendly configuration found in tuning:
    // single-neighbor graphs, one layer, ranking loss only, aggressive lr
    Instance inst = make_instance(50, 100, 5, 32, 16, 1, 1, 0);
    TrainConfig tc;
    tc.embed_dim = 64;
    tc.layers = 1;
    tc.loss.sigma_diff = 0.0;
    tc.loss.sigma_cl = 0.0;
    tc.loss.sigma_reg = 0.0;
    tc.adam.lr = 0.03;
    tc.batch_size = 2048;
    tc.max_epochs = 500;
    tc.early_stopping = false;
    tc.seed = 0;
    const TrainResult res =
        train(inst.ds, inst.index, inst.visual, inst.textual, inst.graphs, tc);

    const ForwardOptions fo = forward_options(tc);
    double plain = 0.0, truncated = 0.0;
    for (const ModelParams* p : {&res.final_params, &res.best_params}) {
        const ForwardState st = forward(*p, inst.visual, inst.textual, inst.graphs, fo);
        plain = std::max(plain, evaluate(st.fused_user, st.fused_item, inst.index,
                                         Split::train, 5, false)
                                    .recall);
        truncated = std::max(truncated, truncated_train_recall(
                                            st.fused_user, st.fused_item, inst.index, 5));
    }

    // what a perfect ranker could score under the plain denominator
    double cap = 0.0;
    std::size_t counted = 0;
    for (const auto& gt : inst.index.train_items)
        if (!gt.empty()) {
            cap += static_cast<double>(std::min<std::size_t>(5, gt.size())) /
                   static_cast<double>(gt.size());
            ++counted;
        }
    cap /= static_cast<double>(counted);

    const double elapsed = ms_since(t0);
    const bool ok = std::max(plain, truncated) >= 0.8 && elapsed < 120000.0;
    return {ok, fmt("train rec@5 after %zu epochs: %.3f plain / %.3f truncated vs "
                    "target 0.8 (perfect-ranker cap %.3f plain), %.0f ms; the "
                    "self-excluded neighbor hop bounds memorization, see README "
                    "\"Known limitations\"",
                    res.epochs_run, plain, truncated, cap, elapsed)};
}

// ---- check 7: ablation ordering ----

Outcome check_ablation() {
    Instance inst = make_instance(50, 100, 5, 32, 16, 10, 40, 0);
    TrainConfig tc; // library defaults: d 64, 2 layers, lr 1e-3, patience 20
    std::vector<AblationSpec> variants(3);
    variants[0].disable_mda = true;
    variants[1].disable_msa = true;
    variants[2].disable_nlt = true;
    const AblationTable table =
        run_ablation(inst.ds, inst.index, inst.visual, inst.textual, inst.graphs, tc,
                     variants, {0, 1, 2}, 5);

    const double full = table.rows[0].metrics.recall;
    double best_variant = 0.0;
    std::string parts;
    for (std::size_t i = 1; i < table.rows.size(); ++i) {
        best_variant = std::max(best_variant, table.rows[i].metrics.recall);
        parts += fmt("%s%s %.4f", i > 1 ? ", " : "", table.rows[i].name.c_str(),
                     table.rows[i].metrics.recall);
    }
    return {full >= best_variant - 0.02,
            fmt("test rec@5 over seeds {0,1,2}: full %.4f vs %s (full must stay "
                "within 0.02 of the best variant)",
                full, parts.c_str())};
}

// ---- check 8: run-to-run determinism of the training command ----

Outcome check_determinism() {
    const fs::path base = fs::temp_directory_path() /
                          ("mde_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(base);
    auto run_train = [&](const std::string& dir) -> std::pair<std::string, std::string> {
        std::ostringstream out, err;
        std::vector<std::string> args = {
            "mde",     "gen-synth",          "--output-dir", dir,
            "--seed",  "0",                  "--set",        "optim.max_epochs=25",
        };
        std::vector<const char*> argv;
        for (const std::string& a : args)
            argv.push_back(a.c_str());
        if (run_cli(static_cast<int>(argv.size()), argv.data(), out, err) != 0)
            throw DataError("gen-synth failed: " + err.str());
        args[1] = "train";
        argv.clear();
        for (const std::string& a : args)
            argv.push_back(a.c_str());
        if (run_cli(static_cast<int>(argv.size()), argv.data(), out, err) != 0)
            throw DataError("train failed: " + err.str());
        auto slurp = [](const fs::path& p) {
            std::ifstream in(p, std::ios::binary);
            std::ostringstream buf;
            buf << in.rdbuf();
            return buf.str();
        };
        return {slurp(fs::path(dir) / "train_log.jsonl"),
                slurp(fs::path(dir) / "epochs.jsonl")};
    };

    const auto a = run_train((base / "a").string());
    const auto b = run_train((base / "b").string());
    fs::remove_all(base);

    const bool ok = !a.first.empty() && a.first == b.first && a.second == b.second;
    return {ok, fmt("two train commands, same seed and config: step logs %s "
                    "(%zu bytes), epoch logs %s",
                    a.first == b.first ? "identical" : "DIFFER", a.first.size(),
                    a.second == b.second ? "identical" : "DIFFER")};
}

} // namespace

int main() {
    struct Check {
        int id;
        const char* name;
        std::function<Outcome()> fn;
    };
    const std::vector<Check> checks = {
        {1, "propagation", check_propagation},
        {2, "gradients", check_gradients},
        {3, "losses", check_losses},
        {4, "metrics", check_metrics},
        {5, "trade-off", check_tradeoff},
        {6, "overfit", check_overfit},
        {7, "ablation", check_ablation},
        {8, "determinism", check_determinism},
    };

    int failures = 0;
    for (const Check& c : checks) {
        Outcome o;
        try {
            o = c.fn();
        } catch (const std::exception& e) {
            o = {false, std::string("unexpected exception: ") + e.what()};
        }
        std::printf("[%d] %s  %s: %s\n", c.id, o.ok ? "PASS" : "FAIL", c.name,
                    o.detail.c_str());
        std::fflush(stdout);
        if (!o.ok)
            ++failures;
    }
    std::printf("[9] SKIP  full-scale reproduction: needs real review datasets with "
                "pre-extracted features (hours of training); recipe in README.md\n");
    std::printf("summary: %d of 8 desk checks passed, %d failed, 1 skipped\n",
                8 - failures, failures);
    return failures;
}
