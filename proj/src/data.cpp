#include "mde/data.hpp"

#include <algorithm>
#include <cctype>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "mde/errors.hpp"

namespace mde {

namespace {

std::uint64_t edge_key(std::uint32_t u, std::uint32_t i) {
    return (static_cast<std::uint64_t>(u) << 32) | i;
}

Split parse_split_tag(const std::string& s, std::size_t line_no) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    if (s == "unsplit") return Split::unsplit;
    throw DataError("line " + std::to_string(line_no) + ": unknown split tag '" + s + "'");
}

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    if (line.find('\t') != std::string::npos) {
        std::size_t start = 0;
        while (true) {
            std::size_t tab = line.find('\t', start);
            if (tab == std::string::npos) {
                out.push_back(line.substr(start));
                break;
            }
            out.push_back(line.substr(start, tab - start));
            start = tab + 1;
        }
    } else {
        std::istringstream ss(line);
        std::string tok;
        while (ss >> tok) out.push_back(tok);
    }
    // strip trailing \r from CRLF input
    if (!out.empty() && !out.back().empty() && out.back().back() == '\r') {
        out.back().pop_back();
    }
    return out;
}

struct RawEdge {
    std::string user;
    std::string item;
    Split tag;
};

std::vector<RawEdge> parse_interaction_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open interactions file: " + path);

    std::vector<RawEdge> raw;
    std::string line;
    std::size_t line_no = 0;
    int column_count = 0; // 2 or 3 once fixed by the first data line
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        auto fields = split_fields(line);
        if (fields.size() < 2 || fields.size() > 3 || fields[0].empty() || fields[1].empty()) {
            throw DataError("line " + std::to_string(line_no) + ": malformed interaction line");
        }
        if (column_count == 0) {
            column_count = static_cast<int>(fields.size());
        } else if (static_cast<int>(fields.size()) != column_count) {
            throw DataError("line " + std::to_string(line_no) +
                            ": inconsistent column count (file mixes tagged and untagged lines)");
        }
        Split tag = fields.size() == 3 ? parse_split_tag(fields[2], line_no) : Split::unsplit;
        raw.push_back({std::move(fields[0]), std::move(fields[1]), tag});
    }
    if (raw.empty()) throw DataError("interactions file is empty: " + path);
    return raw;
}

LoadResult index_edges(const std::vector<RawEdge>& raw,
                       const std::vector<std::string>* fixed_users,
                       const std::vector<std::string>* fixed_items) {
    LoadResult res;
    auto& ds = res.dataset;

    std::unordered_map<std::string, std::uint32_t> user_of, item_of;
    if (fixed_users) {
        for (std::size_t k = 0; k < fixed_users->size(); ++k) {
            user_of[(*fixed_users)[k]] = static_cast<std::uint32_t>(k);
        }
        for (std::size_t k = 0; k < fixed_items->size(); ++k) {
            item_of[(*fixed_items)[k]] = static_cast<std::uint32_t>(k);
        }
        ds.user_ids = *fixed_users;
        ds.item_ids = *fixed_items;
    }

    std::unordered_set<std::uint64_t> seen;
    for (const auto& e : raw) {
        std::uint32_t u, i;
        if (fixed_users) {
            auto it = user_of.find(e.user);
            if (it == user_of.end()) throw DataError("user id not in id map: " + e.user);
            u = it->second;
            auto jt = item_of.find(e.item);
            if (jt == item_of.end()) throw DataError("item id not in id map: " + e.item);
            i = jt->second;
        } else {
            auto [it, inserted_u] = user_of.try_emplace(
                e.user, static_cast<std::uint32_t>(ds.user_ids.size()));
            if (inserted_u) ds.user_ids.push_back(e.user);
            u = it->second;
            auto [jt, inserted_i] = item_of.try_emplace(
                e.item, static_cast<std::uint32_t>(ds.item_ids.size()));
            if (inserted_i) ds.item_ids.push_back(e.item);
            i = jt->second;
        }
        if (!seen.insert(edge_key(u, i)).second) {
            ++res.stats.duplicates;
            continue;
        }
        ds.edges.push_back({u, i, e.tag});
    }
    ds.num_users = ds.user_ids.size();
    ds.num_items = ds.item_ids.size();
    return res;
}

// Drop users lacking a train edge, then rebuild dense indices in
// first-appearance order over the surviving edges.
void enforce_train_presence(LoadResult& res) {
    auto& ds = res.dataset;
    if (ds.all_unsplit()) return;

    std::vector<char> has_train(ds.num_users, 0);
    for (const auto& e : ds.edges) {
        if (e.tag == Split::train) has_train[e.user] = 1;
    }
    const std::size_t dropped =
        static_cast<std::size_t>(std::count(has_train.begin(), has_train.end(), 0));
    if (dropped == 0) return;

    res.stats.dropped_users = dropped;
    constexpr std::uint32_t kUnset = 0xffffffffu;
    std::vector<std::uint32_t> new_user(ds.num_users, kUnset), new_item(ds.num_items, kUnset);
    std::vector<std::string> user_ids, item_ids;
    std::vector<Edge> edges;
    edges.reserve(ds.edges.size());
    for (const auto& e : ds.edges) {
        if (!has_train[e.user]) {
            ++res.stats.dropped_edges;
            continue;
        }
        if (new_user[e.user] == kUnset) {
            new_user[e.user] = static_cast<std::uint32_t>(user_ids.size());
            user_ids.push_back(ds.user_ids[e.user]);
        }
        if (new_item[e.item] == kUnset) {
            new_item[e.item] = static_cast<std::uint32_t>(item_ids.size());
            item_ids.push_back(ds.item_ids[e.item]);
        }
        edges.push_back({new_user[e.user], new_item[e.item], e.tag});
    }
    ds.edges = std::move(edges);
    ds.user_ids = std::move(user_ids);
    ds.item_ids = std::move(item_ids);
    ds.num_users = ds.user_ids.size();
    ds.num_items = ds.item_ids.size();
}

std::size_t cluster_of(std::size_t idx, std::size_t count, std::size_t clusters) {
    return idx * clusters / count;
}

void format_double(std::string& out, double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out += buf;
}

} // namespace

const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
        default: return "unsplit";
    }
}

bool InteractionDataset::all_unsplit() const {
    return std::all_of(edges.begin(), edges.end(),
                       [](const Edge& e) { return e.tag == Split::unsplit; });
}

std::size_t InteractionDataset::count_edges(Split tag) const {
    return static_cast<std::size_t>(std::count_if(
        edges.begin(), edges.end(), [tag](const Edge& e) { return e.tag == tag; }));
}

void InteractionDataset::validate() const {
    if (user_ids.size() != num_users || item_ids.size() != num_items) {
        throw DataError("id map size does not match dataset dimensions");
    }
    std::unordered_set<std::uint64_t> seen;
    std::vector<char> has_train(num_users, 0);
    for (const auto& e : edges) {
        if (e.user >= num_users) throw DataError("edge user index out of range");
        if (e.item >= num_items) throw DataError("edge item index out of range");
        if (!seen.insert(edge_key(e.user, e.item)).second) {
            throw DataError("duplicate (user,item) edge");
        }
        if (e.tag == Split::train) has_train[e.user] = 1;
    }
    if (!all_unsplit()) {
        for (std::size_t u = 0; u < num_users; ++u) {
            if (!has_train[u]) {
                throw DataError("user '" + user_ids[u] + "' has no train edge");
            }
        }
    }
}

void ModalityFeatures::validate(std::size_t num_items) const {
    if (matrix.rows != num_items) {
        throw DataError("feature matrix for modality '" + modality + "' has " +
                        std::to_string(matrix.rows) + " rows, dataset has " +
                        std::to_string(num_items) + " items");
    }
    for (double v : matrix.data) {
        if (!std::isfinite(v)) {
            throw DataError("feature matrix for modality '" + modality +
                            "' contains a non-finite entry");
        }
    }
}

const std::vector<std::vector<std::uint32_t>>& UserItemIndex::by_split(Split s) const {
    switch (s) {
        case Split::train: return train_items;
        case Split::val: return val_items;
        case Split::test: return test_items;
        default: throw UsageError("no per-user index for 'unsplit'");
    }
}

UserItemIndex build_user_index(const InteractionDataset& ds) {
    UserItemIndex ix;
    ix.train_items.resize(ds.num_users);
    ix.val_items.resize(ds.num_users);
    ix.test_items.resize(ds.num_users);
    ix.all_items.resize(ds.num_users);
    for (const auto& e : ds.edges) {
        switch (e.tag) {
            case Split::train: ix.train_items[e.user].push_back(e.item); break;
            case Split::val: ix.val_items[e.user].push_back(e.item); break;
            case Split::test: ix.test_items[e.user].push_back(e.item); break;
            case Split::unsplit: break;
        }
        ix.all_items[e.user].push_back(e.item);
    }
    for (auto* lists : {&ix.train_items, &ix.val_items, &ix.test_items, &ix.all_items}) {
        for (auto& v : *lists) std::sort(v.begin(), v.end());
    }
    return ix;
}

bool sorted_contains(const std::vector<std::uint32_t>& v, std::uint32_t x) {
    return std::binary_search(v.begin(), v.end(), x);
}

LoadResult load_interactions(const std::string& path) {
    auto raw = parse_interaction_file(path);
    auto res = index_edges(raw, nullptr, nullptr);
    enforce_train_presence(res);
    res.dataset.validate();
    return res;
}

LoadResult load_interactions_mapped(const std::string& path,
                                    const std::vector<std::string>& user_ids,
                                    const std::vector<std::string>& item_ids) {
    auto raw = parse_interaction_file(path);
    auto res = index_edges(raw, &user_ids, &item_ids);
    res.dataset.validate();
    return res;
}

void save_interactions(const std::string& path, const InteractionDataset& ds) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write interactions file: " + path);
    std::string buf;
    for (const auto& e : ds.edges) {
        buf.clear();
        buf += ds.user_ids[e.user];
        buf += '\t';
        buf += ds.item_ids[e.item];
        buf += '\t';
        buf += split_name(e.tag);
        buf += '\n';
        out << buf;
    }
}

void save_id_map(const std::string& path, const std::vector<std::string>& ids) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write id map: " + path);
    for (std::size_t k = 0; k < ids.size(); ++k) {
        out << ids[k] << '\t' << k << '\n';
    }
}

std::vector<std::string> load_id_map(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open id map: " + path);
    std::vector<std::string> ids;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto fields = split_fields(line);
        if (fields.size() != 2) {
            throw DataError("id map " + path + " line " + std::to_string(line_no) + ": malformed");
        }
        const std::size_t idx = std::strtoull(fields[1].c_str(), nullptr, 10);
        if (idx != ids.size()) {
            throw DataError("id map " + path + " line " + std::to_string(line_no) +
                            ": indices must be dense and ascending");
        }
        ids.push_back(fields[0]);
    }
    if (ids.empty()) throw DataError("id map is empty: " + path);
    return ids;
}

InteractionDataset split_dataset(const InteractionDataset& ds,
                                 const std::array<double, 3>& ratios,
                                 std::uint64_t seed) {
    double sum = ratios[0] + ratios[1] + ratios[2];
    if (std::fabs(sum - 1.0) > 1e-9 || ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0) {
        throw UsageError("split ratios must be nonnegative and sum to 1");
    }
    if (!ds.all_unsplit()) throw DataError("split_dataset requires an unsplit dataset");

    std::vector<std::vector<std::size_t>> per_user(ds.num_users);
    for (std::size_t k = 0; k < ds.edges.size(); ++k) {
        per_user[ds.edges[k].user].push_back(k);
    }

    InteractionDataset out = ds;
    const SeedStreams streams{seed};
    for (std::size_t u = 0; u < ds.num_users; ++u) {
        auto& idx = per_user[u];
        if (idx.empty()) continue;
        Rng rng = streams.stream("split", u);
        rng.shuffle(idx);
        const std::size_t n = idx.size();
        // cumulative-boundary quotas: a 7-edge user at 0.8/0.1/0.1 gets 5/1/1,
        // and only a 1-edge user trips the keep-one-train reassignment below
        const std::size_t b1 =
            static_cast<std::size_t>(std::floor(n * ratios[0] + 1e-12));
        const std::size_t b2 =
            static_cast<std::size_t>(std::floor(n * (ratios[0] + ratios[1]) + 1e-12));
        std::size_t n_train = b1;
        std::size_t n_val = b2 - b1;
        std::size_t n_test = n - b2;
        while (n_train == 0) {
            if (n_val > 0) {
                --n_val;
            } else {
                --n_test;
            }
            ++n_train;
        }
        for (std::size_t k = 0; k < n; ++k) {
            Split tag = k < n_train            ? Split::train
                        : k < n_train + n_val  ? Split::val
                                               : Split::test;
            out.edges[idx[k]].tag = tag;
        }
    }
    out.validate();
    return out;
}

TripletBatch sample_negatives(const InteractionDataset& ds, const UserItemIndex& index,
                              const std::vector<std::pair<std::uint32_t, std::uint32_t>>& positives,
                              Rng& rng) {
    TripletBatch batch;
    batch.triples.reserve(positives.size());
    for (const auto& [u, i] : positives) {
        if (u >= ds.num_users || i >= ds.num_items) {
            throw DataError("positive pair index out of range");
        }
        if (!sorted_contains(index.train_items[u], i)) {
            throw DataError("positive (" + ds.user_ids[u] + ", " + ds.item_ids[i] +
                            ") is not a train edge");
        }
        if (index.all_items[u].size() >= ds.num_items) {
            throw DataError("user '" + ds.user_ids[u] +
                            "' interacts with every item; cannot sample a negative");
        }
        std::uint32_t neg;
        do {
            neg = static_cast<std::uint32_t>(rng.uniform_index(ds.num_items));
        } while (sorted_contains(index.all_items[u], neg));
        batch.triples.push_back({u, i, neg});
    }
    return batch;
}

SyntheticData generate_synthetic(const SynthConfig& cfg) {
    if (cfg.num_users == 0 || cfg.num_items == 0 || cfg.dim_visual == 0 || cfg.dim_textual == 0) {
        throw UsageError("synthetic sizes must be positive");
    }
    if (cfg.clusters == 0 || cfg.clusters > std::min(cfg.num_users, cfg.num_items)) {
        throw UsageError("cluster count must be in [1, min(users, items)]");
    }

    const SeedStreams streams{cfg.seed};
    SyntheticData out;
    auto& ds = out.dataset;
    ds.num_users = cfg.num_users;
    ds.num_items = cfg.num_items;
    ds.user_ids.reserve(cfg.num_users);
    ds.item_ids.reserve(cfg.num_items);
    for (std::size_t u = 0; u < cfg.num_users; ++u) ds.user_ids.push_back("u" + std::to_string(u));
    for (std::size_t i = 0; i < cfg.num_items; ++i) ds.item_ids.push_back("i" + std::to_string(i));

    Rng edge_rng = streams.stream("synth-edges");
    std::vector<std::size_t> degree(cfg.num_users, 0);
    for (std::size_t u = 0; u < cfg.num_users; ++u) {
        const std::size_t cu = cluster_of(u, cfg.num_users, cfg.clusters);
        for (std::size_t i = 0; i < cfg.num_items; ++i) {
            const double p = cluster_of(i, cfg.num_items, cfg.clusters) == cu ? cfg.p_in : cfg.p_out;
            if (edge_rng.bernoulli(p)) {
                ds.edges.push_back({static_cast<std::uint32_t>(u), static_cast<std::uint32_t>(i),
                                    Split::unsplit});
                ++degree[u];
            }
        }
    }
    Rng enforce_rng = streams.stream("synth-enforce");
    for (std::size_t u = 0; u < cfg.num_users; ++u) {
        if (degree[u] > 0) continue;
        const std::size_t cu = cluster_of(u, cfg.num_users, cfg.clusters);
        std::size_t lo = 0;
        while (cluster_of(lo, cfg.num_items, cfg.clusters) != cu) ++lo;
        std::size_t hi = lo;
        while (hi < cfg.num_items && cluster_of(hi, cfg.num_items, cfg.clusters) == cu) ++hi;
        const std::size_t pick = lo + enforce_rng.uniform_index(hi - lo);
        ds.edges.push_back({static_cast<std::uint32_t>(u), static_cast<std::uint32_t>(pick),
                            Split::unsplit});
    }

    auto make_features = [&](const char* name, std::size_t dim, const char* stream) {
        ModalityFeatures f;
        f.modality = name;
        f.matrix = Matrix(cfg.num_items, dim);
        Rng rng = streams.stream(stream);
        Matrix centers(cfg.clusters, dim);
        for (double& v : centers.data) v = rng.normal();
        for (std::size_t i = 0; i < cfg.num_items; ++i) {
            const std::size_t c = cluster_of(i, cfg.num_items, cfg.clusters);
            for (std::size_t k = 0; k < dim; ++k) {
                f.matrix(i, k) = centers(c, k) + 0.3 * rng.normal();
            }
        }
        return f;
    };
    out.visual = make_features("visual", cfg.dim_visual, "synth-features-v");
    out.textual = make_features("textual", cfg.dim_textual, "synth-features-t");

    ds.validate();
    return out;
}

std::uint64_t dataset_hash(const InteractionDataset& ds) {
    Hasher h;
    h.add(static_cast<std::uint64_t>(ds.num_users));
    h.add(static_cast<std::uint64_t>(ds.num_items));
    for (const auto& id : ds.user_ids) h.add(std::string_view(id));
    for (const auto& id : ds.item_ids) h.add(std::string_view(id));
    for (const auto& e : ds.edges) {
        h.add(e.user);
        h.add(e.item);
        h.add(static_cast<std::uint32_t>(e.tag));
    }
    return h.digest();
}

std::uint64_t feature_hash(const ModalityFeatures& f) {
    Hasher h;
    h.add(std::string_view(f.modality));
    h.add(static_cast<std::uint64_t>(f.matrix.rows));
    h.add(static_cast<std::uint64_t>(f.matrix.cols));
    for (double v : f.matrix.data) h.add(v);
    return h.digest();
}

namespace {
constexpr char kFeatureMagic[8] = {'M', 'D', 'E', 'F', 'E', 'A', 'T', '1'};
}

void save_features(const std::string& path, const ModalityFeatures& f) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write features file: " + path);
    out.write(kFeatureMagic, 8);
    const std::uint32_t name_len = static_cast<std::uint32_t>(f.modality.size());
    out.write(reinterpret_cast<const char*>(&name_len), sizeof(name_len));
    out.write(f.modality.data(), name_len);
    const std::uint64_t rows = f.matrix.rows, cols = f.matrix.cols;
    out.write(reinterpret_cast<const char*>(&rows), sizeof(rows));
    out.write(reinterpret_cast<const char*>(&cols), sizeof(cols));
    out.write(reinterpret_cast<const char*>(f.matrix.data.data()),
              static_cast<std::streamsize>(f.matrix.data.size() * sizeof(double)));
    if (!out) throw DataError("short write on features file: " + path);
}

void save_features_tsv(const std::string& path, const ModalityFeatures& f) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write features file: " + path);
    out << "# modality=" << f.modality << "\trows=" << f.matrix.rows
        << "\tcols=" << f.matrix.cols << '\n';
    std::string buf;
    for (std::size_t i = 0; i < f.matrix.rows; ++i) {
        buf.clear();
        for (std::size_t k = 0; k < f.matrix.cols; ++k) {
            if (k) buf += '\t';
            format_double(buf, f.matrix(i, k));
        }
        buf += '\n';
        out << buf;
    }
}

namespace {

ModalityFeatures load_features_tsv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open features file: " + path);
    std::string line;
    if (!std::getline(in, line) || line.empty() || line[0] != '#') {
        throw DataError("features TSV missing '# modality=... rows=... cols=...' header: " + path);
    }
    ModalityFeatures f;
    std::size_t rows = 0, cols = 0;
    {
        std::istringstream ss(line.substr(1));
        std::string tok;
        while (ss >> tok) {
            auto eq = tok.find('=');
            if (eq == std::string::npos) continue;
            const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
            if (key == "modality") f.modality = val;
            else if (key == "rows") rows = std::strtoull(val.c_str(), nullptr, 10);
            else if (key == "cols") cols = std::strtoull(val.c_str(), nullptr, 10);
        }
    }
    if (f.modality.empty() || rows == 0 || cols == 0) {
        throw DataError("features TSV header incomplete: " + path);
    }
    f.matrix = Matrix(rows, cols);
    for (std::size_t i = 0; i < rows; ++i) {
        if (!std::getline(in, line)) throw DataError("features TSV truncated: " + path);
        std::istringstream ss(line);
        for (std::size_t k = 0; k < cols; ++k) {
            if (!(ss >> f.matrix(i, k))) {
                throw DataError("features TSV row " + std::to_string(i) + " malformed: " + path);
            }
        }
    }
    return f;
}

} // namespace

ModalityFeatures load_features(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open features file: " + path);
    char magic[8] = {};
    in.read(magic, 8);
    if (in.gcount() == 8 && std::equal(magic, magic + 8, kFeatureMagic)) {
        std::uint32_t name_len = 0;
        in.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
        if (!in || name_len > 256) throw DataError("corrupt features header: " + path);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        std::uint64_t rows = 0, cols = 0;
        in.read(reinterpret_cast<char*>(&rows), sizeof(rows));
        in.read(reinterpret_cast<char*>(&cols), sizeof(cols));
        if (!in || rows == 0 || cols == 0 || rows * cols > (1ull << 33)) {
            throw DataError("corrupt features header: " + path);
        }
        ModalityFeatures f;
        f.modality = std::move(name);
        f.matrix = Matrix(rows, cols);
        in.read(reinterpret_cast<char*>(f.matrix.data.data()),
                static_cast<std::streamsize>(rows * cols * sizeof(double)));
        if (static_cast<std::uint64_t>(in.gcount()) != rows * cols * sizeof(double)) {
            throw DataError("features file truncated: " + path);
        }
        return f;
    }
    return load_features_tsv(path);
}

std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016" PRIx64, h);
    return std::string(buf);
}

} // namespace mde
