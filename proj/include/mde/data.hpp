#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mde/matrix.hpp"
#include "mde/rng.hpp"

namespace mde {

enum class Split : std::uint8_t { train = 0, val = 1, test = 2, unsplit = 3 };

const char* split_name(Split s);

struct Edge {
    std::uint32_t user;
    std::uint32_t item;
    Split tag;
};

/// Interaction data with dense 0-based ids. Raw-id mapping tables are kept so
/// splits, caches and checkpoints written by different commands line up.
struct InteractionDataset {
    std::size_t num_users = 0;
    std::size_t num_items = 0;
    std::vector<Edge> edges;
    std::vector<std::string> user_ids; // dense index -> raw id
    std::vector<std::string> item_ids;

    bool all_unsplit() const;
    std::size_t count_edges(Split tag) const;
    void validate() const;
};

struct LoadStats {
    std::size_t duplicates = 0;
    std::size_t dropped_users = 0;
    std::size_t dropped_edges = 0;
};

struct LoadResult {
    InteractionDataset dataset;
    LoadStats stats;
};

/// Frozen per-item feature matrix for one modality.
struct ModalityFeatures {
    std::string modality; // "visual" or "textual"
    Matrix matrix;        // num_items x dim

    std::size_t dim() const { return matrix.cols; }
    void validate(std::size_t num_items) const;
};

struct Triplet {
    std::uint32_t user;
    std::uint32_t pos;
    std::uint32_t neg;
};

struct TripletBatch {
    std::vector<Triplet> triples;

    std::size_t size() const { return triples.size(); }
    bool empty() const { return triples.empty(); }
};

/// Per-user sorted item lists derived from the edge list; used by negative
/// sampling (rejection against all splits) and evaluation (train exclusion).
struct UserItemIndex {
    std::vector<std::vector<std::uint32_t>> train_items;
    std::vector<std::vector<std::uint32_t>> val_items;
    std::vector<std::vector<std::uint32_t>> test_items;
    std::vector<std::vector<std::uint32_t>> all_items;

    const std::vector<std::vector<std::uint32_t>>& by_split(Split s) const;
};

UserItemIndex build_user_index(const InteractionDataset& ds);

bool sorted_contains(const std::vector<std::uint32_t>& v, std::uint32_t x);

// ---- operations ----

/// Parse `user<TAB>item[<TAB>split]` lines (whitespace fallback), dedup,
/// densely re-index in first-appearance order. When split tags are present,
/// users without a train edge are dropped and indices rebuilt.
LoadResult load_interactions(const std::string& path);

/// Re-load a dataset against fixed id maps (raw id -> dense index), erroring
/// on ids absent from the maps. Used to reload prepared splits bit-exactly.
LoadResult load_interactions_mapped(const std::string& path,
                                    const std::vector<std::string>& user_ids,
                                    const std::vector<std::string>& item_ids);

void save_interactions(const std::string& path, const InteractionDataset& ds);

void save_id_map(const std::string& path, const std::vector<std::string>& ids);
std::vector<std::string> load_id_map(const std::string& path);

/// Per-user random partition at the given ratios (train, val, test).
/// Every user keeps at least one train edge. Deterministic given seed.
InteractionDataset split_dataset(const InteractionDataset& ds,
                                 const std::array<double, 3>& ratios,
                                 std::uint64_t seed);

/// One uniform negative per positive, resampled until the item is absent from
/// the user's interactions across all splits.
TripletBatch sample_negatives(const InteractionDataset& ds, const UserItemIndex& index,
                              const std::vector<std::pair<std::uint32_t, std::uint32_t>>& positives,
                              Rng& rng);

struct SynthConfig {
    std::size_t num_users = 50;
    std::size_t num_items = 100;
    std::size_t dim_visual = 32;
    std::size_t dim_textual = 16;
    std::size_t clusters = 5;
    double p_in = 0.3;
    double p_out = 0.01;
    std::uint64_t seed = 0;
};

struct SyntheticData {
    InteractionDataset dataset;
    ModalityFeatures visual;
    ModalityFeatures textual;
};

/// Clustered interactions plus cluster-correlated Gaussian features; the
/// block structure makes the ranking signal learnable at desk scale.
SyntheticData generate_synthetic(const SynthConfig& cfg);

/// Content hash over dims, raw ids and tagged edges; keys the graph caches.
std::uint64_t dataset_hash(const InteractionDataset& ds);

/// Content hash over a feature matrix; keys the kNN graph caches.
std::uint64_t feature_hash(const ModalityFeatures& f);

// Feature matrices: binary container by default, TSV accepted (auto-detected).
void save_features(const std::string& path, const ModalityFeatures& f);
void save_features_tsv(const std::string& path, const ModalityFeatures& f);
ModalityFeatures load_features(const std::string& path);

} // namespace mde
