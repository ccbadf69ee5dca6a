#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "mde/config.hpp"
#include "mde/data.hpp"
#include "mde/graph.hpp"

namespace mde {

/// Artifacts cmd_prepare produces and the other commands consume.
struct PreparedData {
    InteractionDataset dataset; // split, densely indexed
    UserItemIndex index;
    ModalityFeatures visual;
    ModalityFeatures textual;
    GraphBundle graphs;
    std::uint64_t data_hash = 0;
    std::uint64_t prep_hash = 0;
    std::size_t cache_hits = 0;   // graph caches reused
    std::size_t cache_builds = 0; // graph caches built this run
};

/// Loads interactions and features, splits if untagged, and builds or reuses
/// the hash-guarded graph caches under the output dir.
PreparedData ensure_prepared(const RunConfig& cfg, std::ostream& log);

int cmd_prepare(const RunConfig& cfg, std::ostream& out);
int cmd_train(const RunConfig& cfg, std::ostream& out);
int cmd_eval(const RunConfig& cfg, std::ostream& out);
int cmd_ablate(const RunConfig& cfg, std::ostream& out);
int cmd_gen_synth(const RunConfig& cfg, std::ostream& out);
int cmd_grad_check(const RunConfig& cfg, std::ostream& out);

/// Full argv entry point: subcommand dispatch, config/flag resolution, error
/// mapping to exit codes (usage 1, data 2, numeric 3).
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace mde
