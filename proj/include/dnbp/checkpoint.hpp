#pragma once

#include <memory>
#include <string>

#include "dnbp/graph.hpp"

namespace dnbp {

/// Binary checkpoint: the 8-byte magic "DNBPCKPT", one line of JSON header
/// (format version, graph, ordered parameter names/groups/shapes), then every
/// parameter's values as little-endian float32 in header order.
void save_checkpoint(const Potentials& pots, const std::string& path);
std::string checkpoint_bytes(const Potentials& pots);

/// Rebuilds the potentials recorded in a checkpoint. Throws DataError on a
/// malformed file or a parameter layout that does not match the graph.
std::unique_ptr<Potentials> load_checkpoint(const std::string& path);
std::unique_ptr<Potentials> checkpoint_from_bytes(const std::string& bytes);

/// Copies parameter values from `src` into `dst` (identical layouts required).
void copy_parameters(const Potentials& src, Potentials& dst);

}  // namespace dnbp
