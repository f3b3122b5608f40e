#pragma once

#include "comepress/evaluation.hpp"
#include "comepress/merging.hpp"
#include "comepress/scoring.hpp"
#include "comepress/sweep.hpp"
#include "comepress/training.hpp"

#include <json.hpp>

#include <filesystem>
#include <span>

namespace comepress {

using Json = nlohmann::ordered_json;

Json to_report_json(const EvalResult& r);
Json to_report_json(const PruneReport& r);
Json to_report_json(const SweepResult& r);
Json to_report_json(std::span<const LayerScoreSet> sets);

/// Writes `doc` as two-space-indented JSON with a trailing newline.
/// Throws IoError when the file cannot be written.
void emit_report(const Json& doc, const std::filesystem::path& path);

/// Parses a JSON file; IoError when unreadable, ContractError when malformed.
Json load_report(const std::filesystem::path& path);

/// Mapping from a prune report or a pipeline summary ("mapping" at the top
/// level or under "prune").
LayerMapping mapping_from_report(const Json& doc);
LayerMapping load_mapping(const std::filesystem::path& path);

}  // namespace comepress
