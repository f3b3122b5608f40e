#include "comepress/report.hpp"

#include <fstream>

namespace comepress {

Json to_report_json(const EvalResult& r) {
    return Json{{"ppl", r.ppl}, {"nll_per_token", r.nll_per_token}, {"token_count", r.token_count}};
}

namespace {

Json mapping_json(const LayerMapping& m) {
    Json pairs = Json::array();
    for (const auto& p : m.pairs) pairs.push_back(Json{{"teacher", p.teacher}, {"student", p.student}});
    return pairs;
}

}  // namespace

Json to_report_json(const PruneReport& r) {
    Json doc;
    doc["method"] = r.method;
    doc["hyperparameters"] = r.hyperparameters;
    doc["initial_layers"] = r.initial_layers;
    doc["final_layers"] = r.final_layers;
    Json its = Json::array();
    for (const auto& it : r.iterations) {
        Json j;
        j["first_layer"] = it.first_layer;
        j["group_size"] = it.group_size;
        j["sbi"] = it.sbi;
        j["layer_scores"] = it.bi;
        j["ratios"] = it.ratios;
        j["ffn_counts"] = it.ffn_counts;
        j["head_counts"] = it.head_counts;
        if (!it.removed_original.empty()) j["removed_original"] = it.removed_original;
        if (!it.candidate_ratios.empty()) {
            j["candidate_ratios"] = it.candidate_ratios;
            j["candidate_ppl"] = it.candidate_ppl;
        }
        if (it.chosen_ratio) j["chosen_ratio"] = *it.chosen_ratio;
        if (it.chosen_ppl) j["chosen_ppl"] = *it.chosen_ppl;
        its.push_back(std::move(j));
    }
    doc["iterations"] = std::move(its);
    doc["mapping"] = mapping_json(r.mapping);
    if (r.eval_before) doc["eval_before"] = to_report_json(*r.eval_before);
    if (r.eval_after) doc["eval_after"] = to_report_json(*r.eval_after);
    return doc;
}

Json to_report_json(const SweepResult& r) {
    Json doc;
    doc["pair"] = {r.first_layer, r.first_layer + 1};
    doc["grid_n"] = r.grid_n;
    doc["deeper_retained_ppl"] = r.deeper_retained_ppl;
    doc["shallower_retained_ppl"] = r.shallower_retained_ppl;
    Json rows = Json::array();
    for (const auto& rec : r.records) {
        rows.push_back(Json{{"structure", to_string(rec.structure)},
                            {"method", to_string(rec.method)},
                            {"ratio", rec.ratio},
                            {"ppl", rec.ppl}});
    }
    doc["records"] = std::move(rows);
    return doc;
}

Json to_report_json(std::span<const LayerScoreSet> sets) {
    Json doc = Json::array();
    for (const auto& s : sets)
        doc.push_back(Json{{"method", s.method}, {"scores", s.scores}, {"normalized", s.normalized}});
    return doc;
}

void emit_report(const Json& doc, const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write report " + path.string());
    out << doc.dump(2) << '\n';
    if (!out) throw IoError("failed writing report " + path.string());
}

Json load_report(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read report " + path.string());
    try {
        return Json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ContractError("malformed report " + path.string() + ": " + e.what());
    }
}

LayerMapping mapping_from_report(const Json& doc) {
    const Json* node = nullptr;
    if (doc.contains("mapping"))
        node = &doc["mapping"];
    else if (doc.contains("prune") && doc["prune"].contains("mapping"))
        node = &doc["prune"]["mapping"];
    if (node == nullptr) throw ContractError("report has no layer mapping");
    LayerMapping m;
    try {
        for (const auto& e : *node)
            m.pairs.push_back({e.at("teacher").get<std::size_t>(), e.at("student").get<std::size_t>()});
    } catch (const nlohmann::json::exception& e) {
        throw ContractError(std::string("malformed layer mapping: ") + e.what());
    }
    return m;
}

LayerMapping load_mapping(const std::filesystem::path& path) { return mapping_from_report(load_report(path)); }

}  // namespace comepress
