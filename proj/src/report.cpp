#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "dml/eval.hpp"
#include "dml/serialization.hpp"

namespace dml {

namespace {

std::string fixed(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    return buf;
}

// nlohmann prints floats in shortest round-trip form; reports want a fixed
// six decimals, so floats are emitted by hand.
void write_fixed(const json& j, std::ostringstream& out, int indent, int depth) {
    const std::string pad(static_cast<std::size_t>(indent * (depth + 1)), ' ');
    const std::string close(static_cast<std::size_t>(indent * depth), ' ');
    switch (j.type()) {
        case json::value_t::object: {
            if (j.empty()) {
                out << "{}";
                return;
            }
            out << "{\n";
            bool first = true;
            for (const auto& [key, value] : j.items()) {
                if (!first) out << ",\n";
                first = false;
                out << pad << json(key).dump() << ": ";
                write_fixed(value, out, indent, depth + 1);
            }
            out << "\n" << close << "}";
            return;
        }
        case json::value_t::array: {
            // Arrays of scalars stay on one line (confusion rows, id lists).
            bool scalar = true;
            for (const auto& v : j) scalar = scalar && !v.is_structured();
            if (scalar) {
                out << "[";
                for (std::size_t i = 0; i < j.size(); ++i) {
                    if (i) out << ", ";
                    write_fixed(j[i], out, indent, depth + 1);
                }
                out << "]";
                return;
            }
            out << "[\n";
            for (std::size_t i = 0; i < j.size(); ++i) {
                if (i) out << ",\n";
                out << pad;
                write_fixed(j[i], out, indent, depth + 1);
            }
            out << "\n" << close << "]";
            return;
        }
        case json::value_t::number_float:
            out << fixed(j.get<double>(), 6);
            return;
        default:
            out << j.dump();
    }
}

}  // namespace

std::string report_to_json(const EvalReport& r) {
    json j;
    j["recall_micro"] = r.recall_micro;
    j["recall_macro"] = r.recall_macro;
    j["recall_macro_rare"] = r.recall_macro_rare ? json(*r.recall_macro_rare) : json(nullptr);
    json ranks = json::object();
    for (const auto& [k, v] : r.rank_k) ranks[std::to_string(k)] = v;
    j["rank_k"] = ranks;
    if (r.acc_clf) j["acc_clf"] = *r.acc_clf;
    json per_class = json::array();
    for (const auto& [c, recall] : r.per_class_recall) {
        per_class.push_back({{"class", c}, {"support", r.per_class_support.at(c)}, {"recall", recall}});
    }
    j["per_class"] = per_class;
    j["confusion"] = r.confusion;
    j["config"] = {{"run", r.run_name},
                   {"digest", r.config_digest},
                   {"knn_k", r.knn_k},
                   {"rare", r.rare},
                   {"seeds", r.seeds},
                   {"query_count", r.query_count},
                   {"reference_count", r.reference_count}};
    std::ostringstream out;
    write_fixed(j, out, 2, 0);
    out << "\n";
    return out.str();
}

EvalReport report_from_json(const std::string& text) {
    const json j = json::parse(text);
    require_known_keys(j, {"recall_micro", "recall_macro", "recall_macro_rare", "rank_k", "acc_clf", "per_class",
                           "confusion", "config"},
                       "report");
    EvalReport r;
    r.recall_micro = j.at("recall_micro").get<double>();
    r.recall_macro = j.at("recall_macro").get<double>();
    if (!j.at("recall_macro_rare").is_null()) r.recall_macro_rare = j["recall_macro_rare"].get<double>();
    for (const auto& [k, v] : j.at("rank_k").items()) r.rank_k[std::stoul(k)] = v.get<double>();
    if (j.contains("acc_clf")) r.acc_clf = j["acc_clf"].get<double>();
    for (const auto& e : j.at("per_class")) {
        const auto c = e.at("class").get<ClassId>();
        r.per_class_recall[c] = e.at("recall").get<double>();
        r.per_class_support[c] = e.at("support").get<std::size_t>();
    }
    r.confusion = j.at("confusion").get<std::vector<std::vector<std::size_t>>>();
    const json& cfg = j.at("config");
    r.run_name = cfg.at("run").get<std::string>();
    r.config_digest = cfg.at("digest").get<std::string>();
    r.knn_k = cfg.at("knn_k").get<std::size_t>();
    r.rare = cfg.at("rare").get<std::set<ClassId>>();
    r.seeds = cfg.at("seeds").get<std::vector<std::uint64_t>>();
    r.query_count = cfg.at("query_count").get<std::size_t>();
    r.reference_count = cfg.at("reference_count").get<std::size_t>();
    return r;
}

std::string format_table(const std::vector<TableRow>& rows) {
    const std::vector<std::string> header{"Contrastive Loss", "Augment", "Training Loss", "Recall_mu",
                                          "Recall_M", "Recall*_M", "Rank-5", "Acc_clf"};
    std::vector<std::vector<std::string>> cells{header};
    for (const TableRow& row : rows) {
        const EvalReport& r = row.report;
        const auto rank5 = r.rank_k.find(5);
        cells.push_back({row.contrastive_loss.empty() ? "-" : row.contrastive_loss,
                         row.augment.empty() ? "-" : row.augment,
                         row.training_loss,
                         fixed(r.recall_micro, 3),
                         fixed(r.recall_macro, 3),
                         r.recall_macro_rare ? fixed(*r.recall_macro_rare, 3) : "-",
                         rank5 != r.rank_k.end() ? fixed(rank5->second, 3) : "-",
                         r.acc_clf ? fixed(*r.acc_clf, 3) : "-"});
    }
    std::vector<std::size_t> width(header.size(), 0);
    for (const auto& line : cells) {
        for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
    }
    std::ostringstream out;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        for (std::size_t c = 0; c < cells[i].size(); ++c) {
            if (c) out << " | ";
            // Text columns left-aligned, metric columns right-aligned.
            const std::string& s = cells[i][c];
            const std::string fill(width[c] - s.size(), ' ');
            out << (c < 3 ? s + fill : fill + s);
        }
        out << "\n";
        if (i == 0) {
            for (std::size_t c = 0; c < width.size(); ++c) {
                if (c) out << "-+-";
                out << std::string(width[c], '-');
            }
            out << "\n";
        }
    }
    return out.str();
}

}  // namespace dml
