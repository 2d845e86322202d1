#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "petapter/errors.hpp"

namespace petapter {

// One labeled observation: an ordered field map with the reserved key
// "label". Field order follows the source file, which keeps downstream
// processing deterministic.
struct Record {
    std::vector<std::pair<std::string, std::string>> fields;

    const std::string* find(const std::string& name) const {
        for (const auto& [k, v] : fields) {
            if (k == name) {
                return &v;
            }
        }
        return nullptr;
    }

    const std::string& label() const {
        const std::string* l = find("label");
        if (!l) {
            throw DataError("record has no label field");
        }
        return *l;
    }

    void set(const std::string& name, const std::string& value) {
        for (auto& [k, v] : fields) {
            if (k == name) {
                v = value;
                return;
            }
        }
        fields.emplace_back(name, value);
    }
};

struct LabeledDataset {
    std::vector<Record> records;

    std::size_t size() const { return records.size(); }

    // Per-label totals, lexicographically keyed.
    std::map<std::string, std::size_t> label_counts() const {
        std::map<std::string, std::size_t> counts;
        for (const auto& r : records) {
            ++counts[r.label()];
        }
        return counts;
    }
};

inline Record parse_jsonl_line(const std::string& line, std::size_t line_no) {
    nlohmann::ordered_json j;
    try {
        j = nlohmann::ordered_json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("line " + std::to_string(line_no) + ": malformed record: " + e.what());
    }
    if (!j.is_object()) {
        throw DataError("line " + std::to_string(line_no) + ": expected an object");
    }
    Record r;
    for (auto& [key, value] : j.items()) {
        if (!value.is_string()) {
            throw DataError("line " + std::to_string(line_no) + ": field '" + key +
                            "' is not a string");
        }
        r.fields.emplace_back(key, value.get<std::string>());
    }
    if (!r.find("label")) {
        throw DataError("line " + std::to_string(line_no) + ": missing label key");
    }
    return r;
}

inline LabeledDataset load_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot read dataset file: " + path);
    }
    LabeledDataset data;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        data.records.push_back(parse_jsonl_line(line, line_no));
    }
    return data;
}

inline void save_jsonl(const LabeledDataset& data, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write dataset file: " + path);
    }
    for (const auto& r : data.records) {
        nlohmann::ordered_json j = nlohmann::ordered_json::object();
        for (const auto& [k, v] : r.fields) {
            j[k] = v;
        }
        out << j.dump() << '\n';
    }
}

} // namespace petapter
