#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "petapter/data.hpp"
#include "petapter/errors.hpp"
#include "petapter/rng.hpp"

namespace petapter {

enum class SamplingVariant { Equal, Random, Stratified };

struct SamplingStrategy {
    SamplingVariant variant{SamplingVariant::Random};
    std::size_t n{1};
    std::uint64_t seed{0};
};

inline SamplingVariant sampling_variant_from_string(const std::string& s) {
    if (s == "equal") {
        return SamplingVariant::Equal;
    }
    if (s == "random") {
        return SamplingVariant::Random;
    }
    if (s == "stratified") {
        return SamplingVariant::Stratified;
    }
    throw DataError("unknown sampling strategy: " + s);
}

// Expected per-label counts under simple random selection: n * count / total.
inline std::vector<double> expected_counts(const std::vector<std::size_t>& label_counts,
                                           std::size_t n) {
    std::size_t total = 0;
    for (std::size_t c : label_counts) {
        total += c;
    }
    if (total == 0) {
        throw ContractError("expected_counts: total count is zero");
    }
    std::vector<double> out;
    out.reserve(label_counts.size());
    for (std::size_t c : label_counts) {
        out.push_back(static_cast<double>(n) * static_cast<double>(c) /
                      static_cast<double>(total));
    }
    return out;
}

// Largest-remainder (Hamilton) apportionment of n seats to label counts.
// Floors of the quotas first; leftover seats go to the largest remainders,
// ties broken by larger count, then lexicographically smaller label.
inline std::vector<std::size_t> hamilton_apportionment(
    const std::vector<std::size_t>& counts, const std::vector<std::string>& labels,
    std::size_t n) {
    const std::vector<double> quotas = expected_counts(counts, n);
    std::vector<std::size_t> seats(counts.size());
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        seats[i] = static_cast<std::size_t>(quotas[i]);
        assigned += seats[i];
    }
    std::vector<std::size_t> order(counts.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double ra = quotas[a] - static_cast<double>(seats[a]);
        const double rb = quotas[b] - static_cast<double>(seats[b]);
        if (ra != rb) {
            return ra > rb;
        }
        if (counts[a] != counts[b]) {
            return counts[a] > counts[b];
        }
        return labels[a] < labels[b];
    });
    for (std::size_t i = 0; assigned < n; ++i) {
        ++seats[order[i % order.size()]];
        ++assigned;
    }
    return seats;
}

namespace detail {

struct LabelGroup {
    std::string label;
    std::vector<std::size_t> record_indices; // dataset order
};

inline std::vector<LabelGroup> group_by_label(const LabeledDataset& data) {
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < data.records.size(); ++i) {
        groups[data.records[i].label()].push_back(i);
    }
    std::vector<LabelGroup> out;
    out.reserve(groups.size());
    for (auto& [label, idx] : groups) {
        out.push_back({label, std::move(idx)});
    }
    return out; // lexicographic by label via std::map
}

inline void draw_within_label(const LabelGroup& group, std::size_t want, SplitMix64& rng,
                              std::vector<std::size_t>& selected) {
    if (want > group.record_indices.size()) {
        throw DataError("label '" + group.label + "' has only " +
                        std::to_string(group.record_indices.size()) + " records, need " +
                        std::to_string(want));
    }
    for (std::size_t pick : rng.sample_without_replacement(group.record_indices.size(), want)) {
        selected.push_back(group.record_indices[pick]);
    }
}

} // namespace detail

// Few-shot training-set construction. All draws come from one splitmix64
// stream seeded by the strategy, labels are visited in lexicographic order,
// and the output order is itself a deterministic shuffle.
inline LabeledDataset sample(const LabeledDataset& data, const SamplingStrategy& strategy) {
    if (strategy.n < 1) {
        throw DataError("sample: n must be >= 1");
    }
    if (strategy.n > data.size()) {
        throw DataError("sample: n=" + std::to_string(strategy.n) + " exceeds dataset size " +
                        std::to_string(data.size()));
    }
    SplitMix64 rng(strategy.seed);
    std::vector<std::size_t> selected;
    selected.reserve(strategy.n);

    if (strategy.variant == SamplingVariant::Random) {
        for (std::size_t pick : rng.sample_without_replacement(data.size(), strategy.n)) {
            selected.push_back(pick);
        }
    } else {
        const auto groups = detail::group_by_label(data);
        const std::size_t c = groups.size();
        if (strategy.n < c) {
            throw DataError("sample: equal/stratified need n >= label count (" +
                            std::to_string(c) + "), got n=" + std::to_string(strategy.n));
        }
        std::vector<std::size_t> per_label(c);
        if (strategy.variant == SamplingVariant::Equal) {
            const std::size_t base = strategy.n / c;
            std::size_t remainder = strategy.n % c;
            for (auto& p : per_label) {
                p = base;
            }
            // One extra each for the most frequent labels, ties lexicographic.
            std::vector<std::size_t> order(c);
            std::iota(order.begin(), order.end(), 0);
            std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                if (groups[a].record_indices.size() != groups[b].record_indices.size()) {
                    return groups[a].record_indices.size() > groups[b].record_indices.size();
                }
                return groups[a].label < groups[b].label;
            });
            for (std::size_t i = 0; i < remainder; ++i) {
                ++per_label[order[i]];
            }
        } else { // Stratified
            std::vector<std::size_t> counts(c);
            std::vector<std::string> labels(c);
            for (std::size_t i = 0; i < c; ++i) {
                counts[i] = groups[i].record_indices.size();
                labels[i] = groups[i].label;
            }
            per_label = hamilton_apportionment(counts, labels, strategy.n);
        }
        for (std::size_t i = 0; i < c; ++i) {
            detail::draw_within_label(groups[i], per_label[i], rng, selected);
        }
    }

    rng.shuffle(selected);
    LabeledDataset out;
    out.records.reserve(selected.size());
    for (std::size_t i : selected) {
        out.records.push_back(data.records[i]);
    }
    return out;
}

} // namespace petapter
