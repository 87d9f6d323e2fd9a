#pragma once

#include "prefflock/preference.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <map>
#include <random>
#include <stdexcept>
#include <string>

namespace prefflock {

struct OracleError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct OracleEntry {
    PreferenceVector mean;
    std::array<double, kPreferenceDim> std{};  // normalized units
};

/// Synthetic human: a mean preference and per-dimension feedback noise for
/// each environment label.
struct OracleSpec {
    PreferenceRanges ranges;
    std::map<std::string, OracleEntry> entries;

    [[nodiscard]] const OracleEntry &at(const std::string &label) const {
        const auto it = entries.find(label);
        if (it == entries.end()) throw OracleError("oracle has no entry for environment '" + label + "'");
        return it->second;
    }
    [[nodiscard]] Eigen::VectorXd normalized_mean(const std::string &label) const {
        return ranges.normalize(at(label).mean);
    }
};

inline OracleSpec oracle_from_json(const nlohmann::json &j) {
    OracleSpec o;
    try {
        if (j.contains("ranges")) {
            o.ranges.lo = j.at("ranges").at("lo").get<std::array<double, kPreferenceDim>>();
            o.ranges.hi = j.at("ranges").at("hi").get<std::array<double, kPreferenceDim>>();
        }
        for (const auto &[label, e] : j.at("environments").items()) {
            OracleEntry entry;
            entry.mean = preference_from_json(e.at("mean"));
            if (e.contains("std")) entry.std = e.at("std").get<std::array<double, kPreferenceDim>>();
            for (double s : entry.std)
                if (!(s >= 0.0)) throw OracleError("oracle std must be >= 0 for '" + label + "'");
            o.entries.emplace(label, entry);
        }
    } catch (const nlohmann::json::exception &e) {
        throw OracleError(std::string("oracle spec: ") + e.what());
    }
    for (int p = 0; p < kPreferenceDim; ++p)
        if (!(o.ranges.hi[p] > o.ranges.lo[p])) throw OracleError("oracle ranges must satisfy lo < hi");
    return o;
}

inline OracleSpec load_oracle(const std::string &path) {
    std::ifstream in(path);
    if (!in) throw OracleError("cannot open oracle spec '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception &e) {
        throw OracleError("oracle spec '" + path + "': " + e.what());
    }
    return oracle_from_json(j);
}

/// Oracle mean plus independent Gaussian noise per dimension (drawn in
/// normalized units), clamped to the physical ranges.
inline PreferenceVector synthetic_feedback(const OracleSpec &oracle, const std::string &label, std::mt19937_64 &rng) {
    const OracleEntry &e = oracle.at(label);
    Eigen::VectorXd n = oracle.ranges.normalize(e.mean);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int p = 0; p < kPreferenceDim; ++p) n[p] += e.std[p] * gauss(rng);
    return oracle.ranges.clamp(oracle.ranges.denormalize(n));
}

}  // namespace prefflock
