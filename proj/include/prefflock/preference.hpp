#pragma once

#include <nlohmann/json.hpp>

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

namespace prefflock {

inline constexpr int kPreferenceDim = 5;

/// Human-tunable flocking parameters. h_formation is a continuous index into
/// the prototype library and is rounded when a formation is chosen.
struct PreferenceVector {
    double h_inner = 2.0;     // m, minimal inter-robot distance
    double h_height = 5.0;    // m
    double h_speed = 2.0;     // m/s
    double h_safety = 1.0;    // m, minimal robot-obstacle distance
    double h_formation = 0.0;

    [[nodiscard]] Eigen::Matrix<double, kPreferenceDim, 1> to_vector() const {
        Eigen::Matrix<double, kPreferenceDim, 1> v;
        v << h_inner, h_height, h_speed, h_safety, h_formation;
        return v;
    }
    static PreferenceVector from_vector(const Eigen::Ref<const Eigen::VectorXd> &v) {
        if (v.size() != kPreferenceDim) throw std::invalid_argument("preference vector needs 5 entries");
        return {v[0], v[1], v[2], v[3], v[4]};
    }
    [[nodiscard]] int formation_index(int library_size) const {
        return std::clamp(static_cast<int>(std::lround(h_formation)), 0, std::max(0, library_size - 1));
    }
    [[nodiscard]] bool valid() const {
        return to_vector().allFinite() && h_inner > 0 && h_height > 0 && h_speed > 0 && h_safety >= 0;
    }
    bool operator==(const PreferenceVector &) const = default;
};

/// Physical range per preference dimension; the learning stack works in the
/// affine image of these ranges on [0, 1].
struct PreferenceRanges {
    std::array<double, kPreferenceDim> lo{1.0, 2.0, 0.5, 0.3, 0.0};
    std::array<double, kPreferenceDim> hi{10.0, 20.0, 6.0, 5.0, 4.0};

    [[nodiscard]] Eigen::VectorXd normalize(const PreferenceVector &h) const {
        Eigen::VectorXd v = h.to_vector();
        for (int p = 0; p < kPreferenceDim; ++p) v[p] = (v[p] - lo[p]) / (hi[p] - lo[p]);
        return v;
    }
    [[nodiscard]] PreferenceVector denormalize(const Eigen::Ref<const Eigen::VectorXd> &n) const {
        Eigen::VectorXd v(kPreferenceDim);
        for (int p = 0; p < kPreferenceDim; ++p) v[p] = lo[p] + n[p] * (hi[p] - lo[p]);
        return PreferenceVector::from_vector(v);
    }
    [[nodiscard]] PreferenceVector clamp(const PreferenceVector &h) const {
        Eigen::VectorXd v = h.to_vector();
        for (int p = 0; p < kPreferenceDim; ++p) v[p] = std::clamp(v[p], lo[p], hi[p]);
        return PreferenceVector::from_vector(v);
    }
};

inline nlohmann::json to_json(const PreferenceVector &h) {
    return {{"h_inner", h.h_inner}, {"h_height", h.h_height}, {"h_speed", h.h_speed},
            {"h_safety", h.h_safety}, {"h_formation", h.h_formation}};
}

inline PreferenceVector preference_from_json(const nlohmann::json &j) {
    PreferenceVector h;
    h.h_inner = j.at("h_inner").get<double>();
    h.h_height = j.at("h_height").get<double>();
    h.h_speed = j.at("h_speed").get<double>();
    h.h_safety = j.at("h_safety").get<double>();
    h.h_formation = j.at("h_formation").get<double>();
    return h;
}

inline nlohmann::json to_json(const PreferenceRanges &r) {
    return {{"lo", r.lo}, {"hi", r.hi}};
}

}  // namespace prefflock
