#pragma once

#include "prefflock/preference.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace prefflock::wire {

using nlohmann::json;

struct WireError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Server to client: hello, state_snapshot, region_update, preference_update,
// query_request, error. Client to server: feedback, control.
enum class Type { Hello, StateSnapshot, RegionUpdate, PreferenceUpdate, QueryRequest, Feedback, Control, Error };

inline constexpr std::array<std::pair<Type, std::string_view>, 8> kTypeNames{{{Type::Hello, "hello"},
                                                                             {Type::StateSnapshot, "state_snapshot"},
                                                                             {Type::RegionUpdate, "region_update"},
                                                                             {Type::PreferenceUpdate, "preference_update"},
                                                                             {Type::QueryRequest, "query_request"},
                                                                             {Type::Feedback, "feedback"},
                                                                             {Type::Control, "control"},
                                                                             {Type::Error, "error"}}};

inline std::string_view to_string(Type t) {
    for (const auto &[k, v] : kTypeNames)
        if (k == t) return v;
    return "?";
}

inline Type type_from_string(std::string_view s) {
    for (const auto &[k, v] : kTypeNames)
        if (v == s) return k;
    throw WireError("unknown message type '" + std::string(s) + "'");
}

struct Message {
    Type type = Type::Error;
    std::uint64_t seq = 0;
    json payload = json::object();
    bool operator==(const Message &) const = default;
};

namespace detail {

inline const json &field(const json &p, const char *key) {
    if (!p.is_object() || !p.contains(key)) throw WireError(std::string("missing field '") + key + "'");
    return p.at(key);
}

inline double number(const json &p, const char *key) {
    const json &v = field(p, key);
    if (!v.is_number()) throw WireError(std::string("field '") + key + "' must be a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw WireError(std::string("field '") + key + "' must be finite");
    return d;
}

inline std::uint64_t counter(const json &p, const char *key) {
    const json &v = field(p, key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
        throw WireError(std::string("field '") + key + "' must be a non-negative integer");
    return v.get<std::uint64_t>();
}

inline void vec3(const json &v, const char *what) {
    if (!v.is_array() || v.size() != 3) throw WireError(std::string(what) + " must be [x, y, z]");
    for (const auto &c : v)
        if (!c.is_number() || !std::isfinite(c.get<double>())) throw WireError(std::string(what) + " must be finite");
}

inline void preference(const json &p, const char *key) {
    const json &h = field(p, key);
    for (const char *k : {"h_inner", "h_height", "h_speed", "h_safety", "h_formation"}) number(h, k);
}

}  // namespace detail

/// Throws WireError when the payload does not match the schema of its type.
inline void validate(const Message &m) {
    using namespace detail;
    const json &p = m.payload;
    if (!p.is_object()) throw WireError("payload must be an object");
    switch (m.type) {
        case Type::Hello: {
            const auto &role = field(p, "role");
            if (role != "operator" && role != "viewer") throw WireError("role must be operator or viewer");
            if (!field(p, "prototypes").is_array()) throw WireError("prototypes must be an array");
            break;
        }
        case Type::StateSnapshot: {
            counter(p, "tick");
            if (!field(p, "paused").is_boolean()) throw WireError("paused must be a boolean");
            number(p, "threshold");
            preference(p, "preference");
            for (const auto &r : field(p, "robots")) {
                counter(r, "id");
                vec3(field(r, "position"), "position");
                vec3(field(r, "velocity"), "velocity");
            }
            break;
        }
        case Type::RegionUpdate:
            counter(p, "waypoint");
            for (const auto &h : field(p, "polytope")) {
                vec3(field(h, "a"), "a");
                number(h, "b");
            }
            break;
        case Type::PreferenceUpdate:
            counter(p, "waypoint");
            preference(p, "realized");
            if (!field(p, "prototype").is_string()) throw WireError("prototype must be a string");
            for (const auto &s : field(p, "slots")) vec3(s, "slot");
            break;
        case Type::QueryRequest:
            counter(p, "query_id");
            counter(p, "waypoint");
            preference(p, "predicted");
            number(p, "mean_variance");
            number(p, "timeout_s");
            break;
        case Type::Feedback: {
            counter(p, "query_id");
            preference(p, "preference");
            const double c = number(p, "confidence");
            if (c < 0.0 || c > 1.0) throw WireError("confidence must be in [0, 1]");
            break;
        }
        case Type::Control: {
            const json &a = field(p, "action");
            if (a == "set_threshold") {
                if (number(p, "value") < 0.0) throw WireError("threshold must be >= 0");
            } else if (a != "pause" && a != "resume" && a != "abort") {
                throw WireError("action must be pause, resume, abort or set_threshold");
            }
            break;
        }
        case Type::Error:
            if (!field(p, "message").is_string()) throw WireError("message must be a string");
            break;
    }
}

inline std::string encode(const Message &m) {
    return json{{"type", to_string(m.type)}, {"seq", m.seq}, {"payload", m.payload}}.dump();
}

inline Message decode(std::string_view text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception &e) {
        throw WireError(std::string("not JSON: ") + e.what());
    }
    if (!j.is_object()) throw WireError("message must be an object");
    Message m;
    const json &t = detail::field(j, "type");
    if (!t.is_string()) throw WireError("type must be a string");
    m.type = type_from_string(t.get<std::string>());
    m.seq = detail::counter(j, "seq");
    m.payload = detail::field(j, "payload");
    validate(m);
    return m;
}

/// Feedback payload into a preference vector; values must lie in `ranges`.
inline PreferenceVector feedback_preference(const Message &m, const PreferenceRanges &ranges) {
    if (m.type != Type::Feedback) throw WireError("not a feedback message");
    const PreferenceVector h = preference_from_json(m.payload.at("preference"));
    const auto v = h.to_vector();
    for (int p = 0; p < kPreferenceDim; ++p)
        if (v[p] < ranges.lo[p] || v[p] > ranges.hi[p]) throw WireError("preference value out of range");
    return h;
}

}  // namespace prefflock::wire
