#pragma once

#include "prefflock/preference.hpp"
#include "prefflock/preference_gp.hpp"

#include <nlohmann/json.hpp>

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace prefflock {

struct DatasetError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct FeedbackSample {
    Eigen::VectorXd x;  // normalized environment features
    PreferenceVector y;  // physical units
    std::string env_label;
    double timestamp = 0.0;

    bool operator==(const FeedbackSample &o) const {
        return x == o.x && y == o.y && env_label == o.env_label && timestamp == o.timestamp;
    }
};

inline nlohmann::json to_json(const FeedbackSample &s) {
    return {{"x", std::vector<double>(s.x.data(), s.x.data() + s.x.size())},
            {"y", to_json(s.y)},
            {"env", s.env_label},
            {"t", s.timestamp}};
}

inline FeedbackSample sample_from_json(const nlohmann::json &j) {
    FeedbackSample s;
    const auto x = j.at("x").get<std::vector<double>>();
    s.x = Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
    s.y = preference_from_json(j.at("y"));
    s.env_label = j.at("env").get<std::string>();
    s.timestamp = j.value("t", 0.0);
    if (!s.x.allFinite() || !s.y.to_vector().allFinite()) throw DatasetError("non-finite sample");
    return s;
}

/// Appends one line with a single write(2) on an O_APPEND descriptor and
/// fsyncs. A torn line left by an earlier crash is terminated first so it
/// cannot swallow the new record.
inline void append_sample(const std::string &path, const FeedbackSample &s) {
    std::string line = to_json(s).dump() + "\n";
    const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
    if (fd < 0) throw DatasetError("cannot open dataset '" + path + "': " + std::strerror(errno));
    struct stat st {};
    if (::fstat(fd, &st) == 0 && st.st_size > 0) {
        const int rfd = ::open(path.c_str(), O_RDONLY);
        char last = '\n';
        if (rfd >= 0) {
            if (::pread(rfd, &last, 1, st.st_size - 1) != 1) last = '\n';
            ::close(rfd);
        }
        if (last != '\n') line.insert(line.begin(), '\n');
    }
    const char *p = line.data();
    std::size_t left = line.size();
    while (left > 0) {
        const ssize_t n = ::write(fd, p, left);
        if (n < 0) {
            if (errno == EINTR) continue;
            const std::string err = std::strerror(errno);
            ::close(fd);
            throw DatasetError("write to dataset '" + path + "' failed: " + err);
        }
        p += n;
        left -= static_cast<std::size_t>(n);
    }
    ::fsync(fd);
    ::close(fd);
}

struct LoadedDataset {
    std::vector<FeedbackSample> samples;
    int skipped = 0;  // malformed lines
};

inline LoadedDataset load_dataset(const std::string &path) {
    std::ifstream in(path);
    if (!in) throw DatasetError("cannot open dataset '" + path + "'");
    LoadedDataset out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            out.samples.push_back(sample_from_json(nlohmann::json::parse(line)));
        } catch (const std::exception &) {
            ++out.skipped;
        }
    }
    return out;
}

/// Stacks samples into GP training matrices with normalized targets.
inline gp::Dataset to_gp_dataset(const std::vector<FeedbackSample> &samples, const PreferenceRanges &ranges) {
    gp::Dataset d;
    if (samples.empty()) return d;
    const auto D = samples.front().x.size();
    d.X.resize(static_cast<Eigen::Index>(samples.size()), D);
    d.Y.resize(static_cast<Eigen::Index>(samples.size()), kPreferenceDim);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].x.size() != D) throw DatasetError("samples differ in feature dimension");
        d.X.row(static_cast<Eigen::Index>(i)) = samples[i].x.transpose();
        d.Y.row(static_cast<Eigen::Index>(i)) = ranges.normalize(samples[i].y).transpose();
    }
    return d;
}

}  // namespace prefflock
