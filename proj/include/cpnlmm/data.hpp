#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "cpnlmm/common.hpp"

namespace cpnlmm {

struct Subject {
    std::string id;
    std::vector<double> times;
    std::vector<double> y;

    std::size_t n_obs() const { return times.size(); }
};

// Immutable after construction; validation happens once here so the density
// code can assume well-formed input.
class LongitudinalDataset {
  public:
    explicit LongitudinalDataset(std::vector<Subject> subjects) : subjects_(std::move(subjects)) {
        if (subjects_.empty()) throw DataError("dataset has no subjects");
        bool any_multi = false;
        for (const auto& s : subjects_) {
            if (s.times.size() != s.y.size())
                throw DataError("subject '" + s.id + "': times and outcomes differ in length");
            if (s.times.empty()) throw DataError("subject '" + s.id + "' has no observations");
            for (double t : s.times)
                if (!std::isfinite(t)) throw DataError("subject '" + s.id + "': non-finite time");
            for (double v : s.y)
                if (!std::isfinite(v)) throw DataError("subject '" + s.id + "': non-finite outcome");
            if (s.times.size() >= 2) any_multi = true;
        }
        if (!any_multi) throw DataError("need at least one subject with two or more observations");
        n_obs_ = 0;
        for (const auto& s : subjects_) n_obs_ += s.n_obs();
    }

    const std::vector<Subject>& subjects() const { return subjects_; }
    std::size_t n_subjects() const { return subjects_.size(); }
    std::size_t n_obs() const { return n_obs_; }

    std::pair<double, double> time_range() const {
        double lo = subjects_[0].times[0], hi = lo;
        for (const auto& s : subjects_)
            for (double t : s.times) {
                if (t < lo) lo = t;
                if (t > hi) hi = t;
            }
        return {lo, hi};
    }

  private:
    std::vector<Subject> subjects_;
    std::size_t n_obs_ = 0;
};

}  // namespace cpnlmm
