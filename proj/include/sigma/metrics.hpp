#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sigma/rqvae.hpp"
#include "sigma/vocab.hpp"

namespace sigma {

constexpr std::array<std::int64_t, 4> kHrCutoffs = {1, 5, 10, 20};

// SID-level hit: 1 iff any of the top-K predictions' full SIDs equals the
// target's full SID.
int hr_at_k(const std::vector<std::int64_t>& predictions, std::int64_t target,
            std::int64_t k, const std::vector<SemanticId>& sid_map);
int hr_at_k_sids(const std::vector<SemanticId>& predicted_sids,
                 const SemanticId& target_sid, std::int64_t k);

struct MetricsReport {
  std::string config_id;
  std::map<Task, std::array<double, 4>> per_task;  // HR@1/5/10/20
  std::array<double, 4> mean{};                    // unweighted over tasks
  std::map<Task, std::int64_t> counts;
  double wall_seconds = 0.0;

  void finalize();  // fills `mean` from per_task
  double hr(std::int64_t k) const;  // mean HR at one of the cutoffs
};

std::string metrics_csv_header();
// One row per task plus a "mean" row.
std::string metrics_csv_rows(const MetricsReport& r);

}  // namespace sigma
