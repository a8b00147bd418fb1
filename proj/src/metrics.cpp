#include "sigma/metrics.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace sigma {

int hr_at_k(const std::vector<std::int64_t>& predictions, std::int64_t target,
            std::int64_t k, const std::vector<SemanticId>& sid_map) {
  if (k < 1) throw std::invalid_argument("hr_at_k: K must be >= 1");
  if (target < 0 || target >= static_cast<std::int64_t>(sid_map.size()))
    throw std::invalid_argument("hr_at_k: target not in sid map");
  const auto& tsid = sid_map[target];
  const auto upto = std::min<std::int64_t>(k, predictions.size());
  for (std::int64_t i = 0; i < upto; ++i) {
    const auto p = predictions[i];
    if (p < 0 || p >= static_cast<std::int64_t>(sid_map.size()))
      throw std::invalid_argument("hr_at_k: prediction not in sid map");
    if (sid_map[p] == tsid) return 1;
  }
  return 0;
}

int hr_at_k_sids(const std::vector<SemanticId>& predicted_sids,
                 const SemanticId& target_sid, std::int64_t k) {
  if (k < 1) throw std::invalid_argument("hr_at_k_sids: K must be >= 1");
  const auto upto = std::min<std::int64_t>(k, predicted_sids.size());
  for (std::int64_t i = 0; i < upto; ++i)
    if (predicted_sids[i] == target_sid) return 1;
  return 0;
}

void MetricsReport::finalize() {
  mean = {};
  if (per_task.empty()) return;
  for (const auto& [task, hrk] : per_task)
    for (std::size_t i = 0; i < hrk.size(); ++i) mean[i] += hrk[i];
  for (auto& m : mean) m /= static_cast<double>(per_task.size());
}

double MetricsReport::hr(std::int64_t k) const {
  for (std::size_t i = 0; i < kHrCutoffs.size(); ++i)
    if (kHrCutoffs[i] == k) return mean[i];
  throw std::invalid_argument("hr: unsupported cutoff");
}

std::string metrics_csv_header() {
  return "config_id,task,hr1,hr5,hr10,hr20,wall_seconds\n";
}

std::string metrics_csv_rows(const MetricsReport& r) {
  std::ostringstream os;
  auto row = [&](const std::string& task, const std::array<double, 4>& hrk) {
    os << r.config_id << ',' << task;
    for (const double v : hrk) os << ',' << fmt_double(v);
    os << ',' << fmt_double(r.wall_seconds) << '\n';
  };
  for (const auto& [task, hrk] : r.per_task) row(task_name(task), hrk);
  row("mean", r.mean);
  return os.str();
}

}  // namespace sigma
