#include "sigma/serving.hpp"

#include <algorithm>
#include <stdexcept>

namespace sigma {

std::vector<MinuteBucket> ingest(const std::vector<BehaviorEvent>& stream,
                                 std::int64_t* rejected) {
  std::map<std::int64_t, std::int64_t> last_ts;
  std::map<std::pair<std::int64_t, std::int64_t>, std::vector<BehaviorEvent>>
      grouped;  // (minute, user) -> events in arrival order
  std::int64_t bad = 0;
  for (const auto& e : stream) {
    const auto it = last_ts.find(e.user);
    if (it != last_ts.end() && e.ts < it->second) {
      ++bad;
      continue;
    }
    last_ts[e.user] = e.ts;
    grouped[{e.ts / 60, e.user}].push_back(e);
  }
  if (rejected) *rejected = bad;
  std::vector<MinuteBucket> out;
  out.reserve(grouped.size());
  for (auto& [key, events] : grouped)
    out.push_back({key.first, key.second, std::move(events)});
  return out;
}

ServingSim::ServingSim(const Model& model, const PrefixIndex& index,
                       const World& world, const std::vector<SemanticId>& sids,
                       ServeConfig cfg)
    : model_(model), index_(index), world_(world), sids_(sids), cfg_(cfg) {
  // Keep prompt + instruction + generation inside the context window.
  const std::int64_t per_item = cfg_.gen.ell + 1;
  const std::int64_t budget = model_.cfg.max_seq - 8 - cfg_.gen.ell;
  effective_window_ =
      std::max<std::int64_t>(1, std::min(cfg_.history_window, budget / per_item));
}

std::vector<TokenUnit> ServingSim::head_units(std::int64_t user) const {
  const auto& p = world_.users[user];
  return {TokenUnit::tok(Vocabulary::kBos),
          TokenUnit::tok(model_.vocab.age_token(p.age)),
          TokenUnit::tok(model_.vocab.gender_token(p.gender)),
          TokenUnit::tok(model_.vocab.region_token(p.region))};
}

std::vector<TokenUnit> ServingSim::item_units(std::int64_t item) const {
  std::vector<TokenUnit> units;
  const auto seq = tokenize_item(model_.vocab, sids_[item], item, cfg_.gen.ell);
  for (const auto t : seq.sid_tokens) units.push_back(TokenUnit::tok(t));
  units.push_back(TokenUnit::itm(item));
  return units;
}

void ServingSim::rebuild_session(std::int64_t user, Session& s) {
  if (static_cast<std::int64_t>(s.items.size()) > effective_window_)
    s.items.erase(s.items.begin(),
                  s.items.end() - effective_window_);
  std::vector<TokenUnit> units = head_units(user);
  for (const auto item : s.items) {
    const auto iu = item_units(item);
    units.insert(units.end(), iu.begin(), iu.end());
  }
  s.cache.reset(model_.cfg.blocks);
  model_.forward_infer(nullptr, s.cache, units);
  s.unit_len = static_cast<std::int64_t>(units.size());
}

GenerationResult ServingSim::run_generation(const Session& s) {
  const std::vector<TokenUnit> inst = {
      TokenUnit::tok(model_.vocab.task_token(cfg_.task))};
  return generate(model_, index_, &s.cache, inst, cfg_.gen);
}

GenerationResult ServingSim::incremental_infer(
    std::int64_t user, const std::vector<BehaviorEvent>& events,
    std::int64_t minute) {
  auto& s = sessions_[user];
  if (s.unit_len == 0 && s.items.empty()) {
    rebuild_session(user, s);
  } else if (s.cache.len != s.unit_len) {
    // Inconsistent cache; fall back to a full rebuild.
    ++rebuilt_;
    rebuild_session(user, s);
  }

  std::vector<std::int64_t> fresh;
  for (const auto& e : events) fresh.push_back(e.item);
  if (!fresh.empty()) {
    if (static_cast<std::int64_t>(s.items.size() + fresh.size()) >
        effective_window_) {
      s.items.insert(s.items.end(), fresh.begin(), fresh.end());
      rebuild_session(user, s);
    } else {
      std::vector<TokenUnit> units;
      for (const auto item : fresh) {
        const auto iu = item_units(item);
        units.insert(units.end(), iu.begin(), iu.end());
      }
      s.items.insert(s.items.end(), fresh.begin(), fresh.end());
      model_.forward_infer(nullptr, s.cache, units);
      s.unit_len += static_cast<std::int64_t>(units.size());
    }
  }

  GenerationResult res = run_generation(s);
  std::vector<std::pair<std::int64_t, double>> ranked;
  for (const auto& item : res.items) ranked.push_back({item.id, item.prob});
  u2i_.put(user, std::move(ranked), minute);
  return res;
}

void ServingSim::replay(const std::vector<BehaviorEvent>& stream) {
  auto buckets = ingest(stream);
  // buckets are already sorted by (minute, user)
  for (const auto& b : buckets) incremental_infer(b.user, b.events, b.minute);
}

std::vector<std::pair<std::int64_t, double>> ServingSim::serve(
    std::int64_t user) const {
  const auto entry = u2i_.get(user);
  if (!entry) return {};
  return entry->ranked;
}

GenerationResult ServingSim::recompute(std::int64_t user) const {
  const auto it = sessions_.find(user);
  std::vector<std::int64_t> items =
      it == sessions_.end() ? std::vector<std::int64_t>{} : it->second.items;
  if (static_cast<std::int64_t>(items.size()) > effective_window_)
    items.erase(items.begin(), items.end() - effective_window_);
  std::vector<TokenUnit> units = head_units(user);
  for (const auto item : items) {
    const auto iu = item_units(item);
    units.insert(units.end(), iu.begin(), iu.end());
  }
  units.push_back(TokenUnit::tok(model_.vocab.task_token(cfg_.task)));
  return generate(model_, index_, nullptr, units, cfg_.gen);
}

const std::vector<std::int64_t>& ServingSim::history(std::int64_t user) const {
  static const std::vector<std::int64_t> kEmpty;
  const auto it = sessions_.find(user);
  return it == sessions_.end() ? kEmpty : it->second.items;
}

}  // namespace sigma
