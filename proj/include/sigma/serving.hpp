#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "sigma/generator.hpp"
#include "sigma/index.hpp"
#include "sigma/sft.hpp"
#include "sigma/world.hpp"

namespace sigma {

struct ServeConfig {
  GenOptions gen;
  std::int64_t history_window = 50;  // H most recent items
  std::int64_t shards = 1;
  Task task = Task::JustForYou;
};

// Minute-bucketed, per-user event groups in replay order.
struct MinuteBucket {
  std::int64_t minute = 0;
  std::int64_t user = 0;
  std::vector<BehaviorEvent> events;
};

// Groups a replay stream by (user, minute); events with a decreasing per-user
// timestamp are rejected and counted.
std::vector<MinuteBucket> ingest(const std::vector<BehaviorEvent>& stream,
                                 std::int64_t* rejected = nullptr);

// Two-lane nearline simulator: an inference lane drains minute buckets and
// refreshes the U2I index; the serve lane reads the latest snapshot and never
// waits on inference.
class ServingSim {
 public:
  ServingSim(const Model& model, const PrefixIndex& index, const World& world,
             const std::vector<SemanticId>& sids, ServeConfig cfg);

  GenerationResult incremental_infer(std::int64_t user,
                                     const std::vector<BehaviorEvent>& events,
                                     std::int64_t minute);
  void replay(const std::vector<BehaviorEvent>& stream);

  std::vector<std::pair<std::int64_t, double>> serve(std::int64_t user) const;
  const U2iIndex& u2i() const { return u2i_; }
  std::int64_t sessions_rebuilt() const { return rebuilt_; }

  // Cold-path reference: full recompute over the user's truncated history.
  GenerationResult recompute(std::int64_t user) const;
  const std::vector<std::int64_t>& history(std::int64_t user) const;

 private:
  struct Session {
    std::vector<std::int64_t> items;  // truncated history, oldest first
    KvCache cache;                    // covers bos + profile + history units
    std::int64_t unit_len = 0;
  };

  std::vector<TokenUnit> head_units(std::int64_t user) const;
  std::vector<TokenUnit> item_units(std::int64_t item) const;
  void rebuild_session(std::int64_t user, Session& s);
  GenerationResult run_generation(const Session& s);

  const Model& model_;
  const PrefixIndex& index_;
  const World& world_;
  const std::vector<SemanticId>& sids_;
  ServeConfig cfg_;
  std::int64_t effective_window_ = 0;
  std::map<std::int64_t, Session> sessions_;
  U2iIndex u2i_;
  std::int64_t rebuilt_ = 0;
};

}  // namespace sigma
