#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "sigma/tensor.hpp"

namespace sigma {

// Synthetic catalog + interaction log. Items carry a planted 4-deep factor
// hierarchy (top category -> subcategory -> style -> item noise) so every
// downstream stage can be checked against ground truth labels.

struct WorldConfig {
  std::int64_t n_items = 10000;
  std::int64_t n_users = 2000;
  std::int64_t n_events = 200000;
  std::int64_t n_top = 8;
  std::int64_t n_sub_per_top = 4;
  std::int64_t n_style = 6;
  std::int64_t n_season = 4;
  std::int64_t n_holiday = 4;
  std::int64_t feat_dim = 32;
  std::int64_t emb_dim = 64;  // teacher/visual embedding width
  std::int64_t total_minutes = 2880;
  std::int64_t interests_per_user = 3;
  double pop_exponent = 0.6;
  double latent_prob = 0.08;
  double season_boost = 2.0;
  double holiday_boost = 3.0;
  double visual_missing_rate = 0.1;
  bool uniform_interests = false;  // disables interest/latent structure
  std::uint64_t seed = 42;

  std::int64_t n_subcats() const { return n_top * n_sub_per_top; }
};

enum class Action : std::uint8_t { Click = 0, Cart = 1, Purchase = 2 };

struct Item {
  std::int64_t id = 0;
  std::int32_t top = 0, sub = 0, style = 0, season = 0;
  std::int32_t holiday = -1;  // -1 = no holiday affinity
  double pop_weight = 0.0;
};

struct UserProfile {
  std::int32_t age = 0, gender = 0, region = 0;
  std::vector<std::int32_t> interest_subs;
  std::vector<double> interest_weights;
  std::int32_t latent_sub = -1;
};

struct BehaviorEvent {
  std::int64_t ts = 0;  // seconds
  std::int64_t user = 0;
  std::int64_t item = 0;
  Action action = Action::Click;
};

struct World {
  WorldConfig cfg;
  std::vector<Item> items;
  std::vector<UserProfile> users;
  std::vector<BehaviorEvent> events;  // ts non-decreasing
  Mat features;    // n_items x feat_dim
  Mat teacher_id;  // n_items x emb_dim
  Mat visual;      // n_items x emb_dim
  std::vector<char> has_visual;

  std::int32_t season_of_minute(std::int64_t minute) const;
  std::int32_t holiday_of_minute(std::int64_t minute) const;  // -1 = none

  // Per-item interaction counts over [0, end_ts); end_ts < 0 means all.
  std::vector<std::int64_t> item_counts(std::int64_t end_ts = -1) const;
  // Ascending popularity order; the first quarter is the longtail set.
  std::vector<char> longtail_mask(std::int64_t end_ts = -1) const;

  void save(const std::filesystem::path& dir) const;
  static World load(const std::filesystem::path& dir);
};

World generate_world(const WorldConfig& cfg);

const char* action_name(Action a);
Action parse_action(const std::string& s);

}  // namespace sigma
