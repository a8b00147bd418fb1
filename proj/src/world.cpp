#include "sigma/world.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "sigma/config.hpp"
#include "sigma/rng.hpp"

namespace sigma {

const char* action_name(Action a) {
  switch (a) {
    case Action::Click: return "click";
    case Action::Cart: return "cart";
    case Action::Purchase: return "purchase";
  }
  return "click";
}

Action parse_action(const std::string& s) {
  if (s == "click") return Action::Click;
  if (s == "cart") return Action::Cart;
  if (s == "purchase") return Action::Purchase;
  throw std::runtime_error("unknown action: " + s);
}

std::int32_t World::season_of_minute(std::int64_t minute) const {
  if (minute < 0) minute = 0;
  const std::int64_t s = minute * cfg.n_season / std::max<std::int64_t>(1, cfg.total_minutes);
  return static_cast<std::int32_t>(std::min(s, cfg.n_season - 1));
}

std::int32_t World::holiday_of_minute(std::int64_t minute) const {
  if (cfg.n_holiday <= 0) return -1;
  const std::int64_t len =
      std::max<std::int64_t>(1, cfg.total_minutes / (cfg.n_holiday * 4));
  for (std::int32_t h = 0; h < cfg.n_holiday; ++h) {
    const std::int64_t center = ((2 * h + 1) * cfg.total_minutes) / (2 * cfg.n_holiday);
    const std::int64_t start = center - len / 2;
    if (minute >= start && minute < start + len) return h;
  }
  return -1;
}

std::vector<std::int64_t> World::item_counts(std::int64_t end_ts) const {
  std::vector<std::int64_t> counts(items.size(), 0);
  for (const auto& e : events) {
    if (end_ts >= 0 && e.ts >= end_ts) break;
    ++counts[e.item];
  }
  return counts;
}

std::vector<char> World::longtail_mask(std::int64_t end_ts) const {
  const auto counts = item_counts(end_ts);
  std::vector<std::int64_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
    if (counts[a] != counts[b]) return counts[a] < counts[b];
    return a < b;
  });
  std::vector<char> mask(items.size(), 0);
  const std::int64_t quota = static_cast<std::int64_t>(items.size()) / 4;
  for (std::int64_t i = 0; i < quota; ++i) mask[order[i]] = 1;
  return mask;
}

World generate_world(const WorldConfig& cfg) {
  if (cfg.n_items <= 0 || cfg.n_users <= 0 || cfg.feat_dim <= 0 ||
      cfg.emb_dim <= 0 || cfg.n_top <= 0 || cfg.n_sub_per_top <= 0 ||
      cfg.n_style <= 0 || cfg.n_season <= 0)
    throw std::invalid_argument("generate_world: inconsistent dimensions");

  World w;
  w.cfg = cfg;
  Rng root(cfg.seed);
  const std::int64_t n_subs = cfg.n_subcats();

  // Items: balanced subcategory assignment, random style, planted labels.
  Rng item_rng = root.split(1);
  w.items.resize(cfg.n_items);
  for (std::int64_t i = 0; i < cfg.n_items; ++i) {
    Item& it = w.items[i];
    it.id = i;
    it.sub = static_cast<std::int32_t>(i % n_subs);
    it.top = it.sub / static_cast<std::int32_t>(cfg.n_sub_per_top);
    Rng r = item_rng.split(i);
    it.style = static_cast<std::int32_t>(r.uniform_int(cfg.n_style));
    it.season = it.sub % static_cast<std::int32_t>(cfg.n_season);
    const auto h = it.style % static_cast<std::int32_t>(cfg.n_holiday + 1);
    it.holiday = (h == cfg.n_holiday) ? -1 : h;
  }

  // Power-law popularity over a random rank permutation.
  {
    Rng pop_rng = root.split(2);
    std::vector<std::int64_t> rank(cfg.n_items);
    std::iota(rank.begin(), rank.end(), 0);
    for (std::int64_t i = cfg.n_items - 1; i > 0; --i) {
      const auto j = static_cast<std::int64_t>(pop_rng.uniform_int(i + 1));
      std::swap(rank[i], rank[j]);
    }
    for (std::int64_t i = 0; i < cfg.n_items; ++i)
      w.items[rank[i]].pop_weight =
          std::pow(static_cast<double>(i + 1), -cfg.pop_exponent);
  }

  // Factor embeddings; the top factor dominates so the hierarchy is
  // recoverable from distances.
  auto randn_mat = [](Rng r, std::int64_t rows, std::int64_t cols,
                      double scale) {
    Mat m(rows, cols);
    m.randn(r, scale);
    return m;
  };
  const Mat top_f = randn_mat(root.split(3), cfg.n_top, cfg.feat_dim, 1.0);
  const Mat sub_f = randn_mat(root.split(4), n_subs, cfg.feat_dim, 0.6);
  const Mat sty_f = randn_mat(root.split(5), cfg.n_style, cfg.feat_dim, 0.35);
  const Mat top_t = randn_mat(root.split(6), cfg.n_top, cfg.emb_dim, 1.0);
  const Mat sub_t = randn_mat(root.split(7), n_subs, cfg.emb_dim, 0.6);
  const Mat sty_t = randn_mat(root.split(8), cfg.n_style, cfg.emb_dim, 0.35);
  const Mat sty_v = randn_mat(root.split(9), cfg.n_style, cfg.emb_dim, 1.0);

  w.features = Mat(cfg.n_items, cfg.feat_dim);
  w.teacher_id = Mat(cfg.n_items, cfg.emb_dim);
  w.visual = Mat(cfg.n_items, cfg.emb_dim);
  w.has_visual.resize(cfg.n_items);
  Rng noise_rng = root.split(10);
  for (std::int64_t i = 0; i < cfg.n_items; ++i) {
    const Item& it = w.items[i];
    Rng r = noise_rng.split(i);
    for (std::int64_t j = 0; j < cfg.feat_dim; ++j)
      w.features.at(i, j) = top_f.at(it.top, j) + sub_f.at(it.sub, j) +
                            sty_f.at(it.style, j) + 0.2 * r.normal();
    for (std::int64_t j = 0; j < cfg.emb_dim; ++j)
      w.teacher_id.at(i, j) = top_t.at(it.top, j) + sub_t.at(it.sub, j) +
                              sty_t.at(it.style, j) + 0.15 * r.normal();
    for (std::int64_t j = 0; j < cfg.emb_dim; ++j)
      w.visual.at(i, j) = sty_v.at(it.style, j) + 0.3 * r.normal();
    w.has_visual[i] = r.next_double() >= cfg.visual_missing_rate;
  }

  // Users.
  Rng user_rng = root.split(11);
  w.users.resize(cfg.n_users);
  for (std::int64_t u = 0; u < cfg.n_users; ++u) {
    UserProfile& p = w.users[u];
    Rng r = user_rng.split(u);
    p.age = static_cast<std::int32_t>(r.uniform_int(4));
    p.gender = static_cast<std::int32_t>(r.uniform_int(3));
    p.region = static_cast<std::int32_t>(r.uniform_int(4));
    const std::int64_t k = std::min(cfg.interests_per_user, n_subs);
    while (static_cast<std::int64_t>(p.interest_subs.size()) < k) {
      const auto s = static_cast<std::int32_t>(r.uniform_int(n_subs));
      if (std::find(p.interest_subs.begin(), p.interest_subs.end(), s) ==
          p.interest_subs.end())
        p.interest_subs.push_back(s);
    }
    double total = 0.0;
    for (std::int64_t i = 0; i < k; ++i) {
      const double wgt = 0.2 - std::log(1.0 - r.next_double());
      p.interest_weights.push_back(wgt);
      total += wgt;
    }
    for (auto& wgt : p.interest_weights) wgt /= total;
    while (true) {
      const auto s = static_cast<std::int32_t>(r.uniform_int(n_subs));
      if (std::find(p.interest_subs.begin(), p.interest_subs.end(), s) ==
          p.interest_subs.end()) {
        p.latent_sub = s;
        break;
      }
    }
  }

  // Sub -> item lists for event sampling.
  std::vector<std::vector<std::int64_t>> by_sub(n_subs);
  for (const auto& it : w.items) by_sub[it.sub].push_back(it.id);
  for (const auto& bucket : by_sub)
    if (bucket.empty())
      throw std::invalid_argument("generate_world: more subcategories than items");

  // Events, timestamps non-decreasing by construction.
  Rng ev_rng = root.split(12);
  w.events.reserve(cfg.n_events);
  std::vector<double> cum;
  for (std::int64_t e = 0; e < cfg.n_events; ++e) {
    const std::int64_t ts =
        cfg.n_events <= 1 ? 0 : e * cfg.total_minutes * 60 / cfg.n_events;
    const std::int64_t minute = ts / 60;
    const std::int32_t season_now = w.season_of_minute(minute);
    const std::int32_t holiday_now = w.holiday_of_minute(minute);
    const auto user = static_cast<std::int64_t>(ev_rng.uniform_int(cfg.n_users));
    const UserProfile& p = w.users[user];

    std::int32_t sub;
    if (cfg.uniform_interests) {
      sub = static_cast<std::int32_t>(ev_rng.uniform_int(n_subs));
    } else if (ev_rng.next_double() < cfg.latent_prob) {
      sub = p.latent_sub;
    } else {
      const double x = ev_rng.next_double();
      double acc = 0.0;
      sub = p.interest_subs.back();
      for (std::size_t i = 0; i < p.interest_subs.size(); ++i) {
        acc += p.interest_weights[i];
        if (x < acc) {
          sub = p.interest_subs[i];
          break;
        }
      }
    }

    const auto& bucket = by_sub[sub];
    cum.resize(bucket.size());
    double total = 0.0;
    for (std::size_t i = 0; i < bucket.size(); ++i) {
      const Item& it = w.items[bucket[i]];
      double wgt = it.pop_weight;
      if (it.season == season_now) wgt *= cfg.season_boost;
      if (it.holiday >= 0 && it.holiday == holiday_now) wgt *= cfg.holiday_boost;
      total += wgt;
      cum[i] = total;
    }
    const double x = ev_rng.next_double() * total;
    const auto pos = std::lower_bound(cum.begin(), cum.end(), x) - cum.begin();
    const std::int64_t item =
        bucket[std::min<std::size_t>(pos, bucket.size() - 1)];

    const double a = ev_rng.next_double();
    const Action action =
        a < 0.8 ? Action::Click : (a < 0.92 ? Action::Cart : Action::Purchase);
    w.events.push_back({ts, user, item, action});
  }
  return w;
}

namespace {

std::string join_i32(const std::vector<std::int32_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

std::string join_d(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += fmt_double(v[i]);
  }
  return s;
}

}  // namespace

void World::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);

  std::ostringstream cat;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    cat << it.id << '\t' << it.top << '\t' << it.sub << '\t' << it.style
        << '\t' << it.season << '\t' << it.holiday << '\t'
        << fmt_double(it.pop_weight) << '\t'
        << static_cast<int>(has_visual[i]) << '\n';
  }
  write_text(dir / "catalog.tsv", cat.str());

  std::ostringstream us;
  for (std::size_t u = 0; u < users.size(); ++u) {
    const auto& p = users[u];
    us << u << '\t' << p.age << '\t' << p.gender << '\t' << p.region << '\t'
       << p.latent_sub << '\t' << join_i32(p.interest_subs) << '\t'
       << join_d(p.interest_weights) << '\n';
  }
  write_text(dir / "users.tsv", us.str());

  std::ostringstream ev;
  for (const auto& e : events)
    ev << e.ts << '\t' << e.user << '\t' << e.item << '\t'
       << action_name(e.action) << '\n';
  write_text(dir / "events.tsv", ev.str());

  std::ostringstream ids;
  for (const auto& it : items) ids << it.id << '\n';
  write_text(dir / "ids.txt", ids.str());

  write_tensor(dir / "features.sgt", features);
  write_tensor(dir / "teacher_id.sgt", teacher_id);
  write_tensor(dir / "visual.sgt", visual);

  // Calendar as merged (season, holiday) ranges.
  std::ostringstream cal;
  std::int64_t start = 0;
  std::int32_t cs = season_of_minute(0), ch = holiday_of_minute(0);
  for (std::int64_t m = 1; m <= cfg.total_minutes; ++m) {
    const std::int32_t s = m < cfg.total_minutes ? season_of_minute(m) : -2;
    const std::int32_t h = m < cfg.total_minutes ? holiday_of_minute(m) : -2;
    if (s != cs || h != ch) {
      cal << start << '\t' << m << '\t' << cs << '\t' << ch << '\n';
      start = m;
      cs = s;
      ch = h;
    }
  }
  write_text(dir / "calendar.tsv", cal.str());

  std::ostringstream mf;
  mf << "n_items = " << cfg.n_items << "\n";
  mf << "n_users = " << cfg.n_users << "\n";
  mf << "n_events = " << cfg.n_events << "\n";
  mf << "n_top = " << cfg.n_top << "\n";
  mf << "n_sub_per_top = " << cfg.n_sub_per_top << "\n";
  mf << "n_style = " << cfg.n_style << "\n";
  mf << "n_season = " << cfg.n_season << "\n";
  mf << "n_holiday = " << cfg.n_holiday << "\n";
  mf << "feat_dim = " << cfg.feat_dim << "\n";
  mf << "emb_dim = " << cfg.emb_dim << "\n";
  mf << "total_minutes = " << cfg.total_minutes << "\n";
  mf << "interests_per_user = " << cfg.interests_per_user << "\n";
  mf << "pop_exponent = " << fmt_double(cfg.pop_exponent) << "\n";
  mf << "latent_prob = " << fmt_double(cfg.latent_prob) << "\n";
  mf << "season_boost = " << fmt_double(cfg.season_boost) << "\n";
  mf << "visual_missing_rate = " << fmt_double(cfg.visual_missing_rate) << "\n";
  mf << "holiday_boost = " << fmt_double(cfg.holiday_boost) << "\n";
  mf << "uniform_interests = " << (cfg.uniform_interests ? 1 : 0) << "\n";
  mf << "seed = " << cfg.seed << "\n";
  write_text(dir / "world_manifest.txt", mf.str());
}

World World::load(const std::filesystem::path& dir) {
  World w;
  const Config mf = Config::from_file(dir / "world_manifest.txt");
  w.cfg.n_items = mf.get_int("n_items", 0);
  w.cfg.n_users = mf.get_int("n_users", 0);
  w.cfg.n_events = mf.get_int("n_events", 0);
  w.cfg.n_top = mf.get_int("n_top", 8);
  w.cfg.n_sub_per_top = mf.get_int("n_sub_per_top", 4);
  w.cfg.n_style = mf.get_int("n_style", 6);
  w.cfg.n_season = mf.get_int("n_season", 4);
  w.cfg.n_holiday = mf.get_int("n_holiday", 4);
  w.cfg.feat_dim = mf.get_int("feat_dim", 32);
  w.cfg.emb_dim = mf.get_int("emb_dim", 64);
  w.cfg.total_minutes = mf.get_int("total_minutes", 2880);
  w.cfg.interests_per_user = mf.get_int("interests_per_user", 3);
  w.cfg.pop_exponent = mf.get_double("pop_exponent", 0.6);
  w.cfg.latent_prob = mf.get_double("latent_prob", 0.08);
  w.cfg.season_boost = mf.get_double("season_boost", 2.0);
  w.cfg.visual_missing_rate = mf.get_double("visual_missing_rate", 0.1);
  w.cfg.holiday_boost = mf.get_double("holiday_boost", 3.0);
  w.cfg.uniform_interests = mf.get_bool("uniform_interests", false);
  w.cfg.seed = static_cast<std::uint64_t>(mf.get_int("seed", 42));

  for (const auto& line : read_lines(dir / "catalog.tsv")) {
    if (line.empty()) continue;
    const auto f = split(line, '\t');
    Item it;
    it.id = std::stoll(f[0]);
    it.top = std::stoi(f[1]);
    it.sub = std::stoi(f[2]);
    it.style = std::stoi(f[3]);
    it.season = std::stoi(f[4]);
    it.holiday = std::stoi(f[5]);
    it.pop_weight = std::stod(f[6]);
    w.items.push_back(it);
    w.has_visual.push_back(f.size() > 7 ? f[7] != "0" : 1);
  }
  for (const auto& line : read_lines(dir / "users.tsv")) {
    if (line.empty()) continue;
    const auto f = split(line, '\t');
    UserProfile p;
    p.age = std::stoi(f[1]);
    p.gender = std::stoi(f[2]);
    p.region = std::stoi(f[3]);
    p.latent_sub = std::stoi(f[4]);
    for (const auto& s : split(f[5], ','))
      if (!s.empty()) p.interest_subs.push_back(std::stoi(s));
    for (const auto& s : split(f[6], ','))
      if (!s.empty()) p.interest_weights.push_back(std::stod(s));
    w.users.push_back(p);
  }
  for (const auto& line : read_lines(dir / "events.tsv")) {
    if (line.empty()) continue;
    const auto f = split(line, '\t');
    w.events.push_back({std::stoll(f[0]), std::stoll(f[1]), std::stoll(f[2]),
                        parse_action(f[3])});
  }
  w.features = read_matrix(dir / "features.sgt");
  w.teacher_id = read_matrix(dir / "teacher_id.sgt");
  w.visual = read_matrix(dir / "visual.sgt");
  return w;
}

}  // namespace sigma
