#include "sigma/sft.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

#include "sigma/kernels.hpp"

namespace sigma {

namespace {

struct Candidate {
  std::int64_t user;
  std::int64_t event_idx;  // index into world.events
  std::int32_t constraint;
};

}  // namespace

std::vector<InstructionSample> build_sft_dataset(
    const World& world, const std::map<Task, std::int64_t>& task_mix,
    std::uint64_t seed, const DatasetOptions& opt) {
  // Per-user event positions, in time order.
  std::vector<std::vector<std::int64_t>> user_events(world.users.size());
  for (std::int64_t e = 0; e < static_cast<std::int64_t>(world.events.size());
       ++e)
    user_events[world.events[e].user].push_back(e);

  const auto longtail = world.longtail_mask(opt.ts_end);

  std::vector<std::vector<Candidate>> pools(kNumTasks);
  for (std::int64_t u = 0; u < static_cast<std::int64_t>(world.users.size());
       ++u) {
    const auto& evs = user_events[u];
    for (std::size_t j = 0; j < evs.size(); ++j) {
      if (static_cast<std::int64_t>(j) < opt.min_history) continue;
      const auto& ev = world.events[evs[j]];
      if (ev.ts < opt.ts_begin) continue;
      if (opt.ts_end >= 0 && ev.ts >= opt.ts_end) continue;
      const Item& item = world.items[ev.item];

      pools[static_cast<int>(Task::JustForYou)].push_back({u, evs[j], -1});
      pools[static_cast<int>(Task::Query)].push_back({u, evs[j], item.sub});
      pools[static_cast<int>(Task::Category)].push_back({u, evs[j], item.top});
      if (longtail[ev.item])
        pools[static_cast<int>(Task::Longtail)].push_back({u, evs[j], -1});
      {
        bool seen = false;
        const std::size_t w0 =
            j >= static_cast<std::size_t>(opt.discover_window)
                ? j - opt.discover_window
                : 0;
        for (std::size_t k = w0; k < j && !seen; ++k)
          seen = world.items[world.events[evs[k]].item].sub == item.sub;
        if (!seen)
          pools[static_cast<int>(Task::Discover)].push_back({u, evs[j], -1});
      }
      const std::int32_t season_now = world.season_of_minute(ev.ts / 60);
      if (item.season == season_now)
        pools[static_cast<int>(Task::Season)].push_back(
            {u, evs[j], season_now});
      const std::int32_t holiday_now = world.holiday_of_minute(ev.ts / 60);
      if (holiday_now >= 0 && item.holiday == holiday_now)
        pools[static_cast<int>(Task::Holiday)].push_back(
            {u, evs[j], holiday_now});
    }
  }

  Rng root(seed);
  std::vector<InstructionSample> out;
  for (const auto& [task, count] : task_mix) {
    if (count <= 0) continue;
    const auto& pool = pools[static_cast<int>(task)];
    if (pool.empty())
      throw std::runtime_error(
          std::string("build_sft_dataset: no qualifying (user, target) for task ") +
          task_name(task));
    Rng rng = root.split(static_cast<std::uint64_t>(task));
    for (std::int64_t n = 0; n < count; ++n) {
      const auto& c = pool[rng.uniform_int(pool.size())];
      InstructionSample s;
      s.user = c.user;
      s.task = task;
      s.constraint = c.constraint;
      s.target = world.events[c.event_idx].item;
      const auto& evs = user_events[c.user];
      const auto jt = std::find(evs.begin(), evs.end(), c.event_idx);
      const auto j = static_cast<std::int64_t>(jt - evs.begin());
      const std::int64_t h0 = std::max<std::int64_t>(0, j - opt.max_history);
      for (std::int64_t k = h0; k < j; ++k)
        s.history.push_back(world.events[evs[k]].item);
      out.push_back(std::move(s));
    }
  }
  return out;
}

void save_dataset(const std::filesystem::path& path,
                  const std::vector<InstructionSample>& samples,
                  const World& world) {
  std::ostringstream os;
  for (const auto& s : samples) {
    const auto& p = world.users[s.user];
    os << s.user << '\t' << p.age << ',' << p.gender << ',' << p.region
       << '\t';
    for (std::size_t i = 0; i < s.history.size(); ++i) {
      if (i) os << ',';
      os << s.history[i];
    }
    os << '\t' << task_name(s.task) << '\t' << s.constraint << '\t' << s.target
       << '\n';
  }
  write_text(path, os.str());
}

std::vector<InstructionSample> load_dataset(const std::filesystem::path& path) {
  std::vector<InstructionSample> out;
  for (const auto& line : read_lines(path)) {
    if (line.empty()) continue;
    const auto f = split(line, '\t');
    InstructionSample s;
    s.user = std::stoll(f[0]);
    if (!f[2].empty())
      for (const auto& h : split(f[2], ','))
        if (!h.empty()) s.history.push_back(std::stoll(h));
    s.task = parse_task(f[3]);
    s.constraint = std::stoi(f[4]);
    s.target = std::stoll(f[5]);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<TokenUnit> instruction_units(const Vocabulary& vocab,
                                         const World& world,
                                         const std::vector<SemanticId>& sids,
                                         const InstructionSample& s,
                                         const LayoutOptions& opt) {
  std::vector<TokenUnit> units;
  const auto& p = world.users[s.user];
  units.push_back(TokenUnit::tok(Vocabulary::kBos));
  units.push_back(TokenUnit::tok(vocab.age_token(p.age)));
  units.push_back(TokenUnit::tok(vocab.gender_token(p.gender)));
  units.push_back(TokenUnit::tok(vocab.region_token(p.region)));
  for (const auto item : s.history) {
    if (opt.sid_tokens && opt.ell > 0) {
      const auto seq = tokenize_item(vocab, sids[item], item, opt.ell);
      for (const auto t : seq.sid_tokens) units.push_back(TokenUnit::tok(t));
    }
    if (opt.id_rows) units.push_back(TokenUnit::itm(item));
  }
  units.push_back(TokenUnit::tok(vocab.task_token(s.task)));
  switch (s.task) {
    case Task::Query:
      units.push_back(TokenUnit::tok(vocab.query_token(s.constraint)));
      break;
    case Task::Category:
      units.push_back(TokenUnit::tok(vocab.category_token(s.constraint)));
      break;
    case Task::Season:
      units.push_back(TokenUnit::tok(vocab.season_token(s.constraint)));
      break;
    case Task::Holiday:
      units.push_back(TokenUnit::tok(vocab.holiday_token(s.constraint)));
      break;
    default:
      break;
  }
  return units;
}

SampleLayout training_layout(const Vocabulary& vocab, const World& world,
                             const std::vector<SemanticId>& sids,
                             const InstructionSample& s,
                             const LayoutOptions& opt) {
  SampleLayout lay;
  lay.units = instruction_units(vocab, world, sids, s, opt);
  lay.prompt_len = static_cast<std::int64_t>(lay.units.size());
  lay.ell = opt.sid_tokens ? opt.ell : 0;
  if (!opt.with_target) return lay;
  if (lay.ell > 0) {
    const auto& sid = sids[s.target];
    for (std::int64_t t = 0; t < lay.ell; ++t) {
      lay.target_codes.push_back(sid[t]);
      lay.units.push_back(TokenUnit::tok(vocab.sid_token(t, sid[t])));
    }
  }
  if (opt.id_rows) {
    lay.query_pos = static_cast<std::int64_t>(lay.units.size());
    lay.units.push_back(TokenUnit::tok(Vocabulary::kQuery));
  }
  return lay;
}

PrefixBuckets PrefixBuckets::build(const std::vector<SemanticId>& sids,
                                   std::int64_t ell) {
  if (ell < 1) throw std::invalid_argument("PrefixBuckets: ell must be >= 1");
  PrefixBuckets b;
  b.ell = ell;
  for (std::size_t i = 0; i < sids.size(); ++i) {
    if (static_cast<std::int64_t>(sids[i].size()) < ell)
      throw std::invalid_argument("PrefixBuckets: SID shorter than ell");
    b.buckets[{sids[i].begin(), sids[i].begin() + ell}].push_back(
        static_cast<std::int64_t>(i));
  }
  return b;
}

const std::vector<std::int64_t>* PrefixBuckets::find(
    const SemanticId& prefix) const {
  const auto it = buckets.find(prefix);
  return it == buckets.end() ? nullptr : &it->second;
}

HardNegatives sample_hard_negatives(const PrefixBuckets& buckets,
                                    const std::vector<SemanticId>& sids,
                                    std::int64_t target, std::int64_t n,
                                    Rng& rng) {
  HardNegatives out;
  const auto* bucket = buckets.find(buckets.prefix_of(sids[target]));
  if (!bucket || bucket->empty())
    throw std::invalid_argument("sample_hard_negatives: target bucket missing");
  std::vector<std::int64_t> others;
  others.reserve(bucket->size());
  for (const auto id : *bucket)
    if (id != target) others.push_back(id);

  if (static_cast<std::int64_t>(others.size()) >= n) {
    // partial Fisher-Yates for a uniform draw without replacement
    for (std::int64_t i = 0; i < n; ++i) {
      const auto j = i + static_cast<std::int64_t>(
                             rng.uniform_int(others.size() - i));
      std::swap(others[i], others[j]);
      out.ids.push_back(others[i]);
    }
    return out;
  }
  out.ids = others;
  out.global_fallback = true;
  std::set<std::int64_t> taken(out.ids.begin(), out.ids.end());
  taken.insert(target);
  const auto catalog = static_cast<std::int64_t>(sids.size());
  while (static_cast<std::int64_t>(out.ids.size()) < n &&
         static_cast<std::int64_t>(taken.size()) < catalog) {
    const auto id = static_cast<std::int64_t>(rng.uniform_int(catalog));
    if (taken.insert(id).second) out.ids.push_back(id);
  }
  return out;
}

double ntp_loss(const Model& model, const World& world,
                const std::vector<SemanticId>& sids,
                const InstructionSample& s, const LayoutOptions& opt) {
  const SampleLayout lay = training_layout(model.vocab, world, sids, s, opt);
  if (lay.ell == 0) return 0.0;
  const Mat y = model.forward(lay.units);
  double nll = 0.0;
  for (std::int64_t t = 0; t < lay.ell; ++t) {
    const auto logits = model.sid_logits(y.row(lay.prompt_len - 1 + t));
    const auto lsm = model.level_log_softmax(logits, t);
    nll -= lsm[lay.target_codes[t]];
  }
  return nll / static_cast<double>(lay.ell);
}

InfoNceResult id_infonce_loss(const std::vector<double>& h,
                              const std::vector<double>& target_emb,
                              const Mat& negative_embs, double tau) {
  if (tau <= 0.0) throw std::invalid_argument("id_infonce_loss: tau must be > 0");
  const auto d = static_cast<std::int64_t>(h.size());
  if (static_cast<std::int64_t>(target_emb.size()) != d ||
      (negative_embs.rows > 0 && negative_embs.cols != d))
    throw std::invalid_argument("id_infonce_loss: dimension mismatch");
  const std::int64_t n = negative_embs.rows;

  InfoNceResult res;
  res.d_h.assign(d, 0.0);
  res.d_emb = Mat(n + 1, d);
  if (n == 0) {
    res.degenerate = true;
    return res;
  }

  const double hn = norm2(h.data(), d);
  if (hn == 0.0) throw std::invalid_argument("id_infonce_loss: zero query vector");
  std::vector<double> scores(n + 1), vnorm(n + 1);
  std::vector<const double*> rows(n + 1);
  rows[0] = target_emb.data();
  for (std::int64_t j = 0; j < n; ++j) rows[j + 1] = negative_embs.row(j);
  for (std::int64_t j = 0; j <= n; ++j) {
    vnorm[j] = norm2(rows[j], d);
    if (vnorm[j] == 0.0)
      throw std::invalid_argument("id_infonce_loss: zero item embedding");
    scores[j] = dot(h.data(), rows[j], d) / (hn * vnorm[j]) / tau;
  }
  const double lse = log_sum_exp(scores.data(), n + 1);
  res.loss = lse - scores[0];

  for (std::int64_t j = 0; j <= n; ++j) {
    const double p = std::exp(scores[j] - lse);
    const double ds = (p - (j == 0 ? 1.0 : 0.0)) / tau;
    const double cosv = scores[j] * tau;
    double* de = res.d_emb.row(j);
    for (std::int64_t i = 0; i < d; ++i) {
      res.d_h[i] += ds * (rows[j][i] / (hn * vnorm[j]) - cosv * h[i] / (hn * hn));
      de[i] = ds * (h[i] / (hn * vnorm[j]) - cosv * rows[j][i] / (vnorm[j] * vnorm[j]));
    }
  }
  return res;
}

SftResult sft_train(Model& model, const World& world,
                    const std::vector<SemanticId>& sids,
                    const std::vector<InstructionSample>& dataset,
                    const SftConfig& cfg) {
  if (dataset.empty()) throw std::invalid_argument("sft_train: empty dataset");
  SftResult res;
  Rng rng(cfg.seed);

  const bool use_id = cfg.layout.id_rows && cfg.w_id != 0.0;
  PrefixBuckets buckets;
  if (use_id && !cfg.global_negatives)
    buckets = PrefixBuckets::build(sids, std::max<std::int64_t>(1, cfg.layout.ell));

  auto prefs = model.params();
  AdamW opt;
  opt.lr = cfg.lr;
  opt.warmup_steps = cfg.warmup_steps;
  opt.weight_decay = cfg.weight_decay;

  const std::int64_t h = model.cfg.hidden;
  const std::int64_t fd = model.cfg.fused_dim;
  const std::int64_t k = model.vocab.sid_k;
  const auto catalog = static_cast<std::int64_t>(sids.size());

  std::vector<std::vector<double>> snapshot;
  auto take_snapshot = [&] {
    snapshot.clear();
    for (const auto& p : prefs) snapshot.emplace_back(p.w, p.w + p.n);
  };
  auto restore_snapshot = [&] {
    for (std::size_t i = 0; i < prefs.size(); ++i)
      std::copy(snapshot[i].begin(), snapshot[i].end(), prefs[i].w);
  };
  take_snapshot();

  Model::TrainCache cache;
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    const std::int64_t bs =
        std::min<std::int64_t>(cfg.batch, static_cast<std::int64_t>(dataset.size()));
    std::vector<const InstructionSample*> batch_samples;
    std::vector<SampleLayout> layouts;
    PackedBatch batch;
    batch.offsets.push_back(0);
    for (std::int64_t i = 0; i < bs; ++i) {
      const auto& s = dataset[rng.uniform_int(dataset.size())];
      batch_samples.push_back(&s);
      layouts.push_back(training_layout(model.vocab, world, sids, s, cfg.layout));
      const auto& lay = layouts.back();
      batch.units.insert(batch.units.end(), lay.units.begin(), lay.units.end());
      batch.offsets.push_back(static_cast<std::int64_t>(batch.units.size()));
    }

    // Batch-shared negative pool.
    std::vector<std::int64_t> shared_pool;
    for (std::int64_t i = 0; i < cfg.shared_negatives; ++i)
      shared_pool.push_back(static_cast<std::int64_t>(rng.uniform_int(catalog)));

    model.zero_grad();
    const Mat y = model.forward_train(batch, cache);
    Mat d_y(y.rows, y.cols);

    double ntp_total = 0.0, id_total = 0.0;
    for (std::int64_t si = 0; si < bs; ++si) {
      const auto& lay = layouts[si];
      const std::int64_t base = batch.offsets[si];

      if (cfg.w_ntp != 0.0 && lay.ell > 0) {
        const double scale =
            cfg.w_ntp / (static_cast<double>(bs) * static_cast<double>(lay.ell));
        for (std::int64_t t = 0; t < lay.ell; ++t) {
          const std::int64_t row = base + lay.prompt_len - 1 + t;
          const auto logits = model.sid_logits(y.row(row));
          const auto lsm = model.level_log_softmax(logits, t);
          ntp_total -= lsm[lay.target_codes[t]] / static_cast<double>(lay.ell);
          const std::int64_t off = t * k;
          const double* yrow = y.row(row);
          double* drow = d_y.row(row);
          for (std::int64_t j = 0; j < k; ++j) {
            const double dz =
                (std::exp(lsm[j]) - (j == lay.target_codes[t] ? 1.0 : 0.0)) *
                scale;
            model.head_b.g.at(0, off + j) += dz;
            for (std::int64_t i = 0; i < h; ++i) {
              model.head_w.g.at(i, off + j) += yrow[i] * dz;
              drow[i] += model.head_w.w.at(i, off + j) * dz;
            }
          }
        }
      }

      if (use_id && lay.query_pos >= 0) {
        const std::int64_t row = base + lay.query_pos;
        const auto hvec = model.query_state(y.row(row));
        const std::int64_t target = batch_samples[si]->target;

        std::vector<std::int64_t> negs;
        if (cfg.global_negatives) {
          std::set<std::int64_t> taken{target};
          while (static_cast<std::int64_t>(negs.size()) < cfg.negatives &&
                 static_cast<std::int64_t>(taken.size()) < catalog) {
            const auto id = static_cast<std::int64_t>(rng.uniform_int(catalog));
            if (taken.insert(id).second) negs.push_back(id);
          }
        } else {
          negs = sample_hard_negatives(buckets, sids, target, cfg.negatives, rng)
                     .ids;
        }
        for (const auto id : shared_pool)
          if (id != target &&
              std::find(negs.begin(), negs.end(), id) == negs.end())
            negs.push_back(id);

        FusionMlp::Cache target_cache;
        const auto temb = model.fused_item(target, &target_cache);
        Mat nemb(static_cast<std::int64_t>(negs.size()), fd);
        std::vector<FusionMlp::Cache> neg_caches(negs.size());
        for (std::size_t j = 0; j < negs.size(); ++j) {
          const auto f = model.fused_item(negs[j], &neg_caches[j]);
          std::copy(f.begin(), f.end(), nemb.row(j));
        }
        const auto info = id_infonce_loss(hvec, temb, nemb, cfg.tau);
        id_total += info.loss;
        const double scale = cfg.w_id / static_cast<double>(bs);

        const double* yrow = y.row(row);
        double* drow = d_y.row(row);
        for (std::int64_t j = 0; j < fd; ++j) {
          const double dh = info.d_h[j] * scale;
          model.query_b.g.at(0, j) += dh;
          for (std::int64_t i = 0; i < h; ++i) {
            model.query_w.g.at(i, j) += yrow[i] * dh;
            drow[i] += model.query_w.w.at(i, j) * dh;
          }
        }
        auto push_emb_grad = [&](std::int64_t item,
                                 const FusionMlp::Cache& fc,
                                 const double* de) {
          std::vector<double> scaled(fd);
          for (std::int64_t j = 0; j < fd; ++j) scaled[j] = de[j] * scale;
          if (model.cfg.free_item_emb) {
            double* fg = model.free_emb.g.row(item);
            for (std::int64_t j = 0; j < fd; ++j) fg[j] += scaled[j];
          } else {
            model.fusion.fuse_backward(fc, scaled, model.fusion_g);
          }
        };
        push_emb_grad(target, target_cache, info.d_emb.row(0));
        if (!cfg.freeze_negative_emb)
          for (std::size_t j = 0; j < negs.size(); ++j)
            push_emb_grad(negs[j], neg_caches[j], info.d_emb.row(j + 1));
      }
    }

    model.backward_train(batch, cache, d_y);
    opt.step(prefs);

    const double step_loss =
        cfg.w_ntp * ntp_total / static_cast<double>(bs) +
        cfg.w_id * id_total / static_cast<double>(bs);
    if (!std::isfinite(step_loss)) {
      restore_snapshot();
      res.aborted = true;
      res.abort_step = step;
      return res;
    }
    res.loss_curve.push_back(step_loss);
    if (cfg.snapshot_every > 0 && (step + 1) % cfg.snapshot_every == 0)
      take_snapshot();
  }
  return res;
}

}  // namespace sigma
