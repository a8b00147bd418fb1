#include "sigma/generator.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "sigma/kernels.hpp"

namespace sigma {

PromptState process_prompt(const Model& model, const KvCache* base,
                           const std::vector<TokenUnit>& extra_units) {
  PromptState ps;
  ps.cache.reset(model.cfg.blocks);
  if (base) {
    // Work on a private copy so beams never mutate the caller's cache.
    ps.cache = *base;
  }
  if (extra_units.empty())
    throw std::invalid_argument("process_prompt: empty prompt");
  KvCache ext;
  ext.reset(model.cfg.blocks);
  const Mat y = model.forward_infer(base ? &ps.cache : nullptr, ext,
                                    extra_units);
  // merge ext into the prompt cache
  for (std::int64_t b = 0; b < model.cfg.blocks; ++b) {
    ps.cache.k[b].insert(ps.cache.k[b].end(), ext.k[b].begin(), ext.k[b].end());
    ps.cache.v[b].insert(ps.cache.v[b].end(), ext.v[b].begin(), ext.v[b].end());
  }
  ps.cache.len += ext.len;
  ps.last_y.assign(y.row(y.rows - 1), y.row(y.rows - 1) + y.cols);
  return ps;
}

namespace {

struct WorkBeam {
  SemanticId prefix;
  double phi;
  KvCache ext;  // keys/values of the prefix tokens except the newest
};

bool lex_less(const SemanticId& a, const SemanticId& b) {
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

}  // namespace

std::vector<BeamCandidate> beam_search(const Model& model,
                                       const PromptState& prompt,
                                       std::int64_t k, std::int64_t ell,
                                       std::int64_t exact_cap, bool* flagged) {
  if (k < 1) throw std::invalid_argument("beam_search: K must be >= 1");
  if (ell < 1 || ell > model.vocab.sid_levels)
    throw std::invalid_argument("beam_search: bad prefix length");
  const std::int64_t kv = model.vocab.sid_k;
  if (flagged) *flagged = false;

  // Level 0 expands straight off the prompt's last hidden state.
  std::vector<WorkBeam> pool;
  {
    const auto logits = model.sid_logits(prompt.last_y.data());
    const auto lsm = model.level_log_softmax(logits, 0);
    pool.resize(kv);
    for (std::int32_t c = 0; c < kv; ++c) {
      pool[c].prefix = {c};
      pool[c].phi = lsm[c];
      pool[c].ext.reset(model.cfg.blocks);
    }
  }

  const std::int64_t inter_width =
      std::max<std::int64_t>(k, exact_cap / std::max<std::int64_t>(1, kv));
  for (std::int64_t level = 1; level < ell; ++level) {
    // prune the pool to the intermediate width
    std::sort(pool.begin(), pool.end(), [](const WorkBeam& a, const WorkBeam& b) {
      if (a.phi != b.phi) return a.phi > b.phi;
      return lex_less(a.prefix, b.prefix);
    });
    if (static_cast<std::int64_t>(pool.size()) > inter_width)
      pool.resize(inter_width);

    std::vector<std::vector<double>> next_lsm(pool.size());
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(pool.size()); ++i) {
      auto& wb = pool[i];
      const auto token =
          model.vocab.sid_token(level - 1, wb.prefix.back());
      const Mat y =
          model.forward_infer(&prompt.cache, wb.ext, {TokenUnit::tok(token)});
      next_lsm[i] = model.level_log_softmax(
          model.sid_logits(y.row(0)), level);
    }
    std::vector<WorkBeam> next;
    next.reserve(pool.size() * kv);
    for (std::size_t i = 0; i < pool.size(); ++i) {
      for (std::int32_t c = 0; c < kv; ++c) {
        WorkBeam nb;
        nb.prefix = pool[i].prefix;
        nb.prefix.push_back(c);
        nb.phi = pool[i].phi + next_lsm[i][c];
        nb.ext = pool[i].ext;
        next.push_back(std::move(nb));
      }
    }
    pool = std::move(next);
  }

  std::sort(pool.begin(), pool.end(), [](const WorkBeam& a, const WorkBeam& b) {
    if (a.phi != b.phi) return a.phi > b.phi;
    return lex_less(a.prefix, b.prefix);
  });
  if (static_cast<std::int64_t>(pool.size()) < k && flagged) *flagged = true;
  if (static_cast<std::int64_t>(pool.size()) > k) pool.resize(k);

  std::vector<BeamCandidate> out;
  out.reserve(pool.size());
  for (auto& wb : pool) out.push_back({std::move(wb.prefix), wb.phi, {}});
  return out;
}

std::vector<double> prefix_hidden_state(const Model& model,
                                        const PromptState& prompt,
                                        const SemanticId& prefix) {
  std::vector<TokenUnit> units;
  for (std::size_t t = 0; t < prefix.size(); ++t)
    units.push_back(TokenUnit::tok(
        model.vocab.sid_token(static_cast<std::int64_t>(t), prefix[t])));
  units.push_back(TokenUnit::tok(Vocabulary::kQuery));
  KvCache ext;
  ext.reset(model.cfg.blocks);
  const Mat y = model.forward_infer(&prompt.cache, ext, units);
  return model.query_state(y.row(y.rows - 1));
}

void fill_hidden_states(const Model& model, const PromptState& prompt,
                        std::vector<BeamCandidate>& beams) {
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(beams.size()); ++i)
    beams[i].h = prefix_hidden_state(model, prompt, beams[i].prefix);
}

std::vector<double> apf_id_distribution(const std::vector<double>& cosines,
                                        const std::vector<double>& phis,
                                        double tau, bool sigma_floor,
                                        double* sigma_out) {
  if (cosines.empty())
    throw std::invalid_argument("apf_id_distribution: empty bucket");
  if (phis.empty()) throw std::invalid_argument("apf_id_distribution: no beams");
  if (tau <= 0.0) throw std::invalid_argument("apf_id_distribution: tau must be > 0");
  double mean = 0.0;
  for (const double p : phis) mean += p;
  mean /= static_cast<double>(phis.size());
  double var = 0.0;
  for (const double p : phis) var += (p - mean) * (p - mean);
  var /= static_cast<double>(phis.size());  // population variance
  double sigma = std::sqrt(var);
  if (sigma_floor) sigma = std::max(sigma, 1e-6);
  if (sigma_out) *sigma_out = sigma;

  std::vector<double> scores(cosines.size());
  for (std::size_t i = 0; i < cosines.size(); ++i)
    scores[i] = cosines[i] * sigma;
  return softmax(scores, tau);
}

GenerationResult generate(const Model& model, const PrefixIndex& index,
                          const KvCache* base,
                          const std::vector<TokenUnit>& prompt_units,
                          const GenOptions& opt) {
  if (index.ell() != opt.ell)
    throw std::invalid_argument("generate: index prefix length mismatch");
  if (opt.top_n > opt.beam_width * opt.per_beam)
    throw std::invalid_argument("generate: N exceeds K*M");
  const PromptState prompt = process_prompt(model, base, prompt_units);

  GenerationResult res;
  auto beams = beam_search(model, prompt, opt.beam_width, opt.ell,
                           opt.beam_exact_cap, &res.beams_flagged);
  fill_hidden_states(model, prompt, beams);

  std::vector<double> phis;
  for (const auto& b : beams) phis.push_back(b.phi);
  double beam_mass = 0.0;
  for (const double p : phis) beam_mass += std::exp(p);

  const std::size_t use_beams = opt.top1_prefix_only ? 1 : beams.size();
  res.per_beam_counts.assign(beams.size(), 0);
  for (std::size_t bi = 0; bi < use_beams; ++bi) {
    const auto& beam = beams[bi];
    const auto* bucket = index.find(beam.prefix);
    if (!bucket || bucket->ids.empty()) continue;

    double sigma = 0.0;
    const auto cosv = index.bucket_cosines(*bucket, beam.h);
    std::vector<double> pid;
    if (opt.top1_prefix_only) {
      // Plain within-bucket softmax; the beam-score scaling is ablated.
      pid = softmax(cosv, opt.tau);
      sigma = 0.0;
    } else {
      pid = apf_id_distribution(cosv, phis, opt.tau, opt.sigma_floor, &sigma);
    }
    res.sigma = opt.top1_prefix_only ? res.sigma : sigma;

    double weight = std::exp(beam.phi);
    if (opt.renorm_beams && beam_mass > 0.0) weight /= beam_mass;

    const auto hits =
        index.query(beam.prefix, beam.h, opt.per_beam, opt.ann_mode);
    res.per_beam_counts[bi] = static_cast<std::int64_t>(hits.size());
    // map item id -> bucket position for the APF probability
    for (const auto& hit : hits) {
      const auto pos = std::lower_bound(bucket->ids.begin(), bucket->ids.end(),
                                        hit.id) -
                       bucket->ids.begin();
      res.items.push_back({hit.id, weight * pid[pos], beam.prefix, beam.phi});
    }
  }
  for (const auto& item : res.items) res.total_scored_mass += item.prob;

  if (res.items.empty()) {
    res.empty = true;
    return res;
  }
  std::sort(res.items.begin(), res.items.end(),
            [](const ScoredItem& a, const ScoredItem& b) {
              if (a.prob != b.prob) return a.prob > b.prob;
              return a.id < b.id;
            });
  if (static_cast<std::int64_t>(res.items.size()) > opt.top_n)
    res.items.resize(opt.top_n);
  return res;
}

std::string GenerationResult::to_tsv(const GenOptions& opt) const {
  std::ostringstream os;
  std::int64_t rank = 1;
  for (const auto& item : items) {
    os << rank++ << '\t' << item.id << '\t' << fmt_double(item.prob) << '\t';
    for (std::size_t t = 0; t < item.prefix.size(); ++t) {
      if (t) os << ',';
      os << item.prefix[t];
    }
    os << '\t' << fmt_double(item.phi) << '\n';
  }
  os << "# sigma=" << fmt_double(sigma) << " K=" << opt.beam_width
     << " M=" << opt.per_beam << " N=" << opt.top_n
     << " tau=" << fmt_double(opt.tau) << '\n';
  return os.str();
}

}  // namespace sigma
