#include "sigma/grounding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "sigma/kernels.hpp"

namespace sigma {

const char* view_name(View v) {
  switch (v) {
    case View::Semantic: return "semantic";
    case View::Visual: return "visual";
    case View::Knowledge: return "knowledge";
    case View::Collaborative: return "collaborative";
  }
  return "semantic";
}

View parse_view(const std::string& s) {
  if (s == "semantic") return View::Semantic;
  if (s == "visual") return View::Visual;
  if (s == "knowledge") return View::Knowledge;
  if (s == "collaborative") return View::Collaborative;
  throw std::runtime_error("unknown view: " + s);
}

namespace {

// Draw a distinct pair from one factor bucket.
RelevancePair pair_from_bucket(const std::vector<std::int64_t>& bucket,
                               View view, Rng& rng) {
  const auto a = bucket[rng.uniform_int(bucket.size())];
  std::int64_t b = a;
  while (b == a) b = bucket[rng.uniform_int(bucket.size())];
  return {a, b, view};
}

}  // namespace

std::vector<RelevancePair> build_relevance_pairs(
    const World& world, const std::map<View, std::int64_t>& view_mix,
    std::uint64_t seed) {
  if (world.items.empty())
    throw std::invalid_argument("build_relevance_pairs: empty catalog");

  std::vector<std::vector<std::int64_t>> by_sub(world.cfg.n_subcats());
  std::vector<std::vector<std::int64_t>> by_style(world.cfg.n_style);
  std::vector<std::vector<std::int64_t>> by_season(world.cfg.n_season);
  std::vector<std::vector<std::int64_t>> by_holiday(world.cfg.n_holiday);
  for (const auto& it : world.items) {
    by_sub[it.sub].push_back(it.id);
    by_style[it.style].push_back(it.id);
    by_season[it.season].push_back(it.id);
    if (it.holiday >= 0) by_holiday[it.holiday].push_back(it.id);
  }
  auto usable = [](const std::vector<std::vector<std::int64_t>>& groups) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < groups.size(); ++i)
      if (groups[i].size() >= 2) idx.push_back(i);
    return idx;
  };
  const auto subs_ok = usable(by_sub);
  const auto styles_ok = usable(by_style);
  const auto seasons_ok = usable(by_season);
  const auto holidays_ok = usable(by_holiday);

  // Sessions: same-user runs with gaps of at most 30 minutes, used for the
  // collaborative view.
  std::vector<std::vector<std::int64_t>> sessions;
  {
    std::map<std::int64_t, std::pair<std::int64_t, std::vector<std::int64_t>>>
        open;  // user -> (last ts, items)
    for (const auto& e : world.events) {
      auto& slot = open[e.user];
      if (!slot.second.empty() && e.ts - slot.first > 30 * 60) {
        if (slot.second.size() >= 2) sessions.push_back(slot.second);
        slot.second.clear();
      }
      slot.first = e.ts;
      if (slot.second.empty() || slot.second.back() != e.item)
        slot.second.push_back(e.item);
    }
    for (auto& [user, slot] : open)
      if (slot.second.size() >= 2) sessions.push_back(slot.second);
  }

  Rng root(seed);
  std::vector<RelevancePair> out;
  for (const auto& [view, count] : view_mix) {
    Rng rng = root.split(static_cast<std::uint64_t>(view));
    for (std::int64_t n = 0; n < count; ++n) {
      switch (view) {
        case View::Semantic: {
          if (subs_ok.empty())
            throw std::runtime_error("no subcategory with >= 2 items for semantic pairs");
          const auto& b = by_sub[subs_ok[rng.uniform_int(subs_ok.size())]];
          out.push_back(pair_from_bucket(b, view, rng));
          break;
        }
        case View::Visual: {
          if (styles_ok.empty())
            throw std::runtime_error("no style with >= 2 items for visual pairs");
          const auto& b = by_style[styles_ok[rng.uniform_int(styles_ok.size())]];
          out.push_back(pair_from_bucket(b, view, rng));
          break;
        }
        case View::Knowledge: {
          const bool use_holiday = !holidays_ok.empty() && rng.next_double() < 0.5;
          if (use_holiday) {
            const auto& b =
                by_holiday[holidays_ok[rng.uniform_int(holidays_ok.size())]];
            out.push_back(pair_from_bucket(b, view, rng));
          } else {
            if (seasons_ok.empty())
              throw std::runtime_error("no season with >= 2 items for knowledge pairs");
            const auto& b =
                by_season[seasons_ok[rng.uniform_int(seasons_ok.size())]];
            out.push_back(pair_from_bucket(b, view, rng));
          }
          break;
        }
        case View::Collaborative: {
          if (sessions.empty())
            throw std::runtime_error("no multi-item sessions for collaborative pairs");
          for (int attempt = 0;; ++attempt) {
            const auto& s = sessions[rng.uniform_int(sessions.size())];
            const auto a = s[rng.uniform_int(s.size())];
            const auto b = s[rng.uniform_int(s.size())];
            if (a != b) {
              out.push_back({a, b, view});
              break;
            }
            if (attempt > 64) {
              // Session of one repeated item; pick another session.
              continue;
            }
          }
          break;
        }
      }
    }
  }
  return out;
}

namespace {

struct RowSoftmax {
  Mat p;       // row-normalized probabilities, diagonal zero
  Mat cosmat;  // cosine matrix
  Mat unit;    // unit rows
  std::vector<double> norms;
};

// Cosine matrix + per-row softmax over k != i at temperature tau.
RowSoftmax row_softmax(const Mat& emb, double tau) {
  const std::int64_t n = emb.rows, d = emb.cols;
  RowSoftmax rs;
  rs.unit = Mat(n, d);
  rs.norms.resize(n);
  for (std::int64_t i = 0; i < n; ++i) {
    const double nm = norm2(emb.row(i), d);
    if (nm == 0.0) throw std::invalid_argument("zero embedding in batch");
    rs.norms[i] = nm;
    for (std::int64_t j = 0; j < d; ++j) rs.unit.at(i, j) = emb.at(i, j) / nm;
  }
  rs.cosmat = Mat(n, n);
  matmul_nt(rs.cosmat.d.data(), rs.unit.d.data(), rs.unit.d.data(), n, d, n);
  rs.p = Mat(n, n);
  for (std::int64_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::int64_t j = 0; j < n; ++j)
      if (j != i) mx = std::max(mx, rs.cosmat.at(i, j) / tau);
    double sum = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double e = std::exp(rs.cosmat.at(i, j) / tau - mx);
      rs.p.at(i, j) = e;
      sum += e;
    }
    for (std::int64_t j = 0; j < n; ++j)
      if (j != i) rs.p.at(i, j) /= sum;
  }
  return rs;
}

// Shared backward: G holds d loss / d score(i,j) with score = cos/tau.
Mat scores_backward(const RowSoftmax& rs, const Mat& g_scores, double tau) {
  const std::int64_t n = rs.unit.rows, d = rs.unit.cols;
  // Gradient w.r.t. the cosine matrix; cos(i,j) feeds both score(i,j) and
  // score(j,i).
  Mat gc(n, n);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      gc.at(i, j) = (g_scores.at(i, j) + g_scores.at(j, i)) / tau;
  Mat a(n, d);
  matmul(a.d.data(), gc.d.data(), rs.unit.d.data(), n, n, d);
  Mat grad(n, d);
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::int64_t j = 0; j < n; ++j) s += gc.at(i, j) * rs.cosmat.at(i, j);
    for (std::int64_t k = 0; k < d; ++k)
      grad.at(i, k) = (a.at(i, k) - s * rs.unit.at(i, k)) / rs.norms[i];
  }
  return grad;
}

}  // namespace

double pair_probability(const Mat& embeddings, std::int64_t i, std::int64_t j,
                        double tau) {
  if (tau <= 0.0) throw std::invalid_argument("pair_probability: tau must be > 0");
  if (i == j)
    throw std::invalid_argument("pair_probability: self-probability undefined");
  if (i < 0 || j < 0 || i >= embeddings.rows || j >= embeddings.rows)
    throw std::invalid_argument("pair_probability: index out of range");
  const RowSoftmax rs = row_softmax(embeddings, tau);
  return rs.p.at(i, j);
}

LossGrad contrastive_loss(const Mat& embeddings, double tau) {
  const std::int64_t n = embeddings.rows;
  if (n == 0 || n % 2 != 0)
    throw std::invalid_argument("contrastive_loss: need 2B embeddings, B >= 1");
  if (tau <= 0.0) throw std::invalid_argument("contrastive_loss: tau must be > 0");
  const std::int64_t b = n / 2;
  const RowSoftmax rs = row_softmax(embeddings, tau);

  LossGrad out;
  Mat g_scores(n, n);
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t partner = (i + b) % n;
    out.loss -= std::log(rs.p.at(i, partner));
    for (std::int64_t j = 0; j < n; ++j) {
      if (j == i) continue;
      g_scores.at(i, j) =
          (rs.p.at(i, j) - (j == partner ? 1.0 : 0.0)) / static_cast<double>(n);
    }
  }
  out.loss /= static_cast<double>(n);
  out.grad = scores_backward(rs, g_scores, tau);
  return out;
}

LossGrad kd_loss(const Mat& student, const Mat& teacher, double tau) {
  if (teacher.rows != student.rows)
    throw std::invalid_argument("kd_loss: teacher embeddings missing or mismatched");
  if (tau <= 0.0) throw std::invalid_argument("kd_loss: tau must be > 0");
  const std::int64_t n = student.rows;
  if (n < 2) throw std::invalid_argument("kd_loss: need at least 2 rows");
  const RowSoftmax ss = row_softmax(student, tau);
  const RowSoftmax ts = row_softmax(teacher, tau);

  LossGrad out;
  Mat g_scores(n, n);
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double t = ts.p.at(i, j);
      const double s = ss.p.at(i, j);
      if (t > 0.0) out.loss += t * (std::log(t) - std::log(s));
      g_scores.at(i, j) = (s - t) / static_cast<double>(n);
    }
  }
  out.loss /= static_cast<double>(n);
  out.grad = scores_backward(ss, g_scores, tau);
  return out;
}

namespace {

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
  const double phi = std::exp(-0.5 * x * x) * 0.3989422804014326779;
  return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * phi;
}

}  // namespace

void ItemEncoder::init(Rng& rng, std::int64_t feat_dim, std::int64_t hidden,
                       std::int64_t out_dim) {
  w1 = Mat(feat_dim, hidden);
  b1 = Mat(1, hidden);
  w2 = Mat(hidden, out_dim);
  b2 = Mat(1, out_dim);
  w1.randn(rng, 1.0 / std::sqrt(static_cast<double>(feat_dim)));
  w2.randn(rng, 1.0 / std::sqrt(static_cast<double>(hidden)));
}

Mat ItemEncoder::forward(const Mat& x) const {
  Mat pre;
  return forward_cached(x, pre);
}

Mat ItemEncoder::forward_cached(const Mat& x, Mat& hidden_pre) const {
  if (x.cols != w1.rows)
    throw std::invalid_argument("ItemEncoder: feature dim mismatch");
  const std::int64_t n = x.rows, h = w1.cols, o = w2.cols;
  hidden_pre = Mat(n, h);
  matmul(hidden_pre.d.data(), x.d.data(), w1.d.data(), n, x.cols, h);
  Mat act(n, h);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < h; ++j) {
      hidden_pre.at(i, j) += b1.at(0, j);
      act.at(i, j) = gelu(hidden_pre.at(i, j));
    }
  Mat y(n, o);
  matmul(y.d.data(), act.d.data(), w2.d.data(), n, h, o);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < o; ++j) y.at(i, j) += b2.at(0, j);
  return y;
}

void ItemEncoder::backward(const Mat& x, const Mat& hidden_pre,
                           const Mat& d_out, ItemEncoder& grads) const {
  const std::int64_t n = x.rows, h = w1.cols;
  Mat act(n, h);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < h; ++j) act.at(i, j) = gelu(hidden_pre.at(i, j));

  matmul_tn(grads.w2.d.data(), act.d.data(), d_out.d.data(), h, n, d_out.cols,
            true);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < d_out.cols; ++j)
      grads.b2.at(0, j) += d_out.at(i, j);

  Mat d_act(n, h);
  matmul_nt(d_act.d.data(), d_out.d.data(), w2.d.data(), n, d_out.cols, h);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < h; ++j)
      d_act.at(i, j) *= gelu_grad(hidden_pre.at(i, j));

  matmul_tn(grads.w1.d.data(), x.d.data(), d_act.d.data(), x.cols, n, h, true);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < h; ++j) grads.b1.at(0, j) += d_act.at(i, j);
}

std::vector<ParamRef> ItemEncoder::params(ItemEncoder& grads) {
  auto ref = [](Mat& w, Mat& g, const char* name) {
    return ParamRef{w.d.data(), g.d.data(), w.size(), name};
  };
  return {ref(w1, grads.w1, "enc.w1"), ref(b1, grads.b1, "enc.b1"),
          ref(w2, grads.w2, "enc.w2"), ref(b2, grads.b2, "enc.b2")};
}

GroundingResult train_grounding(const World& world,
                                const std::vector<RelevancePair>& pairs,
                                const Mat& teacher_embeddings,
                                const GroundingConfig& cfg) {
  if (pairs.empty())
    throw std::invalid_argument("train_grounding: no relevance pairs");
  if (teacher_embeddings.rows != static_cast<std::int64_t>(world.items.size()))
    throw std::invalid_argument("train_grounding: teacher embedding count mismatch");

  Rng rng(cfg.seed);
  GroundingResult res;
  res.encoder.init(rng, world.features.cols, cfg.hidden, cfg.out_dim);
  ItemEncoder grads = res.encoder;  // same shapes
  auto prefs = res.encoder.params(grads);

  AdamW opt;
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;
  opt.warmup_steps = cfg.warmup_steps;

  const std::int64_t b = std::min<std::int64_t>(
      cfg.batch, static_cast<std::int64_t>(pairs.size()));
  Mat xb(2 * b, world.features.cols);
  Mat tb(2 * b, teacher_embeddings.cols);

  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    for (std::int64_t i = 0; i < b; ++i) {
      const auto& p = pairs[rng.uniform_int(pairs.size())];
      std::copy_n(world.features.row(p.anchor), world.features.cols, xb.row(i));
      std::copy_n(world.features.row(p.positive), world.features.cols,
                  xb.row(i + b));
      std::copy_n(teacher_embeddings.row(p.anchor), teacher_embeddings.cols,
                  tb.row(i));
      std::copy_n(teacher_embeddings.row(p.positive), teacher_embeddings.cols,
                  tb.row(i + b));
    }
    Mat pre;
    const Mat emb = res.encoder.forward_cached(xb, pre);

    double cl = 0.0, kd = 0.0;
    Mat d_emb(emb.rows, emb.cols);
    if (cfg.w_cl != 0.0) {
      LossGrad lg = contrastive_loss(emb, cfg.tau);
      cl = lg.loss;
      for (std::int64_t i = 0; i < d_emb.size(); ++i)
        d_emb.d[i] += cfg.w_cl * lg.grad.d[i];
    }
    if (cfg.w_kd != 0.0) {
      LossGrad lg = kd_loss(emb, tb, cfg.tau);
      kd = lg.loss;
      for (std::int64_t i = 0; i < d_emb.size(); ++i)
        d_emb.d[i] += cfg.w_kd * lg.grad.d[i];
    }
    const double total = cfg.w_cl * cl + cfg.w_kd * kd;
    if (!std::isfinite(total)) {
      std::ostringstream os;
      os << "train_grounding diverged at step " << step << " (loss=" << total
         << ", cl=" << cl << ", kd=" << kd << ")";
      throw std::runtime_error(os.str());
    }
    res.cl_curve.push_back(cl);
    res.kd_curve.push_back(kd);

    opt.zero_grad(prefs);
    res.encoder.backward(xb, pre, d_emb, grads);
    opt.step(prefs);
  }

  res.embeddings = res.encoder.forward(world.features);
  return res;
}

void save_pairs(const std::filesystem::path& path,
                const std::vector<RelevancePair>& pairs) {
  std::ostringstream os;
  for (const auto& p : pairs)
    os << p.anchor << '\t' << p.positive << '\t' << view_name(p.view) << '\n';
  write_text(path, os.str());
}

std::vector<RelevancePair> load_pairs(const std::filesystem::path& path) {
  std::vector<RelevancePair> out;
  for (const auto& line : read_lines(path)) {
    if (line.empty()) continue;
    const auto f = split(line, '\t');
    out.push_back({std::stoll(f[0]), std::stoll(f[1]), parse_view(f[2])});
  }
  return out;
}

}  // namespace sigma
