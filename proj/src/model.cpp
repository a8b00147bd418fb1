#include "sigma/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "sigma/config.hpp"
#include "sigma/kernels.hpp"

namespace sigma {

namespace {

constexpr double kLnEps = 1e-5;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
double gelu_grad(double x) {
  const double phi = std::exp(-0.5 * x * x) * 0.3989422804014326779;
  return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * phi;
}

// Normalizes rows of x into xhat, stores 1/std per row, then writes
// gain * xhat + bias into y (y may alias xhat storage if passed separately).
void ln_forward(const Mat& x, const Mat& g, const Mat& b, Mat& xhat,
                std::vector<double>& rstd, Mat& y) {
  const std::int64_t n = x.rows, h = x.cols;
  xhat = Mat(n, h);
  y = Mat(n, h);
  rstd.resize(n);
#pragma omp parallel for schedule(static) if (n > 8)
  for (std::int64_t i = 0; i < n; ++i) {
    const double* row = x.row(i);
    double mu = 0.0;
    for (std::int64_t j = 0; j < h; ++j) mu += row[j];
    mu /= static_cast<double>(h);
    double var = 0.0;
    for (std::int64_t j = 0; j < h; ++j) {
      const double c = row[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(h);
    const double rs = 1.0 / std::sqrt(var + kLnEps);
    rstd[i] = rs;
    for (std::int64_t j = 0; j < h; ++j) {
      const double xh = (row[j] - mu) * rs;
      xhat.at(i, j) = xh;
      y.at(i, j) = g.at(0, j) * xh + b.at(0, j);
    }
  }
}

// dx += backward of layernorm given dy; accumulates gain/bias grads.
void ln_backward(const Mat& xhat, const std::vector<double>& rstd,
                 const Mat& g, const Mat& dy, Mat& dx, Mat& dg, Mat& db) {
  const std::int64_t n = xhat.rows, h = xhat.cols;
  for (std::int64_t i = 0; i < n; ++i) {
    const double* xh = xhat.row(i);
    const double* dyr = dy.row(i);
    double m1 = 0.0, m2 = 0.0;
    for (std::int64_t j = 0; j < h; ++j) {
      const double dxh = dyr[j] * g.at(0, j);
      m1 += dxh;
      m2 += dxh * xh[j];
    }
    m1 /= static_cast<double>(h);
    m2 /= static_cast<double>(h);
    for (std::int64_t j = 0; j < h; ++j) {
      const double dxh = dyr[j] * g.at(0, j);
      dx.at(i, j) += rstd[i] * (dxh - m1 - xh[j] * m2);
      dg.at(0, j) += dyr[j] * xh[j];
      db.at(0, j) += dyr[j];
    }
  }
}

void add_bias_rows(Mat& x, const Mat& b) {
  for (std::int64_t i = 0; i < x.rows; ++i) {
    double* row = x.row(i);
    for (std::int64_t j = 0; j < x.cols; ++j) row[j] += b.at(0, j);
  }
}

}  // namespace

void Model::init(const ModelConfig& mc, const Vocabulary& v,
                 const ItemEmbeddingTable& table, Rng& rng) {
  cfg = mc;
  vocab = v;
  items = table;
  if (cfg.hidden % cfg.heads != 0)
    throw std::invalid_argument("hidden must be divisible by heads");

  auto mk = [&](P& p, std::int64_t r, std::int64_t c, double scale,
                const std::string& name) {
    p.w = Mat(r, c);
    p.g = Mat(r, c);
    p.name = name;
    if (scale > 0.0) p.w.randn(rng, scale);
  };
  const double wi = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
  mk(tok_emb, vocab.size, cfg.hidden, 0.02, "tok_emb");
  mk(pos_emb, cfg.max_seq, cfg.hidden, 0.02, "pos_emb");
  mk(type_emb, kNumRoles, cfg.hidden, 0.02, "type_emb");
  blocks.resize(cfg.blocks);
  for (std::int64_t b = 0; b < cfg.blocks; ++b) {
    auto& blk = blocks[b];
    const std::string p = "blk" + std::to_string(b) + ".";
    mk(blk.ln1_g, 1, cfg.hidden, 0.0, p + "ln1_g");
    blk.ln1_g.w.fill(1.0);
    mk(blk.ln1_b, 1, cfg.hidden, 0.0, p + "ln1_b");
    mk(blk.wqkv, cfg.hidden, 3 * cfg.hidden, wi, p + "wqkv");
    mk(blk.bqkv, 1, 3 * cfg.hidden, 0.0, p + "bqkv");
    mk(blk.wo, cfg.hidden, cfg.hidden, wi, p + "wo");
    mk(blk.bo, 1, cfg.hidden, 0.0, p + "bo");
    mk(blk.ln2_g, 1, cfg.hidden, 0.0, p + "ln2_g");
    blk.ln2_g.w.fill(1.0);
    mk(blk.ln2_b, 1, cfg.hidden, 0.0, p + "ln2_b");
    mk(blk.w1, cfg.hidden, cfg.ffn_mult * cfg.hidden, wi, p + "w1");
    mk(blk.b1, 1, cfg.ffn_mult * cfg.hidden, 0.0, p + "b1");
    mk(blk.w2, cfg.ffn_mult * cfg.hidden, cfg.hidden,
       1.0 / std::sqrt(static_cast<double>(cfg.ffn_mult * cfg.hidden)),
       p + "w2");
    mk(blk.b2, 1, cfg.hidden, 0.0, p + "b2");
  }
  mk(lnf_g, 1, cfg.hidden, 0.0, "lnf_g");
  lnf_g.w.fill(1.0);
  mk(lnf_b, 1, cfg.hidden, 0.0, "lnf_b");
  mk(head_w, cfg.hidden, vocab.sid_levels * vocab.sid_k, wi, "head_w");
  mk(head_b, 1, vocab.sid_levels * vocab.sid_k, 0.0, "head_b");
  mk(query_w, cfg.hidden, cfg.fused_dim, wi, "query_w");
  mk(query_b, 1, cfg.fused_dim, 0.0, "query_b");

  Rng frng = rng.split(77);
  fusion.init(frng, cfg.emb_dim, cfg.fused_dim, cfg.hidden);
  fusion_g = fusion;
  for (Mat* m : {&fusion_g.w1, &fusion_g.b1, &fusion_g.w2, &fusion_g.b2,
                 &fusion_g.up_w, &fusion_g.up_b, &fusion_g.img_missing})
    m->fill(0.0);

  if (cfg.free_item_emb)
    mk(free_emb, items.id_emb.rows, cfg.fused_dim, 0.1, "free_emb");
}

std::vector<ParamRef> Model::params() {
  std::vector<ParamRef> out;
  auto add = [&out](P& p) {
    out.push_back({p.w.d.data(), p.g.d.data(), p.w.size(), p.name});
  };
  add(tok_emb);
  add(pos_emb);
  add(type_emb);
  for (auto& b : blocks) {
    add(b.ln1_g);
    add(b.ln1_b);
    add(b.wqkv);
    add(b.bqkv);
    add(b.wo);
    add(b.bo);
    add(b.ln2_g);
    add(b.ln2_b);
    add(b.w1);
    add(b.b1);
    add(b.w2);
    add(b.b2);
  }
  add(lnf_g);
  add(lnf_b);
  add(head_w);
  add(head_b);
  add(query_w);
  add(query_b);
  auto addf = [&out](Mat& w, Mat& g, const char* name) {
    out.push_back({w.d.data(), g.d.data(), w.size(), name});
  };
  addf(fusion.w1, fusion_g.w1, "fusion.w1");
  addf(fusion.b1, fusion_g.b1, "fusion.b1");
  addf(fusion.w2, fusion_g.w2, "fusion.w2");
  addf(fusion.b2, fusion_g.b2, "fusion.b2");
  addf(fusion.up_w, fusion_g.up_w, "fusion.up_w");
  addf(fusion.up_b, fusion_g.up_b, "fusion.up_b");
  addf(fusion.img_missing, fusion_g.img_missing, "fusion.img_missing");
  if (cfg.free_item_emb) add(free_emb);
  return out;
}

void Model::zero_grad() {
  for (auto& p : params()) std::fill(p.g, p.g + p.n, 0.0);
}

std::vector<double> Model::fused_item(std::int64_t item_id,
                                      FusionMlp::Cache* cache) const {
  if (cfg.free_item_emb) {
    if (item_id < 0 || item_id >= free_emb.w.rows)
      throw std::invalid_argument("fused_item: unknown item id");
    return {free_emb.w.row(item_id), free_emb.w.row(item_id) + cfg.fused_dim};
  }
  return fusion.fuse(items, item_id, cache);
}

Mat Model::all_fused_items() const {
  const std::int64_t n = n_items();
  Mat out(n, cfg.fused_dim);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    const auto f = fused_item(i);
    std::copy(f.begin(), f.end(), out.row(i));
  }
  return out;
}

void Model::embed_units(const std::vector<TokenUnit>& units,
                        std::int64_t start_pos, Mat& x,
                        std::vector<FusionMlp::Cache>* caches) const {
  const auto n = static_cast<std::int64_t>(units.size());
  const std::int64_t h = cfg.hidden;
  if (start_pos + n > cfg.max_seq)
    throw std::invalid_argument("sequence exceeds max length");
  x = Mat(n, h);
  for (std::int64_t i = 0; i < n; ++i) {
    double* row = x.row(i);
    std::int32_t role;
    if (units[i].is_item()) {
      FusionMlp::Cache c;
      const auto fused = fused_item(units[i].item, &c);
      const auto up = fusion.up_project(fused);
      std::copy(up.begin(), up.end(), row);
      if (caches) caches->push_back(std::move(c));
      role = static_cast<std::int32_t>(TokenRole::Item);
    } else {
      const auto t = units[i].token;
      if (t < 0 || t >= vocab.size)
        throw std::invalid_argument("embed: token out of range");
      std::copy_n(tok_emb.w.row(t), h, row);
      role = static_cast<std::int32_t>(vocab.role_of(t));
    }
    const double* pos = pos_emb.w.row(start_pos + i);
    const double* typ = type_emb.w.row(role);
    for (std::int64_t j = 0; j < h; ++j) row[j] += pos[j] + typ[j];
  }
}

Mat Model::forward_infer(const KvCache* base, KvCache& ext,
                         const std::vector<TokenUnit>& units) const {
  const std::int64_t h = cfg.hidden, nh = cfg.heads, hd = h / nh;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const std::int64_t base_len = base ? base->len : 0;
  if (ext.k.empty()) ext.reset(cfg.blocks);
  const std::int64_t prev = ext.len;
  const auto n = static_cast<std::int64_t>(units.size());

  Mat x;
  embed_units(units, base_len + prev, x, nullptr);

  Mat xhat, a, qkv(n, 3 * h), ctx(n, h), o(n, h), f1, act, f2;
  std::vector<double> rstd;
  std::vector<double> probs;
  for (std::int64_t b = 0; b < cfg.blocks; ++b) {
    const auto& blk = blocks[b];
    ln_forward(x, blk.ln1_g.w, blk.ln1_b.w, xhat, rstd, a);
    matmul(qkv.d.data(), a.d.data(), blk.wqkv.w.d.data(), n, h, 3 * h);
    add_bias_rows(qkv, blk.bqkv.w);
    auto& kc = ext.k[b];
    auto& vc = ext.v[b];
    kc.resize((prev + n) * h);
    vc.resize((prev + n) * h);
    for (std::int64_t i = 0; i < n; ++i) {
      std::copy_n(qkv.row(i) + h, h, kc.begin() + (prev + i) * h);
      std::copy_n(qkv.row(i) + 2 * h, h, vc.begin() + (prev + i) * h);
    }
    const double* base_k = base_len ? base->k[b].data() : nullptr;
    const double* base_v = base_len ? base->v[b].data() : nullptr;
    ctx.fill(0.0);
    for (std::int64_t i = 0; i < n; ++i) {
      const std::int64_t upto = base_len + prev + i;  // inclusive
      probs.resize(upto + 1);
      for (std::int64_t hh = 0; hh < nh; ++hh) {
        const double* q = qkv.row(i) + hh * hd;
        double mx = -1e300;
        for (std::int64_t u = 0; u <= upto; ++u) {
          const double* krow = u < base_len ? base_k + u * h
                                            : kc.data() + (u - base_len) * h;
          double s = 0.0;
          const double* kk = krow + hh * hd;
          for (std::int64_t j = 0; j < hd; ++j) s += q[j] * kk[j];
          probs[u] = s * scale;
          mx = std::max(mx, probs[u]);
        }
        double sum = 0.0;
        for (std::int64_t u = 0; u <= upto; ++u) {
          probs[u] = std::exp(probs[u] - mx);
          sum += probs[u];
        }
        double* crow = ctx.row(i) + hh * hd;
        for (std::int64_t u = 0; u <= upto; ++u) {
          const double p = probs[u] / sum;
          const double* vrow = u < base_len ? base_v + u * h
                                            : vc.data() + (u - base_len) * h;
          const double* vv = vrow + hh * hd;
          for (std::int64_t j = 0; j < hd; ++j) crow[j] += p * vv[j];
        }
      }
    }
    matmul(o.d.data(), ctx.d.data(), blk.wo.w.d.data(), n, h, h);
    add_bias_rows(o, blk.bo.w);
    for (std::int64_t i = 0; i < n * h; ++i) x.d[i] += o.d[i];

    ln_forward(x, blk.ln2_g.w, blk.ln2_b.w, xhat, rstd, a);
    f1 = Mat(n, cfg.ffn_mult * h);
    matmul(f1.d.data(), a.d.data(), blk.w1.w.d.data(), n, h, cfg.ffn_mult * h);
    add_bias_rows(f1, blk.b1.w);
    act = Mat(n, cfg.ffn_mult * h);
    for (std::int64_t i = 0; i < f1.size(); ++i) act.d[i] = gelu(f1.d[i]);
    f2 = Mat(n, h);
    matmul(f2.d.data(), act.d.data(), blk.w2.w.d.data(), n, cfg.ffn_mult * h, h);
    add_bias_rows(f2, blk.b2.w);
    for (std::int64_t i = 0; i < n * h; ++i) x.d[i] += f2.d[i];
  }
  ext.len = prev + n;

  Mat y;
  ln_forward(x, lnf_g.w, lnf_b.w, xhat, rstd, y);
  return y;
}

Mat Model::forward(const std::vector<TokenUnit>& units) const {
  KvCache tmp;
  tmp.reset(cfg.blocks);
  return forward_infer(nullptr, tmp, units);
}

std::vector<double> Model::sid_logits(const double* y_row) const {
  const std::int64_t lk = vocab.sid_levels * vocab.sid_k;
  std::vector<double> z(lk);
  for (std::int64_t j = 0; j < lk; ++j) {
    double s = head_b.w.at(0, j);
    for (std::int64_t i = 0; i < cfg.hidden; ++i)
      s += y_row[i] * head_w.w.at(i, j);
    z[j] = s;
  }
  return z;
}

std::vector<double> Model::level_log_softmax(const std::vector<double>& logits,
                                             std::int64_t level) const {
  if (level < 0 || level >= vocab.sid_levels)
    throw std::invalid_argument("level out of range");
  const std::int64_t k = vocab.sid_k;
  const double* z = logits.data() + level * k;
  const double lse = log_sum_exp(z, k);
  std::vector<double> out(k);
  for (std::int64_t j = 0; j < k; ++j) out[j] = z[j] - lse;
  return out;
}

std::vector<double> Model::query_state(const double* y_row) const {
  std::vector<double> out(cfg.fused_dim);
  for (std::int64_t j = 0; j < cfg.fused_dim; ++j) {
    double s = query_b.w.at(0, j);
    for (std::int64_t i = 0; i < cfg.hidden; ++i)
      s += y_row[i] * query_w.w.at(i, j);
    out[j] = s;
  }
  return out;
}

Mat Model::forward_train(const PackedBatch& batch, TrainCache& cache) const {
  const std::int64_t h = cfg.hidden, nh = cfg.heads, hd = h / nh;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const std::int64_t total = batch.total();
  const std::int64_t ns = batch.samples();

  cache.fusion_caches.clear();
  // Embed per sample so positions restart at zero.
  cache.x0 = Mat(total, h);
  for (std::int64_t s = 0; s < ns; ++s) {
    const std::int64_t b0 = batch.offsets[s];
    std::vector<TokenUnit> units(batch.units.begin() + b0,
                                 batch.units.begin() + batch.offsets[s + 1]);
    Mat xs;
    embed_units(units, 0, xs, &cache.fusion_caches);
    std::copy(xs.d.begin(), xs.d.end(), cache.x0.d.begin() + b0 * h);
  }

  cache.blk.assign(cfg.blocks, {});
  Mat x = cache.x0;
  for (std::int64_t b = 0; b < cfg.blocks; ++b) {
    const auto& blk = blocks[b];
    auto& c = cache.blk[b];
    Mat a;
    ln_forward(x, blk.ln1_g.w, blk.ln1_b.w, c.a1, c.rs1, a);
    c.qkv = Mat(total, 3 * h);
    matmul(c.qkv.d.data(), a.d.data(), blk.wqkv.w.d.data(), total, h, 3 * h);
    add_bias_rows(c.qkv, blk.bqkv.w);

    c.ctx = Mat(total, h);
    c.probs.assign(ns, Mat());
#pragma omp parallel for schedule(dynamic) if (ns > 1)
    for (std::int64_t s = 0; s < ns; ++s) {
      const std::int64_t b0 = batch.offsets[s];
      const std::int64_t sl = batch.len(s);
      Mat& pm = c.probs[s];
      pm = Mat(nh * sl, sl);
      for (std::int64_t hh = 0; hh < nh; ++hh) {
        for (std::int64_t t = 0; t < sl; ++t) {
          const double* q = c.qkv.row(b0 + t) + hh * hd;
          double* prow = pm.row(hh * sl + t);
          double mx = -1e300;
          for (std::int64_t u = 0; u <= t; ++u) {
            const double* k = c.qkv.row(b0 + u) + h + hh * hd;
            double sdot = 0.0;
            for (std::int64_t j = 0; j < hd; ++j) sdot += q[j] * k[j];
            prow[u] = sdot * scale;
            mx = std::max(mx, prow[u]);
          }
          double sum = 0.0;
          for (std::int64_t u = 0; u <= t; ++u) {
            prow[u] = std::exp(prow[u] - mx);
            sum += prow[u];
          }
          double* crow = c.ctx.row(b0 + t) + hh * hd;
          for (std::int64_t u = 0; u <= t; ++u) {
            prow[u] /= sum;
            const double* v = c.qkv.row(b0 + u) + 2 * h + hh * hd;
            for (std::int64_t j = 0; j < hd; ++j) crow[j] += prow[u] * v[j];
          }
        }
      }
    }
    Mat o(total, h);
    matmul(o.d.data(), c.ctx.d.data(), blk.wo.w.d.data(), total, h, h);
    add_bias_rows(o, blk.bo.w);
    c.x1 = x;
    for (std::int64_t i = 0; i < total * h; ++i) c.x1.d[i] += o.d[i];

    ln_forward(c.x1, blk.ln2_g.w, blk.ln2_b.w, c.a2, c.rs2, a);
    c.f1 = Mat(total, cfg.ffn_mult * h);
    matmul(c.f1.d.data(), a.d.data(), blk.w1.w.d.data(), total, h,
           cfg.ffn_mult * h);
    add_bias_rows(c.f1, blk.b1.w);
    c.act = Mat(total, cfg.ffn_mult * h);
    for (std::int64_t i = 0; i < c.f1.size(); ++i) c.act.d[i] = gelu(c.f1.d[i]);
    Mat f2(total, h);
    matmul(f2.d.data(), c.act.d.data(), blk.w2.w.d.data(), total,
           cfg.ffn_mult * h, h);
    add_bias_rows(f2, blk.b2.w);
    c.x2 = c.x1;
    for (std::int64_t i = 0; i < total * h; ++i) c.x2.d[i] += f2.d[i];
    x = c.x2;
  }
  ln_forward(x, lnf_g.w, lnf_b.w, cache.xf, cache.rsf, cache.y);
  return cache.y;
}

void Model::backward_train(const PackedBatch& batch, TrainCache& cache,
                           const Mat& d_y) {
  const std::int64_t h = cfg.hidden, nh = cfg.heads, hd = h / nh;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const std::int64_t total = batch.total();
  const std::int64_t ns = batch.samples();

  Mat dx(total, h);
  ln_backward(cache.xf, cache.rsf, lnf_g.w, d_y, dx, lnf_g.g, lnf_b.g);

  for (std::int64_t b = cfg.blocks - 1; b >= 0; --b) {
    auto& blk = blocks[b];
    auto& c = cache.blk[b];

    // FFN backward; dx currently holds d(block output).
    Mat d_act(total, cfg.ffn_mult * h);
    matmul_nt(d_act.d.data(), dx.d.data(), blk.w2.w.d.data(), total, h,
              cfg.ffn_mult * h);
    matmul_tn(blk.w2.g.d.data(), c.act.d.data(), dx.d.data(),
              cfg.ffn_mult * h, total, h, true);
    for (std::int64_t i = 0; i < total; ++i)
      for (std::int64_t j = 0; j < h; ++j) blk.b2.g.at(0, j) += dx.at(i, j);
    for (std::int64_t i = 0; i < d_act.size(); ++i)
      d_act.d[i] *= gelu_grad(c.f1.d[i]);
    // recompute ln2 output for the w1 input
    Mat a2(total, h);
    for (std::int64_t i = 0; i < total; ++i)
      for (std::int64_t j = 0; j < h; ++j)
        a2.at(i, j) = blk.ln2_g.w.at(0, j) * c.a2.at(i, j) + blk.ln2_b.w.at(0, j);
    matmul_tn(blk.w1.g.d.data(), a2.d.data(), d_act.d.data(), h, total,
              cfg.ffn_mult * h, true);
    for (std::int64_t i = 0; i < total; ++i)
      for (std::int64_t j = 0; j < cfg.ffn_mult * h; ++j)
        blk.b1.g.at(0, j) += d_act.at(i, j);
    Mat d_a2(total, h);
    matmul_nt(d_a2.d.data(), d_act.d.data(), blk.w1.w.d.data(), total,
              cfg.ffn_mult * h, h);
    ln_backward(c.a2, c.rs2, blk.ln2_g.w, d_a2, dx, blk.ln2_g.g, blk.ln2_b.g);

    // Attention backward; dx holds d(x1) now.
    Mat d_ctx(total, h);
    matmul_nt(d_ctx.d.data(), dx.d.data(), blk.wo.w.d.data(), total, h, h);
    matmul_tn(blk.wo.g.d.data(), c.ctx.d.data(), dx.d.data(), h, total, h,
              true);
    for (std::int64_t i = 0; i < total; ++i)
      for (std::int64_t j = 0; j < h; ++j) blk.bo.g.at(0, j) += dx.at(i, j);

    Mat d_qkv(total, 3 * h);
#pragma omp parallel for schedule(dynamic) if (ns > 1)
    for (std::int64_t s = 0; s < ns; ++s) {
      const std::int64_t b0 = batch.offsets[s];
      const std::int64_t sl = batch.len(s);
      const Mat& pm = c.probs[s];
      std::vector<double> dp(sl);
      for (std::int64_t hh = 0; hh < nh; ++hh) {
        for (std::int64_t t = 0; t < sl; ++t) {
          const double* prow = pm.row(hh * sl + t);
          const double* dctx = d_ctx.row(b0 + t) + hh * hd;
          double dot_pd = 0.0;
          for (std::int64_t u = 0; u <= t; ++u) {
            const double* v = c.qkv.row(b0 + u) + 2 * h + hh * hd;
            double dpv = 0.0;
            for (std::int64_t j = 0; j < hd; ++j) dpv += dctx[j] * v[j];
            dp[u] = dpv;
            dot_pd += prow[u] * dpv;
            double* dv = d_qkv.row(b0 + u) + 2 * h + hh * hd;
            for (std::int64_t j = 0; j < hd; ++j) dv[j] += prow[u] * dctx[j];
          }
          const double* q = c.qkv.row(b0 + t) + hh * hd;
          double* dq = d_qkv.row(b0 + t) + hh * hd;
          for (std::int64_t u = 0; u <= t; ++u) {
            const double ds = prow[u] * (dp[u] - dot_pd) * scale;
            const double* k = c.qkv.row(b0 + u) + h + hh * hd;
            double* dk = d_qkv.row(b0 + u) + h + hh * hd;
            for (std::int64_t j = 0; j < hd; ++j) {
              dq[j] += ds * k[j];
              dk[j] += ds * q[j];
            }
          }
        }
      }
    }
    // recompute ln1 output for the wqkv input
    Mat a1(total, h);
    for (std::int64_t i = 0; i < total; ++i)
      for (std::int64_t j = 0; j < h; ++j)
        a1.at(i, j) = blk.ln1_g.w.at(0, j) * c.a1.at(i, j) + blk.ln1_b.w.at(0, j);
    matmul_tn(blk.wqkv.g.d.data(), a1.d.data(), d_qkv.d.data(), h, total,
              3 * h, true);
    for (std::int64_t i = 0; i < total; ++i)
      for (std::int64_t j = 0; j < 3 * h; ++j)
        blk.bqkv.g.at(0, j) += d_qkv.at(i, j);
    Mat d_a1(total, h);
    matmul_nt(d_a1.d.data(), d_qkv.d.data(), blk.wqkv.w.d.data(), total, 3 * h,
              h);
    ln_backward(c.a1, c.rs1, blk.ln1_g.w, d_a1, dx, blk.ln1_g.g, blk.ln1_b.g);
  }

  // Embedding scatter.
  std::size_t fidx = 0;
  for (std::int64_t s = 0; s < ns; ++s) {
    const std::int64_t b0 = batch.offsets[s];
    const std::int64_t sl = batch.len(s);
    for (std::int64_t t = 0; t < sl; ++t) {
      const double* drow = dx.row(b0 + t);
      const auto& unit = batch.units[b0 + t];
      std::int32_t role;
      if (unit.is_item()) {
        role = static_cast<std::int32_t>(TokenRole::Item);
        // up-projection backward into the fused representation
        const auto& fc = cache.fusion_caches[fidx];
        const double* fused =
            cfg.free_item_emb ? free_emb.w.row(unit.item) : fc.fused.data();
        for (std::int64_t j = 0; j < h; ++j)
          fusion_g.up_b.at(0, j) += drow[j];
        std::vector<double> d_fused(cfg.fused_dim, 0.0);
        for (std::int64_t i = 0; i < cfg.fused_dim; ++i) {
          const double* up_row = fusion.up_w.row(i);
          double* upg_row = fusion_g.up_w.row(i);
          double acc = 0.0;
          for (std::int64_t j = 0; j < h; ++j) {
            acc += up_row[j] * drow[j];
            upg_row[j] += fused[i] * drow[j];
          }
          d_fused[i] = acc;
        }
        if (cfg.free_item_emb) {
          double* fg = free_emb.g.row(unit.item);
          for (std::int64_t i = 0; i < cfg.fused_dim; ++i) fg[i] += d_fused[i];
        } else {
          fusion.fuse_backward(fc, d_fused, fusion_g);
        }
        ++fidx;
      } else {
        role = static_cast<std::int32_t>(vocab.role_of(unit.token));
        double* tg = tok_emb.g.row(unit.token);
        for (std::int64_t j = 0; j < h; ++j) tg[j] += drow[j];
      }
      double* pg = pos_emb.g.row(t);
      double* yg = type_emb.g.row(role);
      for (std::int64_t j = 0; j < h; ++j) {
        pg[j] += drow[j];
        yg[j] += drow[j];
      }
    }
  }
}

void Model::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ostringstream mf;
  mf << "hidden = " << cfg.hidden << "\n";
  mf << "blocks = " << cfg.blocks << "\n";
  mf << "heads = " << cfg.heads << "\n";
  mf << "max_seq = " << cfg.max_seq << "\n";
  mf << "ffn_mult = " << cfg.ffn_mult << "\n";
  mf << "fused_dim = " << cfg.fused_dim << "\n";
  mf << "emb_dim = " << cfg.emb_dim << "\n";
  mf << "prefix_len = " << cfg.prefix_len << "\n";
  mf << "free_item_emb = " << (cfg.free_item_emb ? 1 : 0) << "\n";
  mf << "n_query_clusters = " << vocab.n_query_clusters << "\n";
  mf << "n_categories = " << vocab.n_categories << "\n";
  mf << "n_seasons = " << vocab.n_seasons << "\n";
  mf << "n_holidays = " << vocab.n_holidays << "\n";
  mf << "sid_levels = " << vocab.sid_levels << "\n";
  mf << "sid_k = " << vocab.sid_k << "\n";
  mf << "n_items = " << items.id_emb.rows << "\n";
  mf << "vocab_hash = " << vocab.hash() << "\n";
  write_text(dir / "model_manifest.txt", mf.str());

  auto dump = [&dir](const Mat& m, const std::string& name) {
    write_tensor(dir / (name + ".sgt"), m);
  };
  // const_cast-free listing: rebuild the name->tensor mapping by hand.
  dump(tok_emb.w, "tok_emb");
  dump(pos_emb.w, "pos_emb");
  dump(type_emb.w, "type_emb");
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto& blk = blocks[b];
    const std::string p = "blk" + std::to_string(b) + ".";
    dump(blk.ln1_g.w, p + "ln1_g");
    dump(blk.ln1_b.w, p + "ln1_b");
    dump(blk.wqkv.w, p + "wqkv");
    dump(blk.bqkv.w, p + "bqkv");
    dump(blk.wo.w, p + "wo");
    dump(blk.bo.w, p + "bo");
    dump(blk.ln2_g.w, p + "ln2_g");
    dump(blk.ln2_b.w, p + "ln2_b");
    dump(blk.w1.w, p + "w1");
    dump(blk.b1.w, p + "b1");
    dump(blk.w2.w, p + "w2");
    dump(blk.b2.w, p + "b2");
  }
  dump(lnf_g.w, "lnf_g");
  dump(lnf_b.w, "lnf_b");
  dump(head_w.w, "head_w");
  dump(head_b.w, "head_b");
  dump(query_w.w, "query_w");
  dump(query_b.w, "query_b");
  dump(fusion.w1, "fusion.w1");
  dump(fusion.b1, "fusion.b1");
  dump(fusion.w2, "fusion.w2");
  dump(fusion.b2, "fusion.b2");
  dump(fusion.up_w, "fusion.up_w");
  dump(fusion.up_b, "fusion.up_b");
  dump(fusion.img_missing, "fusion.img_missing");
  if (cfg.free_item_emb) dump(free_emb.w, "free_emb");

  dump(items.id_emb, "items.id_emb");
  dump(items.text_emb, "items.text_emb");
  dump(items.img_emb, "items.img_emb");
  Mat has(items.id_emb.rows, 1);
  for (std::int64_t i = 0; i < has.rows; ++i)
    has.at(i, 0) = items.has_img.empty() ? 1.0 : items.has_img[i];
  dump(has, "items.has_img");
}

Model Model::load(const std::filesystem::path& dir) {
  const Config mf = Config::from_file(dir / "model_manifest.txt");
  ModelConfig mc;
  mc.hidden = mf.get_int("hidden", 128);
  mc.blocks = mf.get_int("blocks", 2);
  mc.heads = mf.get_int("heads", 4);
  mc.max_seq = mf.get_int("max_seq", 256);
  mc.ffn_mult = mf.get_int("ffn_mult", 4);
  mc.fused_dim = mf.get_int("fused_dim", 128);
  mc.emb_dim = mf.get_int("emb_dim", 64);
  mc.prefix_len = mf.get_int("prefix_len", 1);
  mc.free_item_emb = mf.get_bool("free_item_emb", false);
  const Vocabulary v = Vocabulary::build(
      mf.get_int("n_query_clusters", 0), mf.get_int("n_categories", 0),
      mf.get_int("n_seasons", 0), mf.get_int("n_holidays", 0),
      mf.get_int("sid_levels", 4), mf.get_int("sid_k", 64));
  if (static_cast<std::uint64_t>(mf.get_int("vocab_hash", 0)) != v.hash())
    throw std::runtime_error("checkpoint vocabulary hash mismatch");

  ItemEmbeddingTable table;
  table.id_emb = read_matrix(dir / "items.id_emb.sgt");
  table.text_emb = read_matrix(dir / "items.text_emb.sgt");
  table.img_emb = read_matrix(dir / "items.img_emb.sgt");
  const Mat has = read_matrix(dir / "items.has_img.sgt");
  table.has_img.resize(has.rows);
  for (std::int64_t i = 0; i < has.rows; ++i)
    table.has_img[i] = has.at(i, 0) != 0.0;

  Model m;
  Rng rng(0);
  m.init(mc, v, table, rng);
  auto fill = [&dir](Mat& dst, const std::string& name) {
    Mat src = read_matrix(dir / (name + ".sgt"));
    if (src.rows != dst.rows || src.cols != dst.cols)
      throw std::runtime_error("checkpoint tensor shape mismatch: " + name);
    dst = std::move(src);
  };
  fill(m.tok_emb.w, "tok_emb");
  fill(m.pos_emb.w, "pos_emb");
  fill(m.type_emb.w, "type_emb");
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    auto& blk = m.blocks[b];
    const std::string p = "blk" + std::to_string(b) + ".";
    fill(blk.ln1_g.w, p + "ln1_g");
    fill(blk.ln1_b.w, p + "ln1_b");
    fill(blk.wqkv.w, p + "wqkv");
    fill(blk.bqkv.w, p + "bqkv");
    fill(blk.wo.w, p + "wo");
    fill(blk.bo.w, p + "bo");
    fill(blk.ln2_g.w, p + "ln2_g");
    fill(blk.ln2_b.w, p + "ln2_b");
    fill(blk.w1.w, p + "w1");
    fill(blk.b1.w, p + "b1");
    fill(blk.w2.w, p + "w2");
    fill(blk.b2.w, p + "b2");
  }
  fill(m.lnf_g.w, "lnf_g");
  fill(m.lnf_b.w, "lnf_b");
  fill(m.head_w.w, "head_w");
  fill(m.head_b.w, "head_b");
  fill(m.query_w.w, "query_w");
  fill(m.query_b.w, "query_b");
  fill(m.fusion.w1, "fusion.w1");
  fill(m.fusion.b1, "fusion.b1");
  fill(m.fusion.w2, "fusion.w2");
  fill(m.fusion.b2, "fusion.b2");
  fill(m.fusion.up_w, "fusion.up_w");
  fill(m.fusion.up_b, "fusion.up_b");
  fill(m.fusion.img_missing, "fusion.img_missing");
  if (mc.free_item_emb) fill(m.free_emb.w, "free_emb");
  return m;
}

}  // namespace sigma
