#include "sigma/rqvae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "sigma/cluster.hpp"
#include "sigma/config.hpp"
#include "sigma/kernels.hpp"
#include "sigma/optim.hpp"
#include "sigma/rng.hpp"

namespace sigma {

namespace {

void affine_identity(Mat& w, Mat& b, std::int64_t d) {
  w = Mat(d, d);
  b = Mat(1, d);
  for (std::int64_t i = 0; i < d; ++i) w.at(i, i) = 1.0;
}

double mean_sq_norm(const Mat& m) {
  double s = 0.0;
  for (double v : m.d) s += v * v;
  return s / static_cast<double>(m.rows);
}

}  // namespace

std::vector<double> RqVaeModel::encode_latent(const double* x) const {
  const std::int64_t d = cfg.dim;
  std::vector<double> z(d);
  if (cfg.identity_codec) {
    std::copy_n(x, d, z.begin());
    return z;
  }
  for (std::int64_t j = 0; j < d; ++j) {
    double s = enc_b.at(0, j);
    for (std::int64_t i = 0; i < d; ++i) s += x[i] * enc_w.at(i, j);
    z[j] = s;
  }
  return z;
}

std::vector<double> RqVaeModel::decode_latent(const double* z) const {
  const std::int64_t d = cfg.dim;
  std::vector<double> x(d);
  if (cfg.identity_codec) {
    std::copy_n(z, d, x.begin());
    return x;
  }
  for (std::int64_t j = 0; j < d; ++j) {
    double s = dec_b.at(0, j);
    for (std::int64_t i = 0; i < d; ++i) s += z[i] * dec_w.at(i, j);
    x[j] = s;
  }
  return x;
}

SemanticId RqVaeModel::rq_encode(const double* v) const {
  std::vector<double> r = encode_latent(v);
  SemanticId codes(cfg.levels);
  for (std::int64_t t = 0; t < cfg.levels; ++t) {
    std::int32_t idx = 0;
    nearest_codeword(&idx, nullptr, r.data(), 1, codebooks[t].d.data(),
                     cfg.codebook_size, cfg.dim);
    codes[t] = idx;
    const double* cw = codebooks[t].row(idx);
    for (std::int64_t j = 0; j < cfg.dim; ++j) r[j] -= cw[j];
  }
  return codes;
}

std::vector<double> RqVaeModel::rq_decode(const SemanticId& sid) const {
  if (static_cast<std::int64_t>(sid.size()) != cfg.levels)
    throw std::invalid_argument("rq_decode: wrong SID length");
  std::vector<double> z(cfg.dim, 0.0);
  for (std::int64_t t = 0; t < cfg.levels; ++t) {
    if (sid[t] < 0 || sid[t] >= cfg.codebook_size)
      throw std::invalid_argument("rq_decode: code out of range");
    const double* cw = codebooks[t].row(sid[t]);
    for (std::int64_t j = 0; j < cfg.dim; ++j) z[j] += cw[j];
  }
  return decode_latent(z.data());
}

RqVaeModel train_rqvae(const Mat& embeddings, const RqVaeConfig& cfg,
                       RqVaeStats* stats) {
  const std::int64_t n = embeddings.rows, d = embeddings.cols;
  if (d != cfg.dim) throw std::invalid_argument("train_rqvae: dim mismatch");
  if (n < cfg.codebook_size)
    throw std::invalid_argument(
        "train_rqvae: need at least K embeddings to initialize codebooks");

  Rng rng(cfg.seed);
  RqVaeModel model;
  model.cfg = cfg;
  affine_identity(model.enc_w, model.enc_b, d);
  affine_identity(model.dec_w, model.dec_b, d);

  // Residual k-means initialization, level by level.
  Mat residual(n, d);
  for (std::int64_t i = 0; i < n; ++i) {
    const auto z = model.encode_latent(embeddings.row(i));
    std::copy(z.begin(), z.end(), residual.row(i));
  }
  if (stats) stats->init_mean_sq_residual.push_back(mean_sq_norm(residual));
  std::vector<std::int32_t> assign(n);
  for (std::int64_t t = 0; t < cfg.levels; ++t) {
    Rng krng = rng.split(100 + t);
    model.codebooks.push_back(
        kmeans(residual, cfg.codebook_size, cfg.kmeans_iters, krng));
    nearest_codeword(assign.data(), nullptr, residual.d.data(), n,
                     model.codebooks[t].d.data(), cfg.codebook_size, d);
    for (std::int64_t i = 0; i < n; ++i) {
      const double* cw = model.codebooks[t].row(assign[i]);
      double* r = residual.row(i);
      for (std::int64_t j = 0; j < d; ++j) r[j] -= cw[j];
    }
    if (stats) stats->init_mean_sq_residual.push_back(mean_sq_norm(residual));
  }

  // EMA state per level.
  std::vector<std::vector<double>> ema_count(cfg.levels);
  std::vector<Mat> ema_sum(cfg.levels);
  for (std::int64_t t = 0; t < cfg.levels; ++t) {
    ema_count[t].assign(cfg.codebook_size, 1.0);
    ema_sum[t] = model.codebooks[t];
  }

  RqVaeModel grads = model;  // reuse shapes for codec grads
  grads.enc_w.fill(0.0);
  grads.enc_b.fill(0.0);
  grads.dec_w.fill(0.0);
  grads.dec_b.fill(0.0);
  std::vector<ParamRef> prefs;
  if (!cfg.identity_codec) {
    auto ref = [](Mat& w, Mat& g, const char* name) {
      return ParamRef{w.d.data(), g.d.data(), w.size(), name};
    };
    prefs = {ref(model.enc_w, grads.enc_w, "rq.enc_w"),
             ref(model.enc_b, grads.enc_b, "rq.enc_b"),
             ref(model.dec_w, grads.dec_w, "rq.dec_w"),
             ref(model.dec_b, grads.dec_b, "rq.dec_b")};
  }
  AdamW opt;
  opt.lr = cfg.lr;

  std::vector<std::int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng erng = rng.split(1000 + epoch);
    for (std::int64_t i = n - 1; i > 0; --i) {
      const auto j = static_cast<std::int64_t>(erng.uniform_int(i + 1));
      std::swap(order[i], order[j]);
    }
    std::vector<std::vector<std::int64_t>> used(
        cfg.levels, std::vector<std::int64_t>(cfg.codebook_size, 0));
    // Reservoirs of residual inputs per level for dead-code reseeding.
    std::vector<std::vector<std::vector<double>>> reservoir(cfg.levels);

    double epoch_loss = 0.0;
    std::int64_t batches = 0;
    for (std::int64_t start = 0; start < n; start += cfg.batch) {
      const std::int64_t bs = std::min<std::int64_t>(cfg.batch, n - start);
      Mat x(bs, d), z(bs, d), zq(bs, d);
      std::vector<std::vector<std::int32_t>> codes(
          cfg.levels, std::vector<std::int32_t>(bs));
      for (std::int64_t i = 0; i < bs; ++i) {
        const double* row = embeddings.row(order[start + i]);
        std::copy_n(row, d, x.row(i));
        const auto zi = model.encode_latent(row);
        std::copy(zi.begin(), zi.end(), z.row(i));
      }
      Mat r = z;
      for (std::int64_t t = 0; t < cfg.levels; ++t) {
        std::vector<std::int32_t> a(bs);
        nearest_codeword(a.data(), nullptr, r.d.data(), bs,
                         model.codebooks[t].d.data(), cfg.codebook_size, d);
        // EMA accumulators are updated from the residual inputs at this level.
        Mat bsum(cfg.codebook_size, d);
        std::vector<double> bcount(cfg.codebook_size, 0.0);
        for (std::int64_t i = 0; i < bs; ++i) {
          codes[t][i] = a[i];
          ++used[t][a[i]];
          bcount[a[i]] += 1.0;
          double* srow = bsum.row(a[i]);
          const double* rrow = r.row(i);
          for (std::int64_t j = 0; j < d; ++j) srow[j] += rrow[j];
        }
        if (reservoir[t].size() < 64) {
          for (std::int64_t i = 0; i < bs && reservoir[t].size() < 64; i += 7)
            reservoir[t].emplace_back(r.row(i), r.row(i) + d);
        }
        for (std::int64_t c = 0; c < cfg.codebook_size; ++c) {
          ema_count[t][c] =
              cfg.ema_decay * ema_count[t][c] + (1.0 - cfg.ema_decay) * bcount[c];
          double* srow = ema_sum[t].row(c);
          const double* brow = bsum.row(c);
          for (std::int64_t j = 0; j < d; ++j)
            srow[j] = cfg.ema_decay * srow[j] + (1.0 - cfg.ema_decay) * brow[j];
          const double denom = std::max(ema_count[t][c], 1e-9);
          for (std::int64_t j = 0; j < d; ++j)
            model.codebooks[t].at(c, j) = srow[j] / denom;
        }
        for (std::int64_t i = 0; i < bs; ++i) {
          const double* cw = model.codebooks[t].row(a[i]);
          double* rrow = r.row(i);
          for (std::int64_t j = 0; j < d; ++j) rrow[j] -= cw[j];
        }
      }
      // zq = z - final residual
      for (std::int64_t i = 0; i < bs * d; ++i) zq.d[i] = z.d[i] - r.d[i];

      // Reconstruction + commitment; straight-through into the codec.
      double loss = 0.0;
      if (!cfg.identity_codec) {
        Mat xhat(bs, d);
        matmul(xhat.d.data(), zq.d.data(), model.dec_w.d.data(), bs, d, d);
        for (std::int64_t i = 0; i < bs; ++i)
          for (std::int64_t j = 0; j < d; ++j)
            xhat.at(i, j) += model.dec_b.at(0, j);
        Mat dxhat(bs, d);
        for (std::int64_t i = 0; i < bs * d; ++i) {
          const double diff = xhat.d[i] - x.d[i];
          loss += diff * diff;
          dxhat.d[i] = 2.0 * diff / static_cast<double>(bs);
        }
        double commit = 0.0;
        Mat dz(bs, d);
        matmul_nt(dz.d.data(), dxhat.d.data(), model.dec_w.d.data(), bs, d, d);
        for (std::int64_t i = 0; i < bs * d; ++i) {
          const double diff = z.d[i] - zq.d[i];
          commit += diff * diff;
          dz.d[i] += 2.0 * cfg.beta * diff / static_cast<double>(bs);
        }
        loss = loss / static_cast<double>(bs) +
               cfg.beta * commit / static_cast<double>(bs);

        opt.zero_grad(prefs);
        matmul_tn(grads.dec_w.d.data(), zq.d.data(), dxhat.d.data(), d, bs, d,
                  true);
        for (std::int64_t i = 0; i < bs; ++i)
          for (std::int64_t j = 0; j < d; ++j)
            grads.dec_b.at(0, j) += dxhat.at(i, j);
        matmul_tn(grads.enc_w.d.data(), x.d.data(), dz.d.data(), d, bs, d,
                  true);
        for (std::int64_t i = 0; i < bs; ++i)
          for (std::int64_t j = 0; j < d; ++j)
            grads.enc_b.at(0, j) += dz.at(i, j);
        opt.step(prefs);
      } else {
        for (std::int64_t i = 0; i < bs * d; ++i) {
          const double diff = r.d[i];
          loss += diff * diff;
        }
        loss /= static_cast<double>(bs);
      }
      epoch_loss += loss;
      ++batches;
    }
    if (stats) stats->loss_curve.push_back(epoch_loss / std::max<std::int64_t>(1, batches));

    // Reseed codewords unused over the whole epoch.
    for (std::int64_t t = 0; t < cfg.levels; ++t) {
      Rng rrng = rng.split(5000 + 31 * epoch + t);
      for (std::int64_t c = 0; c < cfg.codebook_size; ++c) {
        if (used[t][c] > 0 || reservoir[t].empty()) continue;
        const auto& src = reservoir[t][rrng.uniform_int(reservoir[t].size())];
        std::copy(src.begin(), src.end(), model.codebooks[t].row(c));
        ema_count[t][c] = 1.0;
        std::copy(src.begin(), src.end(), ema_sum[t].row(c));
      }
    }
  }

  if (stats) {
    stats->utilization.assign(cfg.levels, 0.0);
    std::vector<std::vector<char>> seen(
        cfg.levels, std::vector<char>(cfg.codebook_size, 0));
    double mse = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      const auto sid = model.rq_encode(embeddings.row(i));
      for (std::int64_t t = 0; t < cfg.levels; ++t) seen[t][sid[t]] = 1;
      const auto xhat = model.rq_decode(sid);
      for (std::int64_t j = 0; j < d; ++j) {
        const double diff = xhat[j] - embeddings.at(i, j);
        mse += diff * diff;
      }
    }
    stats->recon_mse = mse / static_cast<double>(n);
    for (std::int64_t t = 0; t < cfg.levels; ++t) {
      std::int64_t u = 0;
      for (char s : seen[t]) u += s;
      stats->utilization[t] =
          static_cast<double>(u) / static_cast<double>(cfg.codebook_size);
    }
  }
  return model;
}

SidAssignment assign_catalog(const RqVaeModel& model, const Mat& embeddings) {
  const std::int64_t n = embeddings.rows;
  SidAssignment out;
  out.sids.resize(n);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i)
    out.sids[i] = model.rq_encode(embeddings.row(i));
  for (const auto& sid : out.sids) {
    ++out.prefix1_hist[{sid.begin(), sid.begin() + 1}];
    if (sid.size() >= 2) ++out.prefix2_hist[{sid.begin(), sid.begin() + 2}];
  }
  return out;
}

void RqVaeModel::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ostringstream mf;
  mf << "levels = " << cfg.levels << "\n";
  mf << "codebook_size = " << cfg.codebook_size << "\n";
  mf << "dim = " << cfg.dim << "\n";
  mf << "beta = " << fmt_double(cfg.beta) << "\n";
  mf << "identity_codec = " << (cfg.identity_codec ? 1 : 0) << "\n";
  write_text(dir / "rq_manifest.txt", mf.str());
  for (std::int64_t t = 0; t < cfg.levels; ++t)
    write_tensor(dir / ("codebook" + std::to_string(t) + ".sgt"),
                 codebooks[t]);
  write_tensor(dir / "enc_w.sgt", enc_w);
  write_tensor(dir / "enc_b.sgt", enc_b);
  write_tensor(dir / "dec_w.sgt", dec_w);
  write_tensor(dir / "dec_b.sgt", dec_b);
}

RqVaeModel RqVaeModel::load(const std::filesystem::path& dir) {
  RqVaeModel m;
  const Config mf = Config::from_file(dir / "rq_manifest.txt");
  m.cfg.levels = mf.get_int("levels", 4);
  m.cfg.codebook_size = mf.get_int("codebook_size", 256);
  m.cfg.dim = mf.get_int("dim", 64);
  m.cfg.beta = mf.get_double("beta", 0.25);
  m.cfg.identity_codec = mf.get_bool("identity_codec", false);
  for (std::int64_t t = 0; t < m.cfg.levels; ++t)
    m.codebooks.push_back(
        read_matrix(dir / ("codebook" + std::to_string(t) + ".sgt")));
  m.enc_w = read_matrix(dir / "enc_w.sgt");
  m.enc_b = read_matrix(dir / "enc_b.sgt");
  m.dec_w = read_matrix(dir / "dec_w.sgt");
  m.dec_b = read_matrix(dir / "dec_b.sgt");
  return m;
}

void save_sids(const std::filesystem::path& path,
               const std::vector<std::int64_t>& ids,
               const std::vector<SemanticId>& sids) {
  std::ostringstream os;
  for (std::size_t i = 0; i < sids.size(); ++i) {
    os << ids[i] << '\t';
    for (std::size_t t = 0; t < sids[i].size(); ++t) {
      if (t) os << ',';
      os << sids[i][t];
    }
    os << '\n';
  }
  write_text(path, os.str());
}

std::vector<SemanticId> load_sids(const std::filesystem::path& path) {
  const auto lines = read_lines(path);
  std::vector<SemanticId> out;
  std::vector<std::int64_t> ids;
  for (const auto& line : lines) {
    if (line.empty()) continue;
    const auto f = split(line, '\t');
    ids.push_back(std::stoll(f[0]));
    SemanticId sid;
    for (const auto& c : split(f[1], ',')) sid.push_back(std::stoi(c));
    out.push_back(std::move(sid));
  }
  std::vector<SemanticId> dense(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= static_cast<std::int64_t>(out.size()))
      throw std::runtime_error("load_sids: item ids are not dense");
    dense[ids[i]] = out[i];
  }
  return dense;
}

}  // namespace sigma
