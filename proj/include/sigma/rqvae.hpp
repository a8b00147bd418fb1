#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <vector>

#include "sigma/tensor.hpp"

namespace sigma {

// Length-L code sequence from the hierarchical codebooks.
using SemanticId = std::vector<std::int32_t>;

struct RqVaeConfig {
  std::int64_t levels = 4;         // L
  std::int64_t codebook_size = 256;  // K
  std::int64_t dim = 64;           // input dim == latent dim
  double beta = 0.25;              // commitment weight
  double ema_decay = 0.99;
  std::int64_t epochs = 6;
  std::int64_t batch = 512;
  double lr = 1e-3;
  bool identity_codec = false;  // freeze encoder/decoder at identity
  std::int64_t kmeans_iters = 8;
  std::uint64_t seed = 1;
};

struct RqVaeModel {
  RqVaeConfig cfg;
  Mat enc_w, enc_b, dec_w, dec_b;   // affine codec, identity-initialized
  std::vector<Mat> codebooks;       // L matrices of K x dim

  std::vector<double> encode_latent(const double* x) const;
  std::vector<double> decode_latent(const double* z) const;

  // Greedy residual assignment; ties go to the lowest codeword index.
  SemanticId rq_encode(const double* v) const;
  SemanticId rq_encode(const std::vector<double>& v) const {
    return rq_encode(v.data());
  }
  std::vector<double> rq_decode(const SemanticId& sid) const;

  void save(const std::filesystem::path& dir) const;
  static RqVaeModel load(const std::filesystem::path& dir);
};

struct RqVaeStats {
  std::vector<double> init_mean_sq_residual;  // after levels 0..L at init
  std::vector<double> utilization;            // per level, fraction of codewords used
  double recon_mse = 0.0;
  std::vector<double> loss_curve;
};

// Residual k-means initialization (one centroid pinned to the residual mean
// per level) followed by EMA codebook updates with straight-through codec
// training; unused codewords are reseeded once per epoch.
RqVaeModel train_rqvae(const Mat& embeddings, const RqVaeConfig& cfg,
                       RqVaeStats* stats = nullptr);

struct SidAssignment {
  std::vector<SemanticId> sids;  // indexed by item position
  // Bucket-size histograms for prefix lengths 1 and 2.
  std::map<SemanticId, std::int64_t> prefix1_hist, prefix2_hist;
};

SidAssignment assign_catalog(const RqVaeModel& model, const Mat& embeddings);

void save_sids(const std::filesystem::path& path,
               const std::vector<std::int64_t>& ids,
               const std::vector<SemanticId>& sids);
// Returns SIDs indexed by item id (ids must be dense 0..n-1).
std::vector<SemanticId> load_sids(const std::filesystem::path& path);

}  // namespace sigma
