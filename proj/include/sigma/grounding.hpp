#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "sigma/optim.hpp"
#include "sigma/rng.hpp"
#include "sigma/tensor.hpp"
#include "sigma/world.hpp"

namespace sigma {

enum class View : std::uint8_t {
  Semantic = 0,
  Visual = 1,
  Knowledge = 2,
  Collaborative = 3
};
const char* view_name(View v);
View parse_view(const std::string& s);

struct RelevancePair {
  std::int64_t anchor = 0;
  std::int64_t positive = 0;
  View view = View::Semantic;
};

// Multi-view pair sampling against the planted factors; collaborative pairs
// come from co-occurrence inside session windows of the event log.
std::vector<RelevancePair> build_relevance_pairs(
    const World& world, const std::map<View, std::int64_t>& view_mix,
    std::uint64_t seed);

// In-batch pair probability: softmax over row i with k == i excluded.
// Indices are 0-based; embeddings hold 2B rows (anchors then positives).
double pair_probability(const Mat& embeddings, std::int64_t i, std::int64_t j,
                        double tau);

struct LossGrad {
  double loss = 0.0;
  Mat grad;  // d loss / d student embeddings, same shape as the input
};

// InfoNCE with in-batch negatives; partner of row i is (i + B) mod 2B.
LossGrad contrastive_loss(const Mat& embeddings, double tau);

// Row-wise KL(teacher || student) over the in-batch similarity
// distributions, diagonal excluded, averaged over the 2B rows.
LossGrad kd_loss(const Mat& student, const Mat& teacher, double tau);

// Two-layer feed-forward item encoder: feat_dim -> hidden -> out_dim.
struct ItemEncoder {
  Mat w1, b1, w2, b2;

  void init(Rng& rng, std::int64_t feat_dim, std::int64_t hidden,
            std::int64_t out_dim);
  Mat forward(const Mat& x) const;
  // Forward keeping intermediates, then backward accumulating parameter
  // gradients from d loss / d output.
  Mat forward_cached(const Mat& x, Mat& hidden_pre) const;
  void backward(const Mat& x, const Mat& hidden_pre, const Mat& d_out,
                ItemEncoder& grads) const;
  std::vector<ParamRef> params(ItemEncoder& grads);
  std::int64_t out_dim() const { return w2.cols; }
};

struct GroundingConfig {
  double tau = 0.05;
  std::int64_t batch = 256;  // B pairs per step
  std::int64_t steps = 200;
  std::int64_t hidden = 64;
  std::int64_t out_dim = 64;
  double lr = 1e-3;
  double w_cl = 1.0;
  double w_kd = 1.0;
  double weight_decay = 0.0;
  std::int64_t warmup_steps = 10;
  std::uint64_t seed = 1;
};

struct GroundingResult {
  ItemEncoder encoder;
  Mat embeddings;  // n_items x out_dim
  std::vector<double> cl_curve, kd_curve;
};

GroundingResult train_grounding(const World& world,
                                const std::vector<RelevancePair>& pairs,
                                const Mat& teacher_embeddings,
                                const GroundingConfig& cfg);

void save_pairs(const std::filesystem::path& path,
                const std::vector<RelevancePair>& pairs);
std::vector<RelevancePair> load_pairs(const std::filesystem::path& path);

}  // namespace sigma
