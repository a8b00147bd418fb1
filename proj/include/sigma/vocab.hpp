#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sigma/rng.hpp"
#include "sigma/rqvae.hpp"
#include "sigma/tensor.hpp"

namespace sigma {

enum class Task : std::int32_t {
  JustForYou = 0,
  Query = 1,
  Category = 2,
  Longtail = 3,
  Discover = 4,
  Season = 5,
  Holiday = 6
};
constexpr std::int64_t kNumTasks = 7;
const char* task_name(Task t);
Task parse_task(const std::string& s);

enum class TokenRole : std::int32_t {
  Special = 0,
  Profile = 1,
  TaskTag = 2,
  Constraint = 3,
  Sid = 4,
  Item = 5
};
constexpr std::int64_t kNumRoles = 6;

// Token id layout: specials, base (task / profile / constraint) tokens, then
// level-disjoint SID tokens at sid_offset + level * K + code.
struct Vocabulary {
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kBos = 1;
  static constexpr std::int32_t kEos = 2;
  static constexpr std::int32_t kQuery = 3;

  std::int64_t n_age = 4, n_gender = 3, n_region = 4;
  std::int64_t n_query_clusters = 0, n_categories = 0, n_seasons = 0,
               n_holidays = 0;
  std::int64_t sid_levels = 0, sid_k = 0;

  std::int32_t task_offset = 0, age_offset = 0, gender_offset = 0,
               region_offset = 0, query_offset = 0, category_offset = 0,
               season_offset = 0, holiday_offset = 0, sid_offset = 0;
  std::int64_t size = 0;

  static Vocabulary build(std::int64_t n_query_clusters,
                          std::int64_t n_categories, std::int64_t n_seasons,
                          std::int64_t n_holidays, std::int64_t sid_levels,
                          std::int64_t sid_k);

  std::int32_t task_token(Task t) const;
  std::int32_t age_token(std::int32_t a) const;
  std::int32_t gender_token(std::int32_t g) const;
  std::int32_t region_token(std::int32_t r) const;
  std::int32_t query_token(std::int32_t cluster) const;
  std::int32_t category_token(std::int32_t cat) const;
  std::int32_t season_token(std::int32_t s) const;
  std::int32_t holiday_token(std::int32_t h) const;

  std::int32_t sid_token(std::int64_t level, std::int32_t code) const;
  bool is_sid(std::int32_t token) const;
  std::int64_t sid_level_of(std::int32_t token) const;
  std::int32_t sid_code_of(std::int32_t token) const;

  TokenRole role_of(std::int32_t token) const;
  std::string name_of(std::int32_t token) const;

  void save_manifest(const std::filesystem::path& path) const;
  std::uint64_t hash() const;
};

// An item rendered as ell SID prefix tokens plus its catalog id (the id is
// not a vocabulary entry; its embedding is fused from pretrained tables).
struct HybridTokenSeq {
  std::vector<std::int32_t> sid_tokens;
  std::int64_t item_id = -1;
};

HybridTokenSeq tokenize_item(const Vocabulary& vocab, const SemanticId& sid,
                             std::int64_t item_id, std::int64_t ell);
// Recovers (codes, item id) from a hybrid sequence.
std::pair<SemanticId, std::int64_t> detokenize_item(const Vocabulary& vocab,
                                                    const HybridTokenSeq& seq);

// Pretrained per-item embeddings consumed by the fusion MLP. Items without a
// visual embedding fall back to a learned stand-in vector.
struct ItemEmbeddingTable {
  Mat id_emb;    // n x emb_dim
  Mat text_emb;  // n x emb_dim
  Mat img_emb;   // n x emb_dim
  std::vector<char> has_img;
};

// concat(v_id, v_text, v_img) -> fused (two layers, gelu) plus an up
// projection into the backbone width.
struct FusionMlp {
  Mat w1, b1, w2, b2;     // 3*emb_dim -> fused -> fused
  Mat up_w, up_b;         // fused -> hidden
  Mat img_missing;        // 1 x emb_dim

  void init(Rng& rng, std::int64_t emb_dim, std::int64_t fused_dim,
            std::int64_t hidden_dim);
  std::int64_t emb_dim() const { return img_missing.cols; }
  std::int64_t fused_dim() const { return w2.cols; }

  struct Cache {
    std::vector<double> input;  // 3*emb_dim
    std::vector<double> pre;    // fused (pre-activation)
    std::vector<double> fused;  // fused output
    bool used_missing = false;
  };
  std::vector<double> fuse(const ItemEmbeddingTable& table,
                           std::int64_t item_id, Cache* cache = nullptr) const;
  std::vector<double> up_project(const std::vector<double>& fused) const;
  // d_fused flows back to parameters and (optionally) the three source rows.
  void fuse_backward(const Cache& cache, const std::vector<double>& d_fused,
                     FusionMlp& grads, double* d_input3 = nullptr) const;
};

// Rows 0..ell-1 are token-table lookups of the SID prefix; row ell is the
// up-projected fused item embedding.
Mat embed_item_sequence(const Vocabulary& vocab, const FusionMlp& mlp,
                        const ItemEmbeddingTable& table,
                        const HybridTokenSeq& seq, const Mat& token_table);

}  // namespace sigma
