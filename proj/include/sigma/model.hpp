#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include "sigma/optim.hpp"
#include "sigma/vocab.hpp"

namespace sigma {

// One input position: either a vocabulary token or an item whose embedding
// row is the up-projected fusion of its pretrained embeddings.
struct TokenUnit {
  std::int32_t token = -1;
  std::int64_t item = -1;

  static TokenUnit tok(std::int32_t t) { return {t, -1}; }
  static TokenUnit itm(std::int64_t id) { return {-1, id}; }
  bool is_item() const { return item >= 0; }
};

struct ModelConfig {
  std::int64_t hidden = 128;
  std::int64_t blocks = 2;
  std::int64_t heads = 4;
  std::int64_t max_seq = 256;
  std::int64_t ffn_mult = 4;
  std::int64_t fused_dim = 128;
  std::int64_t emb_dim = 64;    // width of each pretrained embedding view
  std::int64_t prefix_len = 1;  // ell used for hybrid tokenization
  bool free_item_emb = false;   // ablation: per-item embeddings from scratch
};

// Cached attention keys/values for a processed prefix. Extending the cache
// reproduces the full recompute within 1e-5 (bitwise, in practice).
struct KvCache {
  std::int64_t len = 0;
  std::vector<std::vector<double>> k, v;  // per layer, len x hidden flattened

  void reset(std::int64_t layers) {
    len = 0;
    k.assign(layers, {});
    v.assign(layers, {});
  }
};

struct PackedBatch {
  std::vector<TokenUnit> units;
  std::vector<std::int64_t> offsets;  // sample starts, plus total at the end

  std::int64_t samples() const {
    return static_cast<std::int64_t>(offsets.size()) - 1;
  }
  std::int64_t len(std::int64_t s) const { return offsets[s + 1] - offsets[s]; }
  std::int64_t total() const { return offsets.back(); }
};

class Model {
 public:
  ModelConfig cfg;
  Vocabulary vocab;
  ItemEmbeddingTable items;

  struct P {
    Mat w, g;
    std::string name;
  };
  struct Block {
    P ln1_g, ln1_b, wqkv, bqkv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  P tok_emb, pos_emb, type_emb;
  std::vector<Block> blocks;
  P lnf_g, lnf_b;
  P head_w, head_b;    // SID vocabulary head, hidden -> L*K
  P query_w, query_b;  // retrieval head, hidden -> fused_dim
  FusionMlp fusion, fusion_g;
  P free_emb;  // n_items x fused_dim when cfg.free_item_emb

  void init(const ModelConfig& mc, const Vocabulary& v,
            const ItemEmbeddingTable& table, Rng& rng);
  std::vector<ParamRef> params();
  void zero_grad();

  // Fused item representation in the retrieval space (the ablation swaps in
  // the free table).
  std::vector<double> fused_item(std::int64_t item_id,
                                 FusionMlp::Cache* cache = nullptr) const;
  Mat all_fused_items() const;

  // --- inference path -------------------------------------------------
  // Appends `units` to `ext` (attending over base + ext) and returns the
  // final hidden states of the new rows. `base` may be nullptr.
  Mat forward_infer(const KvCache* base, KvCache& ext,
                    const std::vector<TokenUnit>& units) const;
  // Convenience: no cache reuse.
  Mat forward(const std::vector<TokenUnit>& units) const;

  std::vector<double> sid_logits(const double* y_row) const;  // L*K
  // Log-softmax restricted to the level's code block; returns K entries.
  std::vector<double> level_log_softmax(const std::vector<double>& logits,
                                        std::int64_t level) const;
  std::vector<double> query_state(const double* y_row) const;  // fused_dim

  // --- training path ----------------------------------------------------
  struct TrainCache;
  Mat forward_train(const PackedBatch& batch, TrainCache& cache) const;
  // d_y: gradient w.r.t. the returned hidden states; scatters into params
  // (zero_grad first) including fusion gradients of item units.
  void backward_train(const PackedBatch& batch, TrainCache& cache,
                      const Mat& d_y);

  void save(const std::filesystem::path& dir) const;
  static Model load(const std::filesystem::path& dir);

  std::int64_t n_items() const { return items.id_emb.rows; }

 private:
  void embed_units(const std::vector<TokenUnit>& units, std::int64_t start_pos,
                   Mat& x, std::vector<FusionMlp::Cache>* caches) const;
};

struct Model::TrainCache {
  Mat x0;
  std::vector<FusionMlp::Cache> fusion_caches;  // parallel to item units
  struct B {
    Mat a1;  // ln1 normalized rows (pre gain/bias)
    std::vector<double> rs1;
    Mat qkv;
    std::vector<Mat> probs;  // per sample: heads*len x len
    Mat ctx;
    Mat x1;  // after attention residual
    Mat a2;  // ln2 normalized rows
    std::vector<double> rs2;
    Mat f1;   // ffn pre-activation
    Mat act;  // gelu(f1)
    Mat x2;   // block output
  };
  std::vector<B> blk;
  std::vector<double> rsf;
  Mat xf;  // final layernorm normalized rows
  Mat y;   // final hidden states
};

}  // namespace sigma
