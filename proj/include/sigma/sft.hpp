#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "sigma/model.hpp"
#include "sigma/rqvae.hpp"
#include "sigma/world.hpp"

namespace sigma {

struct InstructionSample {
  std::int64_t user = 0;
  Task task = Task::JustForYou;
  std::int32_t constraint = -1;  // query cluster / category / season / holiday
  std::vector<std::int64_t> history;  // item ids, most recent last
  std::int64_t target = 0;
};

struct DatasetOptions {
  std::int64_t max_history = 8;
  std::int64_t min_history = 1;
  std::int64_t discover_window = 10;
  std::int64_t ts_begin = 0;
  std::int64_t ts_end = -1;  // exclusive; -1 = end of log
};

// Task-conditioned sampling from the event log. Every emitted sample
// satisfies its task predicate against the generator's ground truth; a
// requested task with no qualifying (user, target) raises an error naming it.
std::vector<InstructionSample> build_sft_dataset(
    const World& world, const std::map<Task, std::int64_t>& task_mix,
    std::uint64_t seed, const DatasetOptions& opt);

void save_dataset(const std::filesystem::path& path,
                  const std::vector<InstructionSample>& samples,
                  const World& world);
std::vector<InstructionSample> load_dataset(const std::filesystem::path& path);

// Serialization order: profile, history, instruction, SID prefix, query.
struct SampleLayout {
  std::vector<TokenUnit> units;
  std::int64_t prompt_len = 0;  // units before the target prefix
  std::int64_t ell = 0;
  std::int64_t query_pos = -1;
  std::vector<std::int32_t> target_codes;  // first ell codes of the target
};

struct LayoutOptions {
  std::int64_t ell = 1;
  bool id_rows = true;     // append the fused item row after SID tokens
  bool sid_tokens = true;  // include SID prefix tokens (histories + target)
  bool with_target = true;  // include target prefix + query (training layout)
};

std::vector<TokenUnit> instruction_units(const Vocabulary& vocab,
                                         const World& world,
                                         const std::vector<SemanticId>& sids,
                                         const InstructionSample& s,
                                         const LayoutOptions& opt);
SampleLayout training_layout(const Vocabulary& vocab, const World& world,
                             const std::vector<SemanticId>& sids,
                             const InstructionSample& s,
                             const LayoutOptions& opt);

// Items sharing each SID prefix of length ell (the V_k sets).
struct PrefixBuckets {
  std::int64_t ell = 0;
  std::map<SemanticId, std::vector<std::int64_t>> buckets;

  static PrefixBuckets build(const std::vector<SemanticId>& sids,
                             std::int64_t ell);
  const std::vector<std::int64_t>* find(const SemanticId& prefix) const;
  SemanticId prefix_of(const SemanticId& sid) const {
    return {sid.begin(), sid.begin() + ell};
  }
};

struct HardNegatives {
  std::vector<std::int64_t> ids;
  bool global_fallback = false;
};

// Uniform draw without replacement from the target's prefix bucket; tops up
// from the whole catalog (flagged) when the bucket is too small.
HardNegatives sample_hard_negatives(const PrefixBuckets& buckets,
                                    const std::vector<SemanticId>& sids,
                                    std::int64_t target, std::int64_t n,
                                    Rng& rng);

// Mean NLL over the ell target SID positions with level-masked logits.
double ntp_loss(const Model& model, const World& world,
                const std::vector<SemanticId>& sids,
                const InstructionSample& s, const LayoutOptions& opt);

struct InfoNceResult {
  double loss = 0.0;
  std::vector<double> d_h;
  Mat d_emb;  // row 0: target, rows 1..n: negatives
  bool degenerate = false;
};

// Eq-style InfoNCE over cosine similarities at temperature tau; gradients
// flow to the query state, the target and every negative.
InfoNceResult id_infonce_loss(const std::vector<double>& h,
                              const std::vector<double>& target_emb,
                              const Mat& negative_embs, double tau);

struct SftConfig {
  std::int64_t steps = 1000;
  std::int64_t batch = 16;
  double lr = 3e-4;
  std::int64_t warmup_steps = 50;
  double weight_decay = 0.01;
  double tau = 0.05;
  double w_ntp = 1.0;
  double w_id = 1.0;
  std::int64_t negatives = 256;         // per-sample prefix-bucket negatives
  std::int64_t shared_negatives = 32;   // batch-shared pool
  bool global_negatives = false;        // ablation: ignore the prefix bucket
  bool freeze_negative_emb = false;
  std::int64_t max_history = 8;
  std::int64_t snapshot_every = 50;
  std::uint64_t seed = 1;
  LayoutOptions layout;
};

struct SftResult {
  std::vector<double> loss_curve;  // per-step batch loss
  bool aborted = false;
  std::int64_t abort_step = -1;
};

SftResult sft_train(Model& model, const World& world,
                    const std::vector<SemanticId>& sids,
                    const std::vector<InstructionSample>& dataset,
                    const SftConfig& cfg);

}  // namespace sigma
