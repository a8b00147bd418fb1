#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "sigma/config.hpp"
#include "sigma/generator.hpp"
#include "sigma/grounding.hpp"
#include "sigma/metrics.hpp"
#include "sigma/sft.hpp"

namespace sigma {

struct PipelineConfig {
  WorldConfig world;
  GroundingConfig grounding;
  std::map<View, std::int64_t> pair_mix;
  RqVaeConfig rq;
  ModelConfig model;
  SftConfig sft;
  GenOptions gen;
  std::int64_t train_per_task = 2000;
  std::int64_t eval_per_task = 100;
  std::int64_t max_history = 8;
  double eval_split = 0.9;  // time split between train and eval windows
  std::uint64_t seed = 42;
};

// Flat key=value overrides (see README for the key list).
PipelineConfig pipeline_from_config(const Config& c);

struct VariantSpec {
  std::string name = "full";
  bool no_grounding = false;
  bool no_apf = false;
  bool no_pretrained_emb = false;
  bool global_negatives = false;
  bool fewer_negatives = false;
  std::int64_t ell = 0;  // 0 = PipelineConfig.model.prefix_len
};
VariantSpec variant_from_name(const std::string& name);

struct StageInfo {
  std::string name;
  std::filesystem::path dir;
  std::uint64_t artifact_hash = 0;
  bool cached = false;
};

struct VariantResult {
  MetricsReport report;
  std::vector<StageInfo> stages;
  double prefix1_accuracy = -1.0;
  double prefix2_accuracy = -1.0;
};

enum class BaselineKind { Popularity, AutoregressiveID, GR_SID, GR_ID };
const char* baseline_name(BaselineKind k);

// Runs the staged pipeline with per-stage artifact caching keyed by the
// upstream configuration, so ablation variants share identical upstream
// artifacts bit for bit.
class Pipeline {
 public:
  Pipeline(PipelineConfig cfg, std::filesystem::path out_dir);

  const World& world();
  const std::vector<InstructionSample>& eval_samples();
  std::int64_t split_ts() const;

  StageInfo stage_world();
  StageInfo stage_grounding(bool no_grounding);
  StageInfo stage_quantizer(const StageInfo& grounding);
  StageInfo stage_sft(const VariantSpec& v, const StageInfo& quantizer);

  VariantResult run_variant(const VariantSpec& v);
  MetricsReport run_baseline(BaselineKind kind);

  // Fraction of eval samples whose top beam reproduces the target's SID
  // prefix of the given length.
  double prefix_accuracy(const Model& model, const PrefixIndex& index,
                         std::int64_t ell_gen);

  const PipelineConfig& cfg() const { return cfg_; }

 private:
  ItemEmbeddingTable make_table(const StageInfo& grounding) const;
  MetricsReport evaluate_generation(const Model& model,
                                    const PrefixIndex& index,
                                    const std::vector<SemanticId>& sids,
                                    const GenOptions& gen,
                                    const std::string& config_id);

  PipelineConfig cfg_;
  std::filesystem::path out_;
  bool world_loaded_ = false;
  World world_;
  std::vector<InstructionSample> eval_samples_;
  bool eval_built_ = false;
  std::vector<SemanticId> eval_sids_;
};

struct ExperimentResult {
  std::vector<VariantResult> variants;
  std::vector<MetricsReport> baselines;
  std::string csv;
};

ExperimentResult run_experiment(const PipelineConfig& cfg,
                                const std::vector<VariantSpec>& variants,
                                const std::vector<BaselineKind>& baselines,
                                const std::filesystem::path& out_dir);

std::uint64_t hash_dir(const std::filesystem::path& dir);

}  // namespace sigma
