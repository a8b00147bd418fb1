#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sigma/index.hpp"
#include "sigma/model.hpp"

namespace sigma {

struct BeamCandidate {
  SemanticId prefix;      // codes, not token ids
  double phi = 0.0;       // cumulative log-probability
  std::vector<double> h;  // query hidden state (filled by step 2)
};

struct GenOptions {
  std::int64_t beam_width = 10;  // K
  std::int64_t per_beam = 50;    // M
  std::int64_t top_n = 20;       // N
  std::int64_t ell = 1;
  double tau = 0.05;
  bool sigma_floor = true;       // max(sigma, 1e-6) in the APF exponent
  bool renorm_beams = false;     // divide e^phi by the sum over beams
  bool top1_prefix_only = false; // ablation: all candidates from beam 1
  std::int64_t beam_exact_cap = 4096;
  AnnMode ann_mode = AnnMode::Exact;
};

struct ScoredItem {
  std::int64_t id = -1;
  double prob = 0.0;
  SemanticId prefix;
  double phi = 0.0;
};

struct GenerationResult {
  std::vector<ScoredItem> items;  // top-N, probability descending
  double sigma = 0.0;
  double total_scored_mass = 0.0;  // sum over every scored candidate
  std::vector<std::int64_t> per_beam_counts;
  bool beams_flagged = false;  // fewer reachable prefixes than K
  bool empty = false;          // every bucket missing or empty

  std::string to_tsv(const GenOptions& opt) const;
};

// Prompt processed once; beams and query states extend its KV cache.
struct PromptState {
  KvCache cache;
  std::vector<double> last_y;
};
PromptState process_prompt(const Model& model, const KvCache* base,
                           const std::vector<TokenUnit>& extra_units);

// Width-K beam over level-masked SID logits. Intermediate levels keep every
// candidate while the pool is at most beam_exact_cap / K_vocab wide, so small
// configurations match exhaustive enumeration exactly.
std::vector<BeamCandidate> beam_search(const Model& model,
                                       const PromptState& prompt,
                                       std::int64_t k, std::int64_t ell,
                                       std::int64_t exact_cap,
                                       bool* flagged = nullptr);

// h_k for one prefix: the query-token hidden state after prompt + prefix + q.
std::vector<double> prefix_hidden_state(const Model& model,
                                        const PromptState& prompt,
                                        const SemanticId& prefix);
// All beams against the shared prompt cache.
void fill_hidden_states(const Model& model, const PromptState& prompt,
                        std::vector<BeamCandidate>& beams);

// Softmax over one bucket of cos * sigma / tau, where sigma is the population
// standard deviation of the beam scores (floored at 1e-6 unless disabled).
std::vector<double> apf_id_distribution(const std::vector<double>& cosines,
                                        const std::vector<double>& phis,
                                        double tau, bool sigma_floor = true,
                                        double* sigma_out = nullptr);

GenerationResult generate(const Model& model, const PrefixIndex& index,
                          const KvCache* base,
                          const std::vector<TokenUnit>& prompt_units,
                          const GenOptions& opt);

}  // namespace sigma
