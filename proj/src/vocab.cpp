#include "sigma/vocab.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "sigma/kernels.hpp"

namespace sigma {

const char* task_name(Task t) {
  switch (t) {
    case Task::JustForYou: return "just_for_you";
    case Task::Query: return "query";
    case Task::Category: return "category";
    case Task::Longtail: return "longtail";
    case Task::Discover: return "discover";
    case Task::Season: return "season";
    case Task::Holiday: return "holiday";
  }
  return "just_for_you";
}

Task parse_task(const std::string& s) {
  for (std::int64_t t = 0; t < kNumTasks; ++t)
    if (s == task_name(static_cast<Task>(t))) return static_cast<Task>(t);
  throw std::runtime_error("unknown task: " + s);
}

Vocabulary Vocabulary::build(std::int64_t n_query_clusters,
                             std::int64_t n_categories, std::int64_t n_seasons,
                             std::int64_t n_holidays, std::int64_t sid_levels,
                             std::int64_t sid_k) {
  Vocabulary v;
  v.n_query_clusters = n_query_clusters;
  v.n_categories = n_categories;
  v.n_seasons = n_seasons;
  v.n_holidays = n_holidays;
  v.sid_levels = sid_levels;
  v.sid_k = sid_k;
  std::int32_t at = 4;  // after the specials
  v.task_offset = at;
  at += static_cast<std::int32_t>(kNumTasks);
  v.age_offset = at;
  at += static_cast<std::int32_t>(v.n_age);
  v.gender_offset = at;
  at += static_cast<std::int32_t>(v.n_gender);
  v.region_offset = at;
  at += static_cast<std::int32_t>(v.n_region);
  v.query_offset = at;
  at += static_cast<std::int32_t>(n_query_clusters);
  v.category_offset = at;
  at += static_cast<std::int32_t>(n_categories);
  v.season_offset = at;
  at += static_cast<std::int32_t>(n_seasons);
  v.holiday_offset = at;
  at += static_cast<std::int32_t>(n_holidays);
  v.sid_offset = at;
  v.size = at + sid_levels * sid_k;
  return v;
}

namespace {
std::int32_t checked(std::int64_t v, std::int64_t n, const char* what) {
  if (v < 0 || v >= n)
    throw std::invalid_argument(std::string(what) + " out of range");
  return static_cast<std::int32_t>(v);
}
}  // namespace

std::int32_t Vocabulary::task_token(Task t) const {
  return task_offset + checked(static_cast<std::int64_t>(t), kNumTasks, "task");
}
std::int32_t Vocabulary::age_token(std::int32_t a) const {
  return age_offset + checked(a, n_age, "age");
}
std::int32_t Vocabulary::gender_token(std::int32_t g) const {
  return gender_offset + checked(g, n_gender, "gender");
}
std::int32_t Vocabulary::region_token(std::int32_t r) const {
  return region_offset + checked(r, n_region, "region");
}
std::int32_t Vocabulary::query_token(std::int32_t cluster) const {
  return query_offset + checked(cluster, n_query_clusters, "query cluster");
}
std::int32_t Vocabulary::category_token(std::int32_t cat) const {
  return category_offset + checked(cat, n_categories, "category");
}
std::int32_t Vocabulary::season_token(std::int32_t s) const {
  return season_offset + checked(s, n_seasons, "season");
}
std::int32_t Vocabulary::holiday_token(std::int32_t h) const {
  return holiday_offset + checked(h, n_holidays, "holiday");
}

std::int32_t Vocabulary::sid_token(std::int64_t level, std::int32_t code) const {
  if (level < 0 || level >= sid_levels)
    throw std::invalid_argument("sid level out of range");
  return sid_offset + static_cast<std::int32_t>(level * sid_k) +
         checked(code, sid_k, "sid code");
}

bool Vocabulary::is_sid(std::int32_t token) const {
  return token >= sid_offset && token < size;
}

std::int64_t Vocabulary::sid_level_of(std::int32_t token) const {
  if (!is_sid(token)) throw std::invalid_argument("not a SID token");
  return (token - sid_offset) / sid_k;
}

std::int32_t Vocabulary::sid_code_of(std::int32_t token) const {
  if (!is_sid(token)) throw std::invalid_argument("not a SID token");
  return static_cast<std::int32_t>((token - sid_offset) % sid_k);
}

TokenRole Vocabulary::role_of(std::int32_t token) const {
  if (token < task_offset) return TokenRole::Special;
  if (token < age_offset) return TokenRole::TaskTag;
  if (token < query_offset) return TokenRole::Profile;
  if (token < sid_offset) return TokenRole::Constraint;
  return TokenRole::Sid;
}

std::string Vocabulary::name_of(std::int32_t token) const {
  switch (token) {
    case kPad: return "<pad>";
    case kBos: return "<bos>";
    case kEos: return "<eos>";
    case kQuery: return "<query>";
    default: break;
  }
  if (token < age_offset)
    return std::string("task:") + task_name(static_cast<Task>(token - task_offset));
  if (token < gender_offset) return "age:" + std::to_string(token - age_offset);
  if (token < region_offset)
    return "gender:" + std::to_string(token - gender_offset);
  if (token < query_offset)
    return "region:" + std::to_string(token - region_offset);
  if (token < category_offset)
    return "query:" + std::to_string(token - query_offset);
  if (token < season_offset)
    return "category:" + std::to_string(token - category_offset);
  if (token < holiday_offset)
    return "season:" + std::to_string(token - season_offset);
  if (token < sid_offset)
    return "holiday:" + std::to_string(token - holiday_offset);
  return "sid:" + std::to_string(sid_level_of(token)) + ":" +
         std::to_string(sid_code_of(token));
}

void Vocabulary::save_manifest(const std::filesystem::path& path) const {
  std::ostringstream os;
  static const char* role_names[] = {"special", "profile", "task",
                                     "constraint", "sid", "item"};
  for (std::int64_t t = 0; t < size; ++t) {
    const auto token = static_cast<std::int32_t>(t);
    os << token << '\t' << name_of(token) << '\t'
       << role_names[static_cast<int>(role_of(token))] << '\n';
  }
  write_text(path, os.str());
}

std::uint64_t Vocabulary::hash() const {
  std::ostringstream os;
  for (std::int64_t t = 0; t < size; ++t)
    os << t << ':' << name_of(static_cast<std::int32_t>(t)) << ';';
  const std::string s = os.str();
  return fnv1a(s.data(), s.size());
}

HybridTokenSeq tokenize_item(const Vocabulary& vocab, const SemanticId& sid,
                             std::int64_t item_id, std::int64_t ell) {
  if (sid.empty()) throw std::invalid_argument("tokenize_item: item has no SID");
  if (ell < 1 || ell > static_cast<std::int64_t>(sid.size()))
    throw std::invalid_argument("tokenize_item: bad prefix length");
  HybridTokenSeq seq;
  seq.item_id = item_id;
  for (std::int64_t t = 0; t < ell; ++t)
    seq.sid_tokens.push_back(vocab.sid_token(t, sid[t]));
  return seq;
}

std::pair<SemanticId, std::int64_t> detokenize_item(const Vocabulary& vocab,
                                                    const HybridTokenSeq& seq) {
  SemanticId codes;
  for (std::size_t t = 0; t < seq.sid_tokens.size(); ++t) {
    const auto token = seq.sid_tokens[t];
    if (vocab.sid_level_of(token) != static_cast<std::int64_t>(t))
      throw std::invalid_argument("detokenize_item: level/position mismatch");
    codes.push_back(vocab.sid_code_of(token));
  }
  return {codes, seq.item_id};
}

namespace {
double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
double gelu_grad(double x) {
  const double phi = std::exp(-0.5 * x * x) * 0.3989422804014326779;
  return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * phi;
}
}  // namespace

void FusionMlp::init(Rng& rng, std::int64_t emb_dim, std::int64_t fused_dim,
                     std::int64_t hidden_dim) {
  w1 = Mat(3 * emb_dim, fused_dim);
  b1 = Mat(1, fused_dim);
  w2 = Mat(fused_dim, fused_dim);
  b2 = Mat(1, fused_dim);
  up_w = Mat(fused_dim, hidden_dim);
  up_b = Mat(1, hidden_dim);
  img_missing = Mat(1, emb_dim);
  w1.randn(rng, 1.0 / std::sqrt(static_cast<double>(3 * emb_dim)));
  w2.randn(rng, 1.0 / std::sqrt(static_cast<double>(fused_dim)));
  up_w.randn(rng, 1.0 / std::sqrt(static_cast<double>(fused_dim)));
  img_missing.randn(rng, 0.02);
}

std::vector<double> FusionMlp::fuse(const ItemEmbeddingTable& table,
                                    std::int64_t item_id, Cache* cache) const {
  const std::int64_t e = emb_dim(), f = fused_dim();
  if (item_id < 0 || item_id >= table.id_emb.rows)
    throw std::invalid_argument("fuse: unknown item id");
  if (table.id_emb.cols != e || table.text_emb.cols != e ||
      table.img_emb.cols != e)
    throw std::invalid_argument("fuse: embedding dim mismatch");
  std::vector<double> in(3 * e);
  std::copy_n(table.id_emb.row(item_id), e, in.begin());
  std::copy_n(table.text_emb.row(item_id), e, in.begin() + e);
  const bool missing =
      !table.has_img.empty() && !table.has_img[item_id];
  if (missing)
    std::copy_n(img_missing.row(0), e, in.begin() + 2 * e);
  else
    std::copy_n(table.img_emb.row(item_id), e, in.begin() + 2 * e);

  std::vector<double> pre(f), fused(f);
  for (std::int64_t j = 0; j < f; ++j) {
    double s = b1.at(0, j);
    for (std::int64_t i = 0; i < 3 * e; ++i) s += in[i] * w1.at(i, j);
    pre[j] = s;
  }
  for (std::int64_t j = 0; j < f; ++j) {
    double s = b2.at(0, j);
    for (std::int64_t i = 0; i < f; ++i) s += gelu(pre[i]) * w2.at(i, j);
    fused[j] = s;
  }
  if (cache) {
    cache->input = in;
    cache->pre = pre;
    cache->fused = fused;
    cache->used_missing = missing;
  }
  return fused;
}

std::vector<double> FusionMlp::up_project(const std::vector<double>& fused) const {
  const std::int64_t f = fused_dim(), h = up_w.cols;
  std::vector<double> out(h);
  for (std::int64_t j = 0; j < h; ++j) {
    double s = up_b.at(0, j);
    for (std::int64_t i = 0; i < f; ++i) s += fused[i] * up_w.at(i, j);
    out[j] = s;
  }
  return out;
}

void FusionMlp::fuse_backward(const Cache& cache,
                              const std::vector<double>& d_fused,
                              FusionMlp& grads, double* d_input3) const {
  const std::int64_t e = emb_dim(), f = fused_dim();
  std::vector<double> act(f), d_act(f, 0.0);
  for (std::int64_t i = 0; i < f; ++i) act[i] = gelu(cache.pre[i]);
  for (std::int64_t j = 0; j < f; ++j) {
    grads.b2.at(0, j) += d_fused[j];
    for (std::int64_t i = 0; i < f; ++i) {
      grads.w2.at(i, j) += act[i] * d_fused[j];
      d_act[i] += w2.at(i, j) * d_fused[j];
    }
  }
  std::vector<double> d_pre(f);
  for (std::int64_t i = 0; i < f; ++i)
    d_pre[i] = d_act[i] * gelu_grad(cache.pre[i]);
  for (std::int64_t j = 0; j < f; ++j) {
    grads.b1.at(0, j) += d_pre[j];
    for (std::int64_t i = 0; i < 3 * e; ++i)
      grads.w1.at(i, j) += cache.input[i] * d_pre[j];
  }
  if (d_input3 || cache.used_missing) {
    std::vector<double> d_in(3 * e, 0.0);
    for (std::int64_t i = 0; i < 3 * e; ++i) {
      double s = 0.0;
      for (std::int64_t j = 0; j < f; ++j) s += w1.at(i, j) * d_pre[j];
      d_in[i] = s;
    }
    if (cache.used_missing)
      for (std::int64_t i = 0; i < e; ++i)
        grads.img_missing.at(0, i) += d_in[2 * e + i];
    if (d_input3)
      for (std::int64_t i = 0; i < 3 * e; ++i) d_input3[i] += d_in[i];
  }
}

Mat embed_item_sequence(const Vocabulary& vocab, const FusionMlp& mlp,
                        const ItemEmbeddingTable& table,
                        const HybridTokenSeq& seq, const Mat& token_table) {
  const std::int64_t ell = static_cast<std::int64_t>(seq.sid_tokens.size());
  const std::int64_t h = token_table.cols;
  Mat out(ell + 1, h);
  for (std::int64_t t = 0; t < ell; ++t) {
    const auto token = seq.sid_tokens[t];
    if (token < 0 || token >= vocab.size)
      throw std::invalid_argument("embed_item_sequence: bad token id");
    std::copy_n(token_table.row(token), h, out.row(t));
  }
  const auto fused = mlp.fuse(table, seq.item_id);
  const auto up = mlp.up_project(fused);
  std::copy(up.begin(), up.end(), out.row(ell));
  return out;
}

}  // namespace sigma
