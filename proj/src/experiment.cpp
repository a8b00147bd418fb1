#include "sigma/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "sigma/kernels.hpp"

namespace sigma {

namespace {

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << v;
  return os.str();
}

std::uint64_t hash_str(const std::string& s) { return fnv1a(s.data(), s.size()); }

bool stage_done(const std::filesystem::path& dir) {
  return std::filesystem::exists(dir / ".done");
}
void mark_done(const std::filesystem::path& dir) {
  write_text(dir / ".done", "ok\n");
}

std::string world_key(const WorldConfig& w) {
  std::ostringstream os;
  os << w.n_items << ',' << w.n_users << ',' << w.n_events << ',' << w.n_top
     << ',' << w.n_sub_per_top << ',' << w.n_style << ',' << w.n_season << ','
     << w.n_holiday << ',' << w.feat_dim << ',' << w.emb_dim << ','
     << w.total_minutes << ',' << w.interests_per_user << ','
     << fmt_double(w.pop_exponent) << ',' << fmt_double(w.latent_prob) << ','
     << fmt_double(w.season_boost) << ',' << fmt_double(w.holiday_boost) << ','
     << fmt_double(w.visual_missing_rate) << ',' << w.uniform_interests << ','
     << w.seed;
  return os.str();
}

}  // namespace

std::uint64_t hash_dir(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != ".done" &&
        e.path().extension() != ".log")
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& f : files) {
    const std::string rel = std::filesystem::relative(f, dir).string();
    h = fnv1a(rel.data(), rel.size(), h);
    const std::string body = read_text(f);
    h = fnv1a(body.data(), body.size(), h);
  }
  return h;
}

const char* baseline_name(BaselineKind k) {
  switch (k) {
    case BaselineKind::Popularity: return "popularity";
    case BaselineKind::AutoregressiveID: return "autoregressive_id";
    case BaselineKind::GR_SID: return "gr_sid";
    case BaselineKind::GR_ID: return "gr_id";
  }
  return "popularity";
}

VariantSpec variant_from_name(const std::string& name) {
  VariantSpec v;
  v.name = name;
  if (name == "full") return v;
  if (name == "no_grounding") v.no_grounding = true;
  else if (name == "no_apf") v.no_apf = true;
  else if (name == "no_pretrained_emb") v.no_pretrained_emb = true;
  else if (name == "global_negatives") v.global_negatives = true;
  else if (name == "fewer_negatives") v.fewer_negatives = true;
  else if (name == "sid2") v.ell = 2;
  else if (name == "sid4") v.ell = 4;
  else throw std::invalid_argument("unknown variant: " + name);
  return v;
}

PipelineConfig pipeline_from_config(const Config& c) {
  PipelineConfig p;
  p.seed = static_cast<std::uint64_t>(c.get_int("seed", 42));

  p.world.n_items = c.get_int("items", 10000);
  p.world.n_users = c.get_int("users", 2000);
  p.world.n_events = c.get_int("events", 200000);
  p.world.n_top = c.get_int("n_top", 8);
  p.world.n_sub_per_top = c.get_int("n_sub_per_top", 4);
  p.world.n_style = c.get_int("n_style", 6);
  p.world.n_season = c.get_int("n_season", 4);
  p.world.n_holiday = c.get_int("n_holiday", 4);
  p.world.feat_dim = c.get_int("feat_dim", 32);
  p.world.emb_dim = c.get_int("emb_dim", 64);
  p.world.total_minutes = c.get_int("total_minutes", 2880);
  p.world.interests_per_user = c.get_int("interests_per_user", 3);
  p.world.pop_exponent = c.get_double("pop_exponent", 0.6);
  p.world.latent_prob = c.get_double("latent_prob", 0.08);
  p.world.season_boost = c.get_double("season_boost", 2.0);
  p.world.holiday_boost = c.get_double("holiday_boost", 3.0);
  p.world.visual_missing_rate = c.get_double("visual_missing_rate", 0.1);
  p.world.uniform_interests = c.get_bool("uniform_interests", false);
  p.world.seed = p.seed;

  const double tau = c.get_double("tau", 0.05);
  p.grounding.tau = tau;
  p.grounding.batch = c.get_int("grounding_batch", 256);
  p.grounding.steps = c.get_int("grounding_steps", 300);
  p.grounding.hidden = c.get_int("grounding_hidden", 64);
  p.grounding.out_dim = c.get_int("text_dim", 64);
  p.grounding.lr = c.get_double("grounding_lr", 1e-3);
  p.grounding.w_cl = c.get_double("w_cl", 1.0);
  p.grounding.w_kd = c.get_double("w_kd", 1.0);
  p.grounding.seed = p.seed + 1;
  const std::int64_t per_view = c.get_int("pairs_per_view", 5000);
  p.pair_mix = {{View::Semantic, per_view},
                {View::Visual, per_view},
                {View::Knowledge, per_view},
                {View::Collaborative, per_view}};

  p.rq.levels = c.get_int("levels", 4);
  p.rq.codebook_size = c.get_int("codebook_size", 256);
  p.rq.dim = p.grounding.out_dim;
  p.rq.beta = c.get_double("rq_beta", 0.25);
  p.rq.epochs = c.get_int("rq_epochs", 6);
  p.rq.batch = c.get_int("rq_batch", 512);
  p.rq.lr = c.get_double("rq_lr", 1e-3);
  p.rq.identity_codec = c.get_bool("rq_identity", false);
  p.rq.kmeans_iters = c.get_int("rq_kmeans_iters", 8);
  p.rq.seed = p.seed + 2;

  p.model.hidden = c.get_int("hidden", 128);
  p.model.blocks = c.get_int("blocks", 2);
  p.model.heads = c.get_int("heads", 4);
  p.model.max_seq = c.get_int("max_seq", 256);
  p.model.ffn_mult = c.get_int("ffn_mult", 4);
  p.model.fused_dim = c.get_int("fused_dim", 128);
  p.model.emb_dim = p.world.emb_dim;
  p.model.prefix_len = c.get_int("prefix_len", 1);

  p.sft.steps = c.get_int("steps", 1000);
  p.sft.batch = c.get_int("batch", 16);
  p.sft.lr = c.get_double("lr", 3e-4);
  p.sft.warmup_steps = c.get_int("warmup", 50);
  p.sft.weight_decay = c.get_double("weight_decay", 0.01);
  p.sft.tau = tau;
  p.sft.w_ntp = c.get_double("w_ntp", 1.0);
  p.sft.w_id = c.get_double("w_id", 1.0);
  p.sft.negatives = c.get_int("negatives", 256);
  p.sft.shared_negatives = c.get_int("shared_negatives", 32);
  p.sft.max_history = c.get_int("max_history", 8);
  p.sft.seed = p.seed + 3;

  p.gen.beam_width = c.get_int("beams", 10);
  p.gen.per_beam = c.get_int("per_beam", 50);
  p.gen.top_n = c.get_int("top_n", 20);
  p.gen.tau = tau;
  p.gen.sigma_floor = c.get_bool("sigma_floor", true);
  p.gen.renorm_beams = c.get_bool("renorm_beams", false);
  p.gen.beam_exact_cap = c.get_int("beam_exact_cap", 4096);
  p.gen.ell = p.model.prefix_len;

  p.train_per_task = c.get_int("train_per_task", 2000);
  p.eval_per_task = c.get_int("eval_per_task", 100);
  p.max_history = p.sft.max_history;
  p.eval_split = c.get_double("eval_split", 0.9);
  return p;
}

Pipeline::Pipeline(PipelineConfig cfg, std::filesystem::path out_dir)
    : cfg_(std::move(cfg)), out_(std::move(out_dir)) {
  std::filesystem::create_directories(out_);
}

std::int64_t Pipeline::split_ts() const {
  return static_cast<std::int64_t>(cfg_.eval_split *
                                   static_cast<double>(cfg_.world.total_minutes) *
                                   60.0);
}

const World& Pipeline::world() {
  if (!world_loaded_) {
    const StageInfo s = stage_world();
    world_ = World::load(s.dir);
    world_loaded_ = true;
  }
  return world_;
}

const std::vector<InstructionSample>& Pipeline::eval_samples() {
  if (!eval_built_) {
    DatasetOptions opt;
    opt.max_history = cfg_.max_history;
    opt.ts_begin = split_ts();
    opt.ts_end = -1;
    std::map<Task, std::int64_t> mix;
    for (std::int64_t t = 0; t < kNumTasks; ++t)
      mix[static_cast<Task>(t)] = cfg_.eval_per_task;
    eval_samples_ = build_sft_dataset(world(), mix, cfg_.seed + 9, opt);
    eval_built_ = true;
  }
  return eval_samples_;
}

StageInfo Pipeline::stage_world() {
  StageInfo info;
  info.name = "world";
  info.dir = out_ / ("world_" + hex(hash_str(world_key(cfg_.world))));
  if (!stage_done(info.dir)) {
    const World w = generate_world(cfg_.world);
    w.save(info.dir);
    mark_done(info.dir);
  } else {
    info.cached = true;
  }
  info.artifact_hash = hash_dir(info.dir);
  return info;
}

StageInfo Pipeline::stage_grounding(bool no_grounding) {
  const StageInfo w = stage_world();
  std::ostringstream key;
  key << world_key(cfg_.world) << '|' << no_grounding << '|'
      << cfg_.grounding.batch << ',' << cfg_.grounding.steps << ','
      << cfg_.grounding.hidden << ',' << cfg_.grounding.out_dim << ','
      << fmt_double(cfg_.grounding.lr) << ',' << fmt_double(cfg_.grounding.tau)
      << ',' << fmt_double(cfg_.grounding.w_cl) << ','
      << fmt_double(cfg_.grounding.w_kd) << ',' << cfg_.grounding.seed;
  for (const auto& [view, count] : cfg_.pair_mix) key << ',' << count;

  StageInfo info;
  info.name = "grounding";
  info.dir = out_ / ("grounding_" + hex(hash_str(key.str())));
  if (!stage_done(info.dir)) {
    std::filesystem::create_directories(info.dir);
    const World& wld = world();
    if (no_grounding) {
      // Ablation: random embeddings in place of the trained ones.
      Rng rng(cfg_.grounding.seed ^ 0xabcdef);
      Mat emb(wld.cfg.n_items, cfg_.grounding.out_dim);
      emb.randn(rng, 1.0);
      write_tensor(info.dir / "text_emb.sgt", emb);
      write_text(info.dir / "pairs.tsv", "");
    } else {
      const auto pairs =
          build_relevance_pairs(wld, cfg_.pair_mix, cfg_.seed + 21);
      save_pairs(info.dir / "pairs.tsv", pairs);
      const auto res =
          train_grounding(wld, pairs, wld.teacher_id, cfg_.grounding);
      write_tensor(info.dir / "text_emb.sgt", res.embeddings);
      std::ostringstream log;
      for (std::size_t i = 0; i < res.cl_curve.size(); ++i)
        log << i << '\t' << fmt_double(res.cl_curve[i]) << '\t'
            << fmt_double(res.kd_curve[i]) << '\n';
      write_text(info.dir / "train.log", log.str());
    }
    std::ostringstream ids;
    for (std::int64_t i = 0; i < wld.cfg.n_items; ++i) ids << i << '\n';
    write_text(info.dir / "ids.txt", ids.str());
    mark_done(info.dir);
  } else {
    info.cached = true;
  }
  info.artifact_hash = hash_dir(info.dir);
  return info;
}

StageInfo Pipeline::stage_quantizer(const StageInfo& grounding) {
  std::ostringstream key;
  key << hex(grounding.artifact_hash) << '|' << cfg_.rq.levels << ','
      << cfg_.rq.codebook_size << ',' << fmt_double(cfg_.rq.beta) << ','
      << cfg_.rq.epochs << ',' << cfg_.rq.batch << ','
      << fmt_double(cfg_.rq.lr) << ',' << cfg_.rq.identity_codec << ','
      << cfg_.rq.kmeans_iters << ',' << cfg_.rq.seed;
  StageInfo info;
  info.name = "quantizer";
  info.dir = out_ / ("quantizer_" + hex(hash_str(key.str())));
  if (!stage_done(info.dir)) {
    std::filesystem::create_directories(info.dir);
    const Mat emb = read_matrix(grounding.dir / "text_emb.sgt");
    RqVaeConfig rq = cfg_.rq;
    rq.dim = emb.cols;
    RqVaeStats stats;
    const RqVaeModel model = train_rqvae(emb, rq, &stats);
    model.save(info.dir / "model");
    const SidAssignment assign = assign_catalog(model, emb);
    std::vector<std::int64_t> ids(assign.sids.size());
    std::iota(ids.begin(), ids.end(), 0);
    save_sids(info.dir / "sids.tsv", ids, assign.sids);
    std::ostringstream hist;
    for (const auto& [prefix, count] : assign.prefix1_hist)
      hist << 1 << '\t' << prefix[0] << '\t' << count << '\n';
    for (const auto& [prefix, count] : assign.prefix2_hist)
      hist << 2 << '\t' << prefix[0] << ',' << prefix[1] << '\t' << count
           << '\n';
    write_text(info.dir / "bucket_hist.tsv", hist.str());
    std::ostringstream st;
    st << "recon_mse = " << fmt_double(stats.recon_mse) << "\n";
    for (std::size_t t = 0; t < stats.utilization.size(); ++t)
      st << "utilization_" << t << " = " << fmt_double(stats.utilization[t])
         << "\n";
    write_text(info.dir / "stats.txt", st.str());
    mark_done(info.dir);
  } else {
    info.cached = true;
  }
  info.artifact_hash = hash_dir(info.dir);
  return info;
}

ItemEmbeddingTable Pipeline::make_table(const StageInfo& grounding) const {
  ItemEmbeddingTable table;
  table.id_emb = world_.teacher_id;
  table.text_emb = read_matrix(grounding.dir / "text_emb.sgt");
  table.img_emb = world_.visual;
  table.has_img = world_.has_visual;
  return table;
}

StageInfo Pipeline::stage_sft(const VariantSpec& v, const StageInfo& quantizer) {
  const std::int64_t ell = v.ell > 0 ? v.ell : cfg_.model.prefix_len;
  SftConfig sft = cfg_.sft;
  sft.global_negatives = v.global_negatives;
  if (v.fewer_negatives) sft.negatives = std::max<std::int64_t>(4, sft.negatives / 8);
  sft.layout.ell = ell;

  std::ostringstream key;
  key << hex(quantizer.artifact_hash) << '|' << ell << ','
      << v.no_pretrained_emb << ',' << sft.global_negatives << ','
      << sft.negatives << ',' << sft.shared_negatives << ',' << sft.steps
      << ',' << sft.batch << ',' << fmt_double(sft.lr) << ','
      << sft.warmup_steps << ',' << fmt_double(sft.weight_decay) << ','
      << fmt_double(sft.tau) << ',' << fmt_double(sft.w_ntp) << ','
      << fmt_double(sft.w_id) << ',' << sft.max_history << ',' << sft.seed
      << '|' << cfg_.model.hidden << ',' << cfg_.model.blocks << ','
      << cfg_.model.heads << ',' << cfg_.model.max_seq << ','
      << cfg_.model.ffn_mult << ',' << cfg_.model.fused_dim << '|'
      << cfg_.train_per_task;
  StageInfo info;
  info.name = "sft";
  info.dir = out_ / ("sft_" + hex(hash_str(key.str())));
  if (!stage_done(info.dir)) {
    std::filesystem::create_directories(info.dir);
    const World& wld = world();
    const auto sids = load_sids(quantizer.dir / "sids.tsv");

    DatasetOptions opt;
    opt.max_history = cfg_.max_history;
    opt.ts_end = split_ts();
    std::map<Task, std::int64_t> mix;
    for (std::int64_t t = 0; t < kNumTasks; ++t)
      mix[static_cast<Task>(t)] = cfg_.train_per_task;
    const auto dataset = build_sft_dataset(wld, mix, cfg_.seed + 5, opt);
    save_dataset(info.dir / "sft_dataset.tsv", dataset, wld);

    ModelConfig mc = cfg_.model;
    mc.prefix_len = ell;
    mc.free_item_emb = v.no_pretrained_emb;
    const StageInfo grounding = stage_grounding(v.no_grounding);
    const ItemEmbeddingTable table = make_table(grounding);
    Vocabulary vocab = Vocabulary::build(
        wld.cfg.n_subcats(), wld.cfg.n_top, wld.cfg.n_season,
        wld.cfg.n_holiday, cfg_.rq.levels, cfg_.rq.codebook_size);
    Model model;
    Rng rng(cfg_.seed + 7);
    model.init(mc, vocab, table, rng);
    vocab.save_manifest(info.dir / "vocab.txt");

    const SftResult res = sft_train(model, wld, sids, dataset, sft);
    if (res.aborted)
      throw std::runtime_error("sft_train aborted (non-finite loss) at step " +
                               std::to_string(res.abort_step));
    model.save(info.dir / "checkpoint");
    std::ostringstream log;
    for (std::size_t i = 0; i < res.loss_curve.size(); ++i)
      log << i << '\t' << fmt_double(res.loss_curve[i]) << '\n';
    write_text(info.dir / "train.log", log.str());
    mark_done(info.dir);
  } else {
    info.cached = true;
  }
  info.artifact_hash = hash_dir(info.dir);
  return info;
}

MetricsReport Pipeline::evaluate_generation(const Model& model,
                                            const PrefixIndex& index,
                                            const std::vector<SemanticId>& sids,
                                            const GenOptions& gen,
                                            const std::string& config_id) {
  const auto t0 = std::chrono::steady_clock::now();
  MetricsReport report;
  report.config_id = config_id;
  LayoutOptions lay;
  lay.ell = model.cfg.prefix_len;
  lay.with_target = false;
  std::map<Task, std::array<double, 4>> hits;
  std::map<Task, std::int64_t> counts;
  const auto& samples = eval_samples();
  for (const auto& s : samples) {
    const auto units = instruction_units(model.vocab, world(), sids, s, lay);
    const auto res = generate(model, index, nullptr, units, gen);
    std::vector<std::int64_t> preds;
    for (const auto& item : res.items) preds.push_back(item.id);
    auto& h = hits[s.task];
    for (std::size_t i = 0; i < kHrCutoffs.size(); ++i)
      h[i] += hr_at_k(preds, s.target, kHrCutoffs[i], sids);
    ++counts[s.task];
  }
  for (auto& [task, h] : hits) {
    for (auto& v : h) v /= static_cast<double>(counts[task]);
    report.per_task[task] = h;
  }
  report.counts = counts;
  report.finalize();
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return report;
}

double Pipeline::prefix_accuracy(const Model& model, const PrefixIndex& index,
                                 std::int64_t ell_gen) {
  (void)index;
  LayoutOptions lay;
  lay.ell = model.cfg.prefix_len;
  lay.with_target = false;
  const auto& samples = eval_samples();
  std::int64_t hits = 0, total = 0;
  for (const auto& s : samples) {
    const auto units =
        instruction_units(model.vocab, world(), eval_sids_, s, lay);
    const PromptState prompt = process_prompt(model, nullptr, units);
    const auto beams =
        beam_search(model, prompt, 1, ell_gen, cfg_.gen.beam_exact_cap);
    bool ok = !beams.empty();
    for (std::int64_t t = 0; ok && t < ell_gen; ++t)
      ok = beams[0].prefix[t] == eval_sids_[s.target][t];
    hits += ok;
    ++total;
  }
  return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

VariantResult Pipeline::run_variant(const VariantSpec& v) {
  VariantResult out;
  const StageInfo sw = stage_world();
  const StageInfo sg = stage_grounding(v.no_grounding);
  const StageInfo sq = stage_quantizer(sg);
  const StageInfo ss = stage_sft(v, sq);

  const Model model = Model::load(ss.dir / "checkpoint");
  const auto sids = load_sids(sq.dir / "sids.tsv");
  eval_sids_ = sids;

  // Index over the trained fused embeddings.
  const std::int64_t ell = v.ell > 0 ? v.ell : cfg_.model.prefix_len;
  StageInfo si;
  si.name = "index";
  si.dir = out_ / ("index_" + hex(hash_str(hex(ss.artifact_hash) + "|" +
                                           std::to_string(ell))));
  if (!stage_done(si.dir)) {
    const Mat fused = model.all_fused_items();
    PrefixIndex index = PrefixIndex::build(sids, fused, ell);
    index.save(si.dir);
    mark_done(si.dir);
  } else {
    si.cached = true;
  }
  si.artifact_hash = hash_dir(si.dir);
  const PrefixIndex index = PrefixIndex::load(si.dir);

  GenOptions gen = cfg_.gen;
  gen.ell = ell;
  gen.top1_prefix_only = v.no_apf;
  out.report = evaluate_generation(model, index, sids, gen, v.name);
  if (ell >= 2) {
    out.prefix1_accuracy = prefix_accuracy(model, index, 1);
    out.prefix2_accuracy = prefix_accuracy(model, index, 2);
  }
  out.stages = {sw, sg, sq, ss, si};
  return out;
}

MetricsReport Pipeline::run_baseline(BaselineKind kind) {
  const StageInfo sg = stage_grounding(false);
  const StageInfo sq = stage_quantizer(sg);
  const auto sids = load_sids(sq.dir / "sids.tsv");
  eval_sids_ = sids;
  const World& wld = world();

  if (kind == BaselineKind::Popularity) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto counts = wld.item_counts(split_ts());
    std::vector<std::int64_t> order(wld.items.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
      if (counts[a] != counts[b]) return counts[a] > counts[b];
      return a < b;
    });
    order.resize(std::min<std::size_t>(order.size(), 20));
    MetricsReport report;
    report.config_id = baseline_name(kind);
    std::map<Task, std::array<double, 4>> hits;
    std::map<Task, std::int64_t> n;
    for (const auto& s : eval_samples()) {
      auto& h = hits[s.task];
      for (std::size_t i = 0; i < kHrCutoffs.size(); ++i)
        h[i] += hr_at_k(order, s.target, kHrCutoffs[i], sids);
      ++n[s.task];
    }
    for (auto& [task, h] : hits) {
      for (auto& v : h) v /= static_cast<double>(n[task]);
      report.per_task[task] = h;
    }
    report.counts = n;
    report.finalize();
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    return report;
  }

  // Trained baselines share the SFT dataset and training budget.
  DatasetOptions opt;
  opt.max_history = cfg_.max_history;
  opt.ts_end = split_ts();
  std::map<Task, std::int64_t> mix;
  for (std::int64_t t = 0; t < kNumTasks; ++t)
    mix[static_cast<Task>(t)] = cfg_.train_per_task;
  const auto dataset = build_sft_dataset(wld, mix, cfg_.seed + 5, opt);
  const ItemEmbeddingTable table = make_table(sg);

  const auto t0 = std::chrono::steady_clock::now();
  MetricsReport report;
  report.config_id = baseline_name(kind);
  std::map<Task, std::array<double, 4>> hits;
  std::map<Task, std::int64_t> n;

  if (kind == BaselineKind::AutoregressiveID) {
    // Item-id vocabulary autoregressive transformer: a single "SID level"
    // whose codes are the item ids themselves.
    std::vector<SemanticId> id_sids(wld.items.size());
    for (std::size_t i = 0; i < id_sids.size(); ++i)
      id_sids[i] = {static_cast<std::int32_t>(i)};
    Vocabulary vocab =
        Vocabulary::build(wld.cfg.n_subcats(), wld.cfg.n_top, wld.cfg.n_season,
                          wld.cfg.n_holiday, 1, wld.cfg.n_items);
    ModelConfig mc = cfg_.model;
    mc.prefix_len = 1;
    Model model;
    Rng rng(cfg_.seed + 13);
    model.init(mc, vocab, table, rng);
    SftConfig sft = cfg_.sft;
    sft.w_id = 0.0;
    sft.layout = {1, false, true, true};
    const auto res = sft_train(model, wld, id_sids, dataset, sft);
    if (res.aborted) throw std::runtime_error("autoregressive_id training aborted");

    LayoutOptions lay = sft.layout;
    lay.with_target = false;
    for (const auto& s : eval_samples()) {
      const auto units = instruction_units(vocab, wld, id_sids, s, lay);
      const PromptState prompt = process_prompt(model, nullptr, units);
      const auto beams =
          beam_search(model, prompt, 20, 1, cfg_.gen.beam_exact_cap);
      std::vector<std::int64_t> preds;
      for (const auto& b : beams) preds.push_back(b.prefix[0]);
      auto& h = hits[s.task];
      for (std::size_t i = 0; i < kHrCutoffs.size(); ++i)
        h[i] += hr_at_k(preds, s.target, kHrCutoffs[i], sids);
      ++n[s.task];
    }
  } else if (kind == BaselineKind::GR_SID) {
    Vocabulary vocab = Vocabulary::build(
        wld.cfg.n_subcats(), wld.cfg.n_top, wld.cfg.n_season, wld.cfg.n_holiday,
        cfg_.rq.levels, cfg_.rq.codebook_size);
    ModelConfig mc = cfg_.model;
    mc.prefix_len = cfg_.rq.levels;
    Model model;
    Rng rng(cfg_.seed + 13);
    model.init(mc, vocab, table, rng);
    SftConfig sft = cfg_.sft;
    sft.w_id = 0.0;
    sft.layout = {cfg_.rq.levels, false, true, true};
    const auto res = sft_train(model, wld, sids, dataset, sft);
    if (res.aborted) throw std::runtime_error("gr_sid training aborted");

    LayoutOptions lay = sft.layout;
    lay.with_target = false;
    for (const auto& s : eval_samples()) {
      const auto units = instruction_units(vocab, wld, sids, s, lay);
      const PromptState prompt = process_prompt(model, nullptr, units);
      const auto beams = beam_search(model, prompt, 20, cfg_.rq.levels,
                                     cfg_.gen.beam_exact_cap);
      std::vector<SemanticId> pred_sids;
      for (const auto& b : beams) pred_sids.push_back(b.prefix);
      auto& h = hits[s.task];
      for (std::size_t i = 0; i < kHrCutoffs.size(); ++i)
        h[i] += hr_at_k_sids(pred_sids, sids[s.target], kHrCutoffs[i]);
      ++n[s.task];
    }
  } else {  // GR_ID
    Vocabulary vocab = Vocabulary::build(
        wld.cfg.n_subcats(), wld.cfg.n_top, wld.cfg.n_season, wld.cfg.n_holiday,
        cfg_.rq.levels, cfg_.rq.codebook_size);
    ModelConfig mc = cfg_.model;
    mc.prefix_len = 1;
    Model model;
    Rng rng(cfg_.seed + 13);
    model.init(mc, vocab, table, rng);
    SftConfig sft = cfg_.sft;
    sft.w_ntp = 0.0;
    sft.global_negatives = true;
    sft.layout = {1, true, false, true};
    const auto res = sft_train(model, wld, sids, dataset, sft);
    if (res.aborted) throw std::runtime_error("gr_id training aborted");

    const Mat fused = model.all_fused_items();
    Mat unit = fused;
    for (std::int64_t i = 0; i < unit.rows; ++i) {
      const double nm = norm2(unit.row(i), unit.cols);
      if (nm > 0)
        for (std::int64_t j = 0; j < unit.cols; ++j) unit.at(i, j) /= nm;
    }
    LayoutOptions lay = sft.layout;
    lay.with_target = true;  // the query token closes the prompt
    for (const auto& s : eval_samples()) {
      const auto layd = training_layout(vocab, wld, sids, s, lay);
      const Mat y = model.forward(layd.units);
      const auto h = model.query_state(y.row(layd.query_pos));
      std::vector<double> scores(unit.rows);
      dot_scan(scores.data(), h.data(), unit.d.data(), unit.rows, unit.cols);
      std::vector<std::int64_t> order(unit.rows);
      std::iota(order.begin(), order.end(), 0);
      std::partial_sort(order.begin(), order.begin() + 20, order.end(),
                        [&](std::int64_t a, std::int64_t b) {
                          if (scores[a] != scores[b])
                            return scores[a] > scores[b];
                          return a < b;
                        });
      order.resize(20);
      auto& hh = hits[s.task];
      for (std::size_t i = 0; i < kHrCutoffs.size(); ++i)
        hh[i] += hr_at_k(order, s.target, kHrCutoffs[i], sids);
      ++n[s.task];
    }
  }

  for (auto& [task, h] : hits) {
    for (auto& v : h) v /= static_cast<double>(n[task]);
    report.per_task[task] = h;
  }
  report.counts = n;
  report.finalize();
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return report;
}

ExperimentResult run_experiment(const PipelineConfig& cfg,
                                const std::vector<VariantSpec>& variants,
                                const std::vector<BaselineKind>& baselines,
                                const std::filesystem::path& out_dir) {
  Pipeline pipe(cfg, out_dir);
  ExperimentResult res;
  std::ostringstream csv;
  csv << metrics_csv_header();
  std::ostringstream hashes;
  for (const auto& v : variants) {
    VariantResult vr = pipe.run_variant(v);
    csv << metrics_csv_rows(vr.report);
    for (const auto& st : vr.stages)
      hashes << v.name << '\t' << st.name << '\t' << hex(st.artifact_hash)
             << '\n';
    res.variants.push_back(std::move(vr));
  }
  for (const auto b : baselines) {
    MetricsReport r = pipe.run_baseline(b);
    csv << metrics_csv_rows(r);
    res.baselines.push_back(std::move(r));
  }
  res.csv = csv.str();
  write_text(out_dir / "metrics.csv", res.csv);
  write_text(out_dir / "stage_hashes.tsv", hashes.str());
  return res;
}

}  // namespace sigma
