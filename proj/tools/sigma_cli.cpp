// Command-line driver for the full pipeline. Stages read and write fixed
// subdirectories of --out-dir so they can be chained:
//   gen-data -> train-grounding -> fit-quantizer -> sft-train -> build-index
//   -> generate / evaluate / serve-sim
// run-experiment orchestrates everything with per-stage caching.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <numeric>
#include <sstream>

#include "sigma/experiment.hpp"
#include "sigma/serving.hpp"

namespace fs = std::filesystem;
using namespace sigma;

namespace {

struct GlobalArgs {
  std::string config_path;
  std::string out_dir = "out";
  std::int64_t seed = -1;
};

Config load_config(const GlobalArgs& g) {
  Config c;
  if (!g.config_path.empty()) c = Config::from_file(g.config_path);
  if (g.seed >= 0) c.set("seed", std::to_string(g.seed));
  return c;
}

World load_world(const GlobalArgs& g) {
  return World::load(fs::path(g.out_dir) / "world");
}

std::vector<SemanticId> load_catalog_sids(const GlobalArgs& g) {
  return load_sids(fs::path(g.out_dir) / "quantizer" / "sids.tsv");
}

ItemEmbeddingTable load_table(const GlobalArgs& g, const World& world) {
  ItemEmbeddingTable t;
  t.id_emb = world.teacher_id;
  t.text_emb = read_matrix(fs::path(g.out_dir) / "grounding" / "text_emb.sgt");
  t.img_emb = world.visual;
  t.has_img = world.has_visual;
  return t;
}

int cmd_gen_data(const GlobalArgs& g) {
  const PipelineConfig p = pipeline_from_config(load_config(g));
  const World w = generate_world(p.world);
  w.save(fs::path(g.out_dir) / "world");
  std::cout << "world: " << w.items.size() << " items, " << w.users.size()
            << " users, " << w.events.size() << " events\n";
  return 0;
}

int cmd_train_grounding(const GlobalArgs& g) {
  const PipelineConfig p = pipeline_from_config(load_config(g));
  const World w = load_world(g);
  const fs::path dir = fs::path(g.out_dir) / "grounding";
  fs::create_directories(dir);
  const auto pairs = build_relevance_pairs(w, p.pair_mix, p.seed + 21);
  save_pairs(dir / "pairs.tsv", pairs);
  const auto res = train_grounding(w, pairs, w.teacher_id, p.grounding);
  write_tensor(dir / "text_emb.sgt", res.embeddings);
  std::ostringstream ids;
  for (std::int64_t i = 0; i < w.cfg.n_items; ++i) ids << i << '\n';
  write_text(dir / "ids.txt", ids.str());
  std::ostringstream log;
  for (std::size_t i = 0; i < res.cl_curve.size(); ++i)
    log << i << '\t' << fmt_double(res.cl_curve[i]) << '\t'
        << fmt_double(res.kd_curve[i]) << '\n';
  write_text(dir / "train.log", log.str());
  std::cout << "grounding: " << pairs.size() << " pairs, final cl="
            << (res.cl_curve.empty() ? 0.0 : res.cl_curve.back())
            << " kd=" << (res.kd_curve.empty() ? 0.0 : res.kd_curve.back())
            << "\n";
  return 0;
}

int cmd_fit_quantizer(const GlobalArgs& g) {
  const PipelineConfig p = pipeline_from_config(load_config(g));
  const fs::path dir = fs::path(g.out_dir) / "quantizer";
  fs::create_directories(dir);
  const Mat emb = read_matrix(fs::path(g.out_dir) / "grounding" / "text_emb.sgt");
  RqVaeConfig rq = p.rq;
  rq.dim = emb.cols;
  RqVaeStats stats;
  const RqVaeModel model = train_rqvae(emb, rq, &stats);
  model.save(dir / "model");
  const SidAssignment assign = assign_catalog(model, emb);
  std::vector<std::int64_t> ids(assign.sids.size());
  std::iota(ids.begin(), ids.end(), 0);
  save_sids(dir / "sids.tsv", ids, assign.sids);
  std::ostringstream hist;
  for (const auto& [prefix, count] : assign.prefix1_hist)
    hist << 1 << '\t' << prefix[0] << '\t' << count << '\n';
  for (const auto& [prefix, count] : assign.prefix2_hist)
    hist << 2 << '\t' << prefix[0] << ',' << prefix[1] << '\t' << count << '\n';
  write_text(dir / "bucket_hist.tsv", hist.str());
  std::cout << "quantizer: recon_mse=" << stats.recon_mse << " utilization=";
  for (const double u : stats.utilization) std::cout << u << ' ';
  std::cout << "\n";
  return 0;
}

int cmd_sft_train(const GlobalArgs& g) {
  const PipelineConfig p = pipeline_from_config(load_config(g));
  const World w = load_world(g);
  const auto sids = load_catalog_sids(g);
  const fs::path dir = fs::path(g.out_dir) / "sft";
  fs::create_directories(dir);

  DatasetOptions opt;
  opt.max_history = p.max_history;
  opt.ts_end = static_cast<std::int64_t>(p.eval_split *
                                         p.world.total_minutes * 60.0);
  std::map<Task, std::int64_t> mix;
  for (std::int64_t t = 0; t < kNumTasks; ++t)
    mix[static_cast<Task>(t)] = p.train_per_task;
  const auto dataset = build_sft_dataset(w, mix, p.seed + 5, opt);
  save_dataset(dir / "sft_dataset.tsv", dataset, w);

  const Vocabulary vocab = Vocabulary::build(
      w.cfg.n_subcats(), w.cfg.n_top, w.cfg.n_season, w.cfg.n_holiday,
      p.rq.levels, p.rq.codebook_size);
  Model model;
  Rng rng(p.seed + 7);
  model.init(p.model, vocab, load_table(g, w), rng);
  vocab.save_manifest(dir / "vocab.txt");

  SftConfig sft = p.sft;
  sft.layout.ell = p.model.prefix_len;
  const SftResult res = sft_train(model, w, sids, dataset, sft);
  if (res.aborted) {
    std::cerr << "sft-train aborted with non-finite loss at step "
              << res.abort_step << "; last good checkpoint saved\n";
  }
  model.save(dir / "checkpoint");
  std::ostringstream log;
  for (std::size_t i = 0; i < res.loss_curve.size(); ++i)
    log << i << '\t' << fmt_double(res.loss_curve[i]) << '\n';
  write_text(dir / "train.log", log.str());
  std::cout << "sft: " << dataset.size() << " samples, final loss="
            << (res.loss_curve.empty() ? 0.0 : res.loss_curve.back()) << "\n";
  return res.aborted ? 1 : 0;
}

int cmd_build_index(const GlobalArgs& g) {
  const PipelineConfig p = pipeline_from_config(load_config(g));
  const Model model = Model::load(fs::path(g.out_dir) / "sft" / "checkpoint");
  const auto sids = load_catalog_sids(g);
  const Mat fused = model.all_fused_items();
  const PrefixIndex index =
      PrefixIndex::build(sids, fused, model.cfg.prefix_len);
  index.save(fs::path(g.out_dir) / "index");
  std::cout << "index: " << index.buckets().size() << " buckets over "
            << index.catalog_size() << " items (ell=" << index.ell() << ")\n";
  (void)p;
  return 0;
}

int cmd_generate(const GlobalArgs& g, std::int64_t user,
                 const std::string& task_str, std::int64_t constraint) {
  const PipelineConfig p = pipeline_from_config(load_config(g));
  const World w = load_world(g);
  const auto sids = load_catalog_sids(g);
  const Model model = Model::load(fs::path(g.out_dir) / "sft" / "checkpoint");
  const PrefixIndex index = PrefixIndex::load(fs::path(g.out_dir) / "index");

  InstructionSample s;
  s.user = user;
  s.task = parse_task(task_str);
  s.constraint = static_cast<std::int32_t>(constraint);
  for (const auto& e : w.events)
    if (e.user == user) s.history.push_back(e.item);
  if (static_cast<std::int64_t>(s.history.size()) > p.max_history)
    s.history.erase(s.history.begin(),
                    s.history.end() - p.max_history);

  LayoutOptions lay;
  lay.ell = model.cfg.prefix_len;
  lay.with_target = false;
  const auto units = instruction_units(model.vocab, w, sids, s, lay);
  GenOptions gen = p.gen;
  gen.ell = model.cfg.prefix_len;
  const GenerationResult res = generate(model, index, nullptr, units, gen);
  std::cout << res.to_tsv(gen);
  return 0;
}

int cmd_evaluate(const GlobalArgs& g, bool with_popularity) {
  const PipelineConfig p = pipeline_from_config(load_config(g));
  Pipeline pipe(p, fs::path(g.out_dir) / "experiment");
  std::ostringstream csv;
  csv << metrics_csv_header();
  const VariantSpec full = variant_from_name("full");
  const VariantResult vr = pipe.run_variant(full);
  csv << metrics_csv_rows(vr.report);
  if (with_popularity)
    csv << metrics_csv_rows(pipe.run_baseline(BaselineKind::Popularity));
  write_text(fs::path(g.out_dir) / "metrics.csv", csv.str());
  std::cout << csv.str();
  return 0;
}

int cmd_serve_sim(const GlobalArgs& g, const std::string& events_path,
                  std::int64_t minutes, std::int64_t shards,
                  const std::string& export_path) {
  const PipelineConfig p = pipeline_from_config(load_config(g));
  const World w = load_world(g);
  const auto sids = load_catalog_sids(g);
  const Model model = Model::load(fs::path(g.out_dir) / "sft" / "checkpoint");
  const PrefixIndex index = PrefixIndex::load(fs::path(g.out_dir) / "index");

  std::vector<BehaviorEvent> stream;
  if (!events_path.empty()) {
    for (const auto& line : read_lines(events_path)) {
      if (line.empty()) continue;
      const auto f = split(line, '\t');
      stream.push_back({std::stoll(f[0]), std::stoll(f[1]), std::stoll(f[2]),
                        parse_action(f[3])});
    }
  } else {
    stream = w.events;
  }
  if (minutes > 0) {
    std::vector<BehaviorEvent> trimmed;
    for (const auto& e : stream)
      if (e.ts / 60 < minutes) trimmed.push_back(e);
    stream = std::move(trimmed);
  }

  ServeConfig sc;
  sc.gen = p.gen;
  sc.gen.ell = model.cfg.prefix_len;
  sc.shards = shards;
  ServingSim sim(model, index, w, sids, sc);
  sim.replay(stream);
  std::cout << "serve-sim: " << stream.size() << " events, "
            << sim.u2i().size() << " users indexed\n";
  if (!export_path.empty()) {
    write_text(export_path, sim.u2i().export_tsv());
    std::cout << "u2i export written to " << export_path << "\n";
  }
  return 0;
}

int cmd_run_experiment(const GlobalArgs& g, const std::string& variants_str,
                       const std::string& baselines_str) {
  const PipelineConfig p = pipeline_from_config(load_config(g));
  std::vector<VariantSpec> variants;
  for (const auto& name : split(variants_str, ','))
    if (!name.empty()) variants.push_back(variant_from_name(name));
  std::vector<BaselineKind> baselines;
  for (const auto& name : split(baselines_str, ',')) {
    if (name.empty()) continue;
    if (name == "popularity") baselines.push_back(BaselineKind::Popularity);
    else if (name == "autoregressive_id")
      baselines.push_back(BaselineKind::AutoregressiveID);
    else if (name == "gr_sid") baselines.push_back(BaselineKind::GR_SID);
    else if (name == "gr_id") baselines.push_back(BaselineKind::GR_ID);
    else throw std::runtime_error("unknown baseline: " + name);
  }
  const auto res = run_experiment(p, variants, baselines,
                                  fs::path(g.out_dir) / "experiment");
  std::cout << res.csv;
  for (const auto& vr : res.variants)
    if (vr.prefix1_accuracy >= 0)
      std::cout << "# " << vr.report.config_id
                << " prefix1_acc=" << vr.prefix1_accuracy
                << " prefix2_acc=" << vr.prefix2_accuracy << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SIGMA generative recommender pipeline"};
  app.require_subcommand(1);

  GlobalArgs g;
  app.add_option("--config", g.config_path, "key=value config file");
  app.add_option("--out-dir", g.out_dir, "artifact directory");
  app.add_option("--seed", g.seed, "override the config seed");

  app.add_subcommand("gen-data", "generate the synthetic world");
  app.add_subcommand("train-grounding", "train multi-view grounded embeddings");
  app.add_subcommand("fit-quantizer", "fit the RQ-VAE and assign SIDs");
  app.add_subcommand("sft-train", "multi-task SFT of the sequence model");
  app.add_subcommand("build-index", "build the per-prefix ANN index");

  auto* gen = app.add_subcommand("generate", "generate top-N items for a user");
  std::int64_t user = 0, constraint = -1;
  std::string task_str = "just_for_you";
  gen->add_option("--user", user, "user id");
  gen->add_option("--task", task_str, "task name");
  gen->add_option("--constraint", constraint, "constraint id (task dependent)");

  auto* ev = app.add_subcommand("evaluate", "evaluate HR@K on the eval window");
  bool with_pop = false;
  ev->add_flag("--baseline-popularity", with_pop, "include the popularity floor");

  auto* sim = app.add_subcommand("serve-sim", "nearline serving simulator");
  std::string events_path, export_path;
  std::int64_t minutes = 0, shards = 1;
  sim->add_option("--events", events_path, "event file (ts,user,item,action)");
  sim->add_option("--minutes", minutes, "replay only the first N minutes");
  sim->add_option("--users-shards", shards, "user shard count");
  sim->add_option("--export-u2i", export_path, "write the U2I snapshot here");

  auto* exp = app.add_subcommand("run-experiment", "run variants + baselines");
  std::string variants_str = "full";
  std::string baselines_str;
  exp->add_option("--variants", variants_str,
                  "comma list: full,no_grounding,no_apf,no_pretrained_emb,"
                  "global_negatives,fewer_negatives,sid2,sid4");
  exp->add_option("--baselines", baselines_str,
                  "comma list: popularity,autoregressive_id,gr_sid,gr_id");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand("gen-data")) return cmd_gen_data(g);
    if (app.got_subcommand("train-grounding")) return cmd_train_grounding(g);
    if (app.got_subcommand("fit-quantizer")) return cmd_fit_quantizer(g);
    if (app.got_subcommand("sft-train")) return cmd_sft_train(g);
    if (app.got_subcommand("build-index")) return cmd_build_index(g);
    if (app.got_subcommand("generate"))
      return cmd_generate(g, user, task_str, constraint);
    if (app.got_subcommand("evaluate")) return cmd_evaluate(g, with_pop);
    if (app.got_subcommand("serve-sim"))
      return cmd_serve_sim(g, events_path, minutes, shards, export_path);
    if (app.got_subcommand("run-experiment"))
      return cmd_run_experiment(g, variants_str, baselines_str);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
