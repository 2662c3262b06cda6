// Command-line front end: synthetic data generation, training, evaluation,
// cached inference, mask/cost inspection, decay and placement studies, and
// expert attribution. Every artifact-producing subcommand writes a
// .manifest.json next to its output.

#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "persrec/persrec.hpp"

namespace {

using namespace persrec;

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    out.push_back(std::stoi(tok));
  }
  return out;
}

// grammar: segments = [a,b,...]; experts = [c,d,...]
SegmentationPlan parse_plan_line(const std::string& line) {
  auto extract = [&](const std::string& key) {
    auto at = line.find(key);
    if (at == std::string::npos) fail("InvalidConfig", "missing '" + key + "'");
    auto open = line.find('[', at);
    auto close = line.find(']', open);
    if (open == std::string::npos || close == std::string::npos)
      fail("InvalidConfig", "missing [...] after '" + key + "'");
    return parse_int_list(line.substr(open + 1, close - open - 1));
  };
  return build_plan(extract("segments"), extract("experts"));
}

struct PlanFlags {
  std::string segments = "";
  std::string experts = "";

  SegmentationPlan plan() const {
    auto lens = parse_int_list(segments);
    auto exps = experts.empty() ? std::vector<int>(lens.size(), 0)
                                : parse_int_list(experts);
    return build_plan(lens, exps);
  }
};

struct ModelFlags {
  int layers = 2, dim = 32, heads = 2, ffn = 64, max_positions = 0;
  std::uint32_t seed = 0;

  ModelConfig config(int vocab, int n_flat, int k_total) const {
    ModelConfig cfg;
    cfg.num_layers = layers;
    cfg.model_dim = dim;
    cfg.num_heads = heads;
    cfg.ffn_dim = ffn;
    cfg.vocab_size = vocab;
    cfg.max_positions = max_positions > 0 ? max_positions : n_flat;
    cfg.num_expert_slots = k_total;
    cfg.seed = seed;
    return cfg;
  }
};

void add_plan_flags(CLI::App* cmd, PlanFlags& pf) {
  cmd->add_option("--segments", pf.segments, "comma-separated segment lengths")
      ->required();
  cmd->add_option("--experts", pf.experts,
                  "comma-separated experts per segment (default all 0)");
}

void add_model_flags(CLI::App* cmd, ModelFlags& mf) {
  cmd->add_option("--layers", mf.layers);
  cmd->add_option("--dim", mf.dim);
  cmd->add_option("--heads", mf.heads);
  cmd->add_option("--ffn", mf.ffn);
  cmd->add_option("--max-positions", mf.max_positions,
                  "defaults to the plan's flattened length");
  cmd->add_option("--seed", mf.seed);
}

nlohmann::json plan_json(const SegmentationPlan& plan) {
  return {{"segments", plan.segment_lengths},
          {"experts", plan.experts_per_segment}};
}

std::string metrics_csv(const std::string& method, int pretrain_len,
                        int recent_len, const Metrics& m) {
  std::string out = "method,pretrain_len,recent_len,K,recall,ndcg\n";
  for (const auto& [k, r] : m.recall_at)
    out += method + "," + std::to_string(pretrain_len) + "," +
           std::to_string(recent_len) + "," + std::to_string(k) + "," +
           std::to_string(r) + "," + std::to_string(m.ndcg_at.at(k)) + "\n";
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) fail("IoError", "cannot open " + path + " for writing");
  out << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"personalized-expert sequential recommendation engine"};
  app.require_subcommand(1);

  // ---- gen-data ----
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic TSV event log");
  SyntheticConfig scfg;
  std::string gen_out;
  gen->add_option("--users", scfg.num_users);
  gen->add_option("--vocab", scfg.vocab_size);
  gen->add_option("--clusters", scfg.num_clusters);
  gen->add_option("--seq-len", scfg.seq_len);
  gen->add_option("--p-long", scfg.p_long);
  gen->add_option("--noise-floor", scfg.noise_floor);
  gen->add_option("--drift", scfg.drift_rate);
  gen->add_option("--seed", scfg.seed);
  gen->add_option("--out", gen_out)->required();

  // ---- mask ----
  auto* maskc = app.add_subcommand("mask", "dump an attention mask as 0/1 rows");
  PlanFlags mask_pf;
  std::string mask_out;
  add_plan_flags(maskc, mask_pf);
  maskc->add_option("--out", mask_out, "write to file instead of stdout");

  // ---- cost ----
  auto* costc = app.add_subcommand("cost", "analytic cost model report");
  CostParams cp;
  bool cost_csv = false;
  costc->add_option("--L", cp.layers)->required();
  costc->add_option("--n", cp.items)->required();
  costc->add_option("--d", cp.dim)->required();
  costc->add_option("--k", cp.experts);
  costc->add_option("--m", cp.segments);
  costc->add_flag("--csv", cost_csv);

  // ---- train ----
  auto* trainc = app.add_subcommand("train", "train a model on a TSV event log");
  PlanFlags train_pf;
  ModelFlags train_mf;
  TrainConfig tcfg;
  std::string train_data, train_out, train_stats;
  int train_min_events = 2, train_max_events = 1 << 30;
  trainc->add_option("--data", train_data)->required();
  add_plan_flags(trainc, train_pf);
  add_model_flags(trainc, train_mf);
  trainc->add_option("--min-events", train_min_events);
  trainc->add_option("--max-events", train_max_events);
  trainc->add_option("--lr", tcfg.learning_rate);
  trainc->add_option("--weight-decay", tcfg.weight_decay);
  trainc->add_option("--batch", tcfg.batch_size);
  trainc->add_option("--epochs", tcfg.epochs);
  trainc->add_option("--grad-clip", tcfg.grad_clip);
  trainc->add_option("--threads", tcfg.threads);
  trainc->add_option("--out", train_out)->required();
  trainc->add_option("--stats", train_stats, "per-epoch stats CSV path");

  // ---- eval ----
  auto* evalc = app.add_subcommand("eval", "retrieval metrics on a split");
  PlanFlags eval_pf;
  std::string eval_model, eval_data, eval_ks = "10,50,200", eval_out;
  int eval_test_len = 1, eval_threads = 1;
  std::string eval_method = "personalized";
  evalc->add_option("--model", eval_model)->required();
  evalc->add_option("--data", eval_data)->required();
  add_plan_flags(evalc, eval_pf);
  evalc->add_option("--test-len", eval_test_len);
  evalc->add_option("--ks", eval_ks);
  evalc->add_option("--method", eval_method, "method label for the CSV");
  evalc->add_option("--threads", eval_threads);
  evalc->add_option("--out", eval_out)->required();

  // ---- infer ----
  auto* inferc = app.add_subcommand("infer", "ranked recommendations from cache + recent items");
  PlanFlags infer_pf;
  std::string infer_model, infer_cache, infer_cache_out, infer_history,
      infer_recent;
  int infer_k = 10, infer_steps = 1;
  inferc->add_option("--model", infer_model)->required();
  inferc->add_option("--cache", infer_cache, "load an existing cache file");
  inferc->add_option("--build-cache", infer_cache_out,
                     "compress --history into a cache file");
  inferc->add_option("--history", infer_history,
                     "comma-separated item ids covering the non-final segments");
  inferc->add_option("--segments", infer_pf.segments);
  inferc->add_option("--experts", infer_pf.experts);
  inferc->add_option("--recent", infer_recent)->required();
  inferc->add_option("--k", infer_k);
  inferc->add_option("--steps", infer_steps, "autoregressive steps");

  // ---- decay ----
  auto* decayc = app.add_subcommand("decay", "frozen-cache sliding-window decay study");
  PlanFlags decay_pf;
  std::string decay_model, decay_data, decay_ks = "10,50,200", decay_out;
  int decay_test_len = 0, decay_window = 0, decay_stride = 64, decay_threads = 1;
  decayc->add_option("--model", decay_model)->required();
  decayc->add_option("--data", decay_data)->required();
  add_plan_flags(decayc, decay_pf);
  decayc->add_option("--test-len", decay_test_len)->required();
  decayc->add_option("--window", decay_window, "defaults to the recent segment length");
  decayc->add_option("--stride", decay_stride);
  decayc->add_option("--ks", decay_ks);
  decayc->add_option("--threads", decay_threads);
  decayc->add_option("--out", decay_out)->required();

  // ---- placement ----
  auto* placec = app.add_subcommand("placement", "train/evaluate several expert placements");
  ModelFlags place_mf;
  TrainConfig place_tcfg;
  std::string place_data, place_settings, place_ks = "10,50,200", place_out;
  int place_test_len = 1;
  placec->add_option("--data", place_data)->required();
  placec->add_option("--settings", place_settings,
                     "file of plan lines: segments = [..]; experts = [..]")
      ->required();
  add_model_flags(placec, place_mf);
  placec->add_option("--test-len", place_test_len);
  placec->add_option("--lr", place_tcfg.learning_rate);
  placec->add_option("--weight-decay", place_tcfg.weight_decay);
  placec->add_option("--batch", place_tcfg.batch_size);
  placec->add_option("--epochs", place_tcfg.epochs);
  placec->add_option("--threads", place_tcfg.threads);
  placec->add_option("--ks", place_ks);
  placec->add_option("--out", place_out)->required();

  // ---- attribute ----
  auto* attrc = app.add_subcommand("attribute", "NNLS attribution of expert outputs");
  PlanFlags attr_pf;
  std::string attr_model, attr_data, attr_out;
  int attr_user = 0, attr_top_n = 10;
  attrc->add_option("--model", attr_model)->required();
  attrc->add_option("--data", attr_data)->required();
  add_plan_flags(attrc, attr_pf);
  attrc->add_option("--user", attr_user, "user index in the dataset");
  attrc->add_option("--top-n", attr_top_n);
  attrc->add_option("--out", attr_out, "write TSV to file instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      Dataset data = generate_synthetic(scfg);
      std::ofstream out(gen_out);
      if (!out) fail("IoError", "cannot open " + gen_out);
      write_tsv(data, out);
      RunManifest mf;
      mf.command = "gen-data";
      mf.config = {{"users", scfg.num_users},   {"vocab", scfg.vocab_size},
                   {"clusters", scfg.num_clusters}, {"seq_len", scfg.seq_len},
                   {"p_long", scfg.p_long},     {"noise_floor", scfg.noise_floor},
                   {"drift", scfg.drift_rate},  {"seed", scfg.seed}};
      mf.outputs = {gen_out};
      mf.write(gen_out + ".manifest.json");
    } else if (*maskc) {
      auto dump = segmented_mask(mask_pf.plan()).dump();
      if (mask_out.empty())
        std::cout << dump;
      else
        write_text(mask_out, dump);
    } else if (*costc) {
      CostReport r = cost_report(cp);
      if (cost_csv) {
        std::cout << "L,n,d,k,m,baseline_flops,training_flops,inference_flops,"
                     "training_ratio_exact,training_ratio_approx,S\n"
                  << cp.layers << ',' << cp.items << ',' << cp.dim << ','
                  << cp.experts << ',' << cp.segments << ','
                  << r.baseline_flops << ',' << r.training_flops << ','
                  << r.inference_flops << ',' << r.training.exact << ','
                  << r.training.approx << ',' << r.inference.ratio << '\n';
      } else {
        std::cout << "baseline  C_b = " << r.baseline_flops << "\n"
                  << "training  C_t = " << r.training_flops
                  << "  ratio exact = " << r.training.exact
                  << "  approx (1+alpha) = " << r.training.approx << "\n"
                  << "inference C_i = " << r.inference_flops
                  << "  ratio S = " << r.inference.ratio << "\n";
      }
    } else if (*trainc) {
      SegmentationPlan plan = train_pf.plan();
      IngestResult ingest = ingest_tsv(train_data, train_min_events, train_max_events);
      std::vector<std::vector<int>> seqs;
      for (const auto& user : ingest.data.users) {
        std::vector<int> ids = item_ids_of(user);
        if (static_cast<int>(ids.size()) > plan.total_items())
          ids.resize(plan.total_items());
        seqs.push_back(std::move(ids));
      }
      ModelConfig cfg = train_mf.config(ingest.data.vocab_size,
                                        plan.flattened_length(),
                                        plan.total_experts());
      tcfg.seed = train_mf.seed;
      Model model = init_model(cfg);
      TrainStats stats = train(model, seqs, plan, tcfg);
      save_model(model, train_out);
      if (!train_stats.empty()) write_text(train_stats, stats.csv());
      RunManifest mf;
      mf.command = "train";
      mf.config = {{"plan", plan_json(plan)},
                   {"layers", cfg.num_layers},
                   {"dim", cfg.model_dim},
                   {"heads", cfg.num_heads},
                   {"ffn", cfg.ffn_dim},
                   {"vocab", cfg.vocab_size},
                   {"max_positions", cfg.max_positions},
                   {"seed", cfg.seed},
                   {"lr", tcfg.learning_rate},
                   {"weight_decay", tcfg.weight_decay},
                   {"batch", tcfg.batch_size},
                   {"epochs", tcfg.epochs}};
      mf.inputs = {train_data};
      mf.outputs = {train_out};
      mf.fingerprints = {{"checkpoint_crc", model_crc(model)}};
      mf.write(train_out + ".manifest.json");
      std::cerr << "final epoch loss " << stats.epoch_loss.back() << "\n";
    } else if (*evalc) {
      SegmentationPlan plan = eval_pf.plan();
      Model model = load_model(eval_model);
      IngestResult ingest = ingest_tsv(eval_data, 2, 1 << 30);
      SplitSpec spec{plan.total_items(), eval_test_len,
                     plan.total_items() - plan.segment_lengths.back(),
                     plan.segment_lengths.back()};
      SplitResult sr = split(ingest.data, spec);
      Metrics m = evaluate(model, sr.train, sr.test, plan,
                           parse_int_list(eval_ks), eval_threads);
      write_text(eval_out, metrics_csv(eval_method, spec.pretrain_len,
                                       spec.recent_len, m));
      RunManifest mf;
      mf.command = "eval";
      mf.config = {{"plan", plan_json(plan)}, {"ks", eval_ks}};
      mf.inputs = {eval_model, eval_data};
      mf.outputs = {eval_out};
      mf.fingerprints = {{"checkpoint_crc", model_crc(model)}};
      mf.write(eval_out + ".manifest.json");
    } else if (*inferc) {
      Model model = load_model(infer_model);
      ExpertCache cache;
      if (!infer_cache.empty()) {
        cache = load_cache(infer_cache);
      } else if (!infer_history.empty()) {
        SegmentationPlan plan = infer_pf.plan();
        cache = compress_segments(model, parse_int_list(infer_history), plan);
        if (!infer_cache_out.empty()) {
          save_cache(cache, infer_cache_out);
          RunManifest mf;
          mf.command = "infer --build-cache";
          mf.config = {{"plan", plan_json(plan)}};
          mf.inputs = {infer_model};
          mf.outputs = {infer_cache_out};
          mf.fingerprints = {{"checkpoint_crc", model_crc(model)},
                             {"cache_fingerprint", cache_fingerprint(cache)}};
          mf.write(infer_cache_out + ".manifest.json");
        }
      } else {
        cache = empty_cache(model);
      }
      auto recs = autoregress(model, cache, parse_int_list(infer_recent),
                              infer_steps, infer_k);
      for (std::size_t s = 0; s < recs.size(); ++s)
        for (std::size_t r = 0; r < recs[s].items.size(); ++r)
          std::cout << s << '\t' << r + 1 << '\t' << recs[s].items[r].first
                    << '\t' << recs[s].items[r].second << '\n';
    } else if (*decayc) {
      SegmentationPlan plan = decay_pf.plan();
      Model model = load_model(decay_model);
      IngestResult ingest = ingest_tsv(decay_data, 2, 1 << 30);
      SplitSpec spec{plan.total_items(), decay_test_len,
                     plan.total_items() - plan.segment_lengths.back(),
                     plan.segment_lengths.back()};
      SplitResult sr = split(ingest.data, spec);
      int window = decay_window > 0 ? decay_window : spec.recent_len;
      DecaySeries series =
          decay_eval(model, sr.train, sr.test, plan, window, decay_stride,
                     parse_int_list(decay_ks), decay_threads);
      write_text(decay_out, series.csv());
      RunManifest mf;
      mf.command = "decay";
      mf.config = {{"plan", plan_json(plan)},
                   {"window", window},
                   {"stride", decay_stride}};
      mf.inputs = {decay_model, decay_data};
      mf.outputs = {decay_out};
      mf.fingerprints = {{"checkpoint_crc", model_crc(model)},
                         {"cache_fingerprint", series.cache_fingerprints.front()}};
      mf.write(decay_out + ".manifest.json");
    } else if (*placec) {
      std::ifstream in(place_settings);
      if (!in) fail("IoError", "cannot open " + place_settings);
      std::vector<SegmentationPlan> settings;
      std::string line;
      while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        settings.push_back(parse_plan_line(line));
      }
      IngestResult ingest = ingest_tsv(place_data, 2, 1 << 30);
      if (settings.empty()) fail("InvalidConfig", "no settings parsed");
      SplitSpec spec{settings[0].total_items(), place_test_len,
                     settings[0].total_items() - settings[0].segment_lengths.back(),
                     settings[0].segment_lengths.back()};
      SplitResult sr = split(ingest.data, spec);
      place_tcfg.seed = place_mf.seed;
      auto rows = placement_compare(
          [&](const SegmentationPlan& plan) {
            return init_model(place_mf.config(ingest.data.vocab_size,
                                              plan.flattened_length(),
                                              plan.total_experts()));
          },
          settings, sr.train, sr.test, place_tcfg, parse_int_list(place_ks));
      write_text(place_out, placement_csv(rows));
      RunManifest mf;
      mf.command = "placement";
      mf.config = {{"settings_file", place_settings}, {"ks", place_ks}};
      mf.inputs = {place_data, place_settings};
      mf.outputs = {place_out};
      mf.write(place_out + ".manifest.json");
    } else if (*attrc) {
      SegmentationPlan plan = attr_pf.plan();
      Model model = load_model(attr_model);
      IngestResult ingest = ingest_tsv(attr_data, 2, 1 << 30);
      if (attr_user < 0 || attr_user >= static_cast<int>(ingest.data.users.size()))
        fail("InvalidConfig", "user index out of range");
      std::vector<int> items = item_ids_of(ingest.data.users[attr_user]);
      items.resize(plan.total_items());
      auto attrs = attribute_experts(model, items, plan, attr_top_n);
      std::ostringstream os;
      os << "expert_slot\trank\tsegment_position\titem_id\tweight\tresidual_norm\n";
      for (const auto& a : attrs)
        for (std::size_t r = 0; r < a.top_items.size(); ++r)
          os << a.expert_slot << '\t' << r + 1 << '\t'
             << a.top_items[r].segment_position << '\t'
             << a.top_items[r].item_id << '\t' << a.top_items[r].weight << '\t'
             << a.residual_norm << '\n';
      if (attr_out.empty())
        std::cout << os.str();
      else
        write_text(attr_out, os.str());
    }
  } catch (const Error& e) {
    std::cerr << "error " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
