// sftkit command line: data preparation, checkpoint blending, evaluation,
// the human-evaluation service and report rendering.
//
// Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include <csignal>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sftkit/eval_harness.hpp"
#include "sftkit/humaneval_server.hpp"
#include "sftkit/pipeline.hpp"

namespace {

using namespace sftkit;
namespace fs = std::filesystem;

struct CommonFlags {
  std::string config;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> log_level;
};

void add_common(CLI::App* sub, CommonFlags& f) {
  sub->add_option("-c,--config", f.config, "Pipeline configuration file (JSON)")->check(CLI::ExistingFile);
  sub->add_option("-o,--out", f.out, "Output directory");
  sub->add_option("--seed", f.seed, "Global seed");
  sub->add_option("--log-level", f.log_level, "error, warn, info or debug");
}

// file < environment < flags
PipelineConfig resolve(const CommonFlags& f) {
  PipelineConfig cfg = f.config.empty() ? PipelineConfig{} : load_pipeline_config(f.config);
  apply_env(cfg);
  if (f.out) cfg.output_dir = *f.out;
  if (f.seed) cfg.seed = *f.seed;
  if (f.log_level) cfg.log_level = *f.log_level;
  return cfg;
}

fs::path default_input(const PipelineConfig& cfg, const std::optional<std::string>& flag, std::string_view step) {
  if (flag) return *flag;
  return step_path(cfg, step, "records.jsonl");
}

std::vector<InstructionRecord> read_records(const fs::path& p) {
  if (!fs::exists(p)) throw ValidationError("cli", "input not found: " + p.string(), "input");
  return ingest(p, IngestFormat::record_lines);
}

CheckpointStore read_checkpoint(const fs::path& p) {
  if (!fs::exists(p)) throw ValidationError("cli", "checkpoint not found: " + p.string(), "checkpoint");
  if (p.extension() == ".jsonl") return checkpoint_from_lines(p);
  return load_checkpoint(p);
}

bool is_mock(std::string_view endpoint) { return endpoint.rfind("mock:", 0) == 0; }

std::string file_safe(std::string s) {
  for (char& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_' && c != '.') c = '_';
  }
  return s;
}

std::vector<int> parse_shots(const std::vector<int>& shots) {
  for (int k : shots) {
    if (k < 0) throw ValidationError("cli", "shot counts must be >= 0", "shots");
  }
  return shots.empty() ? std::vector<int>{0, 5} : shots;
}

// The gold-echo mock answers the exact prompts run_task builds, so it needs
// the tasks and shot settings up front.
std::unique_ptr<LlmClient> eval_model(const PipelineConfig& cfg, const std::string& name,
                                      const std::vector<EvalTask>& tasks, const std::vector<int>& shots) {
  if (cfg.llm.endpoint == "mock:gold") {
    const std::string id = name.empty() ? "mock:gold" : name;
    auto llm = std::make_unique<mock::CannedLlm>(id);
    for (const auto& t : tasks) {
      for (int k : shots) {
        for (const auto& item : t.items) {
          llm->add(build_prompt(t, item, k, select_demos(t, item, k, cfg.seed, id)), item.gold);
        }
      }
    }
    return llm;
  }
  return make_llm_client(cfg.llm, name);
}

struct EvalFlags {
  std::vector<std::string> tasks;
  std::optional<std::string> llm;
  std::optional<std::string> mt;
  std::string model;
  std::vector<int> shots;
  std::optional<std::string> results;
  bool no_latency = false;
  bool no_back_translate = false;
  std::size_t parallelism = 1;
};

int run_eval(const PipelineConfig& cfg, const EvalFlags& f, bool translate_test_mode, JsonLogger& log) {
  if (f.tasks.empty()) throw ValidationError("cli", "at least one --task is required", "task");
  std::vector<EvalTask> tasks;
  for (const auto& p : f.tasks) {
    if (!fs::exists(p)) throw ValidationError("cli", "task file not found: " + p, "task");
    tasks.push_back(load_task(p));
  }
  const auto shots = parse_shots(f.shots);
  auto llm = eval_model(cfg, f.model, tasks, shots);
  std::unique_ptr<MtClient> mt;
  if (translate_test_mode) mt = make_mt_client(cfg.mt);

  const std::string step = translate_test_mode ? "translate-test" : "eval";
  StepWriter w(cfg, step + "/" + file_safe(llm->model_id()));
  for (const auto& p : f.tasks) w.input(p);
  const fs::path results = f.results ? fs::path(*f.results) : w.dir() / "predictions.jsonl";

  std::optional<ContentCache> cache;
  if (cfg.cache_dir) cache.emplace(fs::path(*cfg.cache_dir));

  EvalOptions eopts;
  eopts.results_path = results;
  eopts.parallelism = f.parallelism;
  eopts.record_latency = !f.no_latency && !is_mock(cfg.llm.endpoint);

  std::vector<ReportRow> rows;
  for (const auto& t : tasks) {
    for (int k : shots) {
      std::vector<Prediction> preds;
      if (translate_test_mode) {
        TranslateTestOptions topts;
        topts.eval = eopts;
        topts.cache = cache ? &*cache : nullptr;
        topts.pivot_language = cfg.source_language;
        topts.back_translate_answers = !f.no_back_translate;
        preds = translate_test(t, *mt, *llm, k, cfg.seed, topts);
      } else {
        preds = run_task(t, *llm, k, cfg.seed, eopts);
      }
      auto row = score_run(t, preds, llm->model_id(), k);
      // kept apart from direct rows when both land in one report
      if (translate_test_mode) row.task += " [translate-test]";
      log.info("eval.scored", {{"task", t.name}, {"model", row.model}, {"shots", k}, {"metric", row.metric},
                               {"score", row.score}, {"invalid", row.invalid}, {"undecided", row.undecided}});
      rows.push_back(std::move(row));
    }
  }
  const auto rendered = render_report(rows);
  w.output("scores.json", rendered.table.dump(2) + "\n");
  w.output("scores.txt", rendered.text);
  if (fs::exists(results)) w.manifest().outputs.emplace_back(results.string(), file_digest(results));
  w.manifest().summary["model"] = llm->model_id();
  w.manifest().summary["shots"] = shots;
  w.manifest().seeds["demos"] = cfg.seed;
  w.finish();
  std::cout << rendered.text;
  return 0;
}

std::atomic<HumanEvalServer*> g_server{nullptr};

extern "C" void on_signal(int) {
  if (auto* s = g_server.load()) s->raw().stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sftkit: bilingual instruction-tuning data preparation and evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("sftkit ") + "0.1.0");

  CommonFlags common;

  // ingest
  auto* ingest_cmd = app.add_subcommand("ingest", "Validate and normalize source datasets");
  add_common(ingest_cmd, common);
  std::vector<std::string> ingest_inputs;
  std::string ingest_format = "record_lines";
  std::optional<std::string> ingest_tag;
  ingest_cmd->add_option("-i,--input", ingest_inputs, "Dataset file(s); replaces the configured datasets");
  ingest_cmd->add_option("--format", ingest_format, "record_lines or conversation_tree");
  ingest_cmd->add_option("--dataset", ingest_tag, "Source dataset tag applied to every record");

  // translate
  auto* translate_cmd = app.add_subcommand("translate", "Machine-translate source-language records");
  add_common(translate_cmd, common);
  std::optional<std::string> tr_input, tr_mt, tr_src, tr_tgt, tr_cache;
  translate_cmd->add_option("-i,--input", tr_input, "Records (default: <out>/ingest/records.jsonl)");
  translate_cmd->add_option("--mt", tr_mt, "MT endpoint (mock:identity, mock:truncate or URL)");
  translate_cmd->add_option("--src", tr_src, "Source language");
  translate_cmd->add_option("--tgt", tr_tgt, "Target language");
  translate_cmd->add_option("--cache-dir", tr_cache, "Translation cache directory");

  // filter
  auto* filter_cmd = app.add_subcommand("filter", "Round-trip chrF++ filtering of translated records");
  add_common(filter_cmd, common);
  std::optional<std::string> fl_source, fl_translated, fl_mt;
  std::optional<double> fl_threshold;
  bool fl_per_turn = false;
  filter_cmd->add_option("--source", fl_source, "Source records (default: <out>/ingest/records.jsonl)");
  filter_cmd->add_option("--translated", fl_translated, "Translated records (default: <out>/translate/records.jsonl)");
  filter_cmd->add_option("--mt", fl_mt, "MT endpoint used for back-translation");
  filter_cmd->add_option("--threshold", fl_threshold, "Keep records scoring at least this (0-100, default 50)");
  filter_cmd->add_flag("--per-turn", fl_per_turn, "Score turns separately and keep on the weakest");

  // sample
  auto* sample_cmd = app.add_subcommand("sample", "Draw the training mixture");
  add_common(sample_cmd, common);
  std::optional<std::string> sm_input, sm_plan;
  sample_cmd->add_option("-i,--input", sm_input, "Records (default: <out>/filter/records.jsonl)");
  sample_cmd->add_option("--plan", sm_plan, "Mixture plan JSON (overrides the configured plan)");

  // serialize
  auto* serialize_cmd = app.add_subcommand("serialize", "Render chat examples with loss masks");
  add_common(serialize_cmd, common);
  std::optional<std::string> se_input, se_tokenizer;
  std::optional<std::size_t> se_max_len;
  bool se_pack = false;
  serialize_cmd->add_option("-i,--input", se_input, "Records (default: <out>/sample/records.jsonl)");
  serialize_cmd->add_option("--tokenizer", se_tokenizer, "whitespace or a vocabulary JSON file");
  serialize_cmd->add_option("--max-len", se_max_len, "Packed sequence length");
  serialize_cmd->add_flag("--pack", se_pack, "Pack examples greedily up to --max-len");

  // pipeline
  auto* pipeline_cmd = app.add_subcommand("pipeline", "ingest, translate, filter, sample and serialize in one go");
  add_common(pipeline_cmd, common);
  std::optional<double> pl_threshold;
  std::optional<std::string> pl_mt;
  pipeline_cmd->add_option("--threshold", pl_threshold, "Filter threshold (0-100)");
  pipeline_cmd->add_option("--mt", pl_mt, "MT endpoint");

  // blend
  auto* blend_cmd = app.add_subcommand("blend", "Interpolate two checkpoints");
  add_common(blend_cmd, common);
  std::string bl_left, bl_right;
  std::optional<double> bl_alpha;
  std::optional<std::string> bl_select, bl_output;
  blend_cmd->add_option("--left", bl_left, "Checkpoint weighted by alpha")->required();
  blend_cmd->add_option("--right", bl_right, "Checkpoint weighted by 1 - alpha")->required();
  blend_cmd->add_option("--alpha", bl_alpha, "Weight of --left (default 0.6)");
  blend_cmd->add_option("--select", bl_select, "Dev scores JSON {epochs:{...}, blends:{alpha:{task:score}}}");
  blend_cmd->add_option("--output", bl_output, "Output file (default: <out>/blend/blended.ckpt)");

  // eval / translate-test
  EvalFlags ev, tt;
  auto add_eval = [&](CLI::App* sub, EvalFlags& f) {
    add_common(sub, common);
    sub->add_option("-t,--task", f.tasks, "Task file(s)")->required();
    sub->add_option("--llm", f.llm, "LLM endpoint (mock:gold, mock:echo, mock:gibberish, URL)");
    sub->add_option("--model", f.model, "Model id recorded in results");
    sub->add_option("--shots", f.shots, "Shot settings (default 0 5)");
    sub->add_option("--results", f.results, "Append-only predictions file used for resume");
    sub->add_option("--parallelism", f.parallelism, "Concurrent requests");
    sub->add_flag("--no-latency", f.no_latency, "Do not record request latency");
  };
  auto* eval_cmd = app.add_subcommand("eval", "Run k-shot evaluation");
  add_eval(eval_cmd, ev);
  auto* tt_cmd = app.add_subcommand("translate-test", "Evaluate through machine translation into English");
  add_eval(tt_cmd, tt);
  tt_cmd->add_option("--mt", tt.mt, "MT endpoint");
  tt_cmd->add_flag("--no-back-translate", tt.no_back_translate, "Score free-text answers in English");

  // humaneval-serve
  auto* he_cmd = app.add_subcommand("humaneval-serve", "Build an annotation batch and serve the rating API");
  add_common(he_cmd, common);
  std::optional<std::string> he_prompts, he_batch, he_static;
  std::vector<std::string> he_models;
  std::string he_host = "127.0.0.1";
  int he_port = 8090;
  std::size_t he_raters = 1;
  bool he_build_only = false;
  he_cmd->add_option("--prompts", he_prompts, "Prompt file (id, text, ability, tags)");
  he_cmd->add_option("--model", he_models, "name=endpoint, repeatable");
  he_cmd->add_option("--batch", he_batch, "Serve an existing batch instead of generating one");
  he_cmd->add_option("--host", he_host, "Bind address");
  he_cmd->add_option("--port", he_port, "Port (0 for any)");
  he_cmd->add_option("--raters", he_raters, "Ratings wanted per item");
  he_cmd->add_option("--static", he_static, "Directory with the built annotator UI");
  he_cmd->add_flag("--build-only", he_build_only, "Write the batch and exit");

  // report
  auto* report_cmd = app.add_subcommand("report", "Render score tables and human-eval aggregates");
  add_common(report_cmd, common);
  std::vector<std::string> rp_scores;
  std::optional<std::string> rp_ratings, rp_batch;
  report_cmd->add_option("--scores", rp_scores, "scores.json files from eval / translate-test");
  report_cmd->add_option("--ratings", rp_ratings, "Human-eval ratings log");
  report_cmd->add_option("--batch", rp_batch, "Human-eval batch the ratings refer to");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  JsonLogger log;
  try {
    PipelineConfig cfg = resolve(common);
    log.set_level(parse_log_level(cfg.log_level));

    if (*ingest_cmd) {
      if (!ingest_inputs.empty()) {
        auto fmt = parse_ingest_format(ingest_format);
        if (!fmt) throw ValidationError("cli", "unknown format '" + ingest_format + "'", "format");
        cfg.datasets.clear();
        for (const auto& p : ingest_inputs) cfg.datasets.push_back({p, *fmt, ingest_tag});
      }
      validate(cfg);
      run_ingest(cfg, log);
    } else if (*translate_cmd) {
      if (tr_mt) cfg.mt.endpoint = *tr_mt;
      if (tr_src) cfg.source_language = *tr_src;
      if (tr_tgt) cfg.target_language = *tr_tgt;
      if (tr_cache) cfg.cache_dir = *tr_cache;
      validate(cfg);
      const auto input = default_input(cfg, tr_input, "ingest");
      auto records = read_records(input);
      auto mt = make_mt_client(cfg.mt);
      run_translate(cfg, records, *mt, log, &input);
    } else if (*filter_cmd) {
      if (fl_mt) cfg.mt.endpoint = *fl_mt;
      if (fl_threshold) cfg.threshold = *fl_threshold;
      if (fl_per_turn) cfg.per_turn = true;
      validate(cfg);
      const fs::path src = fl_source ? fs::path(*fl_source) : step_path(cfg, "ingest", "records.jsonl");
      const fs::path tr = fl_translated ? fs::path(*fl_translated) : step_path(cfg, "translate", "records.jsonl");
      auto sources = read_records(src);
      auto translated = read_records(tr);
      auto mt = make_mt_client(cfg.mt);
      run_filter(cfg, sources, translated, *mt, log);
    } else if (*sample_cmd) {
      if (sm_plan) {
        if (!fs::exists(*sm_plan)) throw ValidationError("cli", "plan not found: " + *sm_plan, "plan");
        cfg.mixture = mixture_plan_from_json(json::parse(read_file(*sm_plan)));
      }
      validate(cfg);
      const auto input = default_input(cfg, sm_input, "filter");
      run_sample(cfg, read_records(input), log, &input);
    } else if (*serialize_cmd) {
      if (se_tokenizer) cfg.serialize.tokenizer = *se_tokenizer;
      if (se_max_len) cfg.serialize.max_len = *se_max_len;
      if (se_pack) cfg.serialize.pack = true;
      validate(cfg);
      const auto input = default_input(cfg, se_input, "sample");
      run_serialize(cfg, read_records(input), log, &input);
    } else if (*pipeline_cmd) {
      if (pl_threshold) cfg.threshold = *pl_threshold;
      if (pl_mt) cfg.mt.endpoint = *pl_mt;
      run_pipeline(cfg, log);
    } else if (*blend_cmd) {
      if (bl_alpha) cfg.blend_alpha = *bl_alpha;
      validate(cfg);
      auto left = read_checkpoint(bl_left);
      auto right = read_checkpoint(bl_right);
      StepWriter w(cfg, "blend");
      w.input(bl_left);
      w.input(bl_right);
      double alpha = cfg.blend_alpha;
      if (bl_select) {
        const json sj = json::parse(read_file(*bl_select));
        std::map<int, TaskScores> epochs;
        if (sj.contains("epochs")) {
          for (const auto& [e, s] : sj["epochs"].items()) epochs[std::stoi(e)] = s.get<TaskScores>();
        }
        std::map<double, TaskScores> blends;
        std::vector<double> candidates;
        for (const auto& [a, s] : sj.at("blends").items()) {
          const double v = std::stod(a);
          blends[v] = s.get<TaskScores>();
          candidates.push_back(v);
        }
        auto sel = select_blend(epochs, blends, candidates);
        w.output("blend_selection.json", sel.to_json().dump(2) + "\n");
        if (!bl_alpha) alpha = sel.alpha;
      }
      w.manifest().summary["alpha"] = alpha;
      const auto blended = interpolate(left, right, alpha);
      const fs::path out = bl_output ? fs::path(*bl_output) : w.dir() / "blended.ckpt";
      save_checkpoint(blended, out);
      w.manifest().outputs.emplace_back(out.string(), file_digest(out));
      w.finish();
      log.info("blend.done", {{"alpha", alpha}, {"output", out.string()}, {"tensors", blended.size()}});
    } else if (*eval_cmd || *tt_cmd) {
      EvalFlags& f = *eval_cmd ? ev : tt;
      if (f.llm) cfg.llm.endpoint = *f.llm;
      if (f.mt) cfg.mt.endpoint = *f.mt;
      validate(cfg);
      return run_eval(cfg, f, static_cast<bool>(*tt_cmd), log);
    } else if (*he_cmd) {
      validate(cfg);
      StepWriter w(cfg, "humaneval");
      std::vector<AnnotationItem> items;
      if (he_batch) {
        if (!fs::exists(*he_batch)) throw ValidationError("cli", "batch not found: " + *he_batch, "batch");
        items = load_batch(*he_batch);
        w.input(*he_batch);
      } else {
        if (!he_prompts) throw ValidationError("cli", "--prompts or --batch is required", "prompts");
        if (he_models.empty()) throw ValidationError("cli", "at least one --model name=endpoint is required", "model");
        w.input(*he_prompts);
        auto prompts = prompts_from_lines(*he_prompts);
        std::vector<std::unique_ptr<LlmClient>> owned;
        std::vector<LlmClient*> models;
        for (const auto& spec : he_models) {
          const auto eq = spec.find('=');
          if (eq == std::string::npos) throw ValidationError("cli", "model must be name=endpoint: " + spec, "model");
          EndpointConfig e = cfg.llm;
          e.endpoint = spec.substr(eq + 1);
          owned.push_back(make_llm_client(e, spec.substr(0, eq)));
          models.push_back(owned.back().get());
        }
        auto batch = build_batch(prompts, models, cfg.seed);
        for (const auto& fl : batch.failures) {
          log.warn("humaneval.generation_failed", {{"prompt_id", fl.prompt_id}, {"model", fl.model_key}, {"error", fl.error}});
        }
        items = std::move(batch.items);
        std::string lines;
        for (const auto& it : items) lines += to_json(it).dump() + "\n";
        w.output("batch.jsonl", lines);
      }
      w.manifest().summary["items"] = items.size();
      w.manifest().seeds["shuffle"] = cfg.seed;
      w.finish();
      log.info("humaneval.batch", {{"items", items.size()}});
      if (he_build_only) return 0;

      HumanEvalStore store(std::move(items), {he_raters, w.dir() / "ratings.jsonl"});
      ServerOptions sopts{he_host, he_port, he_static ? std::optional<fs::path>(*he_static) : std::nullopt};
      HumanEvalServer server(store, sopts);
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      const int port = server.start();
      log.info("humaneval.listening", {{"host", he_host}, {"port", port}});
      std::cout << "listening on http://" << he_host << ":" << port << std::endl;
      while (server.raw().is_running()) std::this_thread::sleep_for(std::chrono::milliseconds(200));
      server.stop();
      g_server = nullptr;
    } else if (*report_cmd) {
      validate(cfg, false);
      StepWriter w(cfg, "report");
      if (rp_scores.empty() && !rp_ratings) {
        throw ValidationError("cli", "nothing to report: give --scores and/or --ratings", "scores");
      }
      if (!rp_scores.empty()) {
        std::vector<ReportRow> rows;
        for (const auto& p : rp_scores) {
          if (!fs::exists(p)) throw ValidationError("cli", "scores file not found: " + p, "scores");
          w.input(p);
          auto got = report_rows_from_json(json::parse(read_file(p)));
          rows.insert(rows.end(), got.begin(), got.end());
        }
        const auto rendered = render_report(rows);
        w.output("report.txt", rendered.text);
        w.output("report.json", rendered.table.dump(2) + "\n");
        std::cout << rendered.text;
      }
      if (rp_ratings) {
        if (!rp_batch) throw ValidationError("cli", "--ratings needs --batch", "batch");
        w.input(*rp_ratings);
        w.input(*rp_batch);
        const auto items = load_batch(*rp_batch);
        std::vector<RatingRecord> ratings;
        for (const auto& [lineno, line] : read_lines(*rp_ratings)) ratings.push_back(rating_from_json(json::parse(line)));
        const auto agg = aggregate(ratings, items);
        w.output("humaneval.json", agg.to_json().dump(2) + "\n");
        w.output("humaneval.txt", agg.render());
        std::cout << agg.render();
      }
      w.finish();
    }
  } catch (const ValidationError& e) {
    log.error("validation", {{"module", e.module()}, {"field", e.field()}, {"message", e.what()}});
    return 1;
  } catch (const Error& e) {
    log.error("failure", {{"module", e.module()}, {"message", e.what()}});
    return 2;
  } catch (const json::exception& e) {
    log.error("validation", {{"module", "json"}, {"message", e.what()}});
    return 1;
  } catch (const std::exception& e) {
    log.error("failure", {{"module", "runtime"}, {"message", e.what()}});
    return 2;
  }
  return 0;
}
