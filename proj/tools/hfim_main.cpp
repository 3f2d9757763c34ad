// hfim: corpus generation, FIM training with the horizon-length auxiliary
// objective, linear probing, and infill evaluation, as one reproducible CLI.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hfim/checkpoint.hpp"
#include "hfim/corpus.hpp"
#include "hfim/errors.hpp"
#include "hfim/evalkit.hpp"
#include "hfim/io.hpp"
#include "hfim/model.hpp"
#include "hfim/probe.hpp"
#include "hfim/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// HFIM_THREADS is the only environment state any subcommand reads. The math
// kernels are single-threaded (the bitwise-reproducible reference mode), so
// values above 1 are recorded but do not change execution.
int requested_threads() {
  const char* env = std::getenv("HFIM_THREADS");
  if (!env) return 1;
  try {
    const int n = std::stoi(env);
    if (n < 1) throw std::invalid_argument("non-positive");
    return n;
  } catch (const std::exception&) {
    throw hfim::ConfigError("HFIM_THREADS must be a positive integer");
  }
}

struct ModelFlags {
  int layers = 2;
  int heads = 4;
  int d_model = 128;
  int d_ff = 512;
  int max_seq = 256;
  std::string convention = "eq3_literal";

  hfim::ModelConfig to_config(std::uint64_t init_seed) const {
    hfim::ModelConfig cfg;
    cfg.n_layers = layers;
    cfg.n_heads = heads;
    cfg.d_model = d_model;
    cfg.d_ff = d_ff;
    cfg.max_seq = max_seq;
    cfg.init_seed = init_seed;
    cfg.hlp_convention = hfim::parse_convention(convention);
    hfim::validate(cfg);
    return cfg;
  }
};

void add_model_flags(CLI::App* cmd, ModelFlags& mf) {
  cmd->add_option("--layers", mf.layers, "transformer layers");
  cmd->add_option("--heads", mf.heads, "attention heads");
  cmd->add_option("--d-model", mf.d_model, "model width");
  cmd->add_option("--d-ff", mf.d_ff, "feed-forward width");
  cmd->add_option("--max-seq", mf.max_seq, "maximum sequence length");
  cmd->add_option("--convention", mf.convention, "hlp target convention")
      ->check(CLI::IsMember({"eq3_literal", "include_next"}));
}

hfim::TrainConfig load_train_config(const std::string& config_path) {
  if (config_path.empty()) return hfim::TrainConfig{};
  std::ifstream in(config_path);
  if (!in) throw hfim::IoError("cannot open config " + config_path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw hfim::ConfigError("config " + config_path + ": " + e.what());
  }
  return hfim::train_config_from_json(j);
}

bool flag_on(const std::string& v, const char* name) {
  if (v == "on") return true;
  if (v == "off") return false;
  throw hfim::ConfigError(std::string(name) + " must be 'on' or 'off'");
}

// Runs a subcommand body under the output-directory lock and writes the
// manifest on both success and failure.
int run_with_manifest(const std::string& out_dir, hfim::RunManifest mf,
                      const std::function<void(const fs::path&, hfim::RunManifest&)>& body) {
  const fs::path out(out_dir);
  const auto t0 = std::chrono::steady_clock::now();
  hfim::DirLock lock(out);
  try {
    body(out, mf);
    mf.status = "ok";
  } catch (const std::exception& e) {
    mf.status = "error";
    mf.error = e.what();
  }
  mf.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  hfim::write_json_file((out / "manifest.json").string(), hfim::to_json(mf));
  if (mf.status != "ok") {
    std::cerr << "error: " << mf.error << "\n";
    return 1;
  }
  return 0;
}

struct TrainArtifacts {
  hfim::ModelConfig mcfg;
  hfim::TrainConfig tcfg;
  hfim::TrainResult result;
};

// Trains one arm, streaming metrics to <dir>/metrics.jsonl and writing
// <dir>/ckpt.bin (the last good parameters, even on divergence).
TrainArtifacts train_to_dir(const fs::path& dir, const hfim::ModelConfig& mcfg,
                            const hfim::TrainConfig& tcfg,
                            const std::vector<hfim::Document>& corpus,
                            long ckpt_interval,
                            const std::string& resume_path = "") {
  fs::create_directories(dir);
  const std::string metrics_path = (dir / "metrics.jsonl").string();
  const std::string ckpt_path = (dir / "ckpt.bin").string();

  hfim::Params params;
  hfim::AdamState opt;
  long start_step = 0;
  long tokens_seen = 0;
  std::ofstream metrics;
  if (resume_path.empty()) {
    params = hfim::init_params<float>(mcfg, /*with_heads=*/true);
    metrics.open(metrics_path, std::ios::trunc);
  } else {
    hfim::Checkpoint ck = hfim::load_checkpoint(resume_path);
    if (!ck.has_opt) {
      throw hfim::ConfigError("resume checkpoint lacks optimizer state: " + resume_path);
    }
    params = std::move(ck.params);
    opt = std::move(ck.opt_state);
    start_step = opt.t;
    tokens_seen = ck.tokens_seen;
    metrics.open(metrics_path, std::ios::app);
  }
  if (!metrics) throw hfim::IoError("cannot open " + metrics_path + " for writing");

  hfim::TrainHooks hooks;
  hooks.on_step = [&metrics, &metrics_path](const hfim::MetricsRecord& rec) {
    metrics << hfim::to_json(rec).dump() << '\n';
    if (!metrics) throw hfim::IoError("short write to " + metrics_path);
  };
  hooks.checkpoint_interval = ckpt_interval;
  hooks.on_checkpoint = [&](long, const hfim::Params& p, const hfim::AdamState& st,
                            long toks) {
    hfim::save_checkpoint(ckpt_path, mcfg, p, &st, toks);
  };

  TrainArtifacts art;
  art.mcfg = mcfg;
  art.tcfg = tcfg;
  art.result = hfim::train(mcfg, tcfg, corpus, std::move(params), hooks, start_step,
                           std::move(opt), tokens_seen);
  metrics.flush();
  hfim::save_checkpoint(ckpt_path, mcfg, art.result.params, &art.result.opt_state,
                        art.result.tokens_seen);
  if (art.result.diverged) {
    throw hfim::NumericalError("training diverged at step " +
                               std::to_string(art.result.completed_steps + 1) + ": " +
                               art.result.divergence_reason +
                               " (last good checkpoint retained at " + ckpt_path + ")");
  }
  return art;
}

hfim::ProbeResult probe_to_dir(const fs::path& dir, const hfim::ModelConfig& cfg,
                               const hfim::Params& params,
                               const std::vector<hfim::Document>& docs,
                               std::uint64_t seed, double test_fraction, int bins,
                               hfim::ProbeMode mode = hfim::ProbeMode::FimHorizon) {
  fs::create_directories(dir);
  hfim::ProbeResult res = hfim::run_probe(cfg, params, docs, seed, test_fraction, bins, mode);
  hfim::write_json_file((dir / "probe.json").string(),
                        hfim::probe_report_json(res, cfg.hlp_convention));
  hfim::write_text_file((dir / "curve.csv").string(), hfim::curve_to_csv(res.curve));
  return res;
}

void eval_to_dir(const fs::path& dir, const hfim::ModelConfig& cfg,
                 const hfim::Params& params, const std::vector<hfim::InfillTask>& tasks,
                 int max_new) {
  fs::create_directories(dir);
  const hfim::EvalReport report = hfim::eval_suite(cfg, params, tasks, max_new);
  hfim::write_json_file((dir / "eval.json").string(), hfim::to_json(report));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"horizon-length prediction toolkit for fill-in-the-middle training"};
  app.require_subcommand(1);

  // ---- gen-corpus ----
  auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic program corpus");
  std::uint64_t gen_seed = 1;
  long gen_n_docs = 1000;
  int gen_max_depth = 2, gen_max_lines = 10;
  std::string gen_out;
  gen->add_option("--seed", gen_seed, "corpus seed");
  gen->add_option("--n-docs", gen_n_docs, "number of documents")->check(CLI::PositiveNumber);
  gen->add_option("--max-depth", gen_max_depth, "maximum block nesting depth");
  gen->add_option("--max-lines", gen_max_lines, "maximum lines per document");
  gen->add_option("--out", gen_out, "output directory")->required();

  // ---- make-tasks ----
  auto* mk = app.add_subcommand("make-tasks", "derive infill tasks from documents");
  std::string mk_corpus, mk_out;
  std::uint64_t mk_seed = 1;
  long mk_n_tasks = 0;
  mk->add_option("--corpus", mk_corpus, "document JSONL")->required();
  mk->add_option("--seed", mk_seed, "split seed");
  mk->add_option("--n-tasks", mk_n_tasks, "cap on task count (0: one per document)");
  mk->add_option("--out", mk_out, "output directory")->required();

  // ---- train ----
  auto* tr = app.add_subcommand("train", "train a model");
  std::string tr_config, tr_corpus, tr_out, tr_resume;
  std::string tr_hlp = "off", tr_l2r = "off";
  std::optional<std::uint64_t> tr_seed;
  std::optional<long> tr_steps;
  long tr_ckpt_interval = 0;
  ModelFlags tr_mf;
  tr->add_option("--config", tr_config, "TrainConfig JSON file");
  tr->add_option("--corpus", tr_corpus, "training document JSONL")->required();
  tr->add_option("--out", tr_out, "output directory")->required();
  tr->add_option("--seed", tr_seed, "override init_seed (and data_seed = seed+1)");
  tr->add_option("--steps", tr_steps, "override step count");
  tr->add_option("--hlp", tr_hlp, "train the FIM hlp head")->check(CLI::IsMember({"on", "off"}));
  tr->add_option("--l2r-hlp", tr_l2r, "train the L2R hlp head")->check(CLI::IsMember({"on", "off"}));
  tr->add_option("--resume", tr_resume, "checkpoint to resume from");
  tr->add_option("--ckpt-interval", tr_ckpt_interval, "periodic checkpoint interval (0: final only)");
  add_model_flags(tr, tr_mf);

  // ---- probe ----
  auto* pr = app.add_subcommand("probe", "fit a linear horizon probe on frozen hidden states");
  std::string pr_ckpt, pr_docs, pr_out;
  std::uint64_t pr_seed = 1;
  double pr_test_fraction = 0.2;
  int pr_bins = 10;
  std::string pr_mode = "fim";
  pr->add_option("--ckpt", pr_ckpt, "model checkpoint")->required();
  pr->add_option("--probe-docs", pr_docs, "held-out document JSONL")->required();
  pr->add_option("--seed", pr_seed, "probe split seed");
  pr->add_option("--test-fraction", pr_test_fraction, "held-out document fraction");
  pr->add_option("--bins", pr_bins, "position bins for the curve");
  pr->add_option("--mode", pr_mode, "fim: remaining-middle horizon; l2r: remaining-line horizon")
      ->check(CLI::IsMember({"fim", "l2r"}));
  pr->add_option("--out", pr_out, "output directory")->required();

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "run infill generation and scoring");
  std::string ev_ckpt, ev_tasks, ev_out;
  int ev_max_new = 96;
  bool ev_strip = false;
  ev->add_option("--ckpt", ev_ckpt, "model checkpoint")->required();
  ev->add_option("--tasks", ev_tasks, "task JSONL")->required();
  ev->add_option("--max-new", ev_max_new, "generation budget per task");
  ev->add_flag("--strip-heads", ev_strip, "drop hlp heads before decoding");
  ev->add_option("--out", ev_out, "output directory")->required();

  // ---- compare ----
  auto* cp = app.add_subcommand("compare",
                                "paired NTP vs NTP+HLP run from one init: train, probe, eval both");
  std::string cp_config, cp_corpus, cp_probe_docs, cp_tasks, cp_out;
  std::uint64_t cp_seed = 1;
  std::string cp_l2r = "off";
  std::optional<long> cp_steps;
  int cp_max_new = 96;
  double cp_test_fraction = 0.2;
  int cp_bins = 10;
  ModelFlags cp_mf;
  cp->add_option("--config", cp_config, "TrainConfig JSON file");
  cp->add_option("--corpus", cp_corpus, "training document JSONL")->required();
  cp->add_option("--probe-docs", cp_probe_docs, "held-out document JSONL")->required();
  cp->add_option("--tasks", cp_tasks, "infill task JSONL")->required();
  cp->add_option("--seed", cp_seed, "pair seed: init_seed=seed, data_seed=seed+1, probe=seed+2");
  cp->add_option("--steps", cp_steps, "override step count");
  cp->add_option("--l2r-hlp", cp_l2r, "also train the L2R head in the HLP arm")
      ->check(CLI::IsMember({"on", "off"}));
  cp->add_option("--max-new", cp_max_new, "generation budget per task");
  cp->add_option("--test-fraction", cp_test_fraction, "probe held-out fraction");
  cp->add_option("--bins", cp_bins, "probe curve bins");
  cp->add_option("--out", cp_out, "output directory")->required();
  add_model_flags(cp, cp_mf);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exit 0
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    const int threads = requested_threads();

    if (gen->parsed()) {
      hfim::RunManifest mf;
      mf.command = "gen-corpus";
      mf.seeds = {{"seed", gen_seed}};
      mf.config = {{"n_docs", gen_n_docs},
                   {"max_depth", gen_max_depth},
                   {"max_lines", gen_max_lines},
                   {"threads", threads}};
      return run_with_manifest(gen_out, std::move(mf), [&](const fs::path& out, hfim::RunManifest& m) {
        hfim::GenParams gp;
        gp.max_depth = gen_max_depth;
        gp.max_lines = gen_max_lines;
        const auto docs = hfim::generate_corpus(gen_seed, static_cast<int>(gen_n_docs), gp);
        hfim::write_corpus_jsonl((out / "corpus.jsonl").string(), docs);
        m.outputs.push_back((out / "corpus.jsonl").string());
      });
    }

    if (mk->parsed()) {
      hfim::RunManifest mf;
      mf.command = "make-tasks";
      mf.seeds = {{"seed", mk_seed}};
      mf.inputs = {{"corpus", mk_corpus}};
      mf.config = {{"n_tasks", mk_n_tasks}, {"threads", threads}};
      return run_with_manifest(mk_out, std::move(mf), [&](const fs::path& out, hfim::RunManifest& m) {
        auto docs = hfim::read_corpus_jsonl(mk_corpus);
        if (mk_n_tasks > 0 && static_cast<long>(docs.size()) > mk_n_tasks) {
          docs.resize(static_cast<std::size_t>(mk_n_tasks));
        }
        hfim::Rng rng(mk_seed);
        const auto tasks = hfim::make_infill_tasks(docs, rng);
        hfim::write_tasks_jsonl((out / "tasks.jsonl").string(), tasks);
        m.outputs.push_back((out / "tasks.jsonl").string());
      });
    }

    if (tr->parsed()) {
      hfim::TrainConfig tcfg = load_train_config(tr_config);
      tcfg.hlp_enabled = flag_on(tr_hlp, "--hlp");
      tcfg.l2r_hlp_enabled = flag_on(tr_l2r, "--l2r-hlp");
      if (tr_seed) {
        tcfg.init_seed = *tr_seed;
        tcfg.data_seed = *tr_seed + 1;
      }
      if (tr_steps) tcfg.steps = *tr_steps;
      hfim::validate(tcfg);
      const hfim::ModelConfig mcfg = tr_mf.to_config(tcfg.init_seed);

      hfim::RunManifest mf;
      mf.command = "train";
      mf.config = {{"train", hfim::to_json(tcfg)},
                   {"model", hfim::detail::config_to_json(mcfg)},
                   {"threads", threads}};
      mf.inputs = {{"corpus", tr_corpus}};
      if (!tr_resume.empty()) mf.inputs["resume"] = tr_resume;
      mf.seeds = {{"init_seed", tcfg.init_seed}, {"data_seed", tcfg.data_seed}};
      return run_with_manifest(tr_out, std::move(mf), [&](const fs::path& out, hfim::RunManifest& m) {
        const auto corpus = hfim::read_corpus_jsonl(tr_corpus);
        train_to_dir(out, mcfg, tcfg, corpus, tr_ckpt_interval, tr_resume);
        m.outputs.push_back((out / "ckpt.bin").string());
        m.outputs.push_back((out / "metrics.jsonl").string());
      });
    }

    if (pr->parsed()) {
      hfim::RunManifest mf;
      mf.command = "probe";
      mf.inputs = {{"ckpt", pr_ckpt}, {"probe_docs", pr_docs}};
      mf.seeds = {{"seed", pr_seed}};
      mf.config = {{"test_fraction", pr_test_fraction},
                   {"bins", pr_bins},
                   {"mode", pr_mode},
                   {"threads", threads}};
      return run_with_manifest(pr_out, std::move(mf), [&](const fs::path& out, hfim::RunManifest& m) {
        const hfim::Checkpoint ck = hfim::load_checkpoint(pr_ckpt);
        const auto docs = hfim::read_corpus_jsonl(pr_docs);
        const hfim::ProbeMode mode =
            pr_mode == "l2r" ? hfim::ProbeMode::L2rLineHorizon : hfim::ProbeMode::FimHorizon;
        probe_to_dir(out, ck.config, ck.params, docs, pr_seed, pr_test_fraction, pr_bins, mode);
        m.outputs.push_back((out / "probe.json").string());
        m.outputs.push_back((out / "curve.csv").string());
      });
    }

    if (ev->parsed()) {
      hfim::RunManifest mf;
      mf.command = "eval";
      mf.inputs = {{"ckpt", ev_ckpt}, {"tasks", ev_tasks}};
      mf.config = {{"max_new", ev_max_new}, {"strip_heads", ev_strip}, {"threads", threads}};
      return run_with_manifest(ev_out, std::move(mf), [&](const fs::path& out, hfim::RunManifest& m) {
        hfim::Checkpoint ck = hfim::load_checkpoint(ev_ckpt);
        if (ev_strip) ck.params = hfim::strip_heads(ck.params);
        const auto tasks = hfim::read_tasks_jsonl(ev_tasks);
        eval_to_dir(out, ck.config, ck.params, tasks, ev_max_new);
        m.outputs.push_back((out / "eval.json").string());
      });
    }

    if (cp->parsed()) {
      hfim::TrainConfig base = load_train_config(cp_config);
      // The controlled pair: one init seed, one data stream, hlp toggled.
      base.init_seed = cp_seed;
      base.data_seed = cp_seed + 1;
      if (cp_steps) base.steps = *cp_steps;
      hfim::TrainConfig ntp_cfg = base;
      ntp_cfg.hlp_enabled = false;
      ntp_cfg.l2r_hlp_enabled = false;
      hfim::TrainConfig hlp_cfg = base;
      hlp_cfg.hlp_enabled = true;
      hlp_cfg.l2r_hlp_enabled = flag_on(cp_l2r, "--l2r-hlp");
      hfim::validate(ntp_cfg);
      hfim::validate(hlp_cfg);
      const hfim::ModelConfig mcfg = cp_mf.to_config(cp_seed);
      const std::uint64_t probe_seed = cp_seed + 2;

      hfim::RunManifest mf;
      mf.command = "compare";
      mf.config = {{"train_ntp", hfim::to_json(ntp_cfg)},
                   {"train_hlp", hfim::to_json(hlp_cfg)},
                   {"model", hfim::detail::config_to_json(mcfg)},
                   {"max_new", cp_max_new},
                   {"test_fraction", cp_test_fraction},
                   {"bins", cp_bins},
                   {"threads", threads}};
      mf.inputs = {{"corpus", cp_corpus}, {"probe_docs", cp_probe_docs}, {"tasks", cp_tasks}};
      mf.seeds = {{"seed", cp_seed},
                  {"init_seed", cp_seed},
                  {"data_seed", cp_seed + 1},
                  {"probe_seed", probe_seed}};
      return run_with_manifest(cp_out, std::move(mf), [&](const fs::path& out, hfim::RunManifest& m) {
        const auto corpus = hfim::read_corpus_jsonl(cp_corpus);
        const auto probe_docs = hfim::read_corpus_jsonl(cp_probe_docs);
        const auto tasks = hfim::read_tasks_jsonl(cp_tasks);

        json summary;
        struct Arm {
          const char* name;
          const hfim::TrainConfig* cfg;
        };
        for (const Arm arm : {Arm{"ntp", &ntp_cfg}, Arm{"hlp", &hlp_cfg}}) {
          const fs::path dir = out / arm.name;
          TrainArtifacts art = train_to_dir(dir, mcfg, *arm.cfg, corpus, 0);
          const hfim::ProbeResult probe = probe_to_dir(
              dir, mcfg, art.result.params, probe_docs, probe_seed, cp_test_fraction, cp_bins);
          const hfim::EvalReport report =
              hfim::eval_suite(mcfg, art.result.params, tasks, cp_max_new);
          hfim::write_json_file((dir / "eval.json").string(), hfim::to_json(report));

          summary[arm.name] = {{"r2_train", probe.fit.r2_train},
                               {"r2_test", probe.fit.r2_test},
                               {"em_raw", report.em_raw},
                               {"em_post", report.em_post},
                               {"es_raw", report.es_raw},
                               {"es_post", report.es_post},
                               {"concealment_gap", report.concealment_gap()},
                               {"mean_abs_stop_error", report.mean_abs_stop_error},
                               {"hit_max_rate", report.hit_max_rate}};
          for (const char* f : {"ckpt.bin", "metrics.jsonl", "probe.json", "curve.csv", "eval.json"}) {
            m.outputs.push_back((dir / f).string());
          }
        }
        summary["r2_gap"] =
            summary["hlp"]["r2_test"].get<double>() - summary["ntp"]["r2_test"].get<double>();
        summary["em_raw_delta"] =
            summary["hlp"]["em_raw"].get<double>() - summary["ntp"]["em_raw"].get<double>();
        summary["abs_stop_error_delta"] = summary["hlp"]["mean_abs_stop_error"].get<double>() -
                                          summary["ntp"]["mean_abs_stop_error"].get<double>();
        summary["concealment_gap_delta"] = summary["hlp"]["concealment_gap"].get<double>() -
                                           summary["ntp"]["concealment_gap"].get<double>();
        hfim::write_json_file((out / "compare.json").string(), summary);
        m.outputs.push_back((out / "compare.json").string());
      });
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;  // unreachable with require_subcommand(1)
}
