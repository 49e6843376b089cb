// xflab: single entrypoint for data generation, training, evaluation,
// probing, and report emission.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "xfactor/config.hpp"
#include "xfactor/evaluation.hpp"
#include "xfactor/training.hpp"

namespace fs = std::filesystem;
using namespace xfactor;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitSelfTest = 3;

std::string output_root() {
  if (const char* env = std::getenv("XFLAB_OUT")) return env;
  return "out";
}

ExperimentConfig load_config(const std::string& path) {
  if (path.empty()) return ExperimentConfig{};
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot open config file: " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config parse error in " + path + ": " + e.what());
  }
  return ExperimentConfig::from_json(j);
}

struct Workspace {
  fs::path dir;
  std::string id;

  static Workspace open(const std::string& id, const ExperimentConfig& cfg) {
    Workspace w;
    w.id = id;
    w.dir = fs::path(output_root()) / id;
    fs::create_directories(w.dir / "checkpoints");
    fs::create_directories(w.dir / "logs");
    fs::create_directories(w.dir / "reports");
    fs::create_directories(w.dir / "previews");
    fs::create_directories(w.dir / "stages");
    {
      std::ofstream os(w.dir / "config.json");
      os << cfg.to_json().dump(2) << "\n";
    }
    return w;
  }

  void write_manifest(const ExperimentConfig& cfg, const json& extra) const {
    json m{{"experiment_id", id},
           {"config_path", (dir / "config.json").string()},
           {"config_hash", config_hash(cfg.to_json())},
           {"seed", cfg.train.seed},
           {"layout",
            {{"checkpoints", "checkpoints/"},
             {"logs", "logs/"},
             {"reports", "reports/"},
             {"previews", "previews/"},
             {"stages", "stages/"}}}};
    for (const auto& [k, v] : extra.items()) m[k] = v;
    const fs::path tmp = dir / "manifest.json.tmp";
    {
      std::ofstream os(tmp);
      os << m.dump(2) << "\n";
      if (!os) throw std::runtime_error("manifest write failed");
    }
    fs::rename(tmp, dir / "manifest.json");
  }

  void mark_stage(const std::string& stage) const {
    const fs::path tmp = dir / "stages" / (stage + ".tmp");
    {
      std::ofstream os(tmp);
      os << "done\n";
    }
    fs::rename(tmp, dir / "stages" / (stage + ".done"));
  }
};

std::string latest_checkpoint(const fs::path& dir) {
  std::string best;
  if (!fs::exists(dir)) return best;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.rfind("step_", 0) == 0 && name.size() > 5 && name.find(".xfck") != std::string::npos &&
        name.find(".diagnostic") == std::string::npos && name.find(".tmp") == std::string::npos) {
      if (name > best) best = name;
    }
  }
  return best.empty() ? best : (dir / best).string();
}

void apply_variant(TrainConfig& cfg, const std::string& variant) {
  if (variant == "xfactor") {
    cfg.model.variant = ModelVariant::Unconstrained;
    cfg.objective = Objective::Transferability;
  } else if (variant == "unconstrained") {
    cfg.model.variant = ModelVariant::Unconstrained;
    cfg.objective = Objective::Autoencoding;
  } else if (variant == "bottleneck") {
    cfg.model.variant = ModelVariant::Bottleneck;
    cfg.objective = Objective::Autoencoding;
  } else if (variant == "se3_plucker") {
    cfg.model.variant = ModelVariant::Se3Plucker;
    cfg.objective = Objective::Autoencoding;
  } else if (variant == "av_decoder") {
    cfg.model.variant = ModelVariant::Unconstrained;
    cfg.model.views_decoder = 2;
    cfg.objective = Objective::Transferability;
  } else if (variant == "av_encdec") {
    cfg.model.variant = ModelVariant::Unconstrained;
    cfg.model.views_encoder = 3;
    cfg.model.views_decoder = 2;
    cfg.objective = Objective::Transferability;
  } else {
    throw std::invalid_argument("unknown variant '" + variant + "'");
  }
}

XFactorModel<float> load_model(const std::string& ckpt_path, TrainConfig* cfg_out) {
  auto ck = load_checkpoint(ckpt_path);
  const json meta = json::parse(ck.meta);
  TrainConfig cfg = TrainConfig::from_json(meta.at("config"));
  auto model = XFactorModel<float>::init(cfg.model, cfg.seed);
  AdamW<float>* no_opt = nullptr;
  load_train_checkpoint(ckpt_path, model, no_opt);
  if (cfg_out) *cfg_out = cfg;
  return model;
}

// Harness self-tests run before any model claim: cheating identity must hit
// TPS = 1, and the source-frame leak must be flagged unfaithful.
bool harness_self_test(const DataConfig& data, int image_size) {
  EvalConfig ev;
  ev.n_cases = 2;
  ev.n_targets = 3;
  ev.seed = 0x73656c66;
  RenderFn cheat = [](const SequenceSample&, const SequenceSample& b, int, int t) {
    return b.frames[static_cast<size_t>(t)];
  };
  auto res = eval_transferability(cheat, data, ev, image_size);
  if (res.report.mean.auc20 < 0.999 || res.report.rejection_rate > 0) return false;
  RenderFn leak = [](const SequenceSample& a, const SequenceSample&, int, int t) {
    return a.frames[static_cast<size_t>(t)];
  };
  auto f = eval_faithfulness(leak, data, ev, image_size);
  return f.flagged_unfaithful;
}

int cmd_gen_data(const ExperimentConfig& cfg, const std::string& id, int preview) {
  auto w = Workspace::open(id, cfg);
  const auto& data = cfg.train.data;
  const int size = cfg.train.model.image_size;
  json manifests = json::array();
  for (int i = 0; i < data.dataset_sequences; ++i) {
    const uint64_t seed = Rng::mix(cfg.train.seed, 0x64617461 + i);
    auto seq = make_sequence(seed, data.sequence_length, size, data.orbit);
    DatasetManifest m;
    m.scene_seed = seed;
    m.n_frames = data.sequence_length;
    m.image_size = size;
    m.trajectory = seq.poses;
    m.intrinsics = seq.intrinsics;
    m.config_hash = config_hash(cfg.to_json());
    manifests.push_back(manifest_to_json(m));
    if (i < preview) {
      char name[64];
      std::snprintf(name, sizeof(name), "seq%03d_frame0.png", i);
      write_png((w.dir / "previews" / name).string(), seq.frames[0]);
    }
  }
  {
    const fs::path tmp = w.dir / "dataset.json.tmp";
    std::ofstream os(tmp);
    os << manifests.dump(2) << "\n";
    if (!os) throw std::runtime_error("dataset manifest write failed");
    os.close();
    fs::rename(tmp, w.dir / "dataset.json");
  }
  w.write_manifest(cfg, json{{"dataset", "dataset.json"},
                             {"sequences", data.dataset_sequences}});
  w.mark_stage("gen-data");
  std::cout << "wrote " << data.dataset_sequences << " sequence manifests to "
            << (w.dir / "dataset.json") << "\n";
  return kExitOk;
}

int cmd_train(ExperimentConfig cfg, const std::string& id, const std::string& variant,
              bool resume, const std::string& init, bool multiview) {
  if (!variant.empty()) apply_variant(cfg.train, variant);
  auto w = Workspace::open(id, cfg);
  std::string resume_from;
  if (resume) {
    resume_from = latest_checkpoint(w.dir / "checkpoints");
    if (resume_from.empty()) throw std::invalid_argument("--resume: no checkpoint found in " +
                                                         (w.dir / "checkpoints").string());
  }
  TrainResult r;
  if (multiview) {
    if (init.empty() && !resume) throw std::invalid_argument("finetune requires --init");
    r = train_multiview<float>(cfg.train, init, w.dir.string(), resume_from);
  } else {
    r = train_loop<float>(cfg.train, TrainStage::Stereo, w.dir.string(), init, resume_from);
  }
  w.write_manifest(cfg, json{{"final_checkpoint", r.final_checkpoint},
                             {"final_step", r.final_step},
                             {"final_loss", r.final_loss},
                             {"variant", to_string(cfg.train.model.variant)},
                             {"objective", to_string(cfg.train.objective)}});
  w.mark_stage(multiview ? "finetune" : "train");
  std::cout << "trained to step " << r.final_step << ", final loss " << r.final_loss << ", "
            << r.final_checkpoint << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& ckpt, const std::string& suite, const std::string& id,
             const ExperimentConfig& cfg_cli) {
  TrainConfig tcfg;
  auto model = load_model(ckpt, &tcfg);
  ExperimentConfig cfg = cfg_cli;
  cfg.train = tcfg;
  auto w = Workspace::open(id, cfg);

  if (!harness_self_test(cfg.train.data, cfg.train.model.image_size)) {
    std::cerr << "harness self-test failed\n";
    return kExitSelfTest;
  }

  MetricsReport rep;
  rep.experiment_id = id;
  rep.variant = to_string(cfg.train.model.variant);
  rep.objective = to_string(cfg.train.objective);
  rep.config_hash = config_hash(cfg.train.to_json());
  std::vector<CaseMetrics> cases;

  if (suite == "tps" || suite == "faithfulness" || suite == "all") {
    auto res = eval_transferability(model_render_fn(model), cfg.train.data, cfg.eval,
                                    cfg.train.model.image_size);
    rep.mean = res.report.mean;
    rep.n_cases = res.report.n_cases;
    rep.rejection_rate = res.report.rejection_rate;
    rep.rejection_warning = res.report.rejection_warning;
    cases = res.cases;
    if (rep.rejection_warning)
      std::cerr << "warning: oracle rejection rate " << rep.rejection_rate
                << " exceeds the configured ceiling\n";
  }
  if (suite == "reconstruction" || suite == "all") {
    auto rec = eval_reconstruction(model, cfg.train.data, std::max(1, cfg.eval.n_cases / 4),
                                   Rng::mix(cfg.eval.seed, 0x7265));
    rep.psnr = rec.psnr;
    rep.ssim_score = rec.ssim;
  }
  emit_report((w.dir / "reports").string(), {rep}, {cases});
  w.write_manifest(cfg, json{{"report", "reports/report.json"}, {"suite", suite}});
  w.mark_stage("eval-" + suite);
  std::cout << "report written to " << (w.dir / "reports" / "report.json") << "\n";
  return kExitOk;
}

int cmd_probe(const std::string& ckpt, const std::string& mode, const std::string& id,
              const ExperimentConfig& cfg_cli) {
  TrainConfig tcfg;
  auto model = load_model(ckpt, &tcfg);
  ExperimentConfig cfg = cfg_cli;
  cfg.train = tcfg;
  auto w = Workspace::open(id, cfg);
  ProbeConfig pc;
  pc.seed = Rng::mix(cfg.eval.seed, 0x70726f);
  pc.iters = cfg.eval.probe_iters;
  pc.feature_dim = cfg.eval.probe_feature_dim;
  pc.batch_size = cfg.eval.probe_batch_size;
  const ProbeMode pm = mode == "trajectory" ? ProbeMode::Trajectory : ProbeMode::Pair;
  const int n_samples = std::max(16, cfg.eval.n_cases);
  auto rep = probe_frozen_encoder(model, cfg.train.data, pm, n_samples, cfg.eval.n_targets, pc,
                                  Rng::mix(cfg.eval.seed, 0x646174));
  json j{{"mode", mode},
         {"rra20", rep.rra20},
         {"rta20", rep.rta20},
         {"auc10", rep.auc10},
         {"auc20", rep.auc20},
         {"auc30", rep.auc30},
         {"final_loss", rep.final_loss}};
  {
    std::ofstream os(w.dir / "reports" / ("probe_" + mode + ".json"));
    os << j.dump(2) << "\n";
    if (!os) throw std::runtime_error("probe report write failed");
  }
  w.write_manifest(cfg, json{{"probe_report", "reports/probe_" + mode + ".json"}});
  w.mark_stage("probe-" + mode);
  std::cout << "probe " << mode << ": auc20=" << rep.auc20 << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xflab: pose-latent novel view synthesis lab"};
  app.require_subcommand(1);

  std::string config_path, id, variant, init, ckpt;
  std::string suite = "all", mode = "pair";
  int preview = 0, threads = 1;
  bool resume = false;
  app.add_option("--threads", threads, "worker cap (single-threaded build)");

  auto* gen = app.add_subcommand("gen-data", "write dataset seed manifests");
  gen->add_option("--config", config_path, "experiment config JSON");
  gen->add_option("--id", id, "experiment id");
  gen->add_option("--preview", preview, "emit N preview PNGs");

  auto* train = app.add_subcommand("train", "stereo-stage training");
  train->add_option("--config", config_path, "experiment config JSON");
  train->add_option("--id", id, "experiment id");
  train->add_option("--init", init, "warm-start checkpoint");
  train->add_flag("--resume", resume, "resume from the latest checkpoint");

  auto* fine = app.add_subcommand("finetune", "multi-view fine-tuning stage");
  fine->add_option("--config", config_path, "experiment config JSON");
  fine->add_option("--id", id, "experiment id");
  fine->add_option("--init", init, "stereo-stage checkpoint");
  fine->add_flag("--resume", resume, "resume from the latest checkpoint");

  auto* abl = app.add_subcommand("ablate", "train an ablation variant");
  abl->add_option("--config", config_path, "experiment config JSON");
  abl->add_option("--id", id, "experiment id");
  abl->add_option("--variant", variant,
                  "xfactor|unconstrained|bottleneck|se3_plucker|av_decoder|av_encdec")
      ->required();
  abl->add_flag("--resume", resume, "resume from the latest checkpoint");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--config", config_path, "experiment config JSON (eval section)");
  ev->add_option("--id", id, "experiment id");
  ev->add_option("--checkpoint", ckpt, "checkpoint path")->required();
  ev->add_option("--suite", suite, "tps|faithfulness|reconstruction|all");

  auto* pr = app.add_subcommand("probe", "pose-probe frozen latents");
  pr->add_option("--config", config_path, "experiment config JSON (eval section)");
  pr->add_option("--id", id, "experiment id");
  pr->add_option("--checkpoint", ckpt, "checkpoint path")->required();
  pr->add_option("--mode", mode, "pair|trajectory");

  CLI11_PARSE(app, argc, argv);
  (void)threads;  // core is single-threaded; flag reserved for compatibility

  try {
    ExperimentConfig cfg = load_config(config_path);
    if (id.empty()) id = app.get_subcommands()[0]->get_name() + "-" +
                         config_hash(cfg.to_json()).substr(0, 8);
    if (gen->parsed()) return cmd_gen_data(cfg, id, preview);
    if (train->parsed()) return cmd_train(cfg, id, "", resume, init, false);
    if (fine->parsed()) return cmd_train(cfg, id, "", resume, init, true);
    if (abl->parsed()) return cmd_train(cfg, id, variant, resume, init, false);
    if (ev->parsed()) {
      if (suite != "tps" && suite != "faithfulness" && suite != "reconstruction" &&
          suite != "all")
        throw std::invalid_argument("unknown suite '" + suite + "'");
      return cmd_eval(ckpt, suite, id, cfg);
    }
    if (pr->parsed()) {
      if (mode != "pair" && mode != "trajectory")
        throw std::invalid_argument("unknown probe mode '" + mode + "'");
      return cmd_probe(ckpt, mode, id, cfg);
    }
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
