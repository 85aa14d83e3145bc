// slicetrack command line: dataset synthesis, training, tracker/baseline
// inference, evaluation, and the one-element-removed ablation harness, all
// driven by a single JSON config whose leaf keys can be overridden with
// --set section.key=value.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "slicetrack/baseline.hpp"
#include "slicetrack/config.hpp"
#include "slicetrack/evaluation.hpp"
#include "slicetrack/network.hpp"
#include "slicetrack/synthdata.hpp"
#include "slicetrack/tracker.hpp"
#include "slicetrack/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace slicetrack;

namespace {

// SLICETRACK_VERBOSE=0 silences progress output; errors still go to stderr.
bool verbose() {
  static const bool v = [] {
    const char* e = std::getenv("SLICETRACK_VERBOSE");
    return !e || std::string(e) != "0";
  }();
  return v;
}

template <class... Args>
void say(const char* fmt, Args... args) {
  if (!verbose()) return;
  std::printf(fmt, args...);
  std::fflush(stdout);
}

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
};

config::LoadedConfig load(const CommonArgs& args) {
  return config::load_config(args.config_path, args.overrides);
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  out << j.dump(2) << "\n";
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError("malformed JSON (" + std::string(e.what()) + "): " + path.string());
  }
  return j;
}

// ---- synth ---------------------------------------------------------------

int cmd_synth(const CommonArgs& args, const std::string& out_dir) {
  const auto cfg = load(args);
  const auto& data = cfg.run.data;
  data.spec.validate();
  require(data.n_volumes >= 1, "synth: data.n_volumes must be >= 1");
  double frac_total = 0.0;
  for (const auto& [name, f] : data.split) {
    require(f >= 0.0, "synth: negative split fraction for " + name);
    frac_total += f;
  }
  require(std::abs(frac_total - 1.0) < 1e-6, "synth: split fractions must sum to 1");

  synth::Dataset ds;
  ds.spec = data.spec;
  ds.config_hash = cfg.hash;
  for (int i = 0; i < data.n_volumes; ++i) {
    synth::VolumeSpec vs = data.spec;
    vs.seed = data.spec.seed + static_cast<std::uint64_t>(i);
    auto [vol, instances] = synth::generate_volume(vs);
    ds.volumes.push_back({i, std::move(vol), std::move(instances)});
  }

  // deterministic shuffled split
  std::vector<long> ids(static_cast<std::size_t>(data.n_volumes));
  std::iota(ids.begin(), ids.end(), 0l);
  Rng rng(data.spec.seed, 0xA11ul);
  for (std::size_t i = ids.size(); i > 1; --i)
    std::swap(ids[i - 1], ids[rng.uniform_below(i)]);
  std::size_t cursor = 0;
  std::size_t assigned = 0;
  std::vector<std::pair<std::string, double>> ordered(data.split.begin(), data.split.end());
  for (std::size_t k = 0; k < ordered.size(); ++k) {
    std::size_t count = (k + 1 == ordered.size())
                            ? ids.size() - assigned
                            : static_cast<std::size_t>(ordered[k].second * data.n_volumes + 0.5);
    count = std::min(count, ids.size() - assigned);
    std::vector<long> members(ids.begin() + static_cast<std::ptrdiff_t>(cursor),
                              ids.begin() + static_cast<std::ptrdiff_t>(cursor + count));
    std::sort(members.begin(), members.end());
    ds.splits[ordered[k].first] = std::move(members);
    cursor += count;
    assigned += count;
  }

  synth::write_dataset(ds, out_dir);
  int n_instances = 0;
  for (const auto& rec : ds.volumes) n_instances += static_cast<int>(rec.instances.size());
  say("synth: wrote %d volumes (%d instances) to %s\n", data.n_volumes, n_instances,
              out_dir.c_str());
  for (const auto& [name, members] : ds.splits)
    say("synth: split %s: %zu volumes\n", name.c_str(), members.size());
  return 0;
}

// ---- train ---------------------------------------------------------------

int cmd_train(const CommonArgs& args, const std::string& dataset_dir, const std::string& out_dir,
              const std::string& resume_path, bool no_masked_attention, bool no_sim_loss,
              int threads_override, int steps_override) {
  auto cfg = load(args);
  if (no_masked_attention) cfg.run.model.masked_attention = false;
  if (no_sim_loss) cfg.run.train.sim_loss_enabled = false;
  if (threads_override > 0) cfg.run.train.n_threads = threads_override;
  if (steps_override > 0) cfg.run.train.total_steps = steps_override;
  cfg.run.train.validate();
  cfg.run.model.validate();

  const std::string split =
      fs::exists(fs::path(dataset_dir) / "manifest_train.json") ? "train" : "";
  const synth::Dataset data = synth::read_dataset(dataset_dir, split);
  require(!data.volumes.empty(), "train: dataset has no volumes");

  fs::create_directories(out_dir);
  net::Model model(cfg.run.model);
  train::Trainer trainer(model, cfg.run.train);

  if (!resume_path.empty()) {
    net::Checkpoint ck;
    model = net::load_model(resume_path, &ck);
    // model was reconstructed; rebind the trainer to it
    trainer = train::Trainer(model, cfg.run.train);
    std::map<std::string, Tensor> opt_state;
    for (const auto& [name, t] : ck.tensors)
      if (name.rfind("opt/", 0) == 0) opt_state[name.substr(4)] = t;
    trainer.optimizer().restore(opt_state);
    trainer.set_step_count(ck.header.at("extra").value("step", 0));
    say("train: resumed from %s at step %d\n", resume_path.c_str(),
                trainer.step_count());
  }

  std::ofstream log(fs::path(out_dir) / "metrics.jsonl",
                    resume_path.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw DataError("cannot open metrics log in " + out_dir);
  if (resume_path.empty())
    log << json{{"type", "meta"},
                {"config_hash", cfg.hash},
                {"sim_loss_enabled", cfg.run.train.sim_loss_enabled},
                {"masked_attention", cfg.run.model.masked_attention}}
               .dump()
        << "\n";

  const fs::path ckpt_path = fs::path(out_dir) / "checkpoint.bin";
  auto save = [&](int step) {
    json extra{{"step", step}, {"config_hash", cfg.hash}, {"train", cfg.run.train}};
    net::save_checkpoint(ckpt_path, cfg.run.model, model.params(), extra,
                         trainer.optimizer().state());
  };

  while (trainer.step_count() < cfg.run.train.total_steps) {
    const auto m = trainer.step(data);
    json line{{"step", m.step},     {"lr", m.lr},         {"total", m.total},
              {"det", m.det},       {"det_ref", m.det_ref}, {"track", m.track},
              {"sim", m.sim},       {"grad_norm", m.grad_norm}};
    log << line.dump() << "\n";
    if (m.step % 50 == 0 || m.step == cfg.run.train.total_steps) {
      say("train: step %d/%d total %.4f lr %.2e\n", m.step, cfg.run.train.total_steps,
          m.total, m.lr);
      log.flush();
    }
    if (cfg.run.train.checkpoint_every > 0 && m.step % cfg.run.train.checkpoint_every == 0)
      save(m.step);
  }
  save(trainer.step_count());
  say("train: finished at step %d, checkpoint %s\n", trainer.step_count(),
              ckpt_path.string().c_str());
  return 0;
}

// ---- infer ---------------------------------------------------------------

std::vector<track::Prediction> infer_baseline(const net::Model& model,
                                              const synth::Volume& volume,
                                              const track::TrackerConfig& tracker_cfg,
                                              const config::BaselineConfig& base_cfg) {
  ad::NoGradGuard no_grad;
  std::map<int, std::vector<baseline::ScoredBox>> per_slice;
  for (int z = 0; z < volume.shape[2]; ++z) {
    nn::ParamGraph pg(model.params(), false);
    const Tensor stack = synth::slice_stack(volume, z, model.config().n_input_slices);
    const auto fwd = model.forward(pg, stack, {});
    const auto out = net::extract_final(fwd);
    std::vector<baseline::ScoredBox> dets;
    for (const auto& d : out.det)
      if (d.score > tracker_cfg.tau_det) dets.push_back({d.score, d.box});
    std::sort(dets.begin(), dets.end(),
              [](const baseline::ScoredBox& a, const baseline::ScoredBox& b) {
                return a.score > b.score;
              });
    if (!dets.empty()) per_slice[z] = std::move(dets);
  }
  return baseline::stack_2d_to_3d(per_slice, base_cfg.iou_gate, base_cfg.max_gap,
                                  volume.shape[0], volume.shape[1],
                                  tracker_cfg.min_track_length);
}

int cmd_infer(const CommonArgs& args, const std::string& checkpoint_path,
              const std::string& dataset_dir, const std::string& split, const std::string& mode,
              const std::string& out_dir, int n_threads) {
  const auto cfg = load(args);
  require(mode == "tracker" || mode == "baseline", "infer: mode must be tracker or baseline");
  cfg.run.tracker.validate();

  net::Checkpoint ck;
  const net::Model model = net::load_model(checkpoint_path, &ck);
  if (model.config().n_input_slices != cfg.run.model.n_input_slices)
    throw ConfigError("infer: checkpoint n_input_slices differs from config");

  const std::string use_split =
      !split.empty() ? split
                     : (fs::exists(fs::path(dataset_dir) / "manifest_test.json") ? "test" : "");
  const synth::Dataset data = synth::read_dataset(dataset_dir, use_split);
  require(!data.volumes.empty(), "infer: dataset has no volumes");
  fs::create_directories(out_dir);

  auto run_one = [&](const synth::VolumeRecord& rec) {
    return mode == "tracker" ? track::run_volume(model, rec.volume, cfg.run.tracker)
                             : infer_baseline(model, rec.volume, cfg.run.tracker,
                                              cfg.run.baseline);
  };

  std::vector<std::vector<track::Prediction>> all(data.volumes.size());
  const int threads = std::max(1, n_threads);
  if (threads > 1) {
    std::vector<std::future<std::vector<track::Prediction>>> futures;
    for (const auto& rec : data.volumes)
      futures.push_back(std::async(std::launch::async, [&run_one, &rec] { return run_one(rec); }));
    for (std::size_t i = 0; i < futures.size(); ++i) all[i] = futures[i].get();
  } else {
    for (std::size_t i = 0; i < data.volumes.size(); ++i) all[i] = run_one(data.volumes[i]);
  }

  int total = 0;
  for (std::size_t i = 0; i < data.volumes.size(); ++i) {
    json preds = json::array();
    for (const auto& p : all[i]) preds.push_back(p);
    total += static_cast<int>(all[i].size());
    json out{{"volume_id", data.volumes[i].id},
             {"mode", mode},
             {"config_hash", cfg.hash},
             {"tracker", cfg.run.tracker},
             {"baseline", cfg.run.baseline},
             {"predictions", preds}};
    write_json_file(fs::path(out_dir) / ("pred_" + std::to_string(data.volumes[i].id) + ".json"),
                    out);
  }
  say("infer: %s mode, %zu volumes, %d predictions -> %s\n", mode.c_str(),
              data.volumes.size(), total, out_dir.c_str());
  return 0;
}

// ---- eval ----------------------------------------------------------------

std::vector<eval::VolumeEntry> collect_entries(const synth::Dataset& data,
                                               const std::string& pred_dir) {
  std::vector<eval::VolumeEntry> entries;
  std::vector<std::string> missing;
  for (const auto& rec : data.volumes) {
    const fs::path pred_path = fs::path(pred_dir) / ("pred_" + std::to_string(rec.id) + ".json");
    if (!fs::exists(pred_path)) {
      missing.push_back(pred_path.string());
      continue;
    }
    eval::VolumeEntry entry;
    entry.id = std::to_string(rec.id);
    const json j = read_json_file(pred_path);
    for (const auto& pj : j.at("predictions")) {
      const auto p = pj.get<track::Prediction>();
      entry.preds.push_back({p.box, p.score});
    }
    for (const auto& inst : rec.instances)
      if (auto box = synth::instance_box3d(inst, rec.volume.shape[0], rec.volume.shape[1]))
        entry.gts.push_back(*box);
    entries.push_back(std::move(entry));
  }
  if (!missing.empty()) {
    std::string msg = "eval: missing prediction files:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw DataError(msg);
  }
  return entries;
}

int cmd_eval(const CommonArgs& args, const std::string& pred_dir, const std::string& dataset_dir,
             const std::string& split, const std::string& out_dir) {
  const auto cfg = load(args);
  const std::string use_split =
      !split.empty() ? split
                     : (fs::exists(fs::path(dataset_dir) / "manifest_test.json") ? "test" : "");
  const synth::Dataset data = synth::read_dataset(dataset_dir, use_split);
  const auto entries = collect_entries(data, pred_dir);

  const auto report = eval::evaluate(entries, cfg.run.eval.iou_thresh, cfg.run.eval.fp_points);
  fs::create_directories(out_dir);
  json rj = report;
  rj["config_hash"] = cfg.hash;
  write_json_file(fs::path(out_dir) / "report.json", rj);
  eval::write_froc_csv(fs::path(out_dir) / "froc.csv", report.froc, cfg.hash);
  eval::write_froc_svg(fs::path(out_dir) / "froc.svg", report.froc, cfg.hash);

  say("eval: %d volumes, %d GT, %d preds | AS %.4f AP %.4f frag %.3f merge %.3f\n",
              report.n_volumes, report.n_gt, report.n_preds, report.avg_sensitivity, report.ap,
              report.fragmentation, report.merge_rate);
  for (const auto& [f, s] : report.sensitivity)
    say("eval: sensitivity @ %g FP/volume = %.4f\n", f, s);
  return 0;
}

// ---- ablate ----------------------------------------------------------------

int cmd_ablate(const CommonArgs& args, const std::string& dataset_dir,
               const std::string& out_dir, int threads, int steps_override) {
  struct Variant {
    std::string name;
    bool no_mask;
    bool no_sim;
    std::string infer_mode;
    std::string train_dir;  // variants can share a training run
  };
  // one element removed at a time; "no track queries" reuses the full model
  // and stacks raw detections instead of tracking
  const std::vector<Variant> variants{
      {"full", false, false, "tracker", "full"},
      {"no_masked_attention", true, false, "tracker", "no_masked_attention"},
      {"no_sim_loss", false, true, "tracker", "no_sim_loss"},
      {"no_track_queries", false, false, "baseline", "full"},
  };

  fs::create_directories(out_dir);
  std::map<std::string, eval::EvalReport> reports;
  for (const auto& v : variants) {
    const fs::path vdir = fs::path(out_dir) / v.name;
    const fs::path tdir = fs::path(out_dir) / v.train_dir;
    if (v.train_dir == v.name) {
      say("ablate: training variant %s\n", v.name.c_str());
      const int rc = cmd_train(args, dataset_dir, vdir.string(), "", v.no_mask, v.no_sim,
                               threads, steps_override);
      if (rc != 0) return rc;
    }
    const int rc_i = cmd_infer(args, (tdir / "checkpoint.bin").string(), dataset_dir, "",
                               v.infer_mode, (vdir / "preds").string(), threads);
    if (rc_i != 0) return rc_i;
    const int rc_e = cmd_eval(args, (vdir / "preds").string(), dataset_dir, "",
                              (vdir / "eval").string());
    if (rc_e != 0) return rc_e;
    const json rj = read_json_file(vdir / "eval" / "report.json");
    eval::EvalReport rep;
    rep.avg_sensitivity = rj.at("avg_sensitivity").get<double>();
    rep.ap = rj.at("ap").get<double>();
    rep.fragmentation = rj.at("fragmentation").get<double>();
    rep.merge_rate = rj.at("merge_rate").get<double>();
    reports[v.name] = rep;
  }

  const auto cfg = load(args);
  const auto& base = reports.at("full");
  json table = json::array();
  say("\nablate: %-22s %8s %8s %8s %8s\n", "variant", "AS", "dAS", "AP", "dAP");
  for (const auto& v : variants) {
    const auto& r = reports.at(v.name);
    const double das = r.avg_sensitivity - base.avg_sensitivity;
    const double dap = r.ap - base.ap;
    say("ablate: %-22s %8.4f %+8.4f %8.4f %+8.4f\n", v.name.c_str(), r.avg_sensitivity,
                das, r.ap, dap);
    table.push_back({{"variant", v.name},
                     {"as", r.avg_sensitivity},
                     {"delta_as", das},
                     {"ap", r.ap},
                     {"delta_ap", dap},
                     {"fragmentation", r.fragmentation},
                     {"merge_rate", r.merge_rate}});
  }
  write_json_file(fs::path(out_dir) / "ablation_report.json",
                  json{{"config_hash", cfg.hash}, {"table", table}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"slicetrack: detection-by-tracking for anisotropic volumes"};
  app.require_subcommand(1);
  app.fallthrough();

  CommonArgs common;
  app.add_option("--config", common.config_path, "JSON config file (defaults when omitted)");
  app.add_option("--set", common.overrides, "override a config leaf, e.g. --set train.lr=1e-3");

  std::string out_dir = "out", dataset_dir, checkpoint_path, pred_dir, resume_path;
  std::string split, mode = "tracker";
  bool no_masked_attention = false, no_sim_loss = false;
  int threads = 1, steps = 0;
  double tau_det = -1, tau_track = -1, tau_sim = -1;

  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset");
  synth_cmd->add_option("--out", out_dir, "output dataset directory")->required();

  auto* train_cmd = app.add_subcommand("train", "train the detector");
  train_cmd->add_option("--dataset", dataset_dir, "dataset directory")->required();
  train_cmd->add_option("--out", out_dir, "output directory")->required();
  train_cmd->add_option("--resume", resume_path, "checkpoint to resume from");
  train_cmd->add_flag("--no-masked-attention", no_masked_attention,
                      "ablation: disable the track->det blocking mask");
  train_cmd->add_flag("--no-sim-loss", no_sim_loss, "ablation: drop the similarity loss");
  train_cmd->add_option("--threads", threads, "worker threads for batch elements");
  train_cmd->add_option("--steps", steps, "override train.total_steps");

  auto* infer_cmd = app.add_subcommand("infer", "run tracker or baseline inference");
  infer_cmd->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
  infer_cmd->add_option("--dataset", dataset_dir, "dataset directory")->required();
  infer_cmd->add_option("--split", split, "dataset split (default: test if present)");
  infer_cmd->add_option("--mode", mode, "tracker|baseline")->required();
  infer_cmd->add_option("--out", out_dir, "output directory")->required();
  infer_cmd->add_option("--threads", threads, "volumes processed in parallel");
  infer_cmd->add_option("--tau-det", tau_det, "override tracker.tau_det");
  infer_cmd->add_option("--tau-track", tau_track, "override tracker.tau_track");
  infer_cmd->add_option("--tau-sim", tau_sim, "override tracker.tau_sim");

  auto* eval_cmd = app.add_subcommand("eval", "score predictions against a dataset");
  eval_cmd->add_option("--predictions", pred_dir, "prediction directory")->required();
  eval_cmd->add_option("--dataset", dataset_dir, "dataset directory")->required();
  eval_cmd->add_option("--split", split, "dataset split (default: test if present)");
  eval_cmd->add_option("--out", out_dir, "output directory")->required();

  auto* ablate_cmd = app.add_subcommand("ablate", "one-element-removed ablation runs");
  ablate_cmd->add_option("--dataset", dataset_dir, "dataset directory")->required();
  ablate_cmd->add_option("--out", out_dir, "output directory")->required();
  ablate_cmd->add_option("--threads", threads, "worker threads");
  ablate_cmd->add_option("--steps", steps, "override train.total_steps for every variant");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth_cmd->parsed()) return cmd_synth(common, out_dir);
    if (train_cmd->parsed())
      return cmd_train(common, dataset_dir, out_dir, resume_path, no_masked_attention,
                       no_sim_loss, threads, steps);
    if (infer_cmd->parsed()) {
      if (tau_det >= 0) common.overrides.push_back("tracker.tau_det=" + std::to_string(tau_det));
      if (tau_track >= 0)
        common.overrides.push_back("tracker.tau_track=" + std::to_string(tau_track));
      if (tau_sim >= 0) common.overrides.push_back("tracker.tau_sim=" + std::to_string(tau_sim));
      return cmd_infer(common, checkpoint_path, dataset_dir, split, mode, out_dir, threads);
    }
    if (eval_cmd->parsed()) return cmd_eval(common, pred_dir, dataset_dir, split, out_dir);
    if (ablate_cmd->parsed()) return cmd_ablate(common, dataset_dir, out_dir, threads, steps);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %.200s\n", e.what());
    return 1;
  }
  return 1;
}
