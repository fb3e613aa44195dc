#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>

#include "hdbformer/hdbformer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace hdbf;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitThreshold = 4;

struct Configs {
  ModelConfig model;
  TrainConfig train;
};

Configs load_configs(const std::string& path) {
  Configs c;
  if (path.empty()) return c;
  const TomlDoc doc = TomlDoc::load(path);
  c.model = model_config_from(doc);
  c.train = train_config_from(doc);
  doc.reject_unknown();
  return c;
}

std::pair<std::size_t, std::size_t> parse_hw(const std::string& s) {
  const auto x = s.find('x');
  try {
    if (x == std::string::npos) throw std::invalid_argument(s);
    std::size_t used = 0;
    const std::size_t h = std::stoul(s.substr(0, x), &used);
    if (used != x) throw std::invalid_argument(s);
    const std::string ws = s.substr(x + 1);
    const std::size_t w = std::stoul(ws, &used);
    if (used != ws.size()) throw std::invalid_argument(s);
    return {h, w};
  } catch (const std::exception&) {
    throw ConfigError("--hw expects HxW, got " + s);
  }
}

/// Parameter counts aggregated to the first `depth` name components.
std::map<std::string, std::uint64_t> grouped_params(const ParamStore<float>& ps, int depth) {
  std::map<std::string, std::uint64_t> out;
  for (const auto& info : ps.infos()) {
    std::size_t pos = 0;
    for (int d = 0; d < depth && pos != std::string::npos; ++d) pos = info.name.find('.', pos + (d ? 1 : 0));
    out[info.name.substr(0, pos)] += info.numel();
  }
  return out;
}

int cmd_summary(const std::string& config_path) {
  const Configs c = load_configs(config_path);
  const auto& e = c.model.encoder;
  HdbFormer<float> model(c.model, c.train.seed);
  std::cout << "input " << e.input_h << "x" << e.input_w << ", C=" << e.base_channels
            << ", K=" << c.model.num_classes << ", depth encoder "
            << depth_encoder_name(e.depth_encoder_kind) << ", base branch "
            << (e.base_branch_enabled ? "on" : "off") << ", fusion "
            << fusion_kind_name(c.model.fusion_kind);
  if (c.model.fusion_kind == FusionKind::miim) std::cout << " (" << c.model.miim.flags_label() << ")";
  std::cout << "\n\nmodules (parameters):\n";
  for (const auto& [name, n] : grouped_params(model.params(), 2))
    std::cout << "  " << std::left << std::setw(28) << name << n << "\n";
  std::cout << "  " << std::left << std::setw(28) << "total" << model.params().total_count() << "\n";

  NoGradGuard no_grad;
  const Tensor<float> rgb({1, 3, e.input_h, e.input_w}, 0.5f);
  const Tensor<float> depth({1, 1, e.input_h, e.input_w}, 0.5f);
  const ForwardTrace<float> t = model.trace(rgb, depth);
  std::cout << "\nshapes:\n";
  for (std::size_t i = 0; i < 4; ++i) {
    std::cout << "  stage" << i + 1 << "  rgb " << to_string(t.encoded.rgb[i].shape()) << "  depth "
              << to_string(t.encoded.depth[i].shape()) << "  fused " << to_string(t.fused[i].f_rgb.shape())
              << "\n";
  }
  std::cout << "  logits  " << to_string(t.logits.shape()) << "\n";
  return kExitOk;
}

int cmd_flops(const std::string& config_path, const std::string& hw, bool as_json) {
  const Configs c = load_configs(config_path);
  auto [H, W] = hw.empty() ? std::pair{c.model.encoder.input_h, c.model.encoder.input_w} : parse_hw(hw);
  EncoderConfig::check_input(H, W);
  const ProfileReport rep = count_flops(c.model, H, W);
  if (as_json) {
    json j;
    j["input"] = {H, W};
    j["total"] = {{"params", rep.total.params},
                  {"flops", rep.total.flops},
                  {"peak_bytes", rep.total.peak_bytes},
                  {"attention_bytes", rep.attention_bytes}};
    j["modules"] = json::array();
    for (const auto& r : rep.rows)
      j["modules"].push_back(
          {{"module", r.module}, {"params", r.params}, {"flops", r.flops}, {"peak_bytes", r.peak_bytes}});
    std::cout << j.dump(2) << "\n";
    return kExitOk;
  }
  std::cout << std::left << std::setw(36) << "module" << std::right << std::setw(12) << "params"
            << std::setw(16) << "flops" << std::setw(14) << "peak_bytes" << "\n";
  for (const auto& r : rep.rows)
    std::cout << std::left << std::setw(36) << r.module << std::right << std::setw(12) << r.params
              << std::setw(16) << r.flops << std::setw(14) << r.peak_bytes << "\n";
  std::cout << std::left << std::setw(36) << "total" << std::right << std::setw(12)
            << rep.total.params << std::setw(16) << rep.total.flops << std::setw(14)
            << rep.total.peak_bytes << "\n";
  return kExitOk;
}

int cmd_gradcheck(const std::string& module, const std::vector<std::uint64_t>& seeds) {
  const auto suite = gradcheck_suite();
  bool found = module.empty(), ok = true;
  for (const auto& f : suite) {
    if (!module.empty() && f.name != module) continue;
    found = true;
    for (const auto seed : seeds) {
      const GradCheckReport r = run_gradcheck(f, seed);
      std::cout << (r.ok() ? "ok   " : "FAIL ") << std::left << std::setw(24) << f.name << " seed "
                << seed << "  coords " << r.checked << "  max_abs_err " << r.max_abs_err << "\n";
      for (const auto& m : r.failures)
        std::cout << "       " << m.tensor << "[" << m.index << "] analytic " << m.analytic
                  << " numeric " << m.numeric << "\n";
      ok = ok && r.ok();
    }
  }
  if (!found) {
    std::string names;
    for (const auto& n : gradcheck_subject_names()) names += " " + n;
    throw ConfigError("unknown gradcheck module '" + module + "'; available:" + names);
  }
  return ok ? kExitOk : kExitThreshold;
}

int cmd_train(const std::string& config_path, long steps, const std::string& out_dir) {
  Configs c = load_configs(config_path);
  if (steps >= 0) c.train.total_steps = static_cast<std::size_t>(steps);
  fs::create_directories(out_dir);
  HdbFormer<float> model(c.model, c.train.seed);
  std::ofstream log(fs::path(out_dir) / "log.csv");
  log << "step,lr,loss\n";
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult res = train(model, c.train, [&](const TrainLogEntry& e) {
    log << e.step << ',' << e.lr << ',' << e.loss << '\n';
    if (e.step % 50 == 0) std::cout << "step " << e.step << "  lr " << e.lr << "  loss " << e.loss << std::endl;
  });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  model.params().save((fs::path(out_dir) / "model.bin").string());
  {
    std::ofstream cfg(fs::path(out_dir) / "config.toml");
    cfg << to_toml(c.model, c.train);
  }
  json j;
  j["steps"] = c.train.total_steps;
  j["seconds"] = secs;
  j["evals"] = json::array();
  for (const auto& [step, e] : res.evals)
    j["evals"].push_back({{"step", step}, {"miou", e.miou}, {"pixel_acc", e.pixel_acc}});
  std::ofstream(fs::path(out_dir) / "metrics.json") << j.dump(2) << "\n";
  std::cout << "held-out miou " << res.final_eval.miou << "  pixel_acc " << res.final_eval.pixel_acc
            << "  (" << secs << " s)\n";
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, bool msflip, bool assert_thresholds, double min_miou,
             double min_acc, const std::string& dump_dir) {
  fs::path ckpt(checkpoint);
  if (fs::is_directory(ckpt)) ckpt /= "model.bin";
  if (!fs::is_regular_file(ckpt)) throw DataError("checkpoint not found: " + ckpt.string());
  const Configs c = load_configs((ckpt.parent_path() / "config.toml").string());
  HdbFormer<float> model(c.model, c.train.seed);
  model.params().load(ckpt.string());
  const auto& e = c.model.encoder;
  const auto scenes = held_out_scenes(c.train.eval_scenes, e.input_h, e.input_w, c.model.num_classes);
  const EvalResult r = evaluate(model, scenes, c.train.batch_size, msflip);
  std::cout << "miou " << r.miou << "  pixel_acc " << r.pixel_acc << "\n";
  for (std::size_t k = 0; k < r.class_iou.size(); ++k)
    std::cout << "  class " << k << " iou " << r.class_iou[k] << "\n";
  if (!dump_dir.empty()) {
    fs::create_directories(dump_dir);
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      const Batch b = make_batch({scenes[i]});
      const auto res = msflip_infer(model, b.rgb, b.depth,
                                    msflip ? MsFlipOptions{} : MsFlipOptions{{1.0}, false});
      char stem[32];
      std::snprintf(stem, sizeof stem, "scene%03zu", i);
      const fs::path base = fs::path(dump_dir) / stem;
      write_file(base.string() + ".pgm", encode_pgm(res.pred));
      write_probabilities(base.string(), res.probs);
    }
  }
  if (assert_thresholds && !(r.miou >= min_miou && r.pixel_acc >= min_acc)) {
    std::cerr << "threshold miss: need miou >= " << min_miou << " and pixel_acc >= " << min_acc << "\n";
    return kExitThreshold;
  }
  return kExitOk;
}

int cmd_ablate(const std::string& grid, const std::string& out, const std::string& config_path,
               long steps) {
  Configs c = load_configs(config_path);
  if (steps >= 0) c.train.total_steps = static_cast<std::size_t>(steps);
  std::vector<AblationRow> rows;
  if (grid == "branches") rows = fusion_branch_grid(c.model);
  else if (grid == "attention") rows = attention_variant_grid(c.model);
  else throw ConfigError("--grid must be branches or attention");
  const auto results = run_ablation(rows, c.train, c.train.seed, [](const AblationResult& r) {
    std::cout << std::left << std::setw(22) << r.name << " params " << r.params << "  peak_mem "
              << r.peak_mem;
    if (r.trained) std::cout << "  miou " << r.eval.miou << "  pixel_acc " << r.eval.pixel_acc;
    std::cout << std::endl;
  });
  std::ofstream f(out, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + out);
  write_ablation_csv(f, results);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HDBFormer RGB-D segmentation toolkit"};
  app.require_subcommand(1);

  std::string config, hw, module, out, checkpoint, grid, dump_dir;
  bool as_json = false, msflip = false, assert_thresholds = false;
  std::vector<std::uint64_t> seeds;
  long steps = -1;
  double min_miou = 0.80, min_acc = 0.90;

  auto* summary = app.add_subcommand("summary", "Module tree, parameter counts, and feature shapes");
  summary->add_option("--config", config, "TOML config")->check(CLI::ExistingFile);

  auto* flops = app.add_subcommand("flops", "Analytic parameter, FLOP, and peak-memory report");
  flops->add_option("--config", config, "TOML config")->check(CLI::ExistingFile);
  flops->add_option("--hw", hw, "Input size as HxW (default: config input size)");
  flops->add_flag("--json", as_json, "Emit JSON");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gradcheck->add_option("--module", module, "Subject name (default: all)");
  gradcheck->add_option("--seed", seeds, "Seed(s) (default: 0..4)");

  auto* train_cmd = app.add_subcommand("train", "Train on synthetic scenes and write a checkpoint");
  train_cmd->add_option("--config", config, "TOML config")->check(CLI::ExistingFile);
  train_cmd->add_option("--steps", steps, "Override total_steps")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--out", out, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on held-out scenes");
  eval->add_option("--checkpoint", checkpoint, "model.bin or its directory")->required();
  eval->add_flag("--msflip", msflip, "Multi-scale and flip inference");
  eval->add_flag("--assert", assert_thresholds, "Exit 4 when below thresholds");
  eval->add_option("--min-miou", min_miou, "mIoU threshold for --assert");
  eval->add_option("--min-acc", min_acc, "Pixel-accuracy threshold for --assert");
  eval->add_option("--dump", dump_dir, "Write PGM predictions and probability dumps here");

  auto* ablate = app.add_subcommand("ablate", "Run an ablation grid and write CSV");
  ablate->add_option("--grid", grid, "branches or attention")->required();
  ablate->add_option("--out", out, "CSV path")->required();
  ablate->add_option("--config", config, "Base TOML config")->check(CLI::ExistingFile);
  ablate->add_option("--steps", steps, "Override total_steps")->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*summary) return cmd_summary(config);
    if (*flops) return cmd_flops(config, hw, as_json);
    if (*gradcheck) {
      if (seeds.empty()) seeds = {0, 1, 2, 3, 4};
      return cmd_gradcheck(module, seeds);
    }
    if (*train_cmd) return cmd_train(config, steps, out);
    if (*eval) return cmd_eval(checkpoint, msflip, assert_thresholds, min_miou, min_acc, dump_dir);
    if (*ablate) return cmd_ablate(grid, out, config, steps);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
