// dnbp: dataset generation, training, tracking, evaluation and potential inspection.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <thread>

#include "dnbp/checkpoint.hpp"
#include "dnbp/error.hpp"
#include "dnbp/evaluation.hpp"
#include "dnbp/simulators.hpp"
#include "dnbp/training.hpp"

namespace fs = std::filesystem;
using namespace dnbp;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

int default_jobs() {
  const unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : static_cast<int>(n);
}

struct ConfigArgs {
  std::string config_path;
  std::map<std::string, std::string> overrides;
};

void add_config_options(CLI::App* app, ConfigArgs& args) {
  app->add_option("--config", args.config_path, "Config file of key = value lines")->check(CLI::ExistingFile);
  static const std::map<std::string, std::string> help{
      {"task", "pendulum or spider"},
      {"particles", "particles per message while training"},
      {"eval_particles", "particles per message while tracking"},
      {"gamma", "uniform-proposal fraction while training"},
      {"u_samples", "pairwise samples per unary weight"},
      {"kernel_sigma", "loss kernel bandwidth (normalised units)"},
      {"lr", "Adam learning rate"},
      {"batch", "sequences per optimisation step"},
      {"noise_sigma", "training pixel noise on the 0-255 scale"},
      {"patience", "epochs without validation improvement before stopping"},
      {"max_epochs", "upper bound on training epochs"},
      {"scale", "dataset size factor the data was generated at"},
      {"seed", "master random seed"},
      {"clip_norm", "global gradient-norm clip"},
      {"time_budget", "wall-clock training budget in seconds, 0 for none"}};
  for (const auto& key : config_keys()) {
    if (key == "seed") continue;  // typed --seed on every subcommand
    auto it = help.find(key);
    app->add_option_function<std::string>(
           "--" + key, [&args, key](const std::string& v) { args.overrides[key] = v; },
           it != help.end() ? it->second : key)
        ->type_name("VALUE");
  }
}

TrainConfig resolve_config(const ConfigArgs& args, const CLI::App* app, std::uint64_t seed) {
  TrainConfig cfg;
  if (!args.config_path.empty()) cfg = load_config(args.config_path, cfg);
  for (const auto& [k, v] : args.overrides) set_config_value(cfg, k, v);
  if (app->count("--seed")) cfg.seed = seed;
  cfg.validate();
  return cfg;
}

void require_dir(const std::string& path, const std::string& what) {
  if (!fs::is_directory(path)) throw UsageError(what + " '" + path + "' is not a directory");
}

void ensure_parent(const std::string& path) {
  const fs::path p = fs::path(path).parent_path();
  if (!p.empty()) fs::create_directories(p);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentiable nonparametric belief propagation: simulate, train, track, evaluate."};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  // generate
  auto* gen = app.add_subcommand("generate", "Simulate a dataset split");
  std::string g_task = "pendulum", g_split = "train", g_out;
  double g_scale = 1.0;
  std::uint64_t g_seed = 0;
  int g_jobs = default_jobs(), g_frames = 0;
  gen->add_option("--task", g_task, "pendulum or spider")->check(CLI::IsMember({"pendulum", "spider"}));
  gen->add_option("--split", g_split, "train, val, test or all")->check(CLI::IsMember({"train", "val", "test", "all"}));
  gen->add_option("--scale", g_scale, "dataset size factor")->check(CLI::PositiveNumber);
  gen->add_option("--seed", g_seed, "master seed");
  gen->add_option("--out", g_out, "output root directory")->required();
  gen->add_option("--jobs", g_jobs, "worker threads")->check(CLI::PositiveNumber);
  gen->add_option("--frames", g_frames, "frames per sequence (default: the split's)")->check(CLI::NonNegativeNumber);

  // train
  auto* tr = app.add_subcommand("train", "Train all potentials and write the best checkpoint");
  std::string t_data, t_out;
  std::uint64_t t_seed = 0;
  ConfigArgs t_cfg;
  tr->add_option("--data", t_data, "dataset root holding train/ and val/")->required();
  tr->add_option("--out", t_out, "checkpoint path")->required();
  tr->add_option("--seed", t_seed, "master seed");
  add_config_options(tr, t_cfg);

  // track
  auto* tk = app.add_subcommand("track", "Track one sequence and emit its report as JSON lines");
  std::string k_ckpt, k_seq, k_out;
  std::uint64_t k_seed = 0;
  bool k_particles_out = false;
  ConfigArgs k_cfg;
  int k_particles = 0;
  tk->add_option("--checkpoint", k_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  tk->add_option("--sequence", k_seq, "sequence directory (frames/ and labels.json)")->required();
  tk->add_option("--out", k_out, "report path (default: stdout)");
  tk->add_option("--seed", k_seed, "tracking seed");
  tk->add_option("--particles", k_particles, "particles per message (default: eval_particles)");
  tk->add_flag("--with-particles", k_particles_out, "include every weighted particle in the report");
  tk->add_option("--config", k_cfg.config_path, "config file")->check(CLI::ExistingFile);

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a test split");
  std::string e_ckpt, e_data, e_out;
  std::uint64_t e_seed = 0;
  int e_jobs = default_jobs(), e_particles = 0, e_frames = 0;
  ConfigArgs e_cfg;
  ev->add_option("--checkpoint", e_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", e_data, "test split directory, or a dataset root holding test/")->required();
  ev->add_option("--out", e_out, "output directory for the CSV and plot")->required();
  ev->add_option("--seed", e_seed, "evaluation seed");
  ev->add_option("--jobs", e_jobs, "worker threads")->check(CLI::PositiveNumber);
  ev->add_option("--particles", e_particles, "particles per message (default: eval_particles)");
  ev->add_option("--max-frames", e_frames, "evaluate only the first N frames of each sequence");
  ev->add_option("--config", e_cfg.config_path, "config file")->check(CLI::ExistingFile);

  // inspect
  auto* in = app.add_subcommand("inspect", "Inspect a learned pairwise potential");
  std::string i_ckpt, i_data, i_out, i_edge = "0";
  std::uint64_t i_seed = 0;
  int i_samples = 100000, i_grid = 100;
  in->add_option("--checkpoint", i_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  in->add_option("--data", i_data, "split directory supplying reference translations")->required();
  in->add_option("--edge", i_edge, "edge index, or 'a-b' node pair")->capture_default_str();
  in->add_option("--out", i_out, "output directory")->required();
  in->add_option("--samples", i_samples, "sampler draws")->check(CLI::PositiveNumber);
  in->add_option("--grid", i_grid, "density grid resolution")->check(CLI::PositiveNumber);
  in->add_option("--seed", i_seed, "sampling seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen) {
      std::vector<std::string> splits = g_split == "all" ? std::vector<std::string>{"train", "val", "test"}
                                                          : std::vector<std::string>{g_split};
      for (const auto& s : splits) {
        GenerateOptions opt;
        opt.scale = g_scale;
        opt.frames = g_frames;
        opt.jobs = g_jobs;
        const int n = generate_dataset(task_from_name(g_task), s, opt, g_seed, g_out);
        std::cout << "generated " << n << " " << s << " sequences in " << (fs::path(g_out) / s).string() << "\n";
      }
    } else if (*tr) {
      require_dir(t_data, "dataset root");
      const TrainConfig cfg = resolve_config(t_cfg, tr, t_seed);
      ensure_parent(t_out);
      auto res = train_from_disk(t_data, t_out, cfg, [](const EpochLog& l) {
        std::cout << "epoch " << l.epoch << " train_loss " << l.train_loss << " val_loss " << l.val_loss
                  << " skipped " << l.skipped << " (" << l.seconds << " s)" << std::endl;
      });
      std::cout << "best epoch " << res.best_epoch << " val_loss " << res.best_val << " -> " << t_out << "\n";
    } else if (*tk) {
      require_dir(k_seq, "sequence");
      TrainConfig cfg;
      if (!k_cfg.config_path.empty()) cfg = load_config(k_cfg.config_path, cfg);
      auto pots = load_checkpoint(k_ckpt);
      SequenceRecord seq = read_sequence(k_seq);
      if (task_graph(seq.task).num_nodes() != pots->graph().num_nodes())
        throw DataError("sequence task does not match the checkpoint graph '" + pots->graph().name() + "'");
      InferenceConfig inf = cfg.inference(Mode::Eval);
      if (k_particles > 0) inf.particles = k_particles;
      const auto preds = dnbp_predictor(*pots, inf, k_particles_out)(seq, k_seed);
      if (k_out.empty()) {
        write_track_report(std::cout, seq, preds, k_particles_out);
      } else {
        ensure_parent(k_out);
        std::ofstream f(k_out);
        if (!f) throw DataError("cannot write '" + k_out + "'");
        write_track_report(f, seq, preds, k_particles_out);
      }
    } else if (*ev) {
      std::string split = e_data;
      if (!fs::exists(fs::path(split) / "dataset.json") && fs::exists(fs::path(split) / "test" / "dataset.json"))
        split = (fs::path(split) / "test").string();
      require_dir(split, "test split");
      TrainConfig cfg;
      if (!e_cfg.config_path.empty()) cfg = load_config(e_cfg.config_path, cfg);
      auto pots = load_checkpoint(e_ckpt);
      const DatasetInfo info = read_dataset_info(split);
      if (task_graph(info.task).num_nodes() != pots->graph().num_nodes() ||
          task_graph(info.task).edges() != pots->graph().edges())
        throw DataError("test split task '" + task_name(info.task) + "' does not match checkpoint graph '" +
                        pots->graph().name() + "'");
      InferenceConfig inf = cfg.inference(Mode::Eval);
      if (e_particles > 0) inf.particles = e_particles;
      fs::create_directories(e_out);
      EvalResult r = evaluate_dataset(split, dnbp_predictor(*pots, inf), e_seed, e_jobs, e_frames);
      write_eval_csv((fs::path(e_out) / "errors.csv").string(), task_name(info.task), r);
      write_error_plot((fs::path(e_out) / "error_vs_clutter.png").string(), r.report);
      std::cout << "decile,mean_error_px\n";
      for (int b = 0; b < r.report.bins; ++b) std::cout << b << "," << r.report.bin_mean(b) << "\n";
      std::cout << "overall " << r.report.overall() << " px, uniform baseline " << r.baseline_px << " px\n";
    } else if (*in) {
      require_dir(i_data, "dataset split");
      auto pots = load_checkpoint(i_ckpt);
      int edge = -1;
      if (auto dash = i_edge.find('-'); dash != std::string::npos) {
        edge = pots->graph().edge_index(std::stoi(i_edge.substr(0, dash)), std::stoi(i_edge.substr(dash + 1)));
      } else {
        edge = std::stoi(i_edge);
      }
      if (edge < 0 || edge >= static_cast<int>(pots->graph().edges().size()))
        throw UsageError("unknown edge '" + i_edge + "'");
      const DatasetInfo info = read_dataset_info(i_data);
      std::vector<std::vector<Keypoint>> labels;
      for (const auto& d : info.sequence_dirs) {
        SequenceRecord s = read_sequence(d);
        for (auto& l : s.labels) labels.push_back(std::move(l));
      }
      const auto r = inspect_pairwise(*pots, edge, labels, i_samples, i_seed, i_grid);
      write_inspection(i_out, r);
      std::cout << "edge " << edge << ": density modal radius " << r.grid_modal_radius << ", training modal radius "
                << r.training_modal_radius << ", sampler/training total variation " << r.total_variation << "\n";
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
