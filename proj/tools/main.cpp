// Command-line driver: dataset generation, training, test-time adaptation,
// sweeps, and report tables.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "scaleadapt/scaleadapt.hpp"

namespace fs = std::filesystem;
using namespace scaleadapt;

using Real = float;

namespace {

// Every artifact-producing run records its resolved configuration next to
// its outputs as flat key=value lines.
void write_config(const std::string& path,
                  const std::vector<std::pair<std::string, std::string>>& kv) {
  std::ofstream os(path);
  if (!os) throw io_error("cannot open for writing: " + path);
  for (const auto& [k, v] : kv) os << k << "=" << v << "\n";
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("cannot open for writing: " + path);
  os << text;
  if (!os) throw io_error("write failed: " + path);
}

AdaptMode parse_mode(const std::string& s) {
  if (s == "baseline") return AdaptMode::Baseline;
  if (s == "entropy") return AdaptMode::Entropy;
  if (s == "oracle") return AdaptMode::Oracle;
  if (s == "adversary") return AdaptMode::Adversary;
  throw CLI::ValidationError("mode", "unknown mode: " + s);
}

AdaptVars parse_vars(const std::string& s) {
  if (s == "score") return AdaptVars::Score;
  if (s == "scale") return AdaptVars::Scale;
  if (s == "both") return AdaptVars::Both;
  if (s == "all") return AdaptVars::All;
  throw CLI::ValidationError("variables", "unknown variable set: " + s);
}

std::vector<std::string> split_csv_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

std::vector<std::uint64_t> dataset_seeds(const std::string& dir,
                                         bool require_unit_scale) {
  std::ifstream index(dir + "/index.txt");
  if (!index) throw io_error("cannot open: " + dir + "/index.txt");
  std::vector<std::uint64_t> seeds;
  std::string line;
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    int id, h, w;
    std::uint64_t seed;
    double scale;
    if (!(ls >> id >> seed >> scale >> h >> w))
      throw io_error("malformed index row in " + dir + ": " + line);
    if (require_unit_scale && scale != 1.0)
      throw io_error("training dataset must be at scale 1, found scale " +
                     fmt_double(scale) + " in " + dir);
    seeds.push_back(seed);
  }
  return seeds;
}

std::vector<std::uint8_t> to_bytes(const LabelMap& labels, int num_classes) {
  std::vector<std::uint8_t> out(labels.values.size());
  const double scale = num_classes > 1 ? 255.0 / (num_classes - 1) : 0.0;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<std::uint8_t>(std::lround(labels.values[i] * scale));
  return out;
}

std::vector<std::uint8_t> scaled_bytes(const Tensor<Real>& map, double max_value) {
  std::vector<std::uint8_t> out(map.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = std::clamp(static_cast<double>(map.data[i]) / max_value,
                                0.0, 1.0);
    out[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return out;
}

struct GenArgs {
  std::string out;
  int count = 10;
  double scale = 1.0;
  std::string size = "64x64";
  std::uint64_t seed = 0;
};

int run_gen(const GenArgs& a) {
  int h = 0, w = 0;
  if (std::sscanf(a.size.c_str(), "%dx%d", &h, &w) != 2 || h <= 0 || w <= 0 ||
      h != w) {
    std::cerr << "gen: --size must be HxW with H == W, got " << a.size << "\n";
    return 2;
  }
  std::vector<Scene<Real>> scenes;
  for (int i = 0; i < a.count; ++i)
    scenes.push_back(gen_scene<Real>(a.seed + static_cast<std::uint64_t>(i), h,
                                     a.scale));
  write_dataset(a.out, scenes);
  write_config(a.out + "/config.txt",
               {{"command", "gen"},
                {"out", a.out},
                {"count", std::to_string(a.count)},
                {"scale", fmt_double(a.scale)},
                {"size", a.size},
                {"seed", std::to_string(a.seed)}});
  std::cout << "generated " << a.count << " scenes at scale " << a.scale
            << "\n";
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string out;
  int epochs = 60;
  int batch_size = 8;
  double base_lr = 0.01;
  std::string augment = "none";
  std::uint64_t seed = 0;
};

int run_train(const TrainArgs& a) {
  TrainConfig cfg;
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch_size;
  cfg.base_lr = a.base_lr;
  cfg.seed = a.seed;
  cfg.augment = a.augment == "scale_flip" ? Augment::ScaleFlip : Augment::None;

  const std::vector<std::uint64_t> seeds = dataset_seeds(a.data, true);
  // Image size from the first index row.
  std::ifstream index(a.data + "/index.txt");
  int id, h = 0, w;
  std::uint64_t s;
  double sc;
  index >> id >> s >> sc >> h >> w;

  TrainResult<Real> result = train_model<Real>(seeds, h, cfg);
  save_model(a.out, result.model);
  write_text(a.out + ".log.csv", train_log_csv(result.log));
  write_config(a.out + ".config.txt",
               {{"command", "train"},
                {"data", a.data},
                {"out", a.out},
                {"epochs", std::to_string(a.epochs)},
                {"batch_size", std::to_string(a.batch_size)},
                {"base_lr", fmt_double(a.base_lr)},
                {"augment", a.augment},
                {"seed", std::to_string(a.seed)}});
  std::cout << "trained " << a.epochs << " epochs, final loss "
            << result.log.back().loss << ", train mIoU "
            << result.log.back().train_miou << "\n";
  return 0;
}

struct AdaptArgs {
  std::string ckpt;
  std::string data;
  std::string out = "metrics.csv";
  std::string mode = "entropy";
  std::string variables = "both";
  int steps = 32;
  double lr = 0.001;
  std::string dump_maps;
};

int run_adapt(const AdaptArgs& a) {
  const Model<Real> model = load_model<Real>(a.ckpt);
  const std::vector<Scene<Real>> scenes = read_dataset<Real>(a.data);
  if (scenes.empty()) {
    std::cerr << "adapt: no scenes in " << a.data << "\n";
    return 1;
  }

  AdaptConfig cfg;
  cfg.mode = parse_mode(a.mode);
  cfg.variables = parse_vars(a.variables);
  cfg.steps = a.steps;
  cfg.learning_rate = a.lr;

  if (!a.dump_maps.empty()) fs::create_directories(a.dump_maps);

  std::vector<MetricsRow> rows;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Scene<Real>& scene = scenes[i];
    StepObserver<Real> observer;
    if (!a.dump_maps.empty()) {
      observer = [&, i](int step, const ForwardCache<Real>& cache) {
        char name[64];
        auto path = [&](const char* kind) {
          std::snprintf(name, sizeof(name), "/%s_%04d_step%03d.pgm", kind,
                        static_cast<int>(i), step);
          return a.dump_maps + name;
        };
        write_pgm8(path("pred"),
                   to_bytes(argmax_labels(cache.probs), model.num_classes),
                   cache.probs.h, cache.probs.w);
        Tensor<Real> ent = entropy_map(cache.probs);
        write_pgm8(path("entropy"),
                   scaled_bytes(ent, std::log(double(model.num_classes))),
                   ent.h, ent.w);
        write_pgm8(path("sigma"),
                   scaled_bytes(cache.sigma, double(model.head.radius_cap)),
                   cache.sigma.h, cache.sigma.w);
      };
    }
    AdaptTrajectory<Real> traj =
        adapt_episode(scene.image, model, &scene.labels, cfg, observer);
    MetricsRow r;
    r.scale = scene.scale;
    r.mode = cfg.mode;
    r.variables = cfg.variables;
    r.steps = cfg.effective_steps();
    r.seed = scene.seed;
    r.miou = traj.records.back().miou;
    r.mean_entropy_initial = traj.records.front().mean_entropy;
    r.mean_entropy_final = traj.records.back().mean_entropy;
    rows.push_back(r);
  }
  write_text(a.out, metrics_csv(rows));
  write_config(a.out + ".config.txt",
               {{"command", "adapt"},
                {"ckpt", a.ckpt},
                {"data", a.data},
                {"out", a.out},
                {"mode", a.mode},
                {"variables", a.variables},
                {"steps", std::to_string(a.steps)},
                {"lr", fmt_double(a.lr)},
                {"dump_maps", a.dump_maps}});
  std::cout << "adapted " << scenes.size() << " scenes, mode " << a.mode
            << ", wrote " << a.out << "\n";
  return 0;
}

struct SweepArgs {
  std::string ckpt;
  std::string out = "sweep.csv";
  std::string scales = "1.0,3.0";
  std::string modes = "baseline,entropy";
  std::string variables = "both";
  std::string steps = "32";
  std::string seeds = "0,1,2,3,4";
  int count = 4;
  int size = 64;
  double lr = 0.001;
};

int run_sweep(const SweepArgs& a) {
  const Model<Real> model = load_model<Real>(a.ckpt);

  std::vector<AdaptConfig> cfgs;
  for (const std::string& m : split_csv_list(a.modes))
    for (const std::string& v : split_csv_list(a.variables))
      for (const std::string& st : split_csv_list(a.steps)) {
        AdaptConfig cfg;
        cfg.mode = parse_mode(m);
        cfg.variables = parse_vars(v);
        cfg.steps = std::stoi(st);
        cfg.learning_rate = a.lr;
        cfgs.push_back(cfg);
      }

  std::vector<MetricsRow> all_rows;
  for (const std::string& sstr : split_csv_list(a.scales)) {
    const double scale = std::stod(sstr);
    for (const std::string& seed_str : split_csv_list(a.seeds)) {
      const std::uint64_t set_seed = std::stoull(seed_str);
      std::vector<Scene<Real>> scenes;
      for (int i = 0; i < a.count; ++i)
        scenes.push_back(gen_scene<Real>(
            0x5eed0000ull + set_seed * 1000 + static_cast<std::uint64_t>(i),
            a.size, scale));
      std::vector<MetricsRow> rows = sweep(scenes, model, cfgs);
      // One aggregated row per (config, seed set).
      for (const AdaptConfig& cfg : cfgs) {
        MetricsRow agg;
        agg.scale = scale;
        agg.mode = cfg.mode;
        agg.variables = cfg.variables;
        agg.steps = cfg.effective_steps();
        agg.seed = set_seed;
        int n = 0;
        for (const MetricsRow& r : rows)
          if (r.mode == cfg.mode && r.variables == cfg.variables &&
              r.steps == cfg.effective_steps()) {
            agg.miou += r.miou;
            agg.mean_entropy_initial += r.mean_entropy_initial;
            agg.mean_entropy_final += r.mean_entropy_final;
            ++n;
          }
        agg.miou /= n;
        agg.mean_entropy_initial /= n;
        agg.mean_entropy_final /= n;
        all_rows.push_back(agg);
      }
    }
  }
  write_text(a.out, metrics_csv(all_rows));
  write_config(a.out + ".config.txt",
               {{"command", "sweep"},
                {"ckpt", a.ckpt},
                {"out", a.out},
                {"scales", a.scales},
                {"modes", a.modes},
                {"variables", a.variables},
                {"steps", a.steps},
                {"seeds", a.seeds},
                {"count", std::to_string(a.count)},
                {"size", std::to_string(a.size)},
                {"lr", fmt_double(a.lr)}});
  std::cout << "swept " << all_rows.size() << " rows, wrote " << a.out << "\n";
  return 0;
}

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string out = "report.txt";
};

int run_report(const ReportArgs& a) {
  struct Key {
    std::string method;
    double scale;
    bool operator<(const Key& o) const {
      return method != o.method ? method < o.method : scale < o.scale;
    }
  };
  std::map<Key, std::pair<double, int>> cells;
  std::set<double> scales;
  std::set<std::string> methods;
  bool any = false;

  for (const std::string& path : a.inputs) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open: " + path);
    std::string line;
    if (!std::getline(is, line) || line != kMetricsHeader)
      throw io_error("unexpected CSV header in " + path + ": " + line);
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const std::vector<std::string> f = split_csv_list(line);
      if (f.size() != 8) throw io_error("malformed CSV row in " + path);
      const double scale = std::stod(f[0]);
      const std::string method = f[1] + "/" + f[2] + "/" + f[3];
      const double miou = std::stod(f[5]);
      auto& cell = cells[{method, scale}];
      cell.first += miou;
      cell.second += 1;
      scales.insert(scale);
      methods.insert(method);
      any = true;
    }
  }
  if (!any) {
    std::cerr << "report: no rows in input CSVs\n";
    return 1;
  }

  std::ostringstream table;
  table << "method";
  for (double s : scales) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%10.2f", s);
    table << buf;
  }
  table << "\n";
  for (const std::string& m : methods) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%-24s", m.c_str());
    table << buf;
    for (double s : scales) {
      auto it = cells.find({m, s});
      if (it == cells.end()) {
        table << "         -";
      } else {
        std::snprintf(buf, sizeof(buf), "%10.4f",
                      it->second.first / it->second.second);
        table << buf;
      }
    }
    table << "\n";
  }
  write_text(a.out, table.str());
  std::cout << table.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dynamic-scale segmentation with test-time entropy adaptation"};
  app.require_subcommand(1);

  GenArgs gen_args;
  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  gen->add_option("--out", gen_args.out, "output directory")->required();
  gen->add_option("--count", gen_args.count, "number of scenes");
  gen->add_option("--scale", gen_args.scale, "render scale")
      ->check(CLI::PositiveNumber);
  gen->add_option("--size", gen_args.size, "image size HxW");
  gen->add_option("--seed", gen_args.seed, "base seed");

  TrainArgs train_args;
  CLI::App* train = app.add_subcommand("train", "train a model");
  train->add_option("--data", train_args.data, "training dataset directory")
      ->required();
  train->add_option("--out", train_args.out, "checkpoint path")->required();
  train->add_option("--epochs", train_args.epochs, "epochs");
  train->add_option("--batch-size", train_args.batch_size, "batch size");
  train->add_option("--lr", train_args.base_lr, "base learning rate");
  train->add_option("--augment", train_args.augment, "none or scale_flip")
      ->check(CLI::IsMember({"none", "scale_flip"}));
  train->add_option("--seed", train_args.seed, "training seed");

  AdaptArgs adapt_args;
  CLI::App* adapt = app.add_subcommand("adapt", "adapt episodically per image");
  adapt->add_option("--ckpt", adapt_args.ckpt, "checkpoint")->required();
  adapt->add_option("--data", adapt_args.data, "dataset directory")->required();
  adapt->add_option("--out", adapt_args.out, "metrics CSV path");
  adapt->add_option("--mode", adapt_args.mode, "adaptation mode")
      ->check(CLI::IsMember({"baseline", "entropy", "oracle", "adversary"}));
  adapt->add_option("--variables", adapt_args.variables, "variable subset")
      ->check(CLI::IsMember({"score", "scale", "both", "all"}));
  adapt->add_option("--steps", adapt_args.steps, "optimization steps");
  adapt->add_option("--lr", adapt_args.lr, "adaptation learning rate");
  adapt->add_option("--dump-maps", adapt_args.dump_maps,
                    "directory for per-step prediction/entropy/sigma maps");

  SweepArgs sweep_args;
  CLI::App* sweep_cmd = app.add_subcommand("sweep", "metrics grid over scales and configs");
  sweep_cmd->add_option("--ckpt", sweep_args.ckpt, "checkpoint")->required();
  sweep_cmd->add_option("--out", sweep_args.out, "output CSV");
  sweep_cmd->add_option("--scales", sweep_args.scales, "comma-separated scales");
  sweep_cmd->add_option("--modes", sweep_args.modes, "comma-separated modes");
  sweep_cmd->add_option("--variables", sweep_args.variables,
                        "comma-separated variable subsets");
  sweep_cmd->add_option("--steps", sweep_args.steps, "comma-separated step counts");
  sweep_cmd->add_option("--seeds", sweep_args.seeds, "comma-separated set seeds");
  sweep_cmd->add_option("--count", sweep_args.count, "scenes per seed set");
  sweep_cmd->add_option("--size", sweep_args.size, "image size");
  sweep_cmd->add_option("--lr", sweep_args.lr, "adaptation learning rate");

  ReportArgs report_args;
  CLI::App* report = app.add_subcommand("report", "aggregate metrics CSVs");
  report->add_option("--in", report_args.inputs, "input CSVs")->required();
  report->add_option("--out", report_args.out, "output table path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return run_gen(gen_args);
    if (train->parsed()) return run_train(train_args);
    if (adapt->parsed()) return run_adapt(adapt_args);
    if (sweep_cmd->parsed()) return run_sweep(sweep_args);
    if (report->parsed()) return run_report(report_args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
