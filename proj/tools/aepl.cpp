// aepl: command-line front end for phantom synthesis, training, evaluation,
// the alpha sweep, single-case prediction and the HTTP service.

#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

#include <charconv>
#include <chrono>
#include <csignal>
#include <fstream>
#include <iostream>
#include <thread>

#include "aepl/config.hpp"
#include "aepl/errors.hpp"
#include "aepl/inference.hpp"
#include "aepl/nifti.hpp"
#include "aepl/service.hpp"
#include "aepl/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace aepl;

namespace {

ExperimentConfig load_config(const std::string& path, std::optional<std::uint64_t> seed) {
  ExperimentConfig cfg = path.empty() ? ExperimentConfig::desk_scale() : load_experiment_config(path);
  if (seed) cfg.train.seed = *seed;
  cfg.validate();
  return cfg;
}

std::vector<double> parse_values(const std::string& csv) {
  std::vector<double> out;
  std::size_t pos = 0;
  while (pos <= csv.size()) {
    const auto end = std::min(csv.find(',', pos), csv.size());
    const auto token = csv.substr(pos, end - pos);
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
    if (token.empty() || ec != std::errc{} || ptr != token.data() + token.size() || v < 0.0)
      throw ConfigError("--values expects comma-separated non-negative numbers, got '" + token + "'");
    out.push_back(v);
    pos = end + 1;
  }
  return out;
}

void print_eval(const EvalResult& ev, const std::string& label) {
  std::cout << format_aggregate_text({{label, ev.table}}) << "grade accuracy: " << ev.grade_accuracy << " ("
            << ev.table.n_cases << " cases)\n";
}

void write_eval(const fs::path& dir, const EvalResult& ev, const std::string& label) {
  fs::create_directories(dir);
  std::ofstream cases(dir / "cases.csv");
  write_case_csv(cases, ev.reports);
  std::ofstream summary(dir / "summary.csv");
  write_aggregate_csv(summary, ev.table, label);
}

const std::vector<Case>& pick_split(const PreparedData& data, const std::string& split) {
  if (split == "test") return data.test;
  if (split == "val") return data.training.val;
  if (split == "train") return data.training.train;
  throw ConfigError("--split must be train, val or test");
}

std::vector<std::string> split_csv(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(item);
  return out;
}

volatile std::sig_atomic_t g_stop = 0;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Grade-prompted brain tumor segmentation", "aepl"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string checkpoint;
  std::string out_dir;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Experiment config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Training seed override");
  };

  auto* synth = app.add_subcommand("synth", "Generate a phantom dataset");
  common(synth);
  std::optional<int> n_cases;
  synth->add_option("--out", out_dir, "Output directory")->required();
  synth->add_option("--n", n_cases, "Number of cases");

  auto* train_cmd = app.add_subcommand("train", "Train a model");
  common(train_cmd);
  train_cmd->add_option("--out", out_dir, "Run directory")->required();

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  common(eval_cmd);
  std::string prompt_mode = "predicted";
  std::string split = "test";
  std::optional<double> corrupt;
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--prompt-mode", prompt_mode, "predicted or edited")
      ->check(CLI::IsMember({"predicted", "edited"}));
  eval_cmd->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  eval_cmd->add_option("--corrupt-accuracy", corrupt, "Flip predicted grades down to this accuracy");
  eval_cmd->add_option("--out", out_dir, "Directory for cases.csv and summary.csv");

  auto* sweep = app.add_subcommand("sweep-alpha", "Train and evaluate one model per alpha");
  common(sweep);
  std::string values_csv = "0,0.01,0.1,1,10";
  sweep->add_option("--values", values_csv, "Comma-separated alpha values");
  sweep->add_option("--out", out_dir, "Directory for per-alpha runs (reused when present)");

  auto* predict_cmd = app.add_subcommand("predict", "Segment one case");
  common(predict_cmd);
  std::string case_id, images, grade_text;
  predict_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  predict_cmd->add_option("--case", case_id, "Case id from the configured dataset");
  predict_cmd->add_option("--images", images, "NIfTI paths T1,T2,T1CE,FLAIR");
  predict_cmd->add_option("--grade", grade_text, "Edited grade prompt (LGG or HGG)");
  predict_cmd->add_option("--out", out_dir, "Output directory")->required();

  auto* serve = app.add_subcommand("serve", "Run the HTTP inference service");
  common(serve);
  int port = 8080;
  std::string host = "127.0.0.1";
  serve->add_option("--checkpoint", checkpoint, "Checkpoint file")->check(CLI::ExistingFile);
  serve->add_option("--port", port, "Port")->check(CLI::Range(0, 65535));
  serve->add_option("--host", host, "Bind address");

  if (argc <= 1) {
    std::cerr << app.help();
    return 2;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 2;
  }

  try {
    const auto cfg = load_config(config_path, seed);
    torch::set_num_threads(cfg.train.num_threads);
    auto progress = [](const std::string& line) { std::cerr << line << '\n'; };

    if (*synth) {
      const int n = n_cases.value_or(cfg.data.n_cases);
      const auto cases = generate_phantom_dataset(n, cfg.data.seed, cfg.data.phantom);
      save_dataset(out_dir, cases);
      std::cout << "wrote " << cases.size() << " phantoms to " << out_dir << '\n';
    } else if (*train_cmd) {
      const auto data = prepare_data(cfg.data);
      fs::create_directories(out_dir);
      save_experiment_config(fs::path(out_dir) / "config.json", cfg);
      save_split(fs::path(out_dir) / "split.json", data.split);
      TrainOutputs outs{fs::path(out_dir), [&](const EpochLog& e) { progress(e.to_json_line()); }};
      const auto result = train(make_model(cfg.model, cfg.train.seed), data.training, cfg.train, outs);
      std::cout << "best epoch " << result.best.best_epoch << " val mean Dice " << result.best.best_val_mean_dice
                << '\n';
    } else if (*eval_cmd) {
      const auto ckpt = load_checkpoint(checkpoint);
      const auto data = prepare_data(cfg.data);
      EvalOptions opts;
      opts.prompt_mode = *parse_eval_prompt_mode(prompt_mode);
      if (corrupt) opts.corruption = GradeCorruption{*corrupt, cfg.train.seed};
      const auto ev = evaluate_model(model_from_checkpoint(ckpt), pick_split(data, split), opts);
      const std::string label = opts.prompt_mode == EvalPromptMode::Edited ? "AEPL-E" : "AEPL";
      print_eval(ev, label);
      if (!out_dir.empty()) write_eval(out_dir, ev, label);
    } else if (*sweep) {
      const auto values = parse_values(values_csv);
      const auto data = prepare_data(cfg.data);
      SweepOptions opts;
      if (!out_dir.empty()) opts.run_dir = fs::path(out_dir);
      opts.progress = progress;
      const auto rows = alpha_sweep(cfg.model, cfg.train, data.training, data.test, values, opts);
      std::cout << format_sweep_table(rows);
    } else if (*predict_cmd) {
      if (case_id.empty() == images.empty()) throw ConfigError("give exactly one of --case or --images");
      const auto model = model_from_checkpoint(load_checkpoint(checkpoint));
      std::optional<GradePrompt> edited;
      if (!grade_text.empty()) {
        const auto g = parse_grade(grade_text);
        if (!g) throw ConfigError("--grade must be LGG or HGG");
        edited = GradePrompt::one_hot(*g, PromptSource::Edited);
      }
      fs::create_directories(out_dir);

      Case input;
      nifti::Image geometry;
      CropBox box;
      if (!case_id.empty()) {
        const auto data = prepare_data(cfg.data);
        auto it = std::find_if(data.all.begin(), data.all.end(), [&](const Case& c) { return c.id() == case_id; });
        if (it == data.all.end()) throw IoError("unknown case " + case_id);
        input = *it;
        const auto s = input.volume.shape();
        geometry.dims = s;
        geometry.spacing = input.volume.spacing;
        box.hi = s;
      } else {
        const auto paths = split_csv(images);
        if (paths.size() != 4) throw ConfigError("--images needs four comma-separated NIfTI paths");
        const auto raw = load_nifti_case({paths[0], paths[1], paths[2], paths[3], {}}, Grade::LGG,
                                         fs::path(paths[0]).stem().stem().string());
        geometry = nifti::read(paths[0]);
        box = nonzero_bbox(raw.volume.voxels);
        // No resampling, so the prediction maps straight back onto the input grid.
        input = preprocess(raw, PreprocessOptions{std::nullopt});
      }

      const auto inf = infer_case(model, input.volume.voxels, edited);
      const auto labels = labels_from_regions(inf.regions);
      const auto s = input.volume.shape();
      // Output in file order (x fastest) on the input grid.
      geometry.data.assign(static_cast<std::size_t>(geometry.dims[0] * geometry.dims[1] * geometry.dims[2]), 0.0f);
      for (std::int64_t x = 0; x < s[0]; ++x)
        for (std::int64_t y = 0; y < s[1]; ++y)
          for (std::int64_t z = 0; z < s[2]; ++z) {
            const auto gx = x + box.lo[0], gy = y + box.lo[1], gz = z + box.lo[2];
            geometry.data[static_cast<std::size_t>((gz * geometry.dims[1] + gy) * geometry.dims[0] + gx)] =
                labels[static_cast<std::size_t>((x * s[1] + y) * s[2] + z)];
          }
      const auto id = input.id();
      nifti::write(fs::path(out_dir) / (id + "_seg.nii.gz"), geometry, 2);
      std::array<std::int64_t, 3> counts{};
      for (int r = 0; r < 3; ++r) counts[r] = inf.regions[static_cast<Region>(r)].count();
      const json report{{"case_id", id},
                        {"predicted", {{"probs", inf.predicted.probs}, {"hard_label", to_string(inf.predicted.hard_label)}}},
                        {"used", {{"hard_label", to_string(inf.used.hard_label)}, {"source", to_string(inf.used.source)}}},
                        {"volumes", {{"ET", counts[0]}, {"WT", counts[1]}, {"TC", counts[2]}}}};
      std::ofstream(fs::path(out_dir) / (id + "_prediction.json")) << report.dump(2) << '\n';
      std::cout << report.dump() << '\n';
    } else if (*serve) {
      std::optional<AeplNet> model;
      if (!checkpoint.empty()) model = model_from_checkpoint(load_checkpoint(checkpoint));
      auto data = prepare_data(cfg.data);
      service::InferenceService svc(std::move(model), std::move(data.all));
      httplib::Server server;
      svc.bind(server);
      // The handler only sets a flag; stop() is not async-signal-safe.
      std::signal(SIGINT, [](int) { g_stop = 1; });
      std::signal(SIGTERM, [](int) { g_stop = 1; });
      std::thread watcher([&server] {
        while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
        server.stop();
      });
      std::cerr << "listening on " << host << ':' << port << '\n';
      const bool ok = server.listen(host, port);
      g_stop = 1;
      watcher.join();
      if (!ok) throw IoError("cannot listen on " + host + ":" + std::to_string(port));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
