#include "aepl/config.hpp"

#include <fstream>

#include "aepl/errors.hpp"

namespace aepl {

using json = nlohmann::json;

namespace {

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) it->get_to(out);
}

}  // namespace

ExperimentConfig ExperimentConfig::desk_scale() { return ExperimentConfig{}; }

ExperimentConfig ExperimentConfig::paper_scale() {
  ExperimentConfig cfg;
  cfg.model = ModelConfig::full_scale();
  cfg.train = TrainConfig::paper_scale();
  return cfg;
}

void ExperimentConfig::validate() const {
  model.validate();
  train.validate();
  if (model.patch_size != train.patch_size) throw ConfigError("model and trainer patch sizes differ");
  if (static_cast<int>(train.ds_weights.size()) != model.deep_supervision_scales)
    throw ConfigError("need one deep-supervision weight per supervised scale");
  data.phantom.validate();
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"n_stages", c.n_stages},
           {"base_channels", c.base_channels},
           {"channel_widths", c.channel_widths},
           {"conv_blocks_per_stage", c.conv_blocks_per_stage},
           {"patch_size", c.patch_size},
           {"in_channels", c.in_channels},
           {"n_classes_seg", c.n_classes_seg},
           {"n_classes_grade", c.n_classes_grade},
           {"mlp_hidden", c.mlp_hidden},
           {"deep_supervision_scales", c.deep_supervision_scales}};
}

void from_json(const json& j, ModelConfig& c) {
  read_opt(j, "n_stages", c.n_stages);
  read_opt(j, "base_channels", c.base_channels);
  if (j.contains("channel_widths")) {
    j.at("channel_widths").get_to(c.channel_widths);
  } else if (j.contains("n_stages") || j.contains("base_channels")) {
    c.channel_widths = ModelConfig::default_widths(c.n_stages, c.base_channels);
  }
  read_opt(j, "conv_blocks_per_stage", c.conv_blocks_per_stage);
  read_opt(j, "patch_size", c.patch_size);
  read_opt(j, "in_channels", c.in_channels);
  read_opt(j, "n_classes_seg", c.n_classes_seg);
  read_opt(j, "n_classes_grade", c.n_classes_grade);
  read_opt(j, "mlp_hidden", c.mlp_hidden);
  read_opt(j, "deep_supervision_scales", c.deep_supervision_scales);
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"iters_per_epoch", c.iters_per_epoch},
           {"lr0", c.lr0},
           {"lr_min", c.lr_min},
           {"poly_power", c.poly_power},
           {"momentum", c.momentum},
           {"weight_decay", c.weight_decay},
           {"alpha", c.alpha},
           {"ds_weights", c.ds_weights},
           {"dice_smooth", c.dice_smooth},
           {"patch_size", c.patch_size},
           {"seed", c.seed},
           {"prompt_mode", std::string(to_string(c.prompt_mode))},
           {"eval_prompt_mode", std::string(to_string(c.eval_prompt_mode))},
           {"fg_prob", c.fg_prob},
           {"augment", c.augment},
           {"num_threads", c.num_threads}};
}

void from_json(const json& j, TrainConfig& c) {
  read_opt(j, "epochs", c.epochs);
  read_opt(j, "batch_size", c.batch_size);
  read_opt(j, "iters_per_epoch", c.iters_per_epoch);
  read_opt(j, "lr0", c.lr0);
  read_opt(j, "lr_min", c.lr_min);
  read_opt(j, "poly_power", c.poly_power);
  read_opt(j, "momentum", c.momentum);
  read_opt(j, "weight_decay", c.weight_decay);
  read_opt(j, "alpha", c.alpha);
  read_opt(j, "ds_weights", c.ds_weights);
  read_opt(j, "dice_smooth", c.dice_smooth);
  read_opt(j, "patch_size", c.patch_size);
  read_opt(j, "seed", c.seed);
  if (j.contains("prompt_mode")) {
    auto m = parse_train_prompt_mode(j.at("prompt_mode").get<std::string>());
    if (!m) throw ConfigError("prompt_mode must be predicted or ground_truth");
    c.prompt_mode = *m;
  }
  if (j.contains("eval_prompt_mode")) {
    auto m = parse_eval_prompt_mode(j.at("eval_prompt_mode").get<std::string>());
    if (!m) throw ConfigError("eval_prompt_mode must be predicted or edited");
    c.eval_prompt_mode = *m;
  }
  read_opt(j, "fg_prob", c.fg_prob);
  read_opt(j, "augment", c.augment);
  read_opt(j, "num_threads", c.num_threads);
}

void to_json(json& j, const PhantomSpec& c) {
  j = json{{"shape", c.shape},
           {"spacing", c.spacing},
           {"lgg_radius", c.lgg_radius},
           {"hgg_radius", c.hgg_radius},
           {"lgg_irregularity", c.lgg_irregularity},
           {"hgg_irregularity", c.hgg_irregularity},
           {"lgg_enhancing_fraction", c.lgg_enhancing_fraction},
           {"hgg_enhancing_fraction", c.hgg_enhancing_fraction},
           {"core_fraction", c.core_fraction},
           {"noise_sigma", c.noise_sigma}};
}

void from_json(const json& j, PhantomSpec& c) {
  read_opt(j, "shape", c.shape);
  read_opt(j, "spacing", c.spacing);
  read_opt(j, "lgg_radius", c.lgg_radius);
  read_opt(j, "hgg_radius", c.hgg_radius);
  read_opt(j, "lgg_irregularity", c.lgg_irregularity);
  read_opt(j, "hgg_irregularity", c.hgg_irregularity);
  read_opt(j, "lgg_enhancing_fraction", c.lgg_enhancing_fraction);
  read_opt(j, "hgg_enhancing_fraction", c.hgg_enhancing_fraction);
  read_opt(j, "core_fraction", c.core_fraction);
  read_opt(j, "noise_sigma", c.noise_sigma);
}

void to_json(json& j, const DataConfig& c) {
  j = json{{"n_cases", c.n_cases},
           {"seed", c.seed},
           {"split_seed", c.split_seed},
           {"ratio", {c.ratio.train, c.ratio.val, c.ratio.test}},
           {"phantom", c.phantom}};
  if (c.dataset_dir) j["dataset_dir"] = *c.dataset_dir;
}

void from_json(const json& j, DataConfig& c) {
  read_opt(j, "n_cases", c.n_cases);
  read_opt(j, "seed", c.seed);
  read_opt(j, "split_seed", c.split_seed);
  if (j.contains("ratio")) {
    const auto r = j.at("ratio").get<std::array<double, 3>>();
    c.ratio = {r[0], r[1], r[2]};
  }
  read_opt(j, "phantom", c.phantom);
  if (j.contains("dataset_dir")) c.dataset_dir = j.at("dataset_dir").get<std::string>();
}

void to_json(json& j, const ExperimentConfig& c) { j = json{{"model", c.model}, {"train", c.train}, {"data", c.data}}; }

void from_json(const json& j, ExperimentConfig& c) {
  read_opt(j, "model", c.model);
  read_opt(j, "train", c.train);
  read_opt(j, "data", c.data);
  // A patch given in one section applies to both.
  if (j.contains("model") && j["model"].contains("patch_size") &&
      !(j.contains("train") && j["train"].contains("patch_size")))
    c.train.patch_size = c.model.patch_size;
  if (j.contains("train") && j["train"].contains("patch_size") &&
      !(j.contains("model") && j["model"].contains("patch_size")))
    c.model.patch_size = c.train.patch_size;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path.string());
  ExperimentConfig cfg;
  try {
    json::parse(is).get_to(cfg);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

void save_experiment_config(const std::filesystem::path& path, const ExperimentConfig& cfg) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write config " + path.string());
  os << json(cfg).dump(2) << '\n';
}

PreparedData prepare_data(const DataConfig& cfg) {
  PreparedData out;
  std::vector<Case> raw = cfg.dataset_dir ? load_dataset(*cfg.dataset_dir)
                                          : generate_phantom_dataset(cfg.n_cases, cfg.seed, cfg.phantom);
  if (raw.empty()) throw EmptyInputError("dataset is empty");
  out.all.reserve(raw.size());
  for (auto& c : raw) out.all.push_back(preprocess(c));
  raw.clear();
  out.split = make_split_manifest(out.all, cfg.ratio, cfg.split_seed);
  apply_split(out.all, out.split);
  for (const auto& c : out.all) {
    switch (c.split) {
      case Split::Train: out.training.train.push_back(c); break;
      case Split::Val: out.training.val.push_back(c); break;
      case Split::Test: out.test.push_back(c); break;
      case Split::Unassigned: break;
    }
  }
  return out;
}

}  // namespace aepl
