#include "aepl/trainer.hpp"

#include <json.hpp>

#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "aepl/config.hpp"
#include "aepl/errors.hpp"
#include "aepl/inference.hpp"

namespace aepl {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string_view to_string(TrainPromptMode m) { return m == TrainPromptMode::Predicted ? "predicted" : "ground_truth"; }
std::string_view to_string(EvalPromptMode m) { return m == EvalPromptMode::Predicted ? "predicted" : "edited"; }

std::optional<EvalPromptMode> parse_eval_prompt_mode(std::string_view text) {
  if (text == "predicted") return EvalPromptMode::Predicted;
  if (text == "edited") return EvalPromptMode::Edited;
  return std::nullopt;
}

std::optional<TrainPromptMode> parse_train_prompt_mode(std::string_view text) {
  if (text == "predicted") return TrainPromptMode::Predicted;
  if (text == "ground_truth") return TrainPromptMode::GroundTruth;
  return std::nullopt;
}

TrainConfig TrainConfig::paper_scale() {
  TrainConfig cfg;
  cfg.epochs = 1000;
  cfg.iters_per_epoch = 250;
  cfg.patch_size = {96, 160, 160};
  return cfg;
}

LossWeights TrainConfig::loss_weights() const {
  LossWeights w;
  w.alpha = alpha;
  w.ds_weights = ds_weights;
  w.dice_smooth = dice_smooth;
  return w;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 1 || iters_per_epoch < 1) throw ConfigError("batch size and iterations must be positive");
  if (!(lr0 > lr_min && lr_min > 0.0)) throw ConfigError("need lr0 > lr_min > 0");
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be non-negative");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
  if (fg_prob < 0.0 || fg_prob > 1.0) throw ConfigError("fg_prob must lie in [0, 1]");
  if (num_threads < 1) throw ConfigError("num_threads must be positive");
  loss_weights().validate(ds_weights.size());
}

double lr_at(int epoch, const TrainConfig& cfg) {
  const double frac = std::clamp(static_cast<double>(epoch) / static_cast<double>(cfg.epochs), 0.0, 1.0);
  return std::max(cfg.lr0 * std::pow(1.0 - frac, cfg.poly_power), cfg.lr_min);
}

// ---------------------------------------------------------------- optimizer --

SgdMomentum::SgdMomentum(std::vector<torch::Tensor> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  for (const auto& p : params_) buffers_.push_back(torch::zeros_like(p));
}

void SgdMomentum::zero_grad() {
  for (auto& p : params_)
    if (p.grad().defined()) p.mutable_grad().zero_();
}

void SgdMomentum::step(double lr) {
  torch::NoGradGuard no_grad;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    auto& v = buffers_[i];
    v.mul_(momentum_);
    if (p.grad().defined()) v.add_(p.grad());
    p.mul_(1.0 - lr * weight_decay_);
    p.add_(v, -lr);
  }
}

// --------------------------------------------------------------- checkpoint --

std::uint64_t config_hash(const ModelConfig& model, const TrainConfig& train) {
  const std::string canonical = json{{"model", model}, {"train", train}}.dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : canonical) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

NamedTensors capture_state(const AeplNet& model) {
  NamedTensors out;
  for (const auto& item : model->named_parameters()) out.emplace_back(item.key(), item.value().detach().clone());
  for (const auto& item : model->named_buffers()) out.emplace_back("buffer:" + item.key(), item.value().detach().clone());
  return out;
}

void restore_state(AeplNet& model, const NamedTensors& state) {
  torch::NoGradGuard no_grad;
  std::unordered_map<std::string, const torch::Tensor*> lookup;
  for (const auto& [name, t] : state) lookup[name] = &t;
  auto copy = [&](const std::string& name, torch::Tensor& dst) {
    auto it = lookup.find(name);
    if (it == lookup.end()) throw IoError("checkpoint is missing tensor " + name);
    if (it->second->sizes() != dst.sizes()) throw ShapeMismatchError("checkpoint tensor " + name + " has wrong shape");
    dst.copy_(*it->second);
  };
  for (auto& item : model->named_parameters()) copy(item.key(), item.value());
  for (auto& item : model->named_buffers()) copy("buffer:" + item.key(), item.value());
}

namespace {

constexpr char kMagic[8] = {'A', 'E', 'P', 'L', 'C', 'K', 'P', 'T'};

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("truncated checkpoint");
  return v;
}

void write_tensor(std::ostream& os, const std::string& name, const torch::Tensor& t) {
  auto f = t.detach().to(torch::kFloat).contiguous();
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(f.dim()));
  for (auto d : f.sizes()) write_pod<std::int64_t>(os, d);
  os.write(reinterpret_cast<const char*>(f.data_ptr<float>()), static_cast<std::streamsize>(f.numel() * 4));
}

std::pair<std::string, torch::Tensor> read_tensor(std::istream& is) {
  const auto name_len = read_pod<std::uint32_t>(is);
  std::string name(name_len, '\0');
  is.read(name.data(), name_len);
  const auto ndim = read_pod<std::uint32_t>(is);
  std::vector<std::int64_t> shape;
  for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(read_pod<std::int64_t>(is));
  auto t = torch::empty(shape, torch::kFloat);
  is.read(reinterpret_cast<char*>(t.data_ptr<float>()), static_cast<std::streamsize>(t.numel() * 4));
  if (!is) throw IoError("truncated checkpoint tensor " + name);
  return {name, t};
}

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const json meta{{"model_config", ckpt.model_config},
                  {"train_config", ckpt.train_config},
                  {"epoch", ckpt.epoch},
                  {"val_mean_dice", ckpt.val_mean_dice},
                  {"grade_accuracy", ckpt.grade_accuracy},
                  {"best_val_mean_dice", ckpt.best_val_mean_dice},
                  {"best_epoch", ckpt.best_epoch},
                  {"rng_state", ckpt.rng_state}};
  const std::string meta_text = meta.dump();
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot write checkpoint " + path.string());
    os.write(kMagic, sizeof(kMagic));
    write_pod<std::uint32_t>(os, Checkpoint::kVersion);
    write_pod<std::uint64_t>(os, config_hash(ckpt.model_config, ckpt.train_config));
    write_pod<std::uint64_t>(os, meta_text.size());
    os.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.parameters.size()));
    for (const auto& [name, t] : ckpt.parameters) write_tensor(os, name, t);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.momentum.size()));
    for (std::size_t i = 0; i < ckpt.momentum.size(); ++i) write_tensor(os, "momentum/" + std::to_string(i), ckpt.momentum[i]);
    if (!os) throw IoError("failed writing checkpoint " + path.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("missing checkpoint " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw IoError("not an AEPL checkpoint: " + path.string());
  const auto version = read_pod<std::uint32_t>(is);
  if (version != Checkpoint::kVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const auto stored_hash = read_pod<std::uint64_t>(is);
  const auto meta_len = read_pod<std::uint64_t>(is);
  std::string meta_text(meta_len, '\0');
  is.read(meta_text.data(), static_cast<std::streamsize>(meta_len));
  const auto meta = json::parse(meta_text);

  Checkpoint ckpt;
  meta.at("model_config").get_to(ckpt.model_config);
  meta.at("train_config").get_to(ckpt.train_config);
  ckpt.epoch = meta.at("epoch").get<int>();
  ckpt.val_mean_dice = meta.at("val_mean_dice").get<double>();
  ckpt.grade_accuracy = meta.at("grade_accuracy").get<double>();
  ckpt.best_val_mean_dice = meta.at("best_val_mean_dice").get<double>();
  ckpt.best_epoch = meta.at("best_epoch").get<int>();
  ckpt.rng_state = meta.at("rng_state").get<std::string>();
  ckpt.config_hash = config_hash(ckpt.model_config, ckpt.train_config);
  if (ckpt.config_hash != stored_hash) throw IoError("checkpoint config hash mismatch: " + path.string());

  const auto n_params = read_pod<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n_params; ++i) ckpt.parameters.push_back(read_tensor(is));
  const auto n_momentum = read_pod<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n_momentum; ++i) ckpt.momentum.push_back(read_tensor(is).second);
  return ckpt;
}

AeplNet make_model(const ModelConfig& cfg, std::uint64_t seed) {
  torch::manual_seed(seed);
  return AeplNet(cfg);
}

AeplNet model_from_checkpoint(const Checkpoint& ckpt) {
  AeplNet model(ckpt.model_config);
  restore_state(model, ckpt.parameters);
  model->eval();
  return model;
}

// ------------------------------------------------------------------ logging --

std::string EpochLog::to_json_line() const {
  // Round-trip precision so identical runs give byte-identical logs.
  json j{{"epoch", epoch},
         {"lr", lr},
         {"loss", loss},
         {"seg_loss", seg_loss},
         {"cls_loss", cls_loss},
         {"val_mean_dice", val_mean_dice},
         {"val_dice", val_dice},
         {"val_grade_accuracy", val_grade_accuracy},
         {"best", best}};
  return j.dump();
}

namespace {

EpochLog epoch_log_from_json(const json& j) {
  EpochLog e;
  e.epoch = j.at("epoch").get<int>();
  e.lr = j.at("lr").get<double>();
  e.loss = j.at("loss").get<double>();
  e.seg_loss = j.at("seg_loss").get<double>();
  e.cls_loss = j.at("cls_loss").get<double>();
  e.val_mean_dice = j.at("val_mean_dice").get<double>();
  e.val_dice = j.at("val_dice").get<std::array<double, 3>>();
  e.val_grade_accuracy = j.at("val_grade_accuracy").get<double>();
  e.best = j.at("best").get<bool>();
  return e;
}

std::vector<EpochLog> read_log(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw IoError("missing training log " + file.string());
  std::vector<EpochLog> out;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) out.push_back(epoch_log_from_json(json::parse(line)));
  return out;
}

std::vector<torch::Tensor> trainable(const AeplNet& model) { return model->parameters(); }

}  // namespace

// ------------------------------------------------------------------ trainer --

Trainer::Trainer(AeplNet model, TrainConfig cfg, const TrainingData& data)
    : model_(std::move(model)),
      cfg_(std::move(cfg)),
      data_(data),
      optimizer_(trainable(model_), cfg_.momentum, cfg_.weight_decay),
      rng_(mix_seed(cfg_.seed, 1)) {
  cfg_.validate();
  if (model_->config().patch_size != cfg_.patch_size) throw ConfigError("trainer patch differs from model patch");
  if (data_.train.empty()) throw EmptyInputError("no training cases");
  torch::set_num_threads(cfg_.num_threads);
}

Checkpoint Trainer::snapshot() const {
  Checkpoint c;
  c.model_config = model_->config();
  c.train_config = cfg_;
  c.config_hash = config_hash(c.model_config, c.train_config);
  c.epoch = epoch_;
  c.val_mean_dice = last_val_dice_;
  c.grade_accuracy = last_grade_acc_;
  c.best_val_mean_dice = best_.best_val_mean_dice;
  c.best_epoch = best_.best_epoch;
  std::ostringstream rng_text;
  rng_text << rng_;
  c.rng_state = rng_text.str();
  c.parameters = capture_state(model_);
  for (const auto& b : optimizer_.momentum_buffers()) c.momentum.push_back(b.clone());
  return c;
}

void Trainer::restore(const Checkpoint& ckpt) {
  if (config_hash(ckpt.model_config, ckpt.train_config) != config_hash(model_->config(), cfg_))
    throw ConfigError("checkpoint was produced with a different configuration");
  restore_state(model_, ckpt.parameters);
  auto& buffers = optimizer_.momentum_buffers();
  if (ckpt.momentum.size() != buffers.size()) throw IoError("checkpoint momentum state does not match the model");
  {
    torch::NoGradGuard no_grad;
    for (std::size_t i = 0; i < buffers.size(); ++i) buffers[i].copy_(ckpt.momentum[i]);
  }
  std::istringstream rng_text(ckpt.rng_state);
  rng_text >> rng_;
  epoch_ = ckpt.epoch;
  last_val_dice_ = ckpt.val_mean_dice;
  last_grade_acc_ = ckpt.grade_accuracy;
  best_ = ckpt;
  best_.best_val_mean_dice = ckpt.best_val_mean_dice;
  best_.best_epoch = ckpt.best_epoch;
}

EpochLog Trainer::run_epoch() {
  if (finished()) throw ConfigError("training already finished");
  const double lr = lr_at(epoch_, cfg_);
  const auto weights = cfg_.loss_weights();
  const Shape3 patch{cfg_.patch_size[0], cfg_.patch_size[1], cfg_.patch_size[2]};
  std::uniform_int_distribution<std::size_t> pick(0, data_.train.size() - 1);

  model_->train();
  double sum_loss = 0.0, sum_seg = 0.0, sum_cls = 0.0;
  for (int it = 0; it < cfg_.iters_per_epoch; ++it) {
    std::vector<torch::Tensor> images, labels;
    std::vector<std::int64_t> grades;
    std::vector<GradePrompt> truth_prompts;
    for (int b = 0; b < cfg_.batch_size; ++b) {
      const auto& c = data_.train[pick(rng_)];
      auto p = sample_patch(c, patch, cfg_.fg_prob, rng_);
      if (cfg_.augment) augment(p, rng_);
      images.push_back(p.image);
      labels.push_back(p.labels);
      grades.push_back(index_of(c.grade));
      truth_prompts.push_back(GradePrompt::one_hot(c.grade, PromptSource::GroundTruth));
    }
    auto x = torch::stack(images);
    auto targets = region_targets(torch::stack(labels));
    auto grade_t = torch::tensor(grades, torch::kLong);

    std::optional<std::vector<GradePrompt>> override;
    if (cfg_.prompt_mode == TrainPromptMode::GroundTruth) override = truth_prompts;
    const auto out = model_->forward(x, override);
    auto seg = seg_loss(out.seg, targets, weights);
    auto cls = cls_loss(out.grade.logits, grade_t);
    auto total = total_loss(seg, cls, cfg_.alpha);

    const double seg_v = seg.item<double>();
    const double cls_v = cls.item<double>();
    const double total_v = total.item<double>();
    if (!std::isfinite(total_v) || !std::isfinite(seg_v) || !std::isfinite(cls_v))
      throw NonFiniteLossError(epoch_ + 1, it, seg_v, cls_v);

    optimizer_.zero_grad();
    total.backward();
    optimizer_.step(lr);
    sum_loss += total_v;
    sum_seg += seg_v;
    sum_cls += cls_v;
  }

  EpochLog entry;
  entry.epoch = epoch_ + 1;
  entry.lr = lr;
  entry.loss = sum_loss / cfg_.iters_per_epoch;
  entry.seg_loss = sum_seg / cfg_.iters_per_epoch;
  entry.cls_loss = sum_cls / cfg_.iters_per_epoch;

  model_->eval();
  if (!data_.val.empty()) {
    EvalOptions opts;
    opts.prompt_mode = cfg_.eval_prompt_mode;
    opts.compute_hd95 = false;
    const auto ev = evaluate_model(model_, data_.val, opts);
    entry.val_mean_dice = ev.table.mean_dice();
    for (int r = 0; r < 3; ++r) entry.val_dice[r] = ev.table.columns[r].mean;
    entry.val_grade_accuracy = ev.grade_accuracy;
  }
  ++epoch_;
  last_val_dice_ = entry.val_mean_dice;
  last_grade_acc_ = entry.val_grade_accuracy;

  // Strict improvement keeps the earliest epoch on ties.
  if (best_.best_epoch < 0 || entry.val_mean_dice > best_.best_val_mean_dice) {
    entry.best = true;
    best_.best_val_mean_dice = entry.val_mean_dice;
    best_.best_epoch = entry.epoch;
    const auto keep_best_val = best_.best_val_mean_dice;
    const auto keep_best_epoch = best_.best_epoch;
    best_ = snapshot();
    best_.best_val_mean_dice = keep_best_val;
    best_.best_epoch = keep_best_epoch;
  }
  log_.push_back(entry);
  return entry;
}

TrainResult train(AeplNet model, const TrainingData& data, const TrainConfig& cfg, const TrainOutputs& outputs) {
  Trainer trainer(std::move(model), cfg, data);
  std::ofstream log_file;
  if (outputs.dir) {
    fs::create_directories(*outputs.dir);
    log_file.open(*outputs.dir / "train_log.jsonl", std::ios::trunc);
  }
  while (!trainer.finished()) {
    const auto entry = trainer.run_epoch();
    if (log_file.is_open()) log_file << entry.to_json_line() << '\n' << std::flush;
    if (outputs.on_epoch) outputs.on_epoch(entry);
  }
  TrainResult result{trainer.best(), trainer.snapshot(), trainer.log()};
  if (outputs.dir) {
    save_checkpoint(*outputs.dir / "best.ckpt", result.best);
    save_checkpoint(*outputs.dir / "last.ckpt", result.last);
  }
  return result;
}

// --------------------------------------------------------------- evaluation --

EvalResult evaluate_model(const AeplNet& model, const std::vector<Case>& cases, const EvalOptions& opts) {
  if (cases.empty()) throw EmptyInputError("evaluate_model: no cases");
  EvalResult result;
  const bool two_pass = opts.corruption.has_value();

  std::vector<GradePrompt> predictions(cases.size());
  if (two_pass) {
    for (std::size_t i = 0; i < cases.size(); ++i) predictions[i] = encode_case(model, cases[i].volume.voxels).predicted;
    std::vector<std::size_t> correct;
    for (std::size_t i = 0; i < cases.size(); ++i)
      if (predictions[i].hard_label == cases[i].grade) correct.push_back(i);
    const auto target = static_cast<std::size_t>(
        std::llround(opts.corruption->target_accuracy * static_cast<double>(cases.size())));
    if (correct.size() > target) {
      Rng rng(mix_seed(opts.corruption->seed, 0xC0));
      std::shuffle(correct.begin(), correct.end(), rng);
      for (std::size_t k = 0; k < correct.size() - target; ++k) {
        auto& p = predictions[correct[k]];
        p = GradePrompt::from_probs({p.probs[1], p.probs[0]}, PromptSource::Predicted);
        if (p.hard_label == cases[correct[k]].grade) p = GradePrompt::one_hot(flipped(p.hard_label), PromptSource::Predicted);
      }
    }
  }

  std::size_t n_correct = 0;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto& c = cases[i];
    const auto enc = encode_case(model, c.volume.voxels);
    const GradePrompt predicted = two_pass ? predictions[i] : enc.predicted;
    const GradePrompt used = opts.prompt_mode == EvalPromptMode::Edited ? GradePrompt::one_hot(c.grade, PromptSource::Edited)
                                                                        : inference_prompt(predicted);
    const auto probs = decode_case(model, enc, used);
    const auto pred_regions = threshold_regions(probs);
    const auto gt_regions = regions_of(c.labels);
    CaseReport report;
    if (opts.compute_hd95) {
      report = evaluate_case(c.id(), pred_regions, gt_regions, c.volume.spacing);
    } else {
      report.case_id = c.id();
      for (int r = 0; r < 3; ++r) report.dice[r] = dice_score(pred_regions[static_cast<Region>(r)], gt_regions[static_cast<Region>(r)]);
    }
    result.reports.push_back(report);
    result.gradings.push_back({c.id(), c.grade, predicted, used});
    n_correct += predicted.hard_label == c.grade;
  }
  result.table = evaluate_dataset(result.reports);
  result.grade_accuracy = static_cast<double>(n_correct) / static_cast<double>(cases.size());
  return result;
}

// ----------------------------------------------------------------- ablation --

std::string format_alpha(double alpha) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), alpha);
  return ec == std::errc{} ? std::string(buf, end) : std::to_string(alpha);
}

std::vector<SweepRow> alpha_sweep(const ModelConfig& model_cfg, const TrainConfig& base, const TrainingData& data,
                                  const std::vector<Case>& test, const std::vector<double>& values,
                                  const SweepOptions& opts) {
  if (values.empty()) throw ConfigError("alpha sweep needs at least one value");
  std::vector<SweepRow> rows;
  for (double alpha : values) {
    SweepRow row;
    row.alpha = alpha;
    row.alpha_text = format_alpha(alpha);
    TrainConfig cfg = base;
    cfg.alpha = alpha;
    const auto hash = config_hash(model_cfg, cfg);

    std::optional<fs::path> dir;
    if (opts.run_dir) dir = *opts.run_dir / ("alpha_" + row.alpha_text);
    bool cached = false;
    if (dir && fs::exists(*dir / "best.ckpt") && fs::exists(*dir / "last.ckpt") && fs::exists(*dir / "train_log.jsonl")) {
      try {
        auto best = load_checkpoint(*dir / "best.ckpt");
        auto last = load_checkpoint(*dir / "last.ckpt");
        if (best.config_hash == hash && last.config_hash == hash && last.epoch == cfg.epochs) {
          row.run = {std::move(best), std::move(last), read_log(*dir / "train_log.jsonl")};
          cached = true;
        }
      } catch (const Error&) {
        cached = false;
      }
    }
    if (opts.progress) opts.progress("alpha=" + row.alpha_text + (cached ? " (cached run)" : " (training)"));
    if (!cached) {
      TrainOutputs outs;
      outs.dir = dir;
      if (opts.progress)
        outs.on_epoch = [&](const EpochLog& e) { opts.progress("  " + e.to_json_line()); };
      row.run = train(make_model(model_cfg, cfg.seed), data, cfg, outs);
    }
    row.from_cache = cached;
    row.eval = evaluate_model(model_from_checkpoint(row.run.best), test, opts.eval);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_sweep_table(const std::vector<SweepRow>& rows) {
  std::vector<std::pair<std::string, AggregateTable>> table;
  for (const auto& r : rows) table.emplace_back(r.alpha_text, r.eval.table);
  return format_aggregate_text(table, "alpha");
}

}  // namespace aepl
