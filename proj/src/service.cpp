#include "aepl/service.hpp"

#include <boost/beast/core/detail/base64.hpp>
#include <httplib.h>

#include <cstring>
#include <stdexcept>

#include "aepl/errors.hpp"

namespace aepl::service {

using json = nlohmann::json;
namespace b64 = boost::beast::detail::base64;

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(b64::encoded_size(bytes.size()), '\0');
  out.resize(b64::encode(out.data(), bytes.data(), bytes.size()));
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw std::invalid_argument("base64 length is not a multiple of 4");
  std::size_t len = text.size();
  for (int pad = 0; pad < 2 && len > 0 && text[len - 1] == '='; ++pad) --len;
  std::vector<std::uint8_t> out(b64::decoded_size(text.size()));
  const auto [written, read] = b64::decode(out.data(), text.data(), len);
  if (read != len) throw std::invalid_argument("invalid base64 character");
  out.resize(written);
  return out;
}

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

}  // namespace

std::string rle_encode(std::span<const std::uint8_t> values) {
  std::vector<std::uint8_t> bytes;
  std::size_t i = 0;
  while (i < values.size()) {
    const auto v = values[i];
    std::size_t j = i + 1;
    while (j < values.size() && values[j] == v) ++j;
    if (v != 0) {
      put_u32(bytes, static_cast<std::uint32_t>(i));
      put_u32(bytes, static_cast<std::uint32_t>(j - i));
      put_u32(bytes, v);
    }
    i = j;
  }
  return base64_encode(bytes);
}

std::vector<std::uint8_t> rle_decode(const std::string& payload, std::size_t size) {
  std::vector<std::uint8_t> out(size, 0);
  const auto bytes = base64_decode(payload);
  if (bytes.size() % 12 != 0) throw std::invalid_argument("run-length payload is not a list of triples");
  for (std::size_t k = 0; k < bytes.size(); k += 12) {
    const auto start = get_u32(&bytes[k]);
    const auto length = get_u32(&bytes[k + 4]);
    const auto value = get_u32(&bytes[k + 8]);
    if (static_cast<std::size_t>(start) + length > size || value > 255)
      throw std::invalid_argument("run-length triple out of range");
    std::fill_n(out.begin() + start, length, static_cast<std::uint8_t>(value));
  }
  return out;
}

namespace {

Response error(int status, const std::string& message) { return {status, json{{"error", message}}}; }

json prompt_json(const GradePrompt& p) {
  return json{{"probs", {p.probs[0], p.probs[1]}},
              {"hard_label", std::string(to_string(p.hard_label))},
              {"source", std::string(to_string(p.source))}};
}

std::array<std::int64_t, 3> region_volumes(const std::vector<std::uint8_t>& labels) {
  std::array<std::int64_t, 3> v{};
  for (auto l : labels) {
    v[0] += l == 4;
    v[1] += l != 0;
    v[2] += l == 1 || l == 4;
  }
  return v;
}

json volumes_json(const std::vector<std::uint8_t>& labels) {
  const auto v = region_volumes(labels);
  return json{{"ET", v[0]}, {"WT", v[1]}, {"TC", v[2]}};
}

std::vector<std::uint8_t> labels_of(const torch::Tensor& probs) { return labels_from_regions(threshold_regions(probs)); }

Case uploaded_case(const json& volume, const std::string& id) {
  const auto shape = volume.at("shape").get<std::array<std::int64_t, 3>>();
  for (auto d : shape)
    if (d <= 0) throw ShapeMismatchError("volume dims must be positive");
  const auto bytes = base64_decode(volume.at("data").get<std::string>());
  const auto n = 4 * shape[0] * shape[1] * shape[2];
  if (static_cast<std::int64_t>(bytes.size()) != n * 4)
    throw ShapeMismatchError("volume data does not hold 4 float32 channels of the given shape");
  Case c;
  c.volume.voxels = torch::empty({4, shape[0], shape[1], shape[2]}, torch::kFloat);
  std::memcpy(c.volume.voxels.data_ptr<float>(), bytes.data(), bytes.size());
  if (!torch::isfinite(c.volume.voxels).all().item<bool>()) throw ShapeMismatchError("volume holds non-finite values");
  if (volume.contains("spacing")) c.volume.spacing = volume.at("spacing").get<Spacing>();
  c.volume.case_id = id;
  c.labels = torch::zeros({shape[0], shape[1], shape[2]}, torch::kUInt8);
  return preprocess(c);
}

std::vector<std::uint8_t> slice_of(const std::vector<std::uint8_t>& volume, const Shape3& shape, int axis,
                                   std::int64_t index) {
  std::vector<std::uint8_t> out;
  for (std::int64_t x = 0; x < shape[0]; ++x)
    for (std::int64_t y = 0; y < shape[1]; ++y)
      for (std::int64_t z = 0; z < shape[2]; ++z) {
        const std::int64_t fixed = axis == 0 ? x : axis == 1 ? y : z;
        if (fixed == index) out.push_back(volume[static_cast<std::size_t>((x * shape[1] + y) * shape[2] + z)]);
      }
  return out;
}

}  // namespace

InferenceService::InferenceService(std::optional<AeplNet> model, std::vector<Case> cases) : model_(std::move(model)) {
  if (model_) (*model_)->eval();
  for (auto& c : cases) {
    auto id = c.id();
    cases_.emplace(std::move(id), std::move(c));
  }
}

Response InferenceService::health() const {
  std::lock_guard lock(sessions_mutex_);
  return {200, json{{"status", "ok"}, {"model_loaded", model_.has_value()}, {"cases", cases_.size()},
                    {"sessions", sessions_.size()}}};
}

std::size_t InferenceService::session_count() const {
  std::lock_guard lock(sessions_mutex_);
  return sessions_.size();
}

std::shared_ptr<SessionState> InferenceService::find(const std::string& id) const {
  std::lock_guard lock(sessions_mutex_);
  auto it = sessions_.find(id);
  return it == sessions_.end() ? nullptr : it->second;
}

Response InferenceService::predict(const json& request) {
  if (!model_) return error(503, "model not loaded");
  if (!request.is_object()) return error(422, "request must be a JSON object");

  auto session = std::make_shared<SessionState>();
  {
    std::lock_guard lock(sessions_mutex_);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "s%06llu", static_cast<unsigned long long>(next_session_++));
    session->session_id = buf;
  }
  try {
    if (request.contains("case_id")) {
      if (!request["case_id"].is_string()) return error(422, "case_id must be a string");
      auto it = cases_.find(request["case_id"].get<std::string>());
      if (it == cases_.end()) return error(404, "unknown case " + request["case_id"].get<std::string>());
      session->source = it->second;
    } else if (request.contains("volume")) {
      session->source = uploaded_case(request["volume"], "upload-" + session->session_id);
    } else {
      return error(422, "request needs case_id or volume");
    }
  } catch (const EmptyInputError& e) {
    return error(422, e.what());
  } catch (const ShapeMismatchError& e) {
    return error(422, e.what());
  } catch (const json::exception& e) {
    return error(422, std::string("malformed volume: ") + e.what());
  } catch (const std::invalid_argument& e) {
    return error(422, std::string("malformed volume: ") + e.what());
  }

  {
    std::lock_guard model_lock(model_mutex_);
    session->encoding = encode_case(*model_, session->source.volume.voxels);
    session->predicted = session->encoding.predicted;
    session->last_prompt = inference_prompt(session->predicted);
    session->last_probs = decode_case(*model_, session->encoding, session->last_prompt);
  }
  session->predicted_labels = labels_of(session->last_probs);
  session->last_labels = session->predicted_labels;

  const auto shape = session->source.volume.shape();
  const auto& sp = session->source.volume.spacing;
  json body{{"session_id", session->session_id},
            {"case_id", session->source.id()},
            {"shape", shape},
            {"spacing", sp},
            {"voxel_volume_mm3", sp[0] * sp[1] * sp[2]},
            {"predicted", prompt_json(session->predicted)},
            {"used", prompt_json(session->last_prompt)},
            {"volumes", volumes_json(session->last_labels)}};
  {
    std::lock_guard lock(sessions_mutex_);
    sessions_[session->session_id] = session;
  }
  return {200, body};
}

Response InferenceService::resegment(const std::string& session_id, const json& request) {
  auto session = find(session_id);
  if (!session) return error(404, "unknown session " + session_id);
  if (!request.is_object() || !request.contains("grade") || !request["grade"].is_string())
    return error(422, "request needs a grade of LGG or HGG");
  const auto grade = parse_grade(request["grade"].get<std::string>());
  if (!grade) return error(422, "invalid grade " + request["grade"].get<std::string>());

  std::lock_guard session_lock(session->mutex);
  const auto previous_prompt = session->last_prompt;
  const auto previous_labels = session->last_labels;
  const auto prompt = GradePrompt::one_hot(*grade, PromptSource::Edited);
  const bool same = session->edited && session->last_prompt.hard_label == *grade;
  if (!same) {
    {
      std::lock_guard model_lock(model_mutex_);
      session->last_probs = decode_case(*model_, session->encoding, prompt);
    }
    session->last_labels = labels_of(session->last_probs);
    session->last_prompt = prompt;
    session->edited = true;
  }

  const auto before = region_volumes(previous_labels);
  const auto after = region_volumes(session->last_labels);
  std::int64_t changed = 0;
  for (std::size_t i = 0; i < previous_labels.size(); ++i) changed += previous_labels[i] != session->last_labels[i];
  return {200, json{{"session_id", session->session_id},
                    {"grade", std::string(to_string(*grade))},
                    {"previous", {{"prompt", prompt_json(previous_prompt)}, {"volumes", volumes_json(previous_labels)}}},
                    {"current", {{"prompt", prompt_json(session->last_prompt)}, {"volumes", volumes_json(session->last_labels)}}},
                    {"deltas", {{"ET", after[0] - before[0]}, {"WT", after[1] - before[1]}, {"TC", after[2] - before[2]}}},
                    {"changed_voxels", changed}}};
}

Response InferenceService::slice(const std::string& session_id, int axis, std::int64_t index, const std::string& layer) {
  auto session = find(session_id);
  if (!session) return error(404, "unknown session " + session_id);
  if (axis < 0 || axis > 2) return error(404, "axis must be 0, 1 or 2");

  std::lock_guard session_lock(session->mutex);
  const auto shape = session->source.volume.shape();
  if (index < 0 || index >= shape[axis]) return error(416, "slice index out of range");
  std::vector<std::int64_t> plane;
  for (int a = 0; a < 3; ++a)
    if (a != axis) plane.push_back(shape[a]);

  json body{{"session_id", session_id}, {"axis", axis}, {"index", index}, {"layer", layer},
            {"bounds", {{"min", 0}, {"max", shape[axis] - 1}}}, {"shape", plane}};

  if (layer.rfind("image:", 0) == 0) {
    int channel = -1;
    try {
      channel = std::stoi(layer.substr(6));
    } catch (const std::exception&) {
    }
    if (channel < 0 || channel > 3) return error(422, "image channel must be 0..3");
    const auto volume = session->source.volume.voxels[channel];
    const double lo = volume.min().item<double>(), hi = volume.max().item<double>();
    auto s = volume.select(axis, index).to(torch::kDouble);
    if (hi > lo) s = (s - lo) / (hi - lo) * 255.0;
    else s = torch::zeros_like(s);
    auto gray = s.round().clamp(0, 255).to(torch::kUInt8).contiguous();
    const std::span<const std::uint8_t> bytes(gray.data_ptr<std::uint8_t>(), static_cast<std::size_t>(gray.numel()));
    body["encoding"] = "gray8";
    body["window"] = {lo, hi};
    body["data"] = base64_encode(bytes);
    return {200, body};
  }

  std::vector<std::uint8_t> values;
  if (layer == "prediction") {
    values = slice_of(session->predicted_labels, shape, axis, index);
  } else if (layer == "edited-prediction") {
    values = slice_of(session->last_labels, shape, axis, index);
  } else if (layer == "diff") {
    const auto a = slice_of(session->predicted_labels, shape, axis, index);
    const auto b = slice_of(session->last_labels, shape, axis, index);
    values.resize(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i] == b[i]) values[i] = kSame;
      else if (a[i] == 0) values[i] = kAdded;
      else if (b[i] == 0) values[i] = kRemoved;
      else values[i] = kChanged;
    }
  } else {
    return error(422, "unknown layer " + layer);
  }
  body["encoding"] = "rle";
  body["data"] = rle_encode(values);
  return {200, body};
}

void InferenceService::bind(httplib::Server& server) {
  auto reply = [](httplib::Response& res, const Response& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  auto parse = [](const httplib::Request& req) -> std::optional<json> {
    try {
      return json::parse(req.body);
    } catch (const json::exception&) {
      return std::nullopt;
    }
  };

  server.Get("/api/health", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, health()); });
  server.Post("/api/predict", [this, reply, parse](const httplib::Request& req, httplib::Response& res) {
    auto body = parse(req);
    reply(res, body ? predict(*body) : error(422, "body is not valid JSON"));
  });
  server.Post(R"(/api/sessions/([^/]+)/resegment)",
              [this, reply, parse](const httplib::Request& req, httplib::Response& res) {
                auto body = parse(req);
                reply(res, body ? resegment(req.matches[1], *body) : error(422, "body is not valid JSON"));
              });
  server.Get(R"(/api/sessions/([^/]+)/slices/(\d+)/(-?\d+))",
             [this, reply](const httplib::Request& req, httplib::Response& res) {
               const std::string axis_text = req.matches[2];
               const int axis = axis_text.size() == 1 ? axis_text[0] - '0' : -1;
               std::int64_t index = 0;
               try {
                 index = std::stoll(req.matches[3]);
               } catch (const std::out_of_range&) {
                 reply(res, error(416, "slice index out of range"));
                 return;
               }
               const auto layer = req.has_param("layer") ? req.get_param_value("layer") : std::string("image:0");
               reply(res, slice(req.matches[1], axis, index, layer));
             });
  server.set_exception_handler([reply](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      reply(res, error(500, e.what()));
    } catch (...) {
      reply(res, error(500, "internal error"));
    }
  });
}

}  // namespace aepl::service
