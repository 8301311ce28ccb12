#pragma once

#include <json.hpp>

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aepl/data.hpp"
#include "aepl/inference.hpp"
#include "aepl/model.hpp"

namespace httplib {
class Server;
}

namespace aepl::service {

std::string base64_encode(std::span<const std::uint8_t> bytes);
/// Throws std::invalid_argument on malformed input.
std::vector<std::uint8_t> base64_decode(const std::string& text);

/// Run-length payload of a label slice: little-endian u32 triples
/// (start, length, value) covering the nonzero runs of the flattened slice,
/// base64 encoded. An all-zero slice gives an empty string.
std::string rle_encode(std::span<const std::uint8_t> values);
std::vector<std::uint8_t> rle_decode(const std::string& payload, std::size_t size);

/// Diff codes of the diff layer.
enum DiffCode : std::uint8_t { kSame = 0, kAdded = 1, kRemoved = 2, kChanged = 3 };

struct Response {
  int status = 200;
  nlohmann::json body;
};

/// One loaded case and the result of its last decode.
struct SessionState {
  std::string session_id;
  Case source;
  CaseEncoding encoding;  // cached encoder features per window
  GradePrompt predicted;
  std::vector<std::uint8_t> predicted_labels;  // BraTS labels, prompt = predicted grade
  GradePrompt last_prompt;
  torch::Tensor last_probs;                  // [3, X, Y, Z]
  std::vector<std::uint8_t> last_labels;     // BraTS labels for last_prompt
  bool edited = false;
  std::mutex mutex;
};

/// Request handlers, independent of the HTTP transport. The model is only
/// read; each session is guarded by its own mutex.
class InferenceService {
 public:
  /// `model` may be empty, in which case prediction answers 503.
  InferenceService(std::optional<AeplNet> model, std::vector<Case> cases);

  Response health() const;
  /// {"case_id": "..."} or {"volume": {"shape": [X,Y,Z], "spacing": [..],
  /// "data": base64 float32 [4,X,Y,Z]}}.
  Response predict(const nlohmann::json& request);
  /// {"grade": "LGG"|"HGG"}.
  Response resegment(const std::string& session_id, const nlohmann::json& request);
  /// layer: "image:N", "prediction", "edited-prediction" or "diff".
  Response slice(const std::string& session_id, int axis, std::int64_t index, const std::string& layer);

  std::size_t session_count() const;

  /// Registers the endpoints on `server`.
  void bind(httplib::Server& server);

 private:
  std::shared_ptr<SessionState> find(const std::string& id) const;

  std::optional<AeplNet> model_;
  std::map<std::string, Case> cases_;
  mutable std::mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<SessionState>> sessions_;
  std::uint64_t next_session_ = 1;
  // Forward passes run one at a time; the model itself is never written.
  mutable std::mutex model_mutex_;
};

}  // namespace aepl::service
