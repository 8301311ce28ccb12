#include <gtest/gtest.h>
#include <httplib.h>

#include <cstring>
#include <random>
#include <thread>

#include "aepl/service.hpp"
#include "aepl/trainer.hpp"

using namespace aepl;
using namespace aepl::service;
using json = nlohmann::json;

namespace {

AeplNet test_model() {
  ModelConfig cfg;
  cfg.patch_size = {16, 32, 32};
  auto model = make_model(cfg, 4);
  torch::NoGradGuard no_grad;
  torch::manual_seed(5);
  // Strong prompt response so that flipping the grade changes the masks.
  auto& out = model->prompt_encoder()->output_layer();
  out->weight.add_(torch::randn_like(out->weight) * 0.05);
  out->bias.add_(torch::randn_like(out->bias) * 0.05);
  for (auto& p : model->classifier()->parameters()) p.add_(torch::randn_like(p) * 0.5);
  // Centre the segmentation logits on the threshold so the masks react to the prompt.
  for (auto& item : model->named_parameters())
    if (item.key().rfind("heads.", 0) == 0 && item.key().find("bias") != std::string::npos) item.value().zero_();
  model->eval();
  return model;
}

std::vector<Case> test_cases() {
  std::vector<Case> out;
  for (auto& c : generate_phantom_dataset(2, 17)) out.push_back(preprocess(c));
  return out;
}

class ServiceTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    cases_ = new std::vector<Case>(test_cases());
    service_ = new InferenceService(test_model(), *cases_);
  }
  static void TearDownTestSuite() {
    delete service_;
    delete cases_;
  }
  static std::vector<Case>* cases_;
  static InferenceService* service_;
};

std::vector<Case>* ServiceTest::cases_ = nullptr;
InferenceService* ServiceTest::service_ = nullptr;

std::vector<std::uint8_t> decode_slice(const Response& r) {
  const auto shape = r.body.at("shape").get<std::vector<std::int64_t>>();
  return rle_decode(r.body.at("data").get<std::string>(), static_cast<std::size_t>(shape[0] * shape[1]));
}

}  // namespace

TEST(Rle, RoundTripOnRandomSlices) {
  std::mt19937_64 rng(1);
  const std::array<std::uint8_t, 4> values{0, 1, 2, 4};
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::uint8_t> slice(static_cast<std::size_t>(1 + rng() % 700));
    std::uint8_t v = 0;
    for (auto& s : slice) {
      if (rng() % 7 == 0) v = values[rng() % 4];
      s = v;
    }
    EXPECT_EQ(rle_decode(rle_encode(slice), slice.size()), slice);
  }
  EXPECT_EQ(rle_encode(std::vector<std::uint8_t>(64, 0)), "");
  EXPECT_EQ(rle_decode("", 5), std::vector<std::uint8_t>(5, 0));
  EXPECT_THROW(rle_decode("AAAA", 5), std::invalid_argument);
}

TEST(Base64, RoundTrip) {
  const std::vector<std::uint8_t> bytes{0, 1, 2, 250, 255, 17, 3};
  EXPECT_EQ(base64_decode(base64_encode(bytes)), bytes);
  EXPECT_EQ(base64_encode(std::vector<std::uint8_t>{'M', 'a', 'n'}), "TWFu");
  EXPECT_THROW(base64_decode("abc"), std::invalid_argument);
  EXPECT_THROW(base64_decode("ab!d"), std::invalid_argument);
}

TEST_F(ServiceTest, PredictValidCase) {
  const auto r = service_->predict({{"case_id", (*cases_)[0].id()}});
  ASSERT_EQ(r.status, 200) << r.body.dump();
  const auto probs = r.body["predicted"]["probs"].get<std::array<double, 2>>();
  EXPECT_NEAR(probs[0] + probs[1], 1.0, 1e-6);
  const auto label = r.body["predicted"]["hard_label"].get<std::string>();
  EXPECT_EQ(label, probs[1] > probs[0] ? "HGG" : "LGG");
  EXPECT_EQ(r.body["predicted"]["source"], "predicted");
  for (const char* region : {"ET", "WT", "TC"}) EXPECT_TRUE(r.body["volumes"].contains(region));

  const auto again = service_->predict({{"case_id", (*cases_)[0].id()}});
  EXPECT_NE(again.body["session_id"], r.body["session_id"]);
  EXPECT_EQ(again.body["predicted"], r.body["predicted"]);
  EXPECT_EQ(again.body["volumes"], r.body["volumes"]);
}

TEST_F(ServiceTest, PredictErrors) {
  EXPECT_EQ(service_->predict({{"case_id", "nope"}}).status, 404);
  EXPECT_EQ(service_->predict(json::object()).status, 422);
  EXPECT_EQ(service_->predict({{"volume", {{"shape", {2, 2, 2}}, {"data", "AAAA"}}}}).status, 422);
  InferenceService empty(std::nullopt, {});
  EXPECT_EQ(empty.predict({{"case_id", "x"}}).status, 503);
}

TEST_F(ServiceTest, PredictUploadedVolume) {
  const auto& v = (*cases_)[1].volume.voxels;
  const auto shape = (*cases_)[1].volume.shape();
  const std::span<const std::uint8_t> bytes(reinterpret_cast<const std::uint8_t*>(v.data_ptr<float>()),
                                            static_cast<std::size_t>(v.numel()) * 4);
  const auto r = service_->predict({{"volume", {{"shape", shape}, {"data", base64_encode(bytes)}}}});
  ASSERT_EQ(r.status, 200) << r.body.dump();
  const auto by_id = service_->predict({{"case_id", (*cases_)[1].id()}});
  EXPECT_EQ(r.body["predicted"]["hard_label"], by_id.body["predicted"]["hard_label"]);
}

TEST_F(ServiceTest, ResegmentSameGradeIsBitIdentical) {
  const auto p = service_->predict({{"case_id", (*cases_)[0].id()}});
  const auto id = p.body["session_id"].get<std::string>();
  const auto grade = p.body["predicted"]["hard_label"].get<std::string>();
  const auto before = service_->slice(id, 2, 20, "prediction");
  const auto r = service_->resegment(id, {{"grade", grade}});
  ASSERT_EQ(r.status, 200);
  EXPECT_EQ(r.body["changed_voxels"], 0);
  EXPECT_EQ(r.body["previous"]["volumes"], r.body["current"]["volumes"]);
  EXPECT_EQ(r.body["current"]["prompt"]["source"], "edited");
  const auto after = service_->slice(id, 2, 20, "edited-prediction");
  EXPECT_EQ(after.body["data"], before.body["data"]);
  EXPECT_EQ(service_->slice(id, 2, 20, "diff").body["data"], "");
}

TEST_F(ServiceTest, ResegmentFlipReportsDeltasAndIsIdempotent) {
  const auto p = service_->predict({{"case_id", (*cases_)[1].id()}});
  const auto id = p.body["session_id"].get<std::string>();
  const auto predicted = p.body["predicted"]["hard_label"].get<std::string>();
  const std::string flipped = predicted == "LGG" ? "HGG" : "LGG";
  const auto r = service_->resegment(id, {{"grade", flipped}});
  ASSERT_EQ(r.status, 200);
  EXPECT_GT(r.body["changed_voxels"].get<std::int64_t>(), 0);
  EXPECT_EQ(r.body["previous"]["volumes"], p.body["volumes"]);
  for (const char* region : {"ET", "WT", "TC"})
    EXPECT_EQ(r.body["deltas"][region].get<std::int64_t>(),
              r.body["current"]["volumes"][region].get<std::int64_t>() -
                  r.body["previous"]["volumes"][region].get<std::int64_t>());

  const auto twice = service_->resegment(id, {{"grade", flipped}});
  EXPECT_EQ(twice.body["current"], r.body["current"]);
  EXPECT_EQ(twice.body["previous"], r.body["current"]);
  EXPECT_EQ(twice.body["changed_voxels"], 0);

  // The diff layer marks exactly the changed voxels.
  const auto shape = p.body["shape"].get<std::array<std::int64_t, 3>>();
  std::int64_t diff_voxels = 0;
  for (std::int64_t z = 0; z < shape[2]; ++z) {
    const auto d = decode_slice(service_->slice(id, 2, z, "diff"));
    const auto a = decode_slice(service_->slice(id, 2, z, "prediction"));
    const auto b = decode_slice(service_->slice(id, 2, z, "edited-prediction"));
    for (std::size_t i = 0; i < d.size(); ++i) {
      diff_voxels += d[i] != 0;
      EXPECT_EQ(d[i] != 0, a[i] != b[i]);
    }
  }
  EXPECT_EQ(diff_voxels, r.body["changed_voxels"].get<std::int64_t>());
}

TEST_F(ServiceTest, ResegmentErrors) {
  EXPECT_EQ(service_->resegment("missing", {{"grade", "HGG"}}).status, 404);
  const auto p = service_->predict({{"case_id", (*cases_)[0].id()}});
  const auto id = p.body["session_id"].get<std::string>();
  EXPECT_EQ(service_->resegment(id, {{"grade", "MGG"}}).status, 422);
  EXPECT_EQ(service_->resegment(id, json::object()).status, 422);
}

TEST_F(ServiceTest, Slices) {
  const auto p = service_->predict({{"case_id", (*cases_)[0].id()}});
  const auto id = p.body["session_id"].get<std::string>();
  const auto shape = p.body["shape"].get<std::array<std::int64_t, 3>>();
  ASSERT_EQ(shape[0], 32);

  const auto img = service_->slice(id, 0, 16, "image:3");
  ASSERT_EQ(img.status, 200);
  EXPECT_EQ(img.body["encoding"], "gray8");
  EXPECT_EQ(img.body["shape"], (std::vector<std::int64_t>{shape[1], shape[2]}));
  EXPECT_EQ(base64_decode(img.body["data"].get<std::string>()).size(), static_cast<std::size_t>(shape[1] * shape[2]));

  const auto mask = service_->slice(id, 2, shape[2] / 2, "prediction");
  EXPECT_EQ(mask.body["shape"], (std::vector<std::int64_t>{shape[0], shape[1]}));
  EXPECT_EQ(mask.body["bounds"]["max"], shape[2] - 1);

  EXPECT_EQ(service_->slice(id, 0, shape[0], "prediction").status, 416);
  EXPECT_EQ(service_->slice(id, 1, -1, "prediction").status, 416);
  EXPECT_EQ(service_->slice("missing", 0, 0, "prediction").status, 404);
  EXPECT_EQ(service_->slice(id, 0, 0, "image:9").status, 422);
  EXPECT_EQ(service_->slice(id, 0, 0, "bogus").status, 422);
}

TEST_F(ServiceTest, SliceRoundTripMatchesServerMasks) {
  const auto p = service_->predict({{"case_id", (*cases_)[1].id()}});
  const auto id = p.body["session_id"].get<std::string>();
  const auto shape = p.body["shape"].get<std::array<std::int64_t, 3>>();
  // Reference masks straight from inference.
  const auto inf = infer_case(test_model(), (*cases_)[1].volume.voxels);
  const auto labels = labels_from_regions(inf.regions);
  std::mt19937_64 rng(3);
  for (int probe = 0; probe < 50; ++probe) {
    const int axis = static_cast<int>(rng() % 3);
    const auto index = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(shape[axis]));
    const auto got = decode_slice(service_->slice(id, axis, index, "prediction"));
    std::vector<std::uint8_t> want;
    for (std::int64_t x = 0; x < shape[0]; ++x)
      for (std::int64_t y = 0; y < shape[1]; ++y)
        for (std::int64_t z = 0; z < shape[2]; ++z)
          if ((axis == 0 ? x : axis == 1 ? y : z) == index)
            want.push_back(labels[static_cast<std::size_t>((x * shape[1] + y) * shape[2] + z)]);
    EXPECT_EQ(got, want) << "axis " << axis << " index " << index;
  }
}

TEST_F(ServiceTest, ModelIsNeverMutated) {
  auto model = test_model();
  const auto before = capture_state(model);
  InferenceService svc(model, *cases_);
  const auto p = svc.predict({{"case_id", (*cases_)[0].id()}});
  svc.resegment(p.body["session_id"], {{"grade", "HGG"}});
  svc.resegment(p.body["session_id"], {{"grade", "LGG"}});
  const auto after = capture_state(model);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_TRUE(torch::equal(before[i].second, after[i].second));
}

TEST_F(ServiceTest, HttpEndpointsAndConcurrentSessions) {
  httplib::Server server;
  service_->bind(server);
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread worker([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client client("127.0.0.1", port);

  auto health = client.Get("/api/health");
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 200);
  EXPECT_EQ(json::parse(health->body)["model_loaded"], true);

  EXPECT_EQ(client.Post("/api/predict", R"({"case_id":"nope"})", "application/json")->status, 404);
  EXPECT_EQ(client.Post("/api/predict", "not json", "application/json")->status, 422);
  EXPECT_EQ(client.Post("/api/sessions/none/resegment", R"({"grade":"HGG"})", "application/json")->status, 404);

  // Two sessions edited in interleaved order from two threads stay isolated.
  std::array<std::string, 2> ids;
  std::array<std::string, 2> expected;
  for (int i = 0; i < 2; ++i) {
    auto r = client.Post("/api/predict", json{{"case_id", (*cases_)[static_cast<std::size_t>(i)].id()}}.dump(),
                         "application/json");
    ASSERT_EQ(r->status, 200);
    ids[static_cast<std::size_t>(i)] = json::parse(r->body)["session_id"];
  }
  std::array<std::thread, 2> editors;
  for (int i = 0; i < 2; ++i)
    editors[static_cast<std::size_t>(i)] = std::thread([&, i] {
      httplib::Client c("127.0.0.1", port);
      const std::string grade = i == 0 ? "HGG" : "LGG";
      for (int k = 0; k < 3; ++k)
        c.Post("/api/sessions/" + ids[static_cast<std::size_t>(i)] + "/resegment", json{{"grade", grade}}.dump(),
               "application/json");
    });
  for (auto& t : editors) t.join();
  for (int i = 0; i < 2; ++i) {
    const auto& id = ids[static_cast<std::size_t>(i)];
    auto r = client.Get("/api/sessions/" + id + "/slices/2/16?layer=edited-prediction");
    ASSERT_EQ(r->status, 200);
    // Same answer as a single-threaded edit of a fresh session.
    const auto fresh = service_->predict({{"case_id", (*cases_)[static_cast<std::size_t>(i)].id()}});
    const auto fid = fresh.body["session_id"].get<std::string>();
    service_->resegment(fid, {{"grade", i == 0 ? "HGG" : "LGG"}});
    EXPECT_EQ(json::parse(r->body)["data"], service_->slice(fid, 2, 16, "edited-prediction").body["data"]);
  }

  EXPECT_EQ(client.Get("/api/sessions/" + ids[0] + "/slices/0/999?layer=prediction")->status, 416);
  EXPECT_EQ(client.Get("/api/sessions/" + ids[0] + "/slices/0/0?layer=diff")->status, 200);
  server.stop();
  worker.join();
}
