#include <atomic>
#include <chrono>
#include <cmath>
#include <thread>

#include <json.hpp>

#include "layerlens/functional_eval.hpp"
#include "layerlens/resume_client.hpp"
#include "layerlens/toy_model.hpp"
#include "test_util.hpp"

// After Eigen: <resolv.h> defines a _res macro that clashes with it.
#include <httplib.h>

using namespace layerlens;
using namespace layerlens::testing;

namespace {

constexpr std::uint32_t kSeqLen = 10;

// In-process stand-in for the resume service, backed by a toy model.
class FakeService {
 public:
  FakeService() : weights_(toy::init_weights(shape(), 2)) {
    Rng rng(3);
    for (std::uint32_t s = 0; s < 3; ++s) {
      std::vector<std::uint32_t> t(kSeqLen);
      for (auto& x : t) x = static_cast<std::uint32_t>(rng.below(256));
      seqs_[s] = t;
    }
    backend_ = std::make_unique<eval::ToyBackend>(weights_, seqs_);
    server_.Get("/v1/info", [this](const httplib::Request&, httplib::Response& res) {
      ++calls;
      eval::ModelInfo info = backend_->info();
      info.seq_len = kSeqLen;
      res.set_content(eval::encode_info(info), "application/json");
    });
    server_.Post("/v1/kl", [this](const httplib::Request& req, httplib::Response& res) {
      ++calls;
      const int now = ++in_flight;
      int seen = max_in_flight.load();
      while (now > seen && !max_in_flight.compare_exchange_weak(seen, now)) {}
      std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms.load()));
      handle(req, res);
      --in_flight;
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeService() {
    server_.stop();
    thread_.join();
  }

  static toy::ToyShape shape() {
    return {.vocab = 256, .layers = 2, .dim = 6, .heads = 2, .max_positions = kSeqLen,
            .ffn_mult = 2};
  }
  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_); }
  eval::ToyBackend& backend() { return *backend_; }
  const std::map<std::uint32_t, std::vector<std::uint32_t>>& seqs() const { return seqs_; }

  std::atomic<int> calls{0}, in_flight{0}, max_in_flight{0}, delay_ms{0};
  std::atomic<int> fail_status{0};  // nonzero: reply with this status
  std::atomic<bool> truncate{false};

 private:
  void handle(const httplib::Request& req, httplib::Response& res) {
    if (fail_status) {
      res.status = fail_status;
      res.set_content(R"({"error": "injected"})", "application/json");
      return;
    }
    eval::ResumeRequest r;
    try {
      r = eval::decode_request(req.body, 6);
    } catch (const Error& e) {
      res.status = 400;
      res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
      return;
    }
    if (!seqs_.contains(r.seq_id)) {
      res.status = 404;
      res.set_content(R"({"error": "unknown seq_id"})", "application/json");
      return;
    }
    auto out = backend_->resume(r);
    if (truncate) out.kl.pop_back();
    res.set_content(eval::encode_response(out), "application/json");
  }

  toy::ToyModelWeights weights_;
  std::map<std::uint32_t, std::vector<std::uint32_t>> seqs_;
  std::unique_ptr<eval::ToyBackend> backend_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

eval::ClientOptions fast_options() {
  eval::ClientOptions o;
  o.timeout_seconds = 2.0;
  o.retries = 1;
  return o;
}

// Every position of every sequence at transition `layer`.
store::LayerDataset complete_dataset(FakeService& svc, std::uint32_t layer) {
  store::LayerDataset d;
  d.layer_index = layer;
  d.dim = 6;
  d.split = store::Split::kTest;
  for (const auto& [seq, toks] : svc.seqs()) {
    const auto st = svc.backend().original_states(seq, layer);
    for (std::uint32_t pos = 0; pos < kSeqLen; ++pos) {
      store::ReprPair p;
      p.seq_id = seq;
      p.pos = pos;
      p.token_id = toks[pos];
      for (int j = 0; j < 6; ++j) {
        p.h_in.push_back(static_cast<float>(st.before(pos, j)));
        p.h_out.push_back(static_cast<float>(st.after(pos, j)));
      }
      d.pairs.push_back(p);
    }
  }
  return d;
}

}  // namespace

TEST(Wire, RequestRoundTrip) {
  Rng rng(1);
  eval::ResumeRequest r;
  r.seq_id = 7;
  r.layer = 2;
  r.states = gaussian(4, 3, rng);
  r.positions = {0, 3};
  const auto back = eval::decode_request(eval::encode_request(r), 3);
  EXPECT_EQ(back.seq_id, 7u);
  EXPECT_EQ(back.layer, 2u);
  EXPECT_EQ(back.positions, r.positions);
  EXPECT_EQ(back.states, r.states.cast<float>().cast<double>());
  const auto j = nlohmann::json::parse(eval::encode_request(r));
  EXPECT_EQ(j.at("states_b64").get<std::string>().size(), 4u * ((4 * 3 * 4 + 2) / 3));
}

// 1x1 and 1x2 float32 states need one and two '=' of padding.
TEST(Wire, PaddedStatesRoundTrip) {
  Rng rng(3);
  for (int d : {1, 2, 5}) {
    eval::ResumeRequest r;
    r.states = gaussian(1, d, rng);
    r.positions = {0};
    const std::string body = eval::encode_request(r);
    const auto back = eval::decode_request(body, static_cast<std::uint32_t>(d));
    EXPECT_EQ(back.states, r.states.cast<float>().cast<double>()) << d;
  }
  const auto bad = [](const std::string& b64) {
    return nlohmann::json{{"seq_id", 0}, {"layer", 0}, {"positions", {0}}, {"states_b64", b64}}
        .dump();
  };
  EXPECT_EQ(kind_of([&] { eval::decode_request(bad("AAAA=A=="), 1); }), ErrorKind::kProtocol);
  EXPECT_EQ(kind_of([&] { eval::decode_request(bad("AA!A"), 1); }), ErrorKind::kProtocol);
  EXPECT_EQ(kind_of([&] { eval::decode_request(bad("AAAAAA==="), 1); }), ErrorKind::kProtocol);
}

TEST(Wire, MalformedStateLengthIsRejected) {
  Rng rng(2);
  eval::ResumeRequest r;
  r.states = gaussian(4, 3, rng);
  const std::string body = eval::encode_request(r);
  try {
    eval::decode_request(body, 5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kProtocol);
    EXPECT_NE(std::string(e.what()).find("malformed state length"), std::string::npos);
  }
  EXPECT_EQ(kind_of([] { eval::decode_request("{not json", 3); }), ErrorKind::kProtocol);
  EXPECT_EQ(kind_of([] { eval::decode_request(R"({"seq_id": 1})", 3); }), ErrorKind::kProtocol);
}

TEST(Wire, ResponseMapsNullToInfinity) {
  eval::ResumeResponse r;
  r.kl = {0.5, std::numeric_limits<double>::infinity()};
  r.baseline_logprob = {-1.0, std::nan("")};
  r.perturbed_logprob = {-2.0, std::nan("")};
  const std::string body = eval::encode_response(r);
  EXPECT_NE(body.find("null"), std::string::npos);
  const auto back = eval::decode_response(body);
  EXPECT_EQ(back.kl[0], 0.5);
  EXPECT_TRUE(std::isinf(back.kl[1]));
  EXPECT_TRUE(std::isnan(back.baseline_logprob[1]));
  EXPECT_EQ(back.perturbed_logprob[0], -2.0);
  const auto info = eval::decode_info(eval::encode_info({"m", 4, 32, 64}));
  EXPECT_EQ(info.model_name, "m");
  EXPECT_EQ(info.hidden_dim, 32u);
}

TEST(Client, InfoAndNullIntervention) {
  FakeService svc;
  eval::ResumeClient client(svc.endpoint(), fast_options());
  const auto info = client.info();
  EXPECT_EQ(info.hidden_dim, 6u);
  EXPECT_EQ(info.num_layers, 2u);
  const auto st = svc.backend().original_states(1, 0);
  eval::ResumeRequest req;
  req.seq_id = 1;
  req.layer = 1;
  req.states = st.after;
  for (std::uint32_t p = 0; p < kSeqLen; ++p) req.positions.push_back(p);
  const auto resp = client.call(req);
  ASSERT_EQ(resp.kl.size(), kSeqLen);
  // States cross the wire as f32, so the null intervention is only exact to
  // float rounding.
  for (double kl : resp.kl) EXPECT_LE(kl, 1e-6);
  EXPECT_TRUE(std::isnan(resp.baseline_logprob.back()));
}

TEST(Client, RemoteBackendMatchesInProcessBackend) {
  FakeService svc;
  auto client = std::make_shared<eval::ResumeClient>(svc.endpoint(), fast_options());
  const auto ds = complete_dataset(svc, 0);
  eval::RemoteBackend remote(client, ds, kSeqLen);
  const auto shrink = [](std::uint32_t, std::uint32_t, const Eigen::VectorXd& h) {
    return Eigen::VectorXd(0.8 * h);
  };
  const auto a = eval::intervene_layer(remote, ds, shrink, eval::InterventionMode::kAllPositions,
                                       "x", 1);
  const auto b = eval::intervene_layer(svc.backend(), ds, shrink,
                                       eval::InterventionMode::kAllPositions, "x", 1);
  ASSERT_EQ(a.records.size(), b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_NEAR(a.records[i].kl, b.records[i].kl, 1e-4 * (1.0 + b.records[i].kl));
  }
}

TEST(Client, RemoteBackendNeedsCompleteSequences) {
  FakeService svc;
  auto client = std::make_shared<eval::ResumeClient>(svc.endpoint(), fast_options());
  auto ds = complete_dataset(svc, 0);
  ds.pairs.erase(ds.pairs.begin() + 3);
  EXPECT_EQ(kind_of([&] { eval::RemoteBackend(client, ds, kSeqLen); }), ErrorKind::kConfig);
}

TEST(Client, UnknownSequenceIs404) {
  FakeService svc;
  eval::ResumeClient client(svc.endpoint(), fast_options());
  eval::ResumeRequest req;
  req.seq_id = 99;
  req.layer = 1;
  req.states = Eigen::MatrixXd::Zero(kSeqLen, 6);
  req.positions = {0};
  EXPECT_THROW(client.call(req), eval::UnknownSequenceError);
}

TEST(Client, BadRequestIsProtocolError) {
  FakeService svc;
  eval::ResumeClient client(svc.endpoint(), fast_options());
  eval::ResumeRequest req;
  req.seq_id = 0;
  req.layer = 1;
  req.states = Eigen::MatrixXd::Zero(kSeqLen, 5);  // wrong width
  req.positions = {0};
  try {
    client.call(req);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kProtocol);
    EXPECT_NE(std::string(e.what()).find("malformed state length"), std::string::npos);
  }
}

TEST(Client, ServerErrorsAreRetriedThenReported) {
  FakeService svc;
  svc.fail_status = 503;
  eval::ClientOptions o = fast_options();
  o.retries = 2;
  eval::ResumeClient client(svc.endpoint(), o);
  eval::ResumeRequest req;
  req.states = Eigen::MatrixXd::Zero(kSeqLen, 6);
  req.layer = 1;
  req.positions = {0};
  EXPECT_THROW(client.call(req), RetryableError);
  EXPECT_EQ(svc.calls.load(), 3);
}

TEST(Client, WrongResponseLengthIsProtocolError) {
  FakeService svc;
  svc.truncate = true;
  eval::ResumeClient client(svc.endpoint(), fast_options());
  eval::ResumeRequest req;
  req.states = svc.backend().original_states(0, 0).after;
  req.layer = 1;
  req.positions = {0, 1};
  EXPECT_EQ(kind_of([&] { client.call(req); }), ErrorKind::kProtocol);
}

TEST(Client, TimeoutIsRetryable) {
  FakeService svc;
  svc.delay_ms = 1500;
  eval::ClientOptions o;
  o.timeout_seconds = 0.3;
  o.retries = 0;
  eval::ResumeClient client(svc.endpoint(), o);
  eval::ResumeRequest req;
  req.states = svc.backend().original_states(0, 0).after;
  req.layer = 1;
  req.positions = {0};
  EXPECT_THROW(client.call(req), RetryableError);
}

TEST(Client, ConnectionRefusedIsEnvironmentError) {
  int port = 0;
  {
    httplib::Server probe;
    port = probe.bind_to_any_port("127.0.0.1");
  }
  eval::ResumeClient client("http://127.0.0.1:" + std::to_string(port), fast_options());
  try {
    client.info();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kEnvironment);
  }
}

TEST(Client, CallManyRespectsInFlightLimit) {
  FakeService svc;
  svc.delay_ms = 30;
  eval::ClientOptions o = fast_options();
  o.max_in_flight = 2;
  eval::ResumeClient client(svc.endpoint(), o);
  std::vector<eval::ResumeRequest> reqs;
  for (int i = 0; i < 8; ++i) {
    eval::ResumeRequest r;
    r.seq_id = static_cast<std::uint32_t>(i % 3);
    r.layer = 1;
    r.states = svc.backend().original_states(r.seq_id, 0).after;
    r.positions = {static_cast<std::uint32_t>(i % kSeqLen)};
    reqs.push_back(r);
  }
  const auto out = client.call_many(reqs);
  ASSERT_EQ(out.size(), 8u);
  for (const auto& r : out) EXPECT_LE(r.kl.front(), 1e-6);
  EXPECT_LE(svc.max_in_flight.load(), 2);
}
