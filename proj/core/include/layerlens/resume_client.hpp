#pragma once

#include <memory>
#include <string>
#include <vector>

#include "layerlens/error.hpp"
#include "layerlens/functional_eval.hpp"

namespace layerlens::eval {

// Raised when the service does not know the requested sequence (HTTP 404).
class UnknownSequenceError : public Error {
 public:
  explicit UnknownSequenceError(const std::string& what)
      : Error(ErrorKind::kProtocol, what) {}
};

struct ClientOptions {
  double timeout_seconds = 60.0;
  std::size_t max_in_flight = 4;
  std::size_t retries = 2;  // extra attempts after a retryable failure
};

// JSON codecs of the resume wire protocol.
std::string encode_request(const ResumeRequest& request);
ResumeRequest decode_request(const std::string& body, std::uint32_t hidden_dim);
std::string encode_response(const ResumeResponse& response);
ResumeResponse decode_response(const std::string& body);
std::string encode_info(const ModelInfo& info);
ModelInfo decode_info(const std::string& body);

// HTTP client of the resume service (POST /v1/kl, GET /v1/info).
class ResumeClient {
 public:
  explicit ResumeClient(std::string endpoint, ClientOptions options = {});
  ~ResumeClient();
  ResumeClient(const ResumeClient&) = delete;
  ResumeClient& operator=(const ResumeClient&) = delete;

  ModelInfo info();
  ResumeResponse call(const ResumeRequest& request);

  // Issues the requests with at most max_in_flight concurrent calls;
  // responses are returned in request order.
  std::vector<ResumeResponse> call_many(const std::vector<ResumeRequest>& requests);

  const std::string& endpoint() const { return endpoint_; }

 private:
  std::string endpoint_;
  ClientOptions options_;
};

ResumeResponse resume_client_call(const std::string& endpoint,
                                  const ResumeRequest& request);

// Backend for real models served by the extraction sidecar. Original states
// come from `dataset`, which must hold every position of each sequence.
class RemoteBackend : public ResumeBackend {
 public:
  RemoteBackend(std::shared_ptr<ResumeClient> client,
                const store::LayerDataset& dataset, std::uint32_t seq_len);

  ModelInfo info() override;
  SequenceStates original_states(std::uint32_t seq_id, std::uint32_t layer) override;
  ResumeResponse resume(const ResumeRequest& request) override;

 private:
  std::shared_ptr<ResumeClient> client_;
  const store::LayerDataset& dataset_;
  std::uint32_t seq_len_;
  std::map<std::uint32_t, std::vector<std::size_t>> rows_by_seq_;
};

}  // namespace layerlens::eval
