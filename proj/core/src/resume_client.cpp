#include "layerlens/resume_client.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <semaphore>
#include <thread>

#include <boost/beast/core/detail/base64.hpp>
#include <fmt/format.h>
#include <httplib.h>
#include <json.hpp>

#include "layerlens/parallel.hpp"

namespace layerlens::eval {
namespace {

using nlohmann::json;
namespace b64 = boost::beast::detail::base64;

std::string base64_encode(const std::string& raw) {
  std::string out(b64::encoded_size(raw.size()), '\0');
  out.resize(b64::encode(out.data(), raw.data(), raw.size()));
  return out;
}

std::string base64_decode(const std::string& text) {
  std::string out(b64::decoded_size(text.size()), '\0');
  const auto [written, consumed] = b64::decode(out.data(), text.data(), text.size());
  // The decoder stops at padding; accept at most two trailing '='.
  const std::size_t pad = text.size() - consumed;
  const bool padded = pad <= 2 && text.find_first_not_of('=', consumed) == std::string::npos &&
                      text.size() % 4 == 0;
  if (consumed != text.size() && !padded) {
    throw Error(ErrorKind::kProtocol, "states_b64 is not valid base64");
  }
  out.resize(written);
  return out;
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::vector<double> numbers(const json& arr, double null_value) {
  std::vector<double> out;
  for (const auto& v : arr) out.push_back(v.is_null() ? null_value : v.get<double>());
  return out;
}

std::string error_message(const std::string& body) {
  try {
    const json j = json::parse(body);
    if (j.contains("error")) return j.at("error").get<std::string>();
  } catch (const json::exception&) {
  }
  return body;
}

// Bounds concurrent in-flight requests across all threads using a client.
std::counting_semaphore<1024>& in_flight_gate(std::size_t limit) {
  static std::mutex mutex;
  static std::map<std::size_t, std::unique_ptr<std::counting_semaphore<1024>>> gates;
  std::lock_guard lock(mutex);
  auto& gate = gates[limit];
  if (!gate) {
    gate = std::make_unique<std::counting_semaphore<1024>>(
        static_cast<std::ptrdiff_t>(std::clamp<std::size_t>(limit, 1, 1024)));
  }
  return *gate;
}

}  // namespace

std::string encode_request(const ResumeRequest& request) {
  std::string raw;
  raw.reserve(static_cast<std::size_t>(request.states.size()) * 4);
  for (Eigen::Index i = 0; i < request.states.rows(); ++i) {
    for (Eigen::Index j = 0; j < request.states.cols(); ++j) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(request.states(i, j)));
      for (int b = 0; b < 4; ++b) raw.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
    }
  }
  json j;
  j["seq_id"] = request.seq_id;
  j["layer"] = request.layer;
  j["states_b64"] = base64_encode(raw);
  j["positions"] = request.positions;
  return j.dump();
}

ResumeRequest decode_request(const std::string& body, std::uint32_t hidden_dim) {
  ResumeRequest req;
  std::string raw;
  try {
    const json j = json::parse(body);
    req.seq_id = j.at("seq_id").get<std::uint32_t>();
    req.layer = j.at("layer").get<std::uint32_t>();
    req.positions = j.at("positions").get<std::vector<std::uint32_t>>();
    raw = base64_decode(j.at("states_b64").get<std::string>());
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kProtocol, std::string("malformed request: ") + e.what());
  }
  const std::size_t row_bytes = 4 * static_cast<std::size_t>(hidden_dim);
  if (hidden_dim == 0 || raw.empty() || raw.size() % row_bytes != 0) {
    throw Error(ErrorKind::kProtocol,
                fmt::format("malformed state length: {} bytes for hidden_dim {}",
                            raw.size(), hidden_dim));
  }
  const auto rows = static_cast<Eigen::Index>(raw.size() / row_bytes);
  req.states.resize(rows, hidden_dim);
  std::size_t off = 0;
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index c = 0; c < static_cast<Eigen::Index>(hidden_dim); ++c) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) {
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[off++])) << (8 * b);
      }
      req.states(i, c) = std::bit_cast<float>(bits);
    }
  }
  return req;
}

std::string encode_response(const ResumeResponse& response) {
  json j;
  j["kl"] = json::array();
  j["baseline_logprob"] = json::array();
  j["perturbed_logprob"] = json::array();
  for (double v : response.kl) j["kl"].push_back(number_or_null(v));
  for (double v : response.baseline_logprob) j["baseline_logprob"].push_back(number_or_null(v));
  for (double v : response.perturbed_logprob) j["perturbed_logprob"].push_back(number_or_null(v));
  return j.dump();
}

ResumeResponse decode_response(const std::string& body) {
  ResumeResponse resp;
  try {
    const json j = json::parse(body);
    // Non-finite numbers travel as null: an infinite KL, or no realized
    // next token at the last position.
    resp.kl = numbers(j.at("kl"), std::numeric_limits<double>::infinity());
    resp.baseline_logprob =
        numbers(j.at("baseline_logprob"), std::numeric_limits<double>::quiet_NaN());
    resp.perturbed_logprob =
        numbers(j.at("perturbed_logprob"), std::numeric_limits<double>::quiet_NaN());
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kProtocol, std::string("malformed response: ") + e.what());
  }
  return resp;
}

std::string encode_info(const ModelInfo& info) {
  return json{{"model_name", info.model_name},
              {"num_layers", info.num_layers},
              {"hidden_dim", info.hidden_dim},
              {"seq_len", info.seq_len}}
      .dump();
}

ModelInfo decode_info(const std::string& body) {
  try {
    const json j = json::parse(body);
    return {j.at("model_name").get<std::string>(), j.at("num_layers").get<std::uint32_t>(),
            j.at("hidden_dim").get<std::uint32_t>(), j.at("seq_len").get<std::uint32_t>()};
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kProtocol, std::string("malformed info response: ") + e.what());
  }
}

ResumeClient::ResumeClient(std::string endpoint, ClientOptions options)
    : endpoint_(std::move(endpoint)), options_(options) {}

ResumeClient::~ResumeClient() = default;

namespace {

template <typename Send>
std::string http_exchange(const std::string& endpoint, const ClientOptions& opts,
                          const char* what, Send&& send) {
  for (std::size_t attempt = 0;; ++attempt) {
    try {
      httplib::Client cli(endpoint);
      const auto timeout = std::chrono::duration<double>(opts.timeout_seconds);
      cli.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
      cli.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
      cli.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
      httplib::Result res = send(cli);
      if (!res) {
        const auto err = res.error();
        if (err == httplib::Error::Connection) {
          throw Error(ErrorKind::kEnvironment,
                      fmt::format("{}: connection refused by {}", what, endpoint));
        }
        throw RetryableError(fmt::format("{}: {} ({})", what, httplib::to_string(err),
                                         endpoint));
      }
      if (res->status == 404) {
        throw UnknownSequenceError(fmt::format("{}: unknown sequence: {}", what,
                                               error_message(res->body)));
      }
      if (res->status >= 400 && res->status < 500) {
        throw Error(ErrorKind::kProtocol,
                    fmt::format("{}: protocol error {}: {}", what, res->status,
                                error_message(res->body)));
      }
      if (res->status >= 500) {
        throw RetryableError(fmt::format("{}: server error {}: {}", what, res->status,
                                         error_message(res->body)));
      }
      return res->body;
    } catch (const RetryableError&) {
      if (attempt >= opts.retries) throw;
      std::this_thread::sleep_for(std::chrono::milliseconds(50 * (attempt + 1)));
    }
  }
}

}  // namespace

ModelInfo ResumeClient::info() {
  return decode_info(http_exchange(endpoint_, options_, "GET /v1/info",
                                   [](httplib::Client& c) { return c.Get("/v1/info"); }));
}

ResumeResponse ResumeClient::call(const ResumeRequest& request) {
  const std::string body = encode_request(request);
  auto& gate = in_flight_gate(options_.max_in_flight);
  gate.acquire();
  std::string reply;
  try {
    reply = http_exchange(endpoint_, options_, "POST /v1/kl", [&](httplib::Client& c) {
      return c.Post("/v1/kl", body, "application/json");
    });
  } catch (...) {
    gate.release();
    throw;
  }
  gate.release();
  ResumeResponse resp = decode_response(reply);
  const std::size_t n = request.positions.size();
  if (resp.kl.size() != n || resp.baseline_logprob.size() != n ||
      resp.perturbed_logprob.size() != n) {
    throw Error(ErrorKind::kProtocol,
                fmt::format("response has {} KL values for {} positions", resp.kl.size(), n));
  }
  for (double kl : resp.kl) {
    if (std::isnan(kl) || kl < -1e-9) {
      throw Error(ErrorKind::kProtocol, "response contains a negative KL value");
    }
  }
  return resp;
}

std::vector<ResumeResponse> ResumeClient::call_many(
    const std::vector<ResumeRequest>& requests) {
  std::vector<ResumeResponse> out(requests.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  const std::size_t workers =
      std::min<std::size_t>(std::max<std::size_t>(1, options_.max_in_flight), requests.size());
  auto run = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < requests.size();) {
      try {
        out[i] = call(requests[i]);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next.store(requests.size());
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run);
  }
  if (error) std::rethrow_exception(error);
  return out;
}

ResumeResponse resume_client_call(const std::string& endpoint,
                                  const ResumeRequest& request) {
  ResumeClient client(endpoint);
  return client.call(request);
}

RemoteBackend::RemoteBackend(std::shared_ptr<ResumeClient> client,
                             const store::LayerDataset& dataset, std::uint32_t seq_len)
    : client_(std::move(client)), dataset_(dataset), seq_len_(seq_len) {
  for (std::size_t i = 0; i < dataset.pairs.size(); ++i) {
    auto& rows = rows_by_seq_[dataset.pairs[i].seq_id];
    if (rows.empty()) rows.assign(seq_len, std::numeric_limits<std::size_t>::max());
    const std::uint32_t pos = dataset.pairs[i].pos;
    if (pos >= seq_len) {
      throw Error(ErrorKind::kConfig, fmt::format("position {} >= seq_len {}", pos, seq_len));
    }
    rows[pos] = i;
  }
  for (const auto& [seq, rows] : rows_by_seq_) {
    for (std::size_t r : rows) {
      if (r == std::numeric_limits<std::size_t>::max()) {
        throw Error(ErrorKind::kConfig,
                    fmt::format("sequence {} in layer {} {} is incomplete; endpoint "
                                "interventions need every position in the dump",
                                seq, dataset.layer_index, store::split_name(dataset.split)));
      }
    }
  }
}

ModelInfo RemoteBackend::info() { return client_->info(); }

SequenceStates RemoteBackend::original_states(std::uint32_t seq_id, std::uint32_t layer) {
  if (layer != dataset_.layer_index) {
    throw Error(ErrorKind::kConfig,
                fmt::format("backend holds layer {}, asked for {}", dataset_.layer_index, layer));
  }
  auto it = rows_by_seq_.find(seq_id);
  if (it == rows_by_seq_.end()) {
    throw UnknownSequenceError(fmt::format("sequence {} not in dataset", seq_id));
  }
  SequenceStates st;
  st.before.resize(seq_len_, dataset_.dim);
  st.after.resize(seq_len_, dataset_.dim);
  for (std::uint32_t pos = 0; pos < seq_len_; ++pos) {
    const auto& p = dataset_.pairs[it->second[pos]];
    for (std::uint32_t c = 0; c < dataset_.dim; ++c) {
      st.before(pos, c) = p.h_in[c];
      st.after(pos, c) = p.h_out[c];
    }
  }
  return st;
}

ResumeResponse RemoteBackend::resume(const ResumeRequest& request) {
  return client_->call(request);
}

}  // namespace layerlens::eval
