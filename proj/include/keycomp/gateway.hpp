#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "keycomp/clock.hpp"
#include "keycomp/dataset.hpp"
#include "keycomp/prompting.hpp"
#include "keycomp/transport.hpp"

namespace keycomp {

enum class Role { VLM, LLM };
std::string_view to_string(Role role);
Role parse_role(std::string_view s);

/// How an endpoint is reached. Mock types answer in-process through the same
/// chat-completions wire format as a real server.
enum class EndpointType { Http, MockEcho, MockRule, MockConstant, MockScripted };
std::string_view to_string(EndpointType type);
EndpointType parse_endpoint_type(std::string_view s);

struct EndpointConfig {
  Role role = Role::LLM;
  EndpointType type = EndpointType::Http;
  std::string base_url;
  std::string model_name;
  std::string auth_env;  // environment variable holding the API key; default KEYCOMP_API_KEY_<ROLE>
  double timeout_seconds = 120.0;
  int max_retries = 3;
  std::string constant_response;        // MockConstant
  std::filesystem::path script_path;    // MockScripted

  static EndpointConfig for_role(Role r) {
    EndpointConfig e;
    e.role = r;
    return e;
  }

  /// Throws ConfigError: timeout must be positive, max_retries non-negative.
  void validate() const;
  std::string auth_variable() const;
  /// Identity used to share one transport per endpoint.
  std::string identity() const;
};

struct SamplingParams {
  double temperature = 1.0;
  int num_beams = 1;       // VLM only
  int max_tokens = 512;
  int sample_index = 0;    // distinguishes repeated samples of one prompt

  void validate() const;
  bool operator==(const SamplingParams&) const = default;
};

struct Usage {
  long prompt_tokens = 0;
  long completion_tokens = 0;
  long total_tokens = 0;

  bool operator==(const Usage&) const = default;
};

/// One request/response exchange, addressed by a digest of its inputs.
struct ModelTranscript {
  std::string key;
  Role role = Role::LLM;
  std::string model;
  std::string request_prompt;
  std::optional<std::string> image_digest;  // comma-joined when several images were attached
  SamplingParams params;
  std::string response_text;
  Usage usage;
  std::string recorded_at;

  bool operator==(const ModelTranscript&) const = default;
};

nlohmann::json to_json(const ModelTranscript& t);
ModelTranscript transcript_from_json(const nlohmann::json& j);

/// SHA-256 over a canonical JSON encoding of (role, model, prompt, image
/// digest or null, sampling parameters). Timestamps never enter the key.
std::string transcript_key(Role role, std::string_view model, std::string_view prompt,
                           const std::optional<std::string>& image_digest, const SamplingParams& params);

/// Exponential backoff without jitter, so delays never decrease.
struct RetryPolicy {
  int max_retries = 3;
  std::chrono::milliseconds initial_backoff{500};
  double multiplier = 2.0;
  std::chrono::milliseconds max_backoff{30'000};

  /// Delay before retry number `retry` (0-based).
  std::chrono::milliseconds delay(int retry) const;
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

struct ChatReply {
  std::string text;
  Usage usage;
};

/// An image to attach: raw bytes plus MIME type.
struct ImagePayload {
  std::string bytes;
  std::string mime_type;
};

std::string mime_type_for(const std::filesystem::path& path);

/// Chat-completions request body. Images become base64 data-URL parts of the
/// user message; num_beams is only sent when greater than 1.
std::string build_chat_request(Role role, const std::string& model, std::string_view prompt,
                               std::span<const ImagePayload> images, const SamplingParams& params);

/// Extracts choices[0].message.content and usage. Throws ModelError.
ChatReply parse_chat_response(const std::string& body);

/// Sends chat requests with retries. At most max_retries + 1 attempts; retries
/// on transport failures and on HTTP 408, 409, 429 and 5xx.
class ChatClient {
 public:
  ChatClient(EndpointConfig endpoint, std::shared_ptr<Transport> transport, Sleeper sleeper = {});

  ChatReply send(std::string_view prompt, std::span<const ImagePayload> images, const SamplingParams& params) const;
  const EndpointConfig& endpoint() const { return endpoint_; }
  RetryPolicy& retry_policy() { return retry_; }

 private:
  EndpointConfig endpoint_;
  std::shared_ptr<Transport> transport_;
  Sleeper sleeper_;
  RetryPolicy retry_;
};

/// Transport for an endpoint's type (HTTP or one of the mocks).
std::shared_ptr<Transport> make_transport(const EndpointConfig& endpoint);

/// Append-only JSON-lines journal with an in-memory key -> offset index built
/// on open. Appends take an exclusive flock on the journal, so several
/// processes can share one file. A later entry for the same key supersedes
/// earlier ones.
class TranscriptStore {
 public:
  explicit TranscriptStore(std::filesystem::path journal);

  std::optional<ModelTranscript> find(const std::string& key) const;
  void append(const ModelTranscript& transcript);
  std::size_t size() const;
  std::optional<std::uint64_t> offset_of(const std::string& key) const;
  const std::filesystem::path& journal_path() const { return journal_; }

 private:
  std::filesystem::path journal_;
  mutable std::shared_mutex mutex_;
  std::unordered_map<std::string, ModelTranscript> entries_;
  std::unordered_map<std::string, std::uint64_t> offsets_;
};

/// Live: always call the endpoint, journal the result.
/// Record: serve journaled transcripts, call and journal on a miss.
/// Replay: serve journaled transcripts, call on a miss without journaling.
/// StrictReplay: serve journaled transcripts, ReplayMissError on a miss.
enum class ReplayMode { Live, Record, Replay, StrictReplay };
std::string_view to_string(ReplayMode mode);
ReplayMode parse_replay_mode(std::string_view s);

struct GatewayOptions {
  ReplayMode mode = ReplayMode::Record;
  std::shared_ptr<TranscriptStore> store;  // may be null: nothing is read or journaled
  Clock clock = Clock::system();
  Sleeper sleeper;                         // empty: std::this_thread::sleep_for
};

/// Model access for the pipeline. Thread-safe.
class Gateway {
 public:
  explicit Gateway(GatewayOptions options);

  /// Use `transport` for every call to `endpoint` (tests inject counting stubs here).
  void attach(const EndpointConfig& endpoint, std::shared_ptr<Transport> transport);

  /// Describes one image. Requires endpoint.role == VLM.
  ModelTranscript describe_image(const EndpointConfig& endpoint, const ImageRef& image, const PromptInstance& prompt,
                                 const SamplingParams& params);

  /// k transcripts with sample_index 0..k-1.
  std::vector<ModelTranscript> sample_descriptions(const EndpointConfig& endpoint, const ImageRef& image,
                                                   const PromptInstance& prompt, int k, const SamplingParams& params);

  /// Text-only completion. Requires endpoint.role == LLM.
  ModelTranscript complete(const EndpointConfig& endpoint, const PromptInstance& prompt, const SamplingParams& params);

  /// VLM call with any number of images attached in order (direct answering).
  ModelTranscript ask_vlm(const EndpointConfig& endpoint, std::span<const ImageRef> images,
                          const PromptInstance& prompt, const SamplingParams& params);

  ReplayMode mode() const { return options_.mode; }
  const std::shared_ptr<TranscriptStore>& store() const { return options_.store; }

 private:
  ModelTranscript call(const EndpointConfig& endpoint, std::span<const ImageRef> images, const std::string& prompt,
                       const SamplingParams& params);
  const ChatClient& client_for(const EndpointConfig& endpoint);

  GatewayOptions options_;
  std::mutex clients_mutex_;
  std::map<std::string, std::unique_ptr<ChatClient>> clients_;
};

}  // namespace keycomp
