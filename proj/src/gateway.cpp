#include "keycomp/gateway.hpp"

#include <fcntl.h>
#include <fmt/format.h>
#include <sys/file.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <thread>

#include "keycomp/digest.hpp"
#include "keycomp/error.hpp"

namespace keycomp {

namespace {

using json = nlohmann::json;

bool is_retryable_status(int status) { return status == 408 || status == 409 || status == 429 || status >= 500; }

bool looks_like_context_overflow(const std::string& body) {
  return body.find("context_length_exceeded") != std::string::npos ||
         body.find("maximum context length") != std::string::npos;
}

std::string upper(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    if (c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
  }
  return out;
}

class FileLock {
 public:
  explicit FileLock(int fd) : fd_(fd) {
    if (::flock(fd_, LOCK_EX) != 0) throw Error("flock failed");
  }
  ~FileLock() { ::flock(fd_, LOCK_UN); }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  int fd_;
};

}  // namespace

std::string_view to_string(Role role) { return role == Role::VLM ? "VLM" : "LLM"; }

Role parse_role(std::string_view s) {
  const std::string u = upper(s);
  if (u == "VLM") return Role::VLM;
  if (u == "LLM") return Role::LLM;
  throw ConfigError(fmt::format("unknown role '{}' (expected VLM or LLM)", s));
}

std::string_view to_string(EndpointType type) {
  switch (type) {
    case EndpointType::Http: return "http";
    case EndpointType::MockEcho: return "mock-echo";
    case EndpointType::MockRule: return "mock-rule";
    case EndpointType::MockConstant: return "mock-constant";
    case EndpointType::MockScripted: return "mock-scripted";
  }
  return "http";
}

EndpointType parse_endpoint_type(std::string_view s) {
  for (auto t : {EndpointType::Http, EndpointType::MockEcho, EndpointType::MockRule, EndpointType::MockConstant,
                 EndpointType::MockScripted}) {
    if (s == to_string(t)) return t;
  }
  throw ConfigError(
      fmt::format("unknown endpoint type '{}' (known: http, mock-echo, mock-rule, mock-constant, mock-scripted)", s));
}

void EndpointConfig::validate() const {
  if (!(timeout_seconds > 0)) throw ConfigError(fmt::format("endpoint {}: timeout must be > 0", model_name));
  if (max_retries < 0) throw ConfigError(fmt::format("endpoint {}: max_retries must be >= 0", model_name));
  if (type == EndpointType::Http && base_url.empty()) {
    throw ConfigError(fmt::format("endpoint {}: http endpoints need a base_url", model_name));
  }
  if (type == EndpointType::MockScripted && script_path.empty()) {
    throw ConfigError(fmt::format("endpoint {}: mock-scripted needs a script path", model_name));
  }
}

std::string EndpointConfig::auth_variable() const {
  return auth_env.empty() ? "KEYCOMP_API_KEY_" + std::string(to_string(role)) : auth_env;
}

std::string EndpointConfig::identity() const {
  return fmt::format("{}|{}|{}|{}|{}|{}", to_string(role), to_string(type), base_url, model_name, constant_response,
                     script_path.string());
}

void SamplingParams::validate() const {
  if (!(temperature >= 0) || !std::isfinite(temperature)) throw ConfigError("sampling: temperature must be >= 0");
  if (num_beams < 1) throw ConfigError("sampling: num_beams must be >= 1");
  if (max_tokens < 1) throw ConfigError("sampling: max_tokens must be >= 1");
  if (sample_index < 0) throw ConfigError("sampling: sample_index must be >= 0");
}

json to_json(const ModelTranscript& t) {
  return json{{"key", t.key},
              {"role", to_string(t.role)},
              {"model", t.model},
              {"prompt", t.request_prompt},
              {"image_digest", t.image_digest ? json(*t.image_digest) : json(nullptr)},
              {"params",
               {{"temperature", t.params.temperature},
                {"num_beams", t.params.num_beams},
                {"max_tokens", t.params.max_tokens},
                {"sample_index", t.params.sample_index}}},
              {"response", t.response_text},
              {"usage",
               {{"prompt_tokens", t.usage.prompt_tokens},
                {"completion_tokens", t.usage.completion_tokens},
                {"total_tokens", t.usage.total_tokens}}},
              {"recorded_at", t.recorded_at}};
}

ModelTranscript transcript_from_json(const json& j) {
  ModelTranscript t;
  t.key = j.at("key").get<std::string>();
  t.role = parse_role(j.at("role").get<std::string>());
  t.model = j.at("model").get<std::string>();
  t.request_prompt = j.at("prompt").get<std::string>();
  if (!j.at("image_digest").is_null()) t.image_digest = j["image_digest"].get<std::string>();
  const auto& p = j.at("params");
  t.params.temperature = p.at("temperature").get<double>();
  t.params.num_beams = p.at("num_beams").get<int>();
  t.params.max_tokens = p.at("max_tokens").get<int>();
  t.params.sample_index = p.at("sample_index").get<int>();
  t.response_text = j.at("response").get<std::string>();
  if (j.contains("usage")) {
    const auto& u = j["usage"];
    t.usage.prompt_tokens = u.value("prompt_tokens", 0L);
    t.usage.completion_tokens = u.value("completion_tokens", 0L);
    t.usage.total_tokens = u.value("total_tokens", 0L);
  }
  t.recorded_at = j.value("recorded_at", "");
  return t;
}

std::string transcript_key(Role role, std::string_view model, std::string_view prompt,
                           const std::optional<std::string>& image_digest, const SamplingParams& params) {
  const json canonical{{"role", to_string(role)},
                       {"model", model},
                       {"prompt", prompt},
                       {"image_digest", image_digest ? json(*image_digest) : json(nullptr)},
                       {"temperature", params.temperature},
                       {"num_beams", params.num_beams},
                       {"max_tokens", params.max_tokens},
                       {"sample_index", params.sample_index}};
  // nlohmann::json objects keep keys sorted, so dump() is canonical.
  return sha256_hex(canonical.dump());
}

std::chrono::milliseconds RetryPolicy::delay(int retry) const {
  double ms = static_cast<double>(initial_backoff.count()) * std::pow(multiplier, std::max(retry, 0));
  ms = std::min(ms, static_cast<double>(max_backoff.count()));
  return std::chrono::milliseconds(static_cast<long long>(ms));
}

std::string mime_type_for(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (ext == ".png") return "image/png";
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".gif") return "image/gif";
  if (ext == ".webp") return "image/webp";
  return "application/octet-stream";
}

std::string build_chat_request(Role role, const std::string& model, std::string_view prompt,
                               std::span<const ImagePayload> images, const SamplingParams& params) {
  json message{{"role", "user"}};
  if (images.empty()) {
    message["content"] = prompt;
  } else {
    json parts = json::array();
    parts.push_back({{"type", "text"}, {"text", prompt}});
    for (const auto& img : images) {
      parts.push_back({{"type", "image_url"},
                       {"image_url", {{"url", "data:" + img.mime_type + ";base64," + base64_encode(img.bytes)}}}});
    }
    message["content"] = std::move(parts);
  }
  json req{{"model", model},
           {"messages", json::array({message})},
           {"temperature", params.temperature},
           {"max_tokens", params.max_tokens}};
  if (role == Role::VLM && params.num_beams > 1) req["num_beams"] = params.num_beams;
  return req.dump();
}

ChatReply parse_chat_response(const std::string& body) {
  json resp;
  try {
    resp = json::parse(body);
  } catch (const json::parse_error& e) {
    throw ModelError(std::string("chat response is not JSON: ") + e.what());
  }
  const auto choices = resp.find("choices");
  if (choices == resp.end() || !choices->is_array() || choices->empty()) {
    throw ModelError("chat response has no choices");
  }
  const json& message = (*choices)[0].value("message", json::object());
  ChatReply reply;
  const auto content = message.find("content");
  if (content != message.end() && content->is_string()) reply.text = content->get<std::string>();
  if (reply.text.find_first_not_of(" \t\r\n") == std::string::npos) throw ModelError("model returned an empty response");
  if (auto u = resp.find("usage"); u != resp.end() && u->is_object()) {
    reply.usage.prompt_tokens = u->value("prompt_tokens", 0L);
    reply.usage.completion_tokens = u->value("completion_tokens", 0L);
    reply.usage.total_tokens = u->value("total_tokens", 0L);
  }
  return reply;
}

ChatClient::ChatClient(EndpointConfig endpoint, std::shared_ptr<Transport> transport, Sleeper sleeper)
    : endpoint_(std::move(endpoint)), transport_(std::move(transport)), sleeper_(std::move(sleeper)) {
  endpoint_.validate();
  retry_.max_retries = endpoint_.max_retries;
  if (!sleeper_) sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

ChatReply ChatClient::send(std::string_view prompt, std::span<const ImagePayload> images,
                           const SamplingParams& params) const {
  HttpRequest request;
  request.base_url = endpoint_.base_url;
  request.path = "/chat/completions";
  request.timeout_seconds = endpoint_.timeout_seconds;
  request.headers.emplace_back("Content-Type", "application/json");
  if (const char* key = std::getenv(endpoint_.auth_variable().c_str()); key != nullptr && *key != '\0') {
    request.headers.emplace_back("Authorization", std::string("Bearer ") + key);
  }
  request.body = build_chat_request(endpoint_.role, endpoint_.model_name, prompt, images, params);

  std::string last_error;
  int last_status = 0;
  for (int attempt = 0; attempt <= retry_.max_retries; ++attempt) {
    if (attempt > 0) sleeper_(retry_.delay(attempt - 1));
    HttpResponse response;
    try {
      response = transport_->post(request);
    } catch (const TransportError& e) {
      last_error = e.what();
      last_status = 0;
      continue;
    }
    if (response.status >= 200 && response.status < 300) return parse_chat_response(response.body);
    if (response.status == 400 && looks_like_context_overflow(response.body)) {
      throw ModelError(fmt::format("{} rejected a prompt of {} characters: context length exceeded",
                                   endpoint_.model_name, prompt.size()));
    }
    last_status = response.status;
    last_error = fmt::format("HTTP {}: {}", response.status, response.body.substr(0, 300));
    if (!is_retryable_status(response.status)) {
      if (response.status >= 400 && response.status < 500) {
        throw ModelError(fmt::format("{} refused the request ({})", endpoint_.model_name, last_error));
      }
      throw TransportError(fmt::format("{}: {}", endpoint_.model_name, last_error), response.status);
    }
  }
  throw TransportError(fmt::format("{}: giving up after {} attempts: {}", endpoint_.model_name,
                                   retry_.max_retries + 1, last_error),
                       last_status);
}

std::shared_ptr<Transport> make_transport(const EndpointConfig& endpoint) {
  switch (endpoint.type) {
    case EndpointType::Http: return std::make_shared<HttpTransport>();
    case EndpointType::MockEcho: return std::make_shared<EchoVlmTransport>();
    case EndpointType::MockRule: return std::make_shared<RuleLlmTransport>();
    case EndpointType::MockConstant: return std::make_shared<ConstantLlmTransport>(endpoint.constant_response);
    case EndpointType::MockScripted: return std::make_shared<ScriptedTransport>(endpoint.script_path);
  }
  throw ConfigError("unknown endpoint type");
}

TranscriptStore::TranscriptStore(std::filesystem::path journal) : journal_(std::move(journal)) {
  if (journal_.has_parent_path()) std::filesystem::create_directories(journal_.parent_path());
  std::ifstream in(journal_, std::ios::binary);
  if (!in) return;  // a fresh journal
  std::string line;
  std::uint64_t offset = 0;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const bool terminated = !in.eof();
    const std::uint64_t start = offset;
    offset += line.size() + (terminated ? 1 : 0);
    if (line.empty()) continue;
    ModelTranscript t;
    try {
      t = transcript_from_json(json::parse(line));
    } catch (const std::exception& e) {
      // A torn final line is what an interrupted append leaves behind.
      if (!terminated) break;
      throw ParseError(fmt::format("{}:{}: {}", journal_.string(), line_no, e.what()), line_no);
    }
    offsets_[t.key] = start;
    entries_[t.key] = std::move(t);
  }
}

std::optional<ModelTranscript> TranscriptStore::find(const std::string& key) const {
  std::shared_lock lock(mutex_);
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::uint64_t> TranscriptStore::offset_of(const std::string& key) const {
  std::shared_lock lock(mutex_);
  auto it = offsets_.find(key);
  if (it == offsets_.end()) return std::nullopt;
  return it->second;
}

std::size_t TranscriptStore::size() const {
  std::shared_lock lock(mutex_);
  return entries_.size();
}

void TranscriptStore::append(const ModelTranscript& transcript) {
  const std::string line = to_json(transcript).dump() + "\n";
  std::unique_lock lock(mutex_);
  const int fd = ::open(journal_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) throw LoadError("cannot open transcript journal " + journal_.string());
  std::uint64_t start = 0;
  {
    FileLock file_lock(fd);
    struct stat st {};
    if (::fstat(fd, &st) == 0) start = static_cast<std::uint64_t>(st.st_size);
    std::size_t written = 0;
    while (written < line.size()) {
      const ssize_t n = ::write(fd, line.data() + written, line.size() - written);
      if (n < 0) {
        ::close(fd);
        throw LoadError("write failure on transcript journal " + journal_.string());
      }
      written += static_cast<std::size_t>(n);
    }
  }
  ::close(fd);
  offsets_[transcript.key] = start;
  entries_[transcript.key] = transcript;
}

std::string_view to_string(ReplayMode mode) {
  switch (mode) {
    case ReplayMode::Live: return "live";
    case ReplayMode::Record: return "record";
    case ReplayMode::Replay: return "replay";
    case ReplayMode::StrictReplay: return "strict-replay";
  }
  return "record";
}

ReplayMode parse_replay_mode(std::string_view s) {
  for (auto m : {ReplayMode::Live, ReplayMode::Record, ReplayMode::Replay, ReplayMode::StrictReplay}) {
    if (s == to_string(m)) return m;
  }
  throw ConfigError(fmt::format("unknown mode '{}' (known: live, record, replay, strict-replay)", s));
}

Gateway::Gateway(GatewayOptions options) : options_(std::move(options)) {
  if (!options_.sleeper) options_.sleeper = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

void Gateway::attach(const EndpointConfig& endpoint, std::shared_ptr<Transport> transport) {
  std::lock_guard lock(clients_mutex_);
  clients_[endpoint.identity()] = std::make_unique<ChatClient>(endpoint, std::move(transport), options_.sleeper);
}

const ChatClient& Gateway::client_for(const EndpointConfig& endpoint) {
  std::lock_guard lock(clients_mutex_);
  auto& slot = clients_[endpoint.identity()];
  if (!slot) slot = std::make_unique<ChatClient>(endpoint, make_transport(endpoint), options_.sleeper);
  return *slot;
}

ModelTranscript Gateway::call(const EndpointConfig& endpoint, std::span<const ImageRef> images,
                              const std::string& prompt, const SamplingParams& params) {
  params.validate();
  std::optional<std::string> digest;
  for (const auto& img : images) {
    std::string d = img.digest.empty() ? sha256_file(img.path) : img.digest;
    digest = digest ? *digest + "," + d : d;
  }
  const std::string key = transcript_key(endpoint.role, endpoint.model_name, prompt, digest, params);

  const auto& store = options_.store;
  if (store && options_.mode != ReplayMode::Live) {
    if (auto hit = store->find(key)) return *hit;
  }
  if (options_.mode == ReplayMode::StrictReplay) throw ReplayMissError(key);

  std::vector<ImagePayload> payloads;
  payloads.reserve(images.size());
  for (const auto& img : images) payloads.push_back({read_file(img.path), mime_type_for(img.path)});

  const ChatReply reply = client_for(endpoint).send(prompt, payloads, params);
  ModelTranscript t;
  t.key = key;
  t.role = endpoint.role;
  t.model = endpoint.model_name;
  t.request_prompt = prompt;
  t.image_digest = digest;
  t.params = params;
  t.response_text = reply.text;
  t.usage = reply.usage;
  t.recorded_at = options_.clock.now();
  if (store && options_.mode != ReplayMode::Replay) store->append(t);
  return t;
}

ModelTranscript Gateway::describe_image(const EndpointConfig& endpoint, const ImageRef& image,
                                        const PromptInstance& prompt, const SamplingParams& params) {
  if (endpoint.role != Role::VLM) throw ConfigError("describe_image needs a VLM endpoint, got " + endpoint.model_name);
  return call(endpoint, std::span<const ImageRef>(&image, 1), prompt.rendered, params);
}

std::vector<ModelTranscript> Gateway::sample_descriptions(const EndpointConfig& endpoint, const ImageRef& image,
                                                          const PromptInstance& prompt, int k,
                                                          const SamplingParams& params) {
  if (k < 1) throw ConfigError("sample_descriptions: k must be >= 1");
  std::vector<ModelTranscript> out;
  out.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    SamplingParams p = params;
    p.sample_index = i;
    out.push_back(describe_image(endpoint, image, prompt, p));
  }
  return out;
}

ModelTranscript Gateway::complete(const EndpointConfig& endpoint, const PromptInstance& prompt,
                                  const SamplingParams& params) {
  if (endpoint.role != Role::LLM) throw ConfigError("complete needs an LLM endpoint, got " + endpoint.model_name);
  return call(endpoint, {}, prompt.rendered, params);
}

ModelTranscript Gateway::ask_vlm(const EndpointConfig& endpoint, std::span<const ImageRef> images,
                                 const PromptInstance& prompt, const SamplingParams& params) {
  if (endpoint.role != Role::VLM) throw ConfigError("ask_vlm needs a VLM endpoint, got " + endpoint.model_name);
  return call(endpoint, images, prompt.rendered, params);
}

}  // namespace keycomp
