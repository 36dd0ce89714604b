#pragma once

#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace keycomp {

struct HttpRequest {
  std::string base_url;  // scheme://host[:port][/prefix]
  std::string path;      // appended to the base URL prefix, e.g. "/chat/completions"
  std::vector<std::pair<std::string, std::string>> headers;
  std::string body;
  double timeout_seconds = 60.0;
};

struct HttpResponse {
  int status = 0;
  std::string body;
  std::map<std::string, std::string> headers;
};

/// One POST per call. Implementations throw TransportError when no HTTP
/// response was obtained at all (DNS, connect, timeout).
class Transport {
 public:
  virtual ~Transport() = default;
  virtual HttpResponse post(const HttpRequest& request) = 0;
};

class HttpTransport final : public Transport {
 public:
  HttpResponse post(const HttpRequest& request) override;
};

/// Counts every post() before forwarding it.
class CountingTransport final : public Transport {
 public:
  explicit CountingTransport(std::shared_ptr<Transport> inner) : inner_(std::move(inner)) {}
  HttpResponse post(const HttpRequest& request) override;
  std::size_t calls() const { return calls_.load(); }
  void reset() { calls_ = 0; }

 private:
  std::shared_ptr<Transport> inner_;
  std::atomic<std::size_t> calls_{0};
};

/// The parts of a chat-completions request the mock backends look at.
struct ChatRequestView {
  std::string model;
  std::string prompt;                // text parts of the last user message, joined by '\n'
  std::vector<std::string> images;   // decoded bytes of each data-URL image part
};

/// Throws ParseError for a body that is not a chat-completions request.
ChatRequestView parse_chat_request(const std::string& body);

/// Standard chat-completions response envelope around `content`.
std::string make_chat_response(const std::string& model, const std::string& content);

/// In-process chat-completions server. Subclasses only decide the answer text.
class MockChatTransport : public Transport {
 public:
  HttpResponse post(const HttpRequest& request) override;

 protected:
  virtual std::string answer(const ChatRequestView& request) = 0;
};

/// VLM stand-in: answers with the text after a "GT:" marker, looked up first in
/// the prompt and then in the bytes of the first attached image (up to the end
/// of that line). Without a marker it echoes the prompt.
class EchoVlmTransport final : public MockChatTransport {
 protected:
  std::string answer(const ChatRequestView& request) override;
};

/// LLM stand-in for selection prompts. Candidate lines look like
/// "Caption A: <text>". The answer names the single candidate whose text occurs
/// verbatim (case-insensitive) in the rest of the prompt, and says "Neither"
/// when zero or both do.
class RuleLlmTransport final : public MockChatTransport {
 protected:
  std::string answer(const ChatRequestView& request) override;
};

class ConstantLlmTransport final : public MockChatTransport {
 public:
  explicit ConstantLlmTransport(std::string text) : text_(std::move(text)) {}

 protected:
  std::string answer(const ChatRequestView&) override { return text_; }

 private:
  std::string text_;
};

/// Answers from a JSON-lines script: {"contains": "...", "response": "..."}
/// rules tried in file order, plus an optional {"default": "..."} line. A
/// prompt matching nothing gets HTTP 400.
class ScriptedTransport final : public Transport {
 public:
  explicit ScriptedTransport(const std::filesystem::path& script);
  HttpResponse post(const HttpRequest& request) override;

 private:
  std::vector<std::pair<std::string, std::string>> rules_;
  std::optional<std::string> default_;
};

}  // namespace keycomp
