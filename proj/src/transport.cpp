#include "keycomp/transport.hpp"

#include <fmt/format.h>
#include <httplib.h>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <json.hpp>
#include <regex>
#include <sstream>

#include "keycomp/digest.hpp"
#include "keycomp/error.hpp"

namespace keycomp {

namespace {

using json = nlohmann::json;

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

long count_words(const std::string& s) {
  std::istringstream in(s);
  long n = 0;
  for (std::string w; in >> w;) ++n;
  return n;
}

HttpResponse json_response(int status, const std::string& body) {
  HttpResponse r;
  r.status = status;
  r.body = body;
  r.headers["Content-Type"] = "application/json";
  return r;
}

std::string error_body(const std::string& message) {
  return json{{"error", {{"message", message}, {"type", "invalid_request_error"}}}}.dump();
}

}  // namespace

HttpResponse HttpTransport::post(const HttpRequest& request) {
  const auto scheme_end = request.base_url.find("://");
  if (scheme_end == std::string::npos) throw TransportError("invalid base_url '" + request.base_url + "'");
  const auto path_start = request.base_url.find('/', scheme_end + 3);
  const std::string origin = request.base_url.substr(0, path_start);
  std::string prefix = path_start == std::string::npos ? std::string() : request.base_url.substr(path_start);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();

  httplib::Client client(origin);
  const auto seconds = static_cast<time_t>(request.timeout_seconds);
  const auto usec = static_cast<time_t>((request.timeout_seconds - static_cast<double>(seconds)) * 1e6);
  client.set_connection_timeout(seconds, usec);
  client.set_read_timeout(seconds, usec);
  client.set_write_timeout(seconds, usec);

  httplib::Headers headers;
  std::string content_type = "application/json";
  for (const auto& [k, v] : request.headers) {
    if (lower(k) == "content-type") {
      content_type = v;
    } else {
      headers.emplace(k, v);
    }
  }
  auto result = client.Post(prefix + request.path, headers, request.body, content_type);
  if (!result) {
    throw TransportError(fmt::format("POST {}{}: {}", request.base_url, request.path, httplib::to_string(result.error())));
  }
  HttpResponse response;
  response.status = result->status;
  response.body = result->body;
  for (const auto& [k, v] : result->headers) response.headers[k] = v;
  return response;
}

HttpResponse CountingTransport::post(const HttpRequest& request) {
  ++calls_;
  return inner_->post(request);
}

ChatRequestView parse_chat_request(const std::string& body) {
  json req;
  try {
    req = json::parse(body);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("chat request: ") + e.what());
  }
  if (!req.is_object() || !req.contains("messages") || !req["messages"].is_array()) {
    throw ParseError("chat request: missing messages array");
  }
  ChatRequestView view;
  view.model = req.value("model", "");
  const json* last_user = nullptr;
  for (const auto& m : req["messages"]) {
    if (m.value("role", "") == "user") last_user = &m;
  }
  if (last_user == nullptr) throw ParseError("chat request: no user message");
  const json& content = (*last_user)["content"];
  if (content.is_string()) {
    view.prompt = content.get<std::string>();
    return view;
  }
  if (!content.is_array()) throw ParseError("chat request: content must be a string or an array of parts");
  for (const auto& part : content) {
    const std::string type = part.value("type", "");
    if (type == "text") {
      if (!view.prompt.empty()) view.prompt += '\n';
      view.prompt += part.value("text", "");
    } else if (type == "image_url") {
      const std::string url = part.at("image_url").value("url", "");
      const auto comma = url.find(";base64,");
      if (url.rfind("data:", 0) != 0 || comma == std::string::npos) {
        throw ParseError("chat request: only base64 data URLs are supported");
      }
      view.images.push_back(base64_decode(url.substr(comma + 8)));
    }
  }
  return view;
}

std::string make_chat_response(const std::string& model, const std::string& content) {
  const long words = count_words(content);
  json resp{{"id", "chatcmpl-mock"},
            {"object", "chat.completion"},
            {"model", model},
            {"choices",
             json::array({{{"index", 0},
                           {"message", {{"role", "assistant"}, {"content", content}}},
                           {"finish_reason", "stop"}}})},
            {"usage", {{"prompt_tokens", 0}, {"completion_tokens", words}, {"total_tokens", words}}}};
  return resp.dump();
}

HttpResponse MockChatTransport::post(const HttpRequest& request) {
  ChatRequestView view;
  try {
    view = parse_chat_request(request.body);
  } catch (const ParseError& e) {
    return json_response(400, error_body(e.what()));
  }
  return json_response(200, make_chat_response(view.model, answer(view)));
}

std::string EchoVlmTransport::answer(const ChatRequestView& request) {
  auto after_marker = [](const std::string& text) -> std::optional<std::string> {
    const auto pos = text.find("GT:");
    if (pos == std::string::npos) return std::nullopt;
    auto end = text.find('\n', pos);
    std::string out = text.substr(pos + 3, end == std::string::npos ? std::string::npos : end - pos - 3);
    while (!out.empty() && (out.back() == '\r' || out.back() == ' ')) out.pop_back();
    while (!out.empty() && out.front() == ' ') out.erase(out.begin());
    return out;
  };
  if (auto gt = after_marker(request.prompt)) return *gt;
  if (!request.images.empty()) {
    if (auto gt = after_marker(request.images.front())) return *gt;
  }
  return request.prompt;
}

std::string RuleLlmTransport::answer(const ChatRequestView& request) {
  static const std::regex kOption(R"(^([A-Z][A-Za-z]* [A-Z]): (.*)$)");
  std::vector<std::pair<std::string, std::string>> options;
  std::string rest;
  std::istringstream in(request.prompt);
  for (std::string line; std::getline(in, line);) {
    std::smatch m;
    if (std::regex_match(line, m, kOption)) {
      options.emplace_back(m[1].str(), m[2].str());
    } else {
      rest += line;
      rest += '\n';
    }
  }
  if (options.size() != 2) return "Neither option can be evaluated.";
  const std::string haystack = lower(rest);
  std::vector<std::size_t> hits;
  for (std::size_t i = 0; i < options.size(); ++i) {
    const std::string needle = lower(options[i].second);
    if (!needle.empty() && haystack.find(needle) != std::string::npos) hits.push_back(i);
  }
  if (hits.size() != 1) return "Neither option matches.";
  return fmt::format("{}. Its text appears verbatim in the given context.", options[hits.front()].first);
}

ScriptedTransport::ScriptedTransport(const std::filesystem::path& script) {
  std::ifstream in(script);
  if (!in) throw LoadError("cannot open mock script " + script.string());
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rule;
    try {
      rule = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(fmt::format("{}:{}: {}", script.string(), line_no, e.what()), line_no);
    }
    if (rule.contains("default")) {
      default_ = rule["default"].get<std::string>();
    } else if (rule.contains("contains") && rule.contains("response")) {
      rules_.emplace_back(rule["contains"].get<std::string>(), rule["response"].get<std::string>());
    } else {
      throw ParseError(fmt::format("{}:{}: expected 'contains'+'response' or 'default'", script.string(), line_no),
                       line_no);
    }
  }
}

HttpResponse ScriptedTransport::post(const HttpRequest& request) {
  ChatRequestView view;
  try {
    view = parse_chat_request(request.body);
  } catch (const ParseError& e) {
    return json_response(400, error_body(e.what()));
  }
  for (const auto& [needle, response] : rules_) {
    if (view.prompt.find(needle) != std::string::npos) return json_response(200, make_chat_response(view.model, response));
  }
  if (default_) return json_response(200, make_chat_response(view.model, *default_));
  return json_response(400, error_body("no scripted response matches the prompt"));
}

}  // namespace keycomp
