#include "keycomp/oracle.hpp"

#include <fmt/format.h>
#include <httplib.h>

#include <fstream>

#include "keycomp/digest.hpp"
#include "keycomp/error.hpp"

namespace keycomp {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

void append_line(const fs::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw LoadError("cannot append to " + path.string());
  out << line << '\n';
  out.flush();
  if (!out) throw LoadError("write failure on " + path.string());
}

void reply_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void reply_error(httplib::Response& res, int status, const std::string& message) {
  reply_json(res, status, json{{"error", message}});
}

bool is_blank(const std::string& s) { return s.find_first_not_of(" \t\r\n") == std::string::npos; }

}  // namespace

json to_json(const OracleSelection& s) {
  json j{{"item_id", s.item_id},
         {"image_index", s.image_index},
         {"chosen_sample_index", s.chosen_sample_index},
         {"chooser", s.chooser},
         {"chosen_at", s.chosen_at}};
  if (s.error_tag) j["error_tag"] = *s.error_tag;
  return j;
}

OracleSelection oracle_selection_from_json(const json& j) {
  OracleSelection s;
  try {
    s.item_id = j.at("item_id").get<long long>();
    s.image_index = j.at("image_index").get<int>();
    s.chosen_sample_index = j.at("chosen_sample_index").get<int>();
    s.chooser = j.value("chooser", "");
    s.chosen_at = j.value("chosen_at", "");
  } catch (const json::exception& e) {
    throw ParseError(fmt::format("oracle selection: {}", e.what()));
  }
  if (j.contains("error_tag") && j["error_tag"].is_string()) s.error_tag = j["error_tag"].get<std::string>();
  return s;
}

OracleStore::OracleStore(fs::path path) : path_(std::move(path)) {
  if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
  std::ifstream in(path_);
  if (!in) return;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (is_blank(line)) continue;
    try {
      const auto s = oracle_selection_from_json(json::parse(line));
      selections_.emplace(std::make_pair(s.item_id, s.image_index), s);
    } catch (const json::exception& e) {
      throw ParseError(fmt::format("{}:{}: {}", path_.string(), line_no, e.what()), line_no);
    } catch (const ParseError& e) {
      throw ParseError(fmt::format("{}:{}: {}", path_.string(), line_no, e.what()), line_no);
    }
  }
}

void OracleStore::add(const OracleSelection& selection) {
  std::lock_guard lock(mutex_);
  const auto key = std::make_pair(selection.item_id, selection.image_index);
  if (selections_.count(key) != 0) {
    throw ConflictError(
        fmt::format("item {} image {} already has a selection", selection.item_id, selection.image_index));
  }
  append_line(path_, to_json(selection).dump());
  selections_.emplace(key, selection);
}

std::optional<OracleSelection> OracleStore::find(long long item_id, int image_index) const {
  std::lock_guard lock(mutex_);
  const auto it = selections_.find({item_id, image_index});
  if (it == selections_.end()) return std::nullopt;
  return it->second;
}

std::vector<OracleSelection> OracleStore::all() const {
  std::lock_guard lock(mutex_);
  std::vector<OracleSelection> out;
  for (const auto& [_, s] : selections_) out.push_back(s);
  return out;
}

std::size_t OracleStore::size() const {
  std::lock_guard lock(mutex_);
  return selections_.size();
}

struct OracleService::Impl {
  httplib::Server server;
  std::mutex mutex;
  fs::path annotations_path;
  std::map<std::pair<long long, int>, std::vector<std::string>> tags;
  std::map<long long, const WinogroundItem*> items;
  Clock clock = Clock::system();
};

OracleService::OracleService(ExperimentConfig config, const RunHooks& hooks)
    : context_(std::move(config), hooks), impl_(std::make_unique<Impl>()) {
  const ExperimentConfig& cfg = context_.config();
  if (!cfg.oracle_enabled) throw ConfigError("config: oracle.enabled must be true to serve the oracle");
  fs::create_directories(cfg.output_dir);
  store_ = std::make_unique<OracleStore>(cfg.selections_path());
  impl_->annotations_path = cfg.output_dir / "annotations.jsonl";
  impl_->clock = cfg.fixed_clock ? Clock::fixed(*cfg.fixed_clock) : Clock::system();
  if (std::ifstream in(impl_->annotations_path); in) {
    for (std::string line; std::getline(in, line);) {
      if (is_blank(line)) continue;
      const json j = json::parse(line);
      impl_->tags[{j.at("item_id").get<long long>(), j.at("image_index").get<int>()}].push_back(
          j.at("tag").get<std::string>());
    }
  }
  for (const auto& item : context_.items()) {
    impl_->items[item.id] = &item;
    for (int j = 0; j < 2; ++j) {
      std::vector<std::string> texts;
      for (const auto& t : context_.description_samples(item, j, cfg.oracle_k)) texts.push_back(t.response_text);
      candidates_[{item.id, j}] = std::move(texts);
    }
  }
  install_routes();
}

OracleService::~OracleService() { stop(); }

void OracleService::install_routes() {
  auto& server = impl_->server;
  const ExperimentConfig& cfg = context_.config();

  server.Get("/items", [this, &cfg](const httplib::Request&, httplib::Response& res) {
    json out = json::array();
    for (const auto& item : context_.items()) {
      for (int j = 0; j < 2; ++j) {
        json candidates = json::array();
        const auto& texts = candidates_.at({item.id, j});
        for (std::size_t s = 0; s < texts.size(); ++s) candidates.push_back({{"sample_index", s}, {"text", texts[s]}});
        json entry{{"item_id", item.id},
                   {"image_index", j},
                   {"image_url", fmt::format("/images/{}/{}", item.id, j)},
                   {"candidates", std::move(candidates)}};
        const auto chosen = store_->find(item.id, j);
        entry["status"] = chosen ? "done" : "pending";
        if (chosen) entry["chosen_sample_index"] = chosen->chosen_sample_index;
        if (cfg.oracle_show_captions) entry["captions"] = {item.caption_0, item.caption_1};
        {
          std::lock_guard lock(impl_->mutex);
          const auto it = impl_->tags.find({item.id, j});
          entry["error_tags"] = it == impl_->tags.end() ? json::array() : json(it->second);
        }
        out.push_back(std::move(entry));
      }
    }
    reply_json(res, 200, out);
  });

  server.Get(R"(/images/(-?\d+)/(\d+))", [this](const httplib::Request& req, httplib::Response& res) {
    const long long id = std::stoll(req.matches[1]);
    const int index = std::stoi(req.matches[2]);
    const auto it = impl_->items.find(id);
    if (it == impl_->items.end()) return reply_error(res, 404, fmt::format("unknown item {}", id));
    if (index != 0 && index != 1) return reply_error(res, 400, "image index must be 0 or 1");
    const ImageRef& image = it->second->image(index);
    try {
      res.set_content(read_file(image.path), mime_type_for(image.path));
    } catch (const LoadError& e) {
      reply_error(res, 404, e.what());
    }
  });

  server.Post("/selections", [this, &cfg](const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::parse_error&) {
      return reply_error(res, 400, "body is not JSON");
    }
    if (!body.is_object() || !body.contains("item_id") || !body["item_id"].is_number_integer() ||
        !body.contains("image_index") || !body["image_index"].is_number_integer() ||
        !body.contains("chosen_sample_index") || !body["chosen_sample_index"].is_number_integer()) {
      return reply_error(res, 400, "item_id, image_index and chosen_sample_index must be integers");
    }
    if (!body.contains("chooser") || !body["chooser"].is_string() || is_blank(body["chooser"].get<std::string>())) {
      return reply_error(res, 400, "chooser must be a non-empty string");
    }
    OracleSelection s;
    s.item_id = body["item_id"].get<long long>();
    s.image_index = body["image_index"].get<int>();
    s.chosen_sample_index = body["chosen_sample_index"].get<int>();
    s.chooser = body["chooser"].get<std::string>();
    if (body.contains("error_tag") && body["error_tag"].is_string() && !is_blank(body["error_tag"].get<std::string>())) {
      s.error_tag = body["error_tag"].get<std::string>();
    }
    if (impl_->items.count(s.item_id) == 0) return reply_error(res, 404, fmt::format("unknown item {}", s.item_id));
    if (s.image_index != 0 && s.image_index != 1) return reply_error(res, 400, "image_index must be 0 or 1");
    if (s.chosen_sample_index < 0 || s.chosen_sample_index >= cfg.oracle_k) {
      return reply_error(res, 400, fmt::format("chosen_sample_index must lie in [0, {})", cfg.oracle_k));
    }
    s.chosen_at = impl_->clock.now();
    try {
      store_->add(s);
    } catch (const ConflictError& e) {
      json conflict{{"error", e.what()}};
      if (const auto existing = store_->find(s.item_id, s.image_index)) conflict["selection"] = to_json(*existing);
      return reply_json(res, 409, conflict);
    }
    reply_json(res, 201, to_json(s));
  });

  server.Get("/progress", [this](const httplib::Request&, httplib::Response& res) {
    std::size_t completed = 0;
    for (const auto& s : store_->all()) completed += impl_->items.count(s.item_id);
    reply_json(res, 200, json{{"completed", completed}, {"total", total()}});
  });

  server.Post("/annotations", [this](const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::parse_error&) {
      return reply_error(res, 400, "body is not JSON");
    }
    if (!body.is_object() || !body.contains("item_id") || !body["item_id"].is_number_integer() ||
        !body.contains("image_index") || !body["image_index"].is_number_integer()) {
      return reply_error(res, 400, "item_id and image_index must be integers");
    }
    const long long id = body["item_id"].get<long long>();
    const int index = body["image_index"].get<int>();
    if (impl_->items.count(id) == 0) return reply_error(res, 404, fmt::format("unknown item {}", id));
    if (index != 0 && index != 1) return reply_error(res, 400, "image_index must be 0 or 1");
    const std::string tag = body.value("tag", "");
    if (is_blank(tag)) {
      res.status = 204;
      return;
    }
    const json record{{"item_id", id}, {"image_index", index}, {"tag", tag}, {"noted_at", impl_->clock.now()}};
    std::lock_guard lock(impl_->mutex);
    append_line(impl_->annotations_path, record.dump());
    impl_->tags[{id, index}].push_back(tag);
    reply_json(res, 201, record);
  });

  if (cfg.oracle_static_dir && !server.set_mount_point("/", cfg.oracle_static_dir->string())) {
    throw ConfigError("oracle static_dir does not exist: " + cfg.oracle_static_dir->string());
  }
}

int OracleService::start(const std::string& host, int port) {
  auto& server = impl_->server;
  if (port == 0) {
    port_ = server.bind_to_any_port(host);
    if (port_ < 0) throw Error(fmt::format("cannot bind {}", host));
  } else {
    if (!server.bind_to_port(host, port)) throw Error(fmt::format("cannot bind {}:{}", host, port));
    port_ = port;
  }
  thread_ = std::thread([&server] { server.listen_after_bind(); });
  server.wait_until_ready();
  return port_;
}

void OracleService::listen(const std::string& host, int port) {
  auto& server = impl_->server;
  if (!server.bind_to_port(host, port)) throw Error(fmt::format("cannot bind {}:{}", host, port));
  port_ = port;
  server.listen_after_bind();
}

void OracleService::stop() {
  if (impl_) impl_->server.stop();
  if (thread_.joinable()) thread_.join();
}

std::pair<std::string, int> parse_bind_address(std::string_view bind) {
  const auto colon = bind.rfind(':');
  if (colon == std::string_view::npos || colon == 0) {
    throw ConfigError(fmt::format("bind address '{}' must look like host:port", bind));
  }
  int port = -1;
  try {
    port = std::stoi(std::string(bind.substr(colon + 1)));
  } catch (const std::exception&) {
  }
  if (port < 0 || port > 65535) throw ConfigError(fmt::format("bind address '{}' has an invalid port", bind));
  return {std::string(bind.substr(0, colon)), port};
}

}  // namespace keycomp
