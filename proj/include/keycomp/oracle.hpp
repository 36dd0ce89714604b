#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "keycomp/runner.hpp"

namespace keycomp {

/// A human choice of the best sampled description for one image.
struct OracleSelection {
  long long item_id = 0;
  int image_index = 0;
  int chosen_sample_index = 0;
  std::string chooser;
  std::string chosen_at;
  std::optional<std::string> error_tag;

  bool operator==(const OracleSelection&) const = default;
};

nlohmann::json to_json(const OracleSelection& s);
OracleSelection oracle_selection_from_json(const nlohmann::json& j);

/// Durable selection set backed by a JSON-lines file. At most one selection
/// per (item, image); the check and the append happen under one lock.
class OracleStore {
 public:
  explicit OracleStore(std::filesystem::path path);

  /// Throws ConflictError when (item_id, image_index) is already chosen.
  void add(const OracleSelection& selection);
  std::optional<OracleSelection> find(long long item_id, int image_index) const;
  std::vector<OracleSelection> all() const;
  std::size_t size() const;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  mutable std::mutex mutex_;
  std::map<std::pair<long long, int>, OracleSelection> selections_;
};

/// Free-form error-analysis note attached to an item image.
struct OracleAnnotation {
  long long item_id = 0;
  int image_index = 0;
  std::string tag;
  std::string noted_at;
};

/// HTTP service for the human oracle:
///   GET  /items                 queue entries with image URL and k candidates
///   GET  /images/{id}/{index}   image bytes
///   POST /selections            {item_id, image_index, chosen_sample_index, chooser, error_tag?}
///   GET  /progress              {completed, total}
///   POST /annotations           {item_id, image_index, tag}
/// Candidates are sampled through the gateway when the service starts.
class OracleService {
 public:
  explicit OracleService(ExperimentConfig config, const RunHooks& hooks = {});
  ~OracleService();
  OracleService(const OracleService&) = delete;
  OracleService& operator=(const OracleService&) = delete;

  /// Binds and serves on a background thread. Port 0 picks a free port.
  /// Throws Error when the address cannot be bound.
  int start(const std::string& host, int port);
  /// Serves on the calling thread until stop().
  void listen(const std::string& host, int port);
  void stop();
  int port() const { return port_; }

  OracleStore& store() { return *store_; }
  std::size_t total() const { return 2 * context_.items().size(); }

 private:
  struct Impl;
  void install_routes();

  ExperimentContext context_;
  std::unique_ptr<OracleStore> store_;
  std::map<std::pair<long long, int>, std::vector<std::string>> candidates_;
  std::unique_ptr<Impl> impl_;
  std::thread thread_;
  int port_ = 0;
};

/// Splits "host:port". Throws ConfigError.
std::pair<std::string, int> parse_bind_address(std::string_view bind);

}  // namespace keycomp
