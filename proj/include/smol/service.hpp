// SPDX-License-Identifier: Apache-2.0
//
// HTTP inference service. Handlers are plain functions of (request, loaded
// checkpoint) so they can be exercised without a socket; HttpServer binds
// them to cpp-httplib.
#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "smol/checkpoint.hpp"
#include "smol/datapipe.hpp"

namespace smol::service {

struct ServiceConfig {
  std::filesystem::path checkpoint;
  /// Dataset whose sheets back /v1/sheets; optional.
  std::optional<std::filesystem::path> dataset;
  std::string host = "127.0.0.1";
  int port = 8080;
  /// Images whose width or height exceeds this are rejected with 413.
  int max_side = 2048;
  int thumbnail_side = 128;
};

/// Parses {"checkpoint", "dataset", "host", "port", "max_side", "thumbnail_side"}.
ServiceConfig service_config_from_json(const nlohmann::json& j);

struct Response {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

/// Stateless request handlers over an immutable model. Safe to call from
/// several threads at once.
class SegmentService {
 public:
  /// Throws checkpoint::CheckpointError unless the checkpoint holds a smol model.
  SegmentService(const checkpoint::Checkpoint& ckpt, std::optional<datapipe::Dataset> demo, int max_side = 2048,
                 int thumbnail_side = 128);
  ~SegmentService();

  Response health() const;
  Response sheets() const;
  Response tile(int sheet_id, const std::map<std::string, std::string>& query) const;
  Response segment(const std::string& body) const;

  int patch_size() const;

 private:
  struct State;
  std::unique_ptr<State> state_;
};

/// Binds a SegmentService to a listening socket on a background thread.
class HttpServer {
 public:
  explicit HttpServer(std::shared_ptr<const SegmentService> service);
  ~HttpServer();

  /// Binds (port 0 picks a free port) and starts serving; returns the port.
  int start(const std::string& host, int port);
  /// Blocks until stop() is called from another thread or a signal handler.
  void wait();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace smol::service
