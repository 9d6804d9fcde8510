// SPDX-License-Identifier: Apache-2.0
#include "smol/service.hpp"

#include <algorithm>
#include <chrono>
#include <thread>

#include <httplib.h>

#include "smol/inference.hpp"

namespace smol::service {

using nlohmann::json;

namespace {

Response json_response(int status, const json& body) { return {status, "application/json", body.dump()}; }

Response error(int status, const std::string& field, const std::string& message) {
  return json_response(status, {{"error", message}, {"field", field}});
}

std::string bytes_to_string(const std::vector<std::uint8_t>& bytes) { return {bytes.begin(), bytes.end()}; }

// Width and height from the IHDR chunk, read before decoding so oversized
// uploads are refused without allocating the raster.
std::optional<std::pair<std::uint32_t, std::uint32_t>> png_dims(const std::vector<std::uint8_t>& png) {
  if (png.size() < 24) return std::nullopt;
  auto be32 = [&](std::size_t o) {
    return (std::uint32_t{png[o]} << 24) | (std::uint32_t{png[o + 1]} << 16) | (std::uint32_t{png[o + 2]} << 8) |
           std::uint32_t{png[o + 3]};
  };
  return std::pair{be32(16), be32(20)};
}

RgbImage thumbnail(const RgbImage& img, int side) {
  const double s = std::min(1.0, static_cast<double>(side) / std::max(img.height, img.width));
  const int h = std::max(1, static_cast<int>(img.height * s)), w = std::max(1, static_cast<int>(img.width * s));
  RgbImage out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) set_pixel(out, y, x, pixel(img, y * img.height / h, x * img.width / w));
  return out;
}

struct RequestError {
  int status;
  std::string field;
  std::string message;
};

std::vector<std::uint8_t> field_png(const json& body, const std::string& field, int max_side) {
  if (!body.contains(field)) throw RequestError{400, field, "missing field"};
  if (!body[field].is_string()) throw RequestError{400, field, "expected a base64 PNG string"};
  std::vector<std::uint8_t> bytes;
  try {
    bytes = base64_decode(body[field].get<std::string>());
  } catch (const std::exception& e) {
    throw RequestError{400, field, std::string("invalid base64: ") + e.what()};
  }
  const auto dims = png_dims(bytes);
  if (!dims) throw RequestError{400, field, "not a PNG image"};
  if (dims->first > static_cast<std::uint32_t>(max_side) || dims->second > static_cast<std::uint32_t>(max_side)) {
    throw RequestError{413, field,
                       "image side exceeds the limit of " + std::to_string(max_side) + " pixels"};
  }
  return bytes;
}

}  // namespace

ServiceConfig service_config_from_json(const json& j) {
  if (!j.is_object()) throw synthmap::ConfigError("<root>", "expected a JSON object");
  static const std::set<std::string> known = {"checkpoint", "dataset", "host", "port", "max_side", "thumbnail_side"};
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw synthmap::ConfigError(k, "unknown key");
  }
  ServiceConfig c;
  if (!j.contains("checkpoint")) throw synthmap::ConfigError("checkpoint", "missing key");
  try {
    c.checkpoint = j.at("checkpoint").get<std::string>();
    if (j.contains("dataset")) c.dataset = j.at("dataset").get<std::string>();
    c.host = j.value("host", c.host);
    c.port = j.value("port", c.port);
    c.max_side = j.value("max_side", c.max_side);
    c.thumbnail_side = j.value("thumbnail_side", c.thumbnail_side);
  } catch (const json::exception& e) {
    throw synthmap::ConfigError("<root>", e.what());
  }
  if (c.port < 0 || c.port > 65535) throw synthmap::ConfigError("port", "must lie in [0, 65535]");
  if (c.max_side < 1) throw synthmap::ConfigError("max_side", "must be positive");
  if (c.thumbnail_side < 1) throw synthmap::ConfigError("thumbnail_side", "must be positive");
  return c;
}

struct SegmentService::State {
  // Inference only reads parameters; the non-const interface of the model
  // is an artefact of the shared tape API.
  mutable model::SmolMapSeg<float> model;
  std::optional<datapipe::Dataset> demo;
  int max_side;
  int thumbnail_side;
};

SegmentService::SegmentService(const checkpoint::Checkpoint& ckpt, std::optional<datapipe::Dataset> demo,
                               int max_side, int thumbnail_side)
    : state_(std::make_unique<State>(State{checkpoint::load_smol(ckpt), std::move(demo), max_side, thumbnail_side})) {}

SegmentService::~SegmentService() = default;

int SegmentService::patch_size() const { return state_->model.config().patch_size; }

Response SegmentService::health() const {
  return json_response(200, {{"status", "ok"}, {"model_config", model::to_json(state_->model.config())}});
}

Response SegmentService::sheets() const {
  json list = json::array();
  if (state_->demo) {
    for (const auto& s : state_->demo->sheets) {
      list.push_back({{"sheet_id", s.sheet_id},
                      {"style_id", s.style_id},
                      {"width", s.image.width},
                      {"height", s.image.height},
                      {"thumbnail", base64_encode(encode_png(thumbnail(s.image, state_->thumbnail_side)))}});
    }
  }
  return json_response(200, list);
}

Response SegmentService::tile(int sheet_id, const std::map<std::string, std::string>& query) const {
  const synthmap::MapSheet* sheet = state_->demo ? state_->demo->find_sheet(sheet_id) : nullptr;
  if (!sheet) return error(404, "id", "unknown sheet " + std::to_string(sheet_id));
  auto get = [&](const std::string& key, int fallback) {
    auto it = query.find(key);
    if (it == query.end()) return fallback;
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(it->second, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != it->second.size()) throw RequestError{400, key, "expected an integer"};
    return v;
  };
  try {
    const int size = get("size", patch_size());
    const int row = get("row", 0);
    const int col = get("col", 0);
    if (size < 1 || size > state_->max_side) throw RequestError{400, "size", "out of range"};
    if (row < 0 || (row + 1) * size > sheet->image.height) throw RequestError{400, "row", "tile outside the sheet"};
    if (col < 0 || (col + 1) * size > sheet->image.width) throw RequestError{400, "col", "tile outside the sheet"};
    return {200, "image/png", bytes_to_string(encode_png(sheet->image.crop(row * size, col * size, size, size)))};
  } catch (const RequestError& e) {
    return error(e.status, e.field, e.message);
  }
}

Response SegmentService::segment(const std::string& body) const {
  const auto start = std::chrono::steady_clock::now();
  try {
    json req;
    try {
      req = json::parse(body);
    } catch (const json::parse_error& e) {
      throw RequestError{400, "<body>", std::string("malformed JSON: ") + e.what()};
    }
    if (!req.is_object()) throw RequestError{400, "<body>", "expected a JSON object"};
    double threshold = 0.5;
    if (req.contains("threshold")) {
      if (!req["threshold"].is_number()) throw RequestError{400, "threshold", "expected a number"};
      threshold = req["threshold"].get<double>();
      if (!(threshold > 0.0 && threshold < 1.0)) throw RequestError{400, "threshold", "must lie in (0, 1)"};
    }
    const auto src_png = field_png(req, "source_image", state_->max_side);
    const auto mask_png = field_png(req, "source_mask", state_->max_side);
    const auto tgt_png = field_png(req, "target_image", state_->max_side);
    RgbImage source, target;
    BinaryMask mask;
    try {
      source = decode_png_rgb(src_png);
    } catch (const ImageIoError& e) {
      throw RequestError{400, "source_image", e.what()};
    }
    try {
      mask = inference::binarize(decode_png_gray(mask_png));
    } catch (const ImageIoError& e) {
      throw RequestError{400, "source_mask", e.what()};
    }
    try {
      target = decode_png_rgb(tgt_png);
    } catch (const ImageIoError& e) {
      throw RequestError{400, "target_image", e.what()};
    }
    const auto seg = inference::segment_image(state_->model, source, mask, target, threshold);
    GrayImage out = seg.mask;
    for (auto& v : out.pixels) v = v ? 255 : 0;
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return json_response(200, {{"mask", base64_encode(encode_png(out))},
                               {"foreground_fraction", seg.foreground_fraction},
                               {"latency_ms", ms}});
  } catch (const RequestError& e) {
    return error(e.status, e.field, e.message);
  } catch (const inference::InputError& e) {
    return error(400, e.field(), e.what());
  }
}

struct HttpServer::Impl {
  std::shared_ptr<const SegmentService> service;
  httplib::Server server;
  std::thread thread;
};

namespace {

void reply(httplib::Response& res, const Response& r) {
  res.status = r.status;
  res.set_content(r.body, r.content_type);
}

}  // namespace

HttpServer::HttpServer(std::shared_ptr<const SegmentService> service) : impl_(std::make_unique<Impl>()) {
  impl_->service = std::move(service);
  auto& svc = impl_->service;
  auto& s = impl_->server;
  s.set_payload_max_length(256u << 20);
  s.Get("/v1/health", [svc](const httplib::Request&, httplib::Response& res) { reply(res, svc->health()); });
  s.Get("/v1/sheets", [svc](const httplib::Request&, httplib::Response& res) { reply(res, svc->sheets()); });
  s.Get("/v1/sheets/:id/tile", [svc](const httplib::Request& req, httplib::Response& res) {
    int id = 0;
    try {
      std::size_t used = 0;
      id = std::stoi(req.path_params.at("id"), &used);
      if (used != req.path_params.at("id").size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      reply(res, error(400, "id", "expected an integer sheet id"));
      return;
    }
    std::map<std::string, std::string> query;
    for (const auto& [k, v] : req.params) query[k] = v;
    reply(res, svc->tile(id, query));
  });
  s.Post("/v1/segment", [svc](const httplib::Request& req, httplib::Response& res) { reply(res, svc->segment(req.body)); });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
  auto& s = impl_->server;
  int bound = port;
  if (port == 0) {
    bound = s.bind_to_any_port(host);
  } else if (!s.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([&s] { s.listen_after_bind(); });
  s.wait_until_ready();
  return bound;
}

void HttpServer::wait() {
  if (impl_->thread.joinable()) impl_->thread.join();
}

void HttpServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace smol::service
