// SPDX-License-Identifier: Apache-2.0
#include "smol/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <regex>
#include <sstream>

#include "smol/raster.hpp"

namespace smol::checkpoint {

namespace {

constexpr std::size_t kBlock = 512;
constexpr char kMagic[] = "\x93NUMPY";

void put_octal(std::uint8_t* field, std::size_t width, std::uint64_t value) {
  // width - 1 digits followed by NUL.
  std::string digits(width - 1, '0');
  for (std::size_t i = width - 1; i-- > 0 && value;) {
    digits[i] = static_cast<char>('0' + (value & 7));
    value >>= 3;
  }
  std::memcpy(field, digits.data(), width - 1);
  field[width - 1] = 0;
}

std::uint64_t get_octal(const std::uint8_t* field, std::size_t width) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < width && field[i]; ++i) {
    if (field[i] == ' ') continue;
    if (field[i] < '0' || field[i] > '7') throw CheckpointError("tar: bad octal field");
    v = (v << 3) | static_cast<std::uint64_t>(field[i] - '0');
  }
  return v;
}

std::uint32_t header_checksum(const std::uint8_t* h) {
  std::uint32_t sum = 0;
  for (std::size_t i = 0; i < kBlock; ++i) sum += (i >= 148 && i < 156) ? ' ' : h[i];
  return sum;
}

std::vector<std::uint8_t> to_bytes(const std::string& s) { return {s.begin(), s.end()}; }

template <typename T>
Matrix<float> read_values(const std::uint8_t* data, std::size_t rows, std::size_t cols) {
  Matrix<float> m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < rows * cols; ++i) {
    T v;
    std::memcpy(&v, data + i * sizeof(T), sizeof(T));
    m.data()[i] = static_cast<float>(v);
  }
  return m;
}

}  // namespace

std::vector<std::uint8_t> encode_npy(const Matrix<float>& m) {
  std::ostringstream dict;
  dict << "{'descr': '<f4', 'fortran_order': False, 'shape': (" << m.rows() << ", " << m.cols() << "), }";
  std::string header = dict.str();
  const std::size_t preamble = 10;  // magic(6) + version(2) + header length(2)
  const std::size_t total = ((preamble + header.size() + 1 + 63) / 64) * 64;
  header.append(total - preamble - header.size() - 1, ' ');
  header.push_back('\n');
  std::vector<std::uint8_t> out(kMagic, kMagic + 6);
  out.push_back(1);
  out.push_back(0);
  out.push_back(static_cast<std::uint8_t>(header.size() & 0xff));
  out.push_back(static_cast<std::uint8_t>(header.size() >> 8));
  out.insert(out.end(), header.begin(), header.end());
  const auto* raw = reinterpret_cast<const std::uint8_t*>(m.data());
  out.insert(out.end(), raw, raw + static_cast<std::size_t>(m.size()) * sizeof(float));
  return out;
}

Matrix<float> decode_npy(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 10 || std::memcmp(bytes.data(), kMagic, 6) != 0) throw CheckpointError("npy: bad magic");
  std::size_t header_len = 0;
  std::size_t offset = 0;
  if (bytes[6] == 1) {
    header_len = bytes[8] | (static_cast<std::size_t>(bytes[9]) << 8);
    offset = 10;
  } else if (bytes[6] == 2 || bytes[6] == 3) {
    if (bytes.size() < 12) throw CheckpointError("npy: truncated header");
    header_len = bytes[8] | (bytes[9] << 8) | (static_cast<std::size_t>(bytes[10]) << 16) |
                 (static_cast<std::size_t>(bytes[11]) << 24);
    offset = 12;
  } else {
    throw CheckpointError("npy: unsupported version");
  }
  if (bytes.size() < offset + header_len) throw CheckpointError("npy: truncated header");
  const std::string header(bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                           bytes.begin() + static_cast<std::ptrdiff_t>(offset + header_len));
  std::smatch m;
  if (!std::regex_search(header, m, std::regex(R"('descr'\s*:\s*'([^']+)')"))) throw CheckpointError("npy: no descr");
  const std::string descr = m[1];
  if (std::regex_search(header, std::regex(R"('fortran_order'\s*:\s*True)"))) {
    throw CheckpointError("npy: fortran order is not supported");
  }
  if (!std::regex_search(header, m, std::regex(R"('shape'\s*:\s*\(([^)]*)\))"))) throw CheckpointError("npy: no shape");
  std::vector<std::size_t> shape;
  const std::string dims = m[1];
  const std::regex number(R"(\d+)");
  for (std::sregex_iterator it(dims.begin(), dims.end(), number), end; it != end; ++it) {
    shape.push_back(std::stoull(it->str()));
  }
  std::size_t rows = 1, cols = 1;
  if (shape.size() == 1) {
    cols = shape[0];
  } else if (shape.size() == 2) {
    rows = shape[0];
    cols = shape[1];
  } else {
    throw CheckpointError("npy: only 1-D and 2-D arrays are supported");
  }
  const std::uint8_t* data = bytes.data() + offset + header_len;
  const std::size_t available = bytes.size() - offset - header_len;
  if (descr == "<f4") {
    if (available < rows * cols * 4) throw CheckpointError("npy: truncated data");
    return read_values<float>(data, rows, cols);
  }
  if (descr == "<f8") {
    if (available < rows * cols * 8) throw CheckpointError("npy: truncated data");
    return read_values<double>(data, rows, cols);
  }
  throw CheckpointError("npy: unsupported dtype " + descr);
}

std::vector<std::uint8_t> write_tar(const std::vector<std::pair<std::string, std::vector<std::uint8_t>>>& files) {
  std::vector<std::uint8_t> out;
  for (const auto& [name, data] : files) {
    std::uint8_t h[kBlock] = {};
    std::string prefix, base = name;
    if (base.size() > 100) {
      const auto cut = base.rfind('/', 155);
      if (cut == std::string::npos || base.size() - cut - 1 > 100) throw CheckpointError("tar: name too long: " + name);
      prefix = base.substr(0, cut);
      base = base.substr(cut + 1);
    }
    std::memcpy(h, base.data(), base.size());
    put_octal(h + 100, 8, 0644);
    put_octal(h + 108, 8, 0);
    put_octal(h + 116, 8, 0);
    put_octal(h + 124, 12, data.size());
    put_octal(h + 136, 12, 0);  // fixed mtime keeps archives byte-reproducible
    h[156] = '0';
    std::memcpy(h + 257, "ustar", 6);
    h[263] = '0';
    h[264] = '0';
    std::memcpy(h + 345, prefix.data(), prefix.size());
    put_octal(h + 148, 7, header_checksum(h));
    h[155] = ' ';
    out.insert(out.end(), h, h + kBlock);
    out.insert(out.end(), data.begin(), data.end());
    out.resize(out.size() + (kBlock - data.size() % kBlock) % kBlock, 0);
  }
  out.resize(out.size() + 2 * kBlock, 0);
  return out;
}

std::vector<std::pair<std::string, std::vector<std::uint8_t>>> read_tar(const std::vector<std::uint8_t>& bytes) {
  std::vector<std::pair<std::string, std::vector<std::uint8_t>>> files;
  std::size_t pos = 0;
  while (pos + kBlock <= bytes.size()) {
    const std::uint8_t* h = bytes.data() + pos;
    if (std::all_of(h, h + kBlock, [](std::uint8_t b) { return b == 0; })) break;
    if (get_octal(h + 148, 8) != header_checksum(h)) throw CheckpointError("tar: header checksum mismatch");
    auto field = [h](std::size_t off, std::size_t len) {
      return std::string(reinterpret_cast<const char*>(h + off), strnlen(reinterpret_cast<const char*>(h + off), len));
    };
    std::string name = field(0, 100);
    const std::string prefix = field(345, 155);
    if (!prefix.empty()) name = prefix + "/" + name;
    const std::uint64_t size = get_octal(h + 124, 12);
    const char type = static_cast<char>(h[156]);
    pos += kBlock;
    if (pos + size > bytes.size()) throw CheckpointError("tar: truncated entry " + name);
    if (type == '0' || type == 0) {
      files.emplace_back(name, std::vector<std::uint8_t>(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                                         bytes.begin() + static_cast<std::ptrdiff_t>(pos + size)));
    }
    pos += (size + kBlock - 1) / kBlock * kBlock;
  }
  return files;
}

void save(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json cfg;
  cfg["format_version"] = 1;
  cfg["model_kind"] = ckpt.model_kind;
  cfg["model_config"] = ckpt.model_config;
  cfg["dtype"] = "float32";
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : ckpt.classes) classes.push_back({{"id", c.id}, {"name", c.name}});
  cfg["classes"] = classes;
  nlohmann::json shapes = nlohmann::json::object();
  for (const auto& [name, m] : ckpt.tensors) shapes[name] = {m.rows(), m.cols()};
  cfg["parameters"] = shapes;
  cfg["metadata"] = ckpt.metadata;

  std::vector<std::pair<std::string, std::vector<std::uint8_t>>> files;
  files.emplace_back("config.json", to_bytes(cfg.dump(2) + "\n"));
  for (const auto& [name, m] : ckpt.tensors) files.emplace_back(name + ".npy", encode_npy(m));
  write_file(path, write_tar(files));
}

Checkpoint load(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file(path);
  } catch (const std::exception& e) {
    throw CheckpointError("cannot read checkpoint " + path.string() + ": " + e.what());
  }
  Checkpoint ckpt;
  bool have_config = false;
  std::map<std::string, std::vector<std::size_t>> declared;
  for (auto& [name, data] : read_tar(bytes)) {
    if (name == "config.json") {
      nlohmann::json cfg;
      try {
        cfg = nlohmann::json::parse(data.begin(), data.end());
        ckpt.model_kind = cfg.at("model_kind").get<std::string>();
        ckpt.model_config = cfg.at("model_config");
        for (const auto& c : cfg.at("classes")) ckpt.classes.push_back({c.at("id").get<int>(), c.at("name").get<std::string>()});
        if (cfg.contains("metadata")) ckpt.metadata = cfg["metadata"];
        if (cfg.contains("parameters")) {
          for (const auto& [k, v] : cfg["parameters"].items()) declared[k] = v.get<std::vector<std::size_t>>();
        }
      } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint config.json is malformed: ") + e.what());
      }
      have_config = true;
    } else if (name.size() > 4 && name.ends_with(".npy")) {
      ckpt.tensors[name.substr(0, name.size() - 4)] = decode_npy(data);
    }
  }
  if (!have_config) throw CheckpointError("checkpoint has no config.json: " + path.string());
  for (const auto& [name, shape] : declared) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) throw CheckpointError("checkpoint is missing tensor " + name);
    if (shape.size() != 2 || static_cast<std::size_t>(it->second.rows()) != shape[0] ||
        static_cast<std::size_t>(it->second.cols()) != shape[1]) {
      throw CheckpointError("tensor " + name + " does not match its declared shape");
    }
  }
  return ckpt;
}

template <typename T>
Checkpoint from_params(const nn::ParameterSet<T>& params, const std::string& kind, nlohmann::json model_config,
                       std::vector<synthmap::ClassInfo> classes) {
  Checkpoint ckpt;
  ckpt.model_kind = kind;
  ckpt.model_config = std::move(model_config);
  ckpt.classes = std::move(classes);
  for (const auto& p : params.all()) ckpt.tensors[p.name] = p.value.template cast<float>();
  return ckpt;
}

template <typename T>
std::size_t load_into(nn::ParameterSet<T>& params, const Checkpoint& ckpt, const std::vector<std::string>& prefixes) {
  auto selected = [&](const std::string& name) {
    if (prefixes.empty()) return true;
    return std::any_of(prefixes.begin(), prefixes.end(), [&](const std::string& p) { return name.starts_with(p); });
  };
  std::size_t copied = 0;
  for (auto& p : params.all()) {
    if (!selected(p.name)) continue;
    auto it = ckpt.tensors.find(p.name);
    if (it == ckpt.tensors.end()) throw CheckpointError("checkpoint lacks parameter " + p.name);
    if (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols()) {
      throw CheckpointError("shape mismatch for parameter " + p.name);
    }
    p.value = it->second.template cast<T>();
    ++copied;
  }
  return copied;
}

std::size_t load_donor(model::SmolMapSeg<float>& model, const Checkpoint& donor) {
  return load_into(model.params(), donor, {"image_encoder/", "mask_decoder/"});
}

model::SmolMapSeg<float> load_smol(const Checkpoint& ckpt) {
  if (ckpt.model_kind != "smol") throw CheckpointError("checkpoint holds a '" + ckpt.model_kind + "' model, not smol");
  model::SmolMapSeg<float> m(model::model_config_from_json(ckpt.model_config), 0);
  load_into(m.params(), ckpt);
  return m;
}

model::UNet<float> load_unet(const Checkpoint& ckpt) {
  if (ckpt.model_kind != "unet") throw CheckpointError("checkpoint holds a '" + ckpt.model_kind + "' model, not unet");
  model::UNet<float> m(model::unet_config_from_json(ckpt.model_config), 0);
  load_into(m.params(), ckpt);
  return m;
}

template Checkpoint from_params<float>(const nn::ParameterSet<float>&, const std::string&, nlohmann::json,
                                       std::vector<synthmap::ClassInfo>);
template Checkpoint from_params<double>(const nn::ParameterSet<double>&, const std::string&, nlohmann::json,
                                        std::vector<synthmap::ClassInfo>);
template std::size_t load_into<float>(nn::ParameterSet<float>&, const Checkpoint&, const std::vector<std::string>&);
template std::size_t load_into<double>(nn::ParameterSet<double>&, const Checkpoint&, const std::vector<std::string>&);

}  // namespace smol::checkpoint
