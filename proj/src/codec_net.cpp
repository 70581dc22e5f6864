#include "deepvlf/codec_net.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace deepvlf {

void CodecShape::validate() const {
  if (m < 1 || m > 12) throw ConfigError("m must be in [1, 12]");
  if (groups < 1) throw ConfigError("group count must be >= 1");
  if (tau_max < 1) throw ConfigError("tau_max must be >= 1");
  if (tau_vd < 0) throw ConfigError("tau_vd must be >= 0");
  if (width < 1) throw ConfigError("latent width must be >= 1");
  if (shallow_layers < 1 || deep_layers < 1) throw ConfigError("feature extractor stacks need >= 1 layer");
}

nlohmann::json to_json(const CodecShape& s) {
  return {{"m", s.m},
          {"groups", s.groups},
          {"tau_max", s.tau_max},
          {"tau_vd", s.tau_vd},
          {"width", s.width},
          {"shallow_layers", s.shallow_layers},
          {"deep_layers", s.deep_layers}};
}

CodecShape shape_from_json(const nlohmann::json& j) {
  CodecShape s;
  s.m = j.at("m").get<int>();
  s.groups = j.at("groups").get<int>();
  s.tau_max = j.at("tau_max").get<int>();
  s.tau_vd = j.at("tau_vd").get<int>();
  s.width = j.at("width").get<int>();
  s.shallow_layers = j.at("shallow_layers").get<int>();
  s.deep_layers = j.at("deep_layers").get<int>();
  s.validate();
  return s;
}

namespace {

constexpr char kMagic[] = "DVLFCKPT";
constexpr int kFormatVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const CodecParameters<double>& params,
                     const nlohmann::json& metadata, TensorEncoding encoding) {
  nlohmann::json header;
  header["format_version"] = kFormatVersion;
  header["shape"] = to_json(params.shape);
  header["encoding"] = encoding == TensorEncoding::kFloat64 ? "f64" : "f32";
  header["power_mean"] = params.power_mean;
  header["power_std"] = params.power_std;
  header["metadata"] = metadata;
  auto& dir = header["tensors"] = nlohmann::json::array();
  for (const auto& [name, m] : params.tensors()) dir.push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}});

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out << kMagic << '\n' << header.dump() << '\n';
    for (const auto& [name, m] : params.tensors()) {
      if (encoding == TensorEncoding::kFloat64) {
        out.write(reinterpret_cast<const char*>(m->data()), static_cast<std::streamsize>(m->size() * sizeof(double)));
      } else {
        const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f = m->cast<float>();
        out.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(float)));
      }
    }
    if (!out) throw std::runtime_error("short write on checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::string magic, header_line;
  std::getline(in, magic);
  if (magic != kMagic) throw std::runtime_error(path.string() + ": not a checkpoint file");
  std::getline(in, header_line);
  const auto header = nlohmann::json::parse(header_line);
  if (header.at("format_version").get<int>() != kFormatVersion) {
    throw std::runtime_error(path.string() + ": unsupported checkpoint version");
  }
  Checkpoint ck;
  ck.params = CodecParameters<double>::zeros(shape_from_json(header.at("shape")));
  ck.metadata = header.value("metadata", nlohmann::json::object());
  const bool f64 = header.at("encoding").get<std::string>() == "f64";

  auto tensors = ck.params.tensors();
  const auto& dir = header.at("tensors");
  if (dir.size() != tensors.size()) throw std::runtime_error(path.string() + ": tensor count mismatch");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto& [name, m] = tensors[i];
    if (dir[i].at("name").get<std::string>() != name || dir[i].at("rows").get<Eigen::Index>() != m->rows() ||
        dir[i].at("cols").get<Eigen::Index>() != m->cols()) {
      throw std::runtime_error(path.string() + ": shape mismatch for tensor " + name);
    }
    if (f64) {
      in.read(reinterpret_cast<char*>(m->data()), static_cast<std::streamsize>(m->size() * sizeof(double)));
    } else {
      Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f(m->rows(), m->cols());
      in.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(float)));
      *m = f.cast<double>();
    }
    if (!in) throw std::runtime_error(path.string() + ": truncated tensor " + name);
  }
  ck.params.power_mean = header.at("power_mean").get<std::vector<double>>();
  ck.params.power_std = header.at("power_std").get<std::vector<double>>();
  const auto tau_max = static_cast<std::size_t>(ck.params.shape.tau_max);
  if (ck.params.power_mean.size() != tau_max || ck.params.power_std.size() != tau_max) {
    throw std::runtime_error(path.string() + ": power statistics length mismatch");
  }
  return ck;
}

}  // namespace deepvlf
