#include "stmd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include <json.hpp>

#include "stmd/errors.hpp"

namespace stmd {

namespace {

constexpr char kMagic[8] = {'S', 'T', 'M', 'D', 'C', 'K', 'P', 'T'};
constexpr int kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

nlohmann::ordered_json config_json(const DenoiserConfig& c) {
  nlohmann::ordered_json j;
  j["model_dim"] = c.model_dim;
  j["heads"] = c.heads;
  j["st_layers"] = c.st_layers;
  j["blocks"] = c.blocks;
  j["pair_dim"] = c.pair_dim;
  j["rope_2d"] = c.rope_2d;
  j["rope_base"] = c.rope_base;
  j["ln_eps"] = c.ln_eps;
  j["knn"] = c.knn;
  return j;
}

nlohmann::ordered_json schedule_json(const NoiseSchedule& s) {
  nlohmann::ordered_json j;
  j["b_min"] = s.b_min;
  j["b_max"] = s.b_max;
  j["sigma_min"] = s.sigma_min;
  j["sigma_max"] = s.sigma_max;
  j["coordinate_scale"] = s.coordinate_scale;
  j["steps"] = s.steps;
  j["tau_max"] = s.tau_max;
  j["tau_min"] = s.tau_min;
  j["heat_kernel_exponent"] = s.exponent == HeatKernelExponent::half ? "half" : "full";
  return j;
}

}  // namespace

void save_checkpoint(std::ostream& out, const Denoiser& model) {
  nlohmann::ordered_json h;
  h["version"] = kVersion;
  h["config"] = config_json(model.config());
  h["schedule"] = schedule_json(model.schedule());
  auto tensors = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (const auto& t : model.params().tensors()) {
    tensors.push_back({{"name", t.name}, {"shape", {t.value.rows(), t.value.cols()}}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.value.size()) * sizeof(double);
  }
  h["tensors"] = tensors;
  const std::string header = h.dump();
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t len = header.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& t : model.params().tensors())
    for (Eigen::Index r = 0; r < t.value.rows(); ++r)
      for (Eigen::Index c = 0; c < t.value.cols(); ++c) {
        const double v = t.value(r, c);
        out.write(reinterpret_cast<const char*>(&v), sizeof(v));
      }
  if (!out) throw std::runtime_error("checkpoint: write failed");
}

void save_checkpoint_file(const std::string& path, const Denoiser& model) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  save_checkpoint(f, model);
}

Denoiser load_checkpoint(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw FormatError("checkpoint: bad magic");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (1u << 26)) throw FormatError("checkpoint: bad header length");
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  if (!in) throw FormatError("checkpoint: truncated header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: header is not valid JSON: ") + e.what());
  }
  if (h.value("version", 0) != kVersion) throw FormatError("checkpoint: unsupported version");
  try {
    DenoiserConfig c;
    const auto& jc = h.at("config");
    c.model_dim = jc.at("model_dim");
    c.heads = jc.at("heads");
    c.st_layers = jc.at("st_layers");
    c.blocks = jc.at("blocks");
    c.pair_dim = jc.at("pair_dim");
    c.rope_2d = jc.at("rope_2d");
    c.rope_base = jc.at("rope_base");
    c.ln_eps = jc.at("ln_eps");
    c.knn = jc.at("knn");
    NoiseSchedule s;
    const auto& js = h.at("schedule");
    s.b_min = js.at("b_min");
    s.b_max = js.at("b_max");
    s.sigma_min = js.at("sigma_min");
    s.sigma_max = js.at("sigma_max");
    s.coordinate_scale = js.at("coordinate_scale");
    s.steps = js.at("steps");
    s.tau_max = js.at("tau_max");
    s.tau_min = js.at("tau_min");
    s.exponent = js.at("heat_kernel_exponent") == "full" ? HeatKernelExponent::full : HeatKernelExponent::half;
    Denoiser model(c, s);
    std::vector<char> data;
    {
      std::streampos pos = in.tellg();
      in.seekg(0, std::ios::end);
      const std::streampos end = in.tellg();
      in.seekg(pos);
      data.resize(static_cast<std::size_t>(end - pos));
      in.read(data.data(), static_cast<std::streamsize>(data.size()));
    }
    ParamSet& P = model.params();
    if (h.at("tensors").size() != P.size()) throw FormatError("checkpoint: tensor count mismatch");
    for (const auto& t : h.at("tensors")) {
      const std::string name = t.at("name");
      Matrix& m = P[name];
      const Eigen::Index rows = t.at("shape")[0], cols = t.at("shape")[1];
      if (rows != m.rows() || cols != m.cols()) throw FormatError("checkpoint: shape mismatch for " + name);
      const std::uint64_t off = t.at("offset");
      if (off + static_cast<std::uint64_t>(m.size()) * sizeof(double) > data.size())
        throw FormatError("checkpoint: truncated tensor data for " + name);
      const char* src = data.data() + off;
      for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c2 = 0; c2 < cols; ++c2) {
          double v;
          std::memcpy(&v, src, sizeof(v));
          src += sizeof(v);
          m(r, c2) = v;
        }
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
  }
}

Denoiser load_checkpoint_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  return load_checkpoint(f);
}

}  // namespace stmd
