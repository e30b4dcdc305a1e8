#include "tumorsynth/nn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "tumorsynth/errors.hpp"

namespace tumorsynth::nn {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'T', 'S', 'C', 'K'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const std::string& kind, const json& config,
                     const ParameterStore& params) {
  json header;
  header["kind"] = kind;
  header["config"] = config;
  header["arrays"] = json::array();
  for (const auto& p : params.all()) header["arrays"].push_back({{"name", p.name}, {"shape", p.value.shape}});
  const std::string h = header.dump();

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw FormatError("cannot write checkpoint " + path.string());
    out.write(kMagic, 4);
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = h.size();
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    std::vector<float> buf;
    for (const auto& p : params.all()) {
      buf.assign(p.value.data.begin(), p.value.data.end());
      out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!out) throw FormatError("short write on checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointContents load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("missing checkpoint " + path.string());
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a checkpoint: " + path.string());
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  if (len > (1u << 26)) throw CorruptionError("implausible checkpoint header length");
  std::string h(len, '\0');
  in.read(h.data(), static_cast<std::streamsize>(len));
  if (!in) throw CorruptionError("truncated checkpoint header");

  CheckpointContents c;
  json header;
  try {
    header = json::parse(h);
    c.kind = header.at("kind").get<std::string>();
    c.config = header.at("config");
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad checkpoint header: ") + e.what());
  }
  std::vector<float> buf;
  for (const auto& a : header.at("arrays")) {
    auto shape = a.at("shape").get<std::vector<int>>();
    Tensor t(shape);
    buf.resize(t.size());
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in) throw CorruptionError("truncated checkpoint payload at " + a.at("name").get<std::string>());
    std::copy(buf.begin(), buf.end(), t.data.begin());
    c.params.add(a.at("name").get<std::string>(), std::move(t));
  }
  in.peek();
  if (!in.eof()) throw CorruptionError("trailing bytes after checkpoint payload");
  return c;
}

void assign_parameters(ParameterStore& dst, const ParameterStore& src) {
  if (dst.all().size() != src.all().size()) {
    throw ShapeError("checkpoint has " + std::to_string(src.all().size()) + " arrays, model expects " +
                     std::to_string(dst.all().size()));
  }
  for (auto& p : dst.all()) {
    const auto* s = src.find(p.name);
    if (!s) throw ShapeError("checkpoint lacks array " + p.name);
    if (s->value.shape != p.value.shape) {
      throw ShapeError("array " + p.name + " has shape " + shape_string(s->value.shape) + ", model expects " +
                       shape_string(p.value.shape));
    }
    p.value = s->value;
  }
}

}  // namespace tumorsynth::nn
