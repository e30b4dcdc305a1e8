#include "tumorsynth/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "tumorsynth/errors.hpp"

namespace tumorsynth {

namespace fs = std::filesystem;

Volume::Volume(Shape3 shape, Spacing3 spacing, bool normalized)
    : shape_(shape), spacing_(spacing), normalized_(normalized), data_(shape.voxels(), 0.0f) {}

Volume::Volume(Shape3 shape, std::vector<float> data, Spacing3 spacing, bool normalized)
    : shape_(shape), spacing_(spacing), normalized_(normalized), data_(std::move(data)) {
  if (data_.size() != shape_.voxels()) {
    throw ShapeError("volume data holds " + std::to_string(data_.size()) + " values, shape needs " +
                     std::to_string(shape_.voxels()));
  }
}

void Volume::validate() const {
  if (shape_.d <= 0 || shape_.h <= 0 || shape_.w <= 0) throw ContractError("volume extents must be positive");
  if (data_.size() != shape_.voxels()) throw ContractError("volume data does not match shape");
  if (!(spacing_.d > 0 && spacing_.h > 0 && spacing_.w > 0)) throw ContractError("spacing must be positive");
  if (normalized_) {
    for (float v : data_) {
      if (!(v >= 0.0f && v <= 1.0f)) throw ContractError("normalized volume has values outside [0,1]");
    }
  }
}

TumorMask::TumorMask(Shape3 shape) : shape_(shape), data_(shape.voxels(), 0) {}

TumorMask::TumorMask(Shape3 shape, std::vector<std::uint8_t> data) : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape_.voxels()) throw ShapeError("mask data does not match shape");
  for (auto v : data_) {
    if (v > 1) throw ContractError("mask values must be 0 or 1");
  }
}

std::size_t TumorMask::count() const {
  return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
}

BoundingBox bounding_box(const TumorMask& m) {
  const auto& s = m.shape();
  BoundingBox bb{{s.d, s.h, s.w}, {-1, -1, -1}};
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        if (!m.at(z, y, x)) continue;
        bb.min = {std::min(bb.min.z, z), std::min(bb.min.y, y), std::min(bb.min.x, x)};
        bb.max = {std::max(bb.max.z, z), std::max(bb.max.y, y), std::max(bb.max.x, x)};
      }
  if (bb.max.z < 0) throw ContractError("mask is empty");
  return bb;
}

double mask_volume_mm3(const TumorMask& m, const Spacing3& sp) {
  return static_cast<double>(m.count()) * sp.d * sp.h * sp.w;
}

double equivalent_diameter_mm(double volume_mm3) {
  return 2.0 * std::cbrt(3.0 * volume_mm3 / (4.0 * std::numbers::pi));
}

// ---------------------------------------------------------------------------
// Native format

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  const auto e = s.find_last_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

fs::path stem_of(const fs::path& p) {
  const auto ext = p.extension().string();
  if (ext == ".hdr" || ext == ".raw") return fs::path(p).replace_extension();
  return p;
}

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xFF) << 24) | ((v & 0xFF00) << 8) | ((v >> 8) & 0xFF00) | (v >> 24);
  }
  return v;
}

}  // namespace

fs::path native_header_path(const fs::path& p) {
  auto s = stem_of(p);
  s += ".hdr";
  return s;
}

fs::path native_payload_path(const fs::path& p) {
  auto s = stem_of(p);
  s += ".raw";
  return s;
}

void save_volume(const fs::path& stem, const Volume& v) {
  v.validate();
  const auto& s = v.shape();
  const auto& sp = v.spacing();
  {
    std::ofstream hdr(native_header_path(stem), std::ios::binary | std::ios::trunc);
    if (!hdr) throw FormatError("cannot write header " + native_header_path(stem).string());
    std::ostringstream os;
    os.precision(17);
    os << "format=tumorsynth-volume\n"
       << "version=1\n"
       << "shape=" << s.d << "," << s.h << "," << s.w << "\n"
       << "spacing=" << sp.d << "," << sp.h << "," << sp.w << "\n"
       << "dtype=float32\n"
       << "order=DHW\n"
       << "endianness=little\n";
    hdr << os.str();
  }
  std::ofstream raw(native_payload_path(stem), std::ios::binary | std::ios::trunc);
  if (!raw) throw FormatError("cannot write payload " + native_payload_path(stem).string());
  std::vector<std::uint32_t> words(v.data().size());
  for (std::size_t i = 0; i < words.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, &v.data()[i], 4);
    words[i] = to_little(u);
  }
  raw.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
}

namespace {

Volume load_native(const fs::path& path) {
  std::ifstream hdr(native_header_path(path));
  if (!hdr) throw FormatError("missing header " + native_header_path(path).string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(hdr, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("header line without '=': " + line);
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  auto require = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("header missing key '" + key + "'");
    return it->second;
  };
  if (require("dtype") != "float32") throw FormatError("unsupported dtype " + kv["dtype"]);
  if (require("order") != "DHW") throw FormatError("unsupported order " + kv["order"]);
  if (require("endianness") != "little") throw FormatError("unsupported endianness " + kv["endianness"]);

  Shape3 shape;
  Spacing3 spacing;
  try {
    const auto dims = split(require("shape"), ',');
    const auto sps = split(require("spacing"), ',');
    if (dims.size() != 3 || sps.size() != 3) throw FormatError("shape and spacing need three components");
    shape = {std::stoi(dims[0]), std::stoi(dims[1]), std::stoi(dims[2])};
    spacing = {std::stod(sps[0]), std::stod(sps[1]), std::stod(sps[2])};
  } catch (const std::invalid_argument&) {
    throw FormatError("non-numeric shape or spacing");
  } catch (const std::out_of_range&) {
    throw FormatError("shape or spacing out of range");
  }
  if (shape.d <= 0 || shape.h <= 0 || shape.w <= 0) throw FormatError("non-positive shape");
  if (!(spacing.d > 0 && spacing.h > 0 && spacing.w > 0)) throw FormatError("non-positive spacing");

  const auto payload = native_payload_path(path);
  std::error_code ec;
  const auto bytes = fs::file_size(payload, ec);
  if (ec) throw FormatError("missing payload " + payload.string());
  if (bytes != shape.voxels() * 4) {
    throw CorruptionError("payload " + payload.string() + " holds " + std::to_string(bytes) +
                          " bytes, header implies " + std::to_string(shape.voxels() * 4));
  }
  std::ifstream raw(payload, std::ios::binary);
  std::vector<std::uint32_t> words(shape.voxels());
  raw.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(bytes));
  if (!raw) throw CorruptionError("short read on " + payload.string());
  std::vector<float> data(words.size());
  for (std::size_t i = 0; i < words.size(); ++i) {
    const std::uint32_t u = to_little(words[i]);
    std::memcpy(&data[i], &u, 4);
  }
  return Volume(shape, std::move(data), spacing, false);
}

// NIfTI-1 single file (.nii), little endian.
template <class T>
T read_at(const std::vector<char>& buf, std::size_t off) {
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  return v;
}

Volume load_nifti(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 348) throw FormatError("file shorter than a NIfTI-1 header");
  if (read_at<std::int32_t>(buf, 0) != 348) throw FormatError("sizeof_hdr is not 348 (big-endian or not NIfTI-1)");
  const std::string magic(buf.data() + 344, 3);
  if (magic != "n+1") throw FormatError("unsupported NIfTI magic (only single-file n+1)");

  std::array<std::int16_t, 8> dim{};
  for (int i = 0; i < 8; ++i) dim[i] = read_at<std::int16_t>(buf, 40 + 2 * i);
  if (dim[0] < 3 || dim[0] > 7) throw FormatError("NIfTI dim[0] out of range");
  for (int i = 4; i <= dim[0]; ++i) {
    if (dim[i] > 1) throw FormatError("only single-frame NIfTI volumes are supported");
  }
  const std::int16_t datatype = read_at<std::int16_t>(buf, 70);
  std::array<float, 8> pixdim{};
  for (int i = 0; i < 8; ++i) pixdim[i] = read_at<float>(buf, 76 + 4 * i);
  const float vox_offset = read_at<float>(buf, 108);
  float slope = read_at<float>(buf, 112);
  const float inter = read_at<float>(buf, 116);
  if (slope == 0.0f || !std::isfinite(slope)) slope = 1.0f;

  // NIfTI stores x fastest; x maps to W, y to H, z to D.
  const Shape3 shape{dim[3], dim[2], dim[1]};
  if (shape.d <= 0 || shape.h <= 0 || shape.w <= 0) throw FormatError("non-positive NIfTI dims");
  Spacing3 spacing{std::abs(pixdim[3]), std::abs(pixdim[2]), std::abs(pixdim[1])};
  if (!(spacing.d > 0 && spacing.h > 0 && spacing.w > 0)) throw FormatError("non-positive NIfTI pixdim");

  std::size_t elem = 0;
  switch (datatype) {
    case 2: elem = 1; break;    // uint8
    case 4: elem = 2; break;    // int16
    case 8: elem = 4; break;    // int32
    case 16: elem = 4; break;   // float32
    case 64: elem = 8; break;   // float64
    default: throw FormatError("unsupported NIfTI datatype " + std::to_string(datatype));
  }
  const auto offset = static_cast<std::size_t>(vox_offset);
  const std::size_t need = shape.voxels() * elem;
  if (offset < 348 || buf.size() < offset + need) {
    throw CorruptionError("NIfTI payload shorter than dims imply");
  }
  std::vector<float> data(shape.voxels());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::size_t p = offset + i * elem;
    double raw = 0.0;
    switch (datatype) {
      case 2: raw = static_cast<unsigned char>(buf[p]); break;
      case 4: raw = read_at<std::int16_t>(buf, p); break;
      case 8: raw = read_at<std::int32_t>(buf, p); break;
      case 16: raw = read_at<float>(buf, p); break;
      case 64: raw = read_at<double>(buf, p); break;
    }
    data[i] = static_cast<float>(raw * slope + inter);
  }
  return Volume(shape, std::move(data), spacing, false);
}

}  // namespace

Volume load_volume(const fs::path& path, VolumeFormat format) {
  return format == VolumeFormat::nifti ? load_nifti(path) : load_native(path);
}

TumorMask load_mask(const fs::path& path, VolumeFormat format) {
  const Volume v = load_volume(path, format);
  std::vector<std::uint8_t> bits(v.data().size());
  for (std::size_t i = 0; i < bits.size(); ++i) {
    const float x = v.data()[i];
    if (x == 0.0f) {
      bits[i] = 0;
    } else if (x == 1.0f) {
      bits[i] = 1;
    } else {
      throw FormatError("mask file contains non-binary value");
    }
  }
  return TumorMask(v.shape(), std::move(bits));
}

void save_mask(const fs::path& stem, const TumorMask& m, const Spacing3& spacing) {
  std::vector<float> data(m.data().begin(), m.data().end());
  save_volume(stem, Volume(m.shape(), std::move(data), spacing, false));
}

// ---------------------------------------------------------------------------

Volume preprocess(const Volume& v) {
  if (v.normalized()) throw ContractError("preprocess called on an already-normalized volume");
  Volume out(v.shape(), v.spacing(), true);
  auto src = v.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<float>(normalize_hu(src[i]));
  return out;
}

Volume resample(const Volume& v, const Spacing3& target) {
  if (!(target.d > 0 && target.h > 0 && target.w > 0)) throw ContractError("target spacing must be positive");
  const auto& s = v.shape();
  const auto& sp = v.spacing();
  auto extent = [](int n, double from, double to) {
    return std::max(1, static_cast<int>(std::lround(n * from / to)));
  };
  const Shape3 ns{extent(s.d, sp.d, target.d), extent(s.h, sp.h, target.h), extent(s.w, sp.w, target.w)};
  Volume out(ns, target, v.normalized());
  auto coord = [](int i, double to, double from, int n, int& i0, double& t) {
    double c = i * to / from;
    c = std::clamp(c, 0.0, static_cast<double>(n - 1));
    i0 = std::min(static_cast<int>(std::floor(c)), n - 1);
    t = c - i0;
  };
  for (int z = 0; z < ns.d; ++z) {
    int z0;
    double tz;
    coord(z, target.d, sp.d, s.d, z0, tz);
    const int z1 = std::min(z0 + 1, s.d - 1);
    for (int y = 0; y < ns.h; ++y) {
      int y0;
      double ty;
      coord(y, target.h, sp.h, s.h, y0, ty);
      const int y1 = std::min(y0 + 1, s.h - 1);
      for (int x = 0; x < ns.w; ++x) {
        int x0;
        double tx;
        coord(x, target.w, sp.w, s.w, x0, tx);
        const int x1 = std::min(x0 + 1, s.w - 1);
        auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
        const double c00 = lerp(v.at(z0, y0, x0), v.at(z0, y0, x1), tx);
        const double c01 = lerp(v.at(z0, y1, x0), v.at(z0, y1, x1), tx);
        const double c10 = lerp(v.at(z1, y0, x0), v.at(z1, y0, x1), tx);
        const double c11 = lerp(v.at(z1, y1, x0), v.at(z1, y1, x1), tx);
        out.at(z, y, x) = static_cast<float>(lerp(lerp(c00, c01, ty), lerp(c10, c11, ty), tz));
      }
    }
  }
  return out;
}

Patch crop_patch_at(const Volume& v, const TumorMask& m, Shape3 size, Index3 center) {
  const auto& s = v.shape();
  if (m.shape() != s) throw ShapeError("mask and volume shapes differ");
  if (size.d <= 0 || size.h <= 0 || size.w <= 0) throw ContractError("patch size must be positive");
  if (size.d > s.d || size.h > s.h || size.w > s.w) throw ContractError("patch larger than volume");
  auto start = [](int c, int n, int dim) { return std::clamp(c - n / 2, 0, dim - n); };
  const Index3 o{start(center.z, size.d, s.d), start(center.y, size.h, s.h), start(center.x, size.w, s.w)};
  Patch p{Volume(size, v.spacing(), v.normalized()), TumorMask(size), o};
  for (int z = 0; z < size.d; ++z)
    for (int y = 0; y < size.h; ++y)
      for (int x = 0; x < size.w; ++x) {
        p.volume.at(z, y, x) = v.at(o.z + z, o.y + y, o.x + x);
        p.mask.at(z, y, x) = m.at(o.z + z, o.y + y, o.x + x);
      }
  return p;
}

Patch crop_patch(const Volume& v, const TumorMask& m, Shape3 size) {
  if (m.shape() != v.shape()) throw ShapeError("mask and volume shapes differ");
  const auto bb = bounding_box(m);
  const Index3 c{(bb.min.z + bb.max.z) / 2, (bb.min.y + bb.max.y) / 2, (bb.min.x + bb.max.x) / 2};
  return crop_patch_at(v, m, size, c);
}

TumorMask magnify_mask(const TumorMask& m, double factor) {
  if (!(factor >= 1.0)) throw ContractError("magnification factor must be >= 1");
  const auto& s = m.shape();
  double cz = 0, cy = 0, cx = 0;
  std::size_t n = 0;
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x)
        if (m.at(z, y, x)) {
          cz += z;
          cy += y;
          cx += x;
          ++n;
        }
  if (n == 0) throw ContractError("cannot magnify an empty mask");
  cz /= n;
  cy /= n;
  cx /= n;
  TumorMask out(s);
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        if (m.at(z, y, x)) {
          out.at(z, y, x) = 1;
          continue;
        }
        const int sz = static_cast<int>(std::lround(cz + (z - cz) / factor));
        const int sy = static_cast<int>(std::lround(cy + (y - cy) / factor));
        const int sx = static_cast<int>(std::lround(cx + (x - cx) / factor));
        if (m.contains(sz, sy, sx) && m.at(sz, sy, sx)) out.at(z, y, x) = 1;
      }
  return out;
}

Volume apply_inverse_mask(const Volume& v, const TumorMask& m) {
  if (m.shape() != v.shape()) throw ShapeError("mask and volume shapes differ");
  Volume out = v;
  auto d = out.data();
  auto md = m.data();
  for (std::size_t i = 0; i < d.size(); ++i)
    if (md[i]) d[i] = 0.0f;
  return out;
}

}  // namespace tumorsynth
