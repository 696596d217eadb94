#include "end2reg/io.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace end2reg {

namespace {

using nlohmann::json;

enum class PlyType { i8, u8, i16, u16, i32, u32, f32, f64 };

std::optional<PlyType> parse_type(const std::string& s) {
  if (s == "char" || s == "int8") return PlyType::i8;
  if (s == "uchar" || s == "uint8") return PlyType::u8;
  if (s == "short" || s == "int16") return PlyType::i16;
  if (s == "ushort" || s == "uint16") return PlyType::u16;
  if (s == "int" || s == "int32") return PlyType::i32;
  if (s == "uint" || s == "uint32") return PlyType::u32;
  if (s == "float" || s == "float32") return PlyType::f32;
  if (s == "double" || s == "float64") return PlyType::f64;
  return std::nullopt;
}

std::size_t type_size(PlyType t) {
  switch (t) {
    case PlyType::i8:
    case PlyType::u8:
      return 1;
    case PlyType::i16:
    case PlyType::u16:
      return 2;
    case PlyType::i32:
    case PlyType::u32:
    case PlyType::f32:
      return 4;
    case PlyType::f64:
      return 8;
  }
  return 0;
}

template <class T>
T read_le(const char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

double decode(PlyType t, const char* p) {
  switch (t) {
    case PlyType::i8:
      return read_le<std::int8_t>(p);
    case PlyType::u8:
      return read_le<std::uint8_t>(p);
    case PlyType::i16:
      return read_le<std::int16_t>(p);
    case PlyType::u16:
      return read_le<std::uint16_t>(p);
    case PlyType::i32:
      return read_le<std::int32_t>(p);
    case PlyType::u32:
      return read_le<std::uint32_t>(p);
    case PlyType::f32:
      return read_le<float>(p);
    case PlyType::f64:
      return read_le<double>(p);
  }
  return 0.0;
}

struct Property {
  std::string name;
  PlyType type;
};

struct Element {
  std::string name;
  std::size_t count = 0;
  std::vector<Property> props;
  bool has_list = false;
};

[[noreturn]] void fail(const std::filesystem::path& path, std::size_t offset, const std::string& what) {
  throw DataError(path.string() + ": " + what + " (byte " + std::to_string(offset) + ")");
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), {}};
}

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 json_vec(const json& j) {
  if (!j.is_array() || j.size() != 3) throw DataError("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

json config_json(const PhantomConfig& c) {
  return {{"n_vertebrae", c.n_vertebrae},
          {"points_pre", c.points_pre},
          {"points_intra", c.points_intra},
          {"exposure_fraction", c.exposure_fraction},
          {"clutter_fraction", c.clutter_fraction},
          {"noise_sigma", c.noise_sigma},
          {"occlusion_patches", c.occlusion_patches},
          {"occlusion_radius", c.occlusion_radius},
          {"tissue_clearance", c.tissue_clearance},
          {"max_translation", c.max_translation},
          {"max_rotation_deg", c.max_rotation_deg},
          {"max_retries", c.max_retries},
          {"seed", c.seed}};
}

}  // namespace

void save_ply(const std::filesystem::path& path, const PointCloud& cloud, PlyEncoding encoding) {
  cloud.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  const bool binary = encoding == PlyEncoding::binary_little_endian;
  os << "ply\nformat " << (binary ? "binary_little_endian" : "ascii") << " 1.0\n"
     << "element vertex " << cloud.size() << "\n"
     << "property double x\nproperty double y\nproperty double z\n";
  if (cloud.colors) os << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  if (cloud.labels) os << "property int label\n";
  os << "end_header\n";
  auto channel = [](double c) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(c, 0.0, 1.0) * 255.0));
  };
  if (!binary) os.precision(17);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud.positions[i];
    if (binary) {
      static_assert(std::endian::native == std::endian::little);
      for (int k = 0; k < 3; ++k) os.write(reinterpret_cast<const char*>(&p[k]), sizeof(double));
      if (cloud.colors)
        for (int k = 0; k < 3; ++k) {
          const auto c = channel((*cloud.colors)[i][k]);
          os.write(reinterpret_cast<const char*>(&c), 1);
        }
      if (cloud.labels) {
        const std::int32_t l = (*cloud.labels)[i];
        os.write(reinterpret_cast<const char*>(&l), 4);
      }
    } else {
      os << p.x() << ' ' << p.y() << ' ' << p.z();
      if (cloud.colors)
        for (int k = 0; k < 3; ++k) os << ' ' << static_cast<int>(channel((*cloud.colors)[i][k]));
      if (cloud.labels) os << ' ' << (*cloud.labels)[i];
      os << '\n';
    }
  }
  if (!os) throw DataError("write failed for " + path.string());
}

PointCloud load_ply(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  std::size_t pos = 0;
  auto next_line = [&]() -> std::string {
    const auto nl = data.find('\n', pos);
    if (nl == std::string::npos) fail(path, pos, "header is not terminated by end_header");
    std::string line = data.substr(pos, nl - pos);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    pos = nl + 1;
    return line;
  };
  if (next_line() != "ply") fail(path, 0, "missing 'ply' magic");
  bool binary = false;
  std::vector<Element> elements;
  for (;;) {
    const std::size_t at = pos;
    const std::string line = next_line();
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "end_header") break;
    if (word == "comment" || word == "obj_info" || word.empty()) continue;
    if (word == "format") {
      std::string fmt, version;
      ls >> fmt >> version;
      if (fmt == "binary_little_endian") binary = true;
      else if (fmt != "ascii") fail(path, at, "unsupported format '" + fmt + "'");
    } else if (word == "element") {
      Element e;
      long long count = -1;
      ls >> e.name >> count;
      if (count < 0) fail(path, at, "malformed element line");
      e.count = static_cast<std::size_t>(count);
      elements.push_back(e);
    } else if (word == "property") {
      if (elements.empty()) fail(path, at, "property before any element");
      std::string type, name;
      ls >> type;
      if (type == "list") {
        elements.back().has_list = true;
        continue;
      }
      ls >> name;
      auto t = parse_type(type);
      if (!t || name.empty()) fail(path, at, "malformed property line '" + line + "'");
      elements.back().props.push_back({name, *t});
    } else {
      fail(path, at, "unexpected header keyword '" + word + "'");
    }
  }
  if (elements.empty() || elements.front().name != "vertex")
    fail(path, pos, "the first element must be 'vertex'");
  const Element& v = elements.front();
  if (v.has_list) fail(path, pos, "list properties on vertices are not supported");
  if (v.count == 0) fail(path, pos, "no vertices");
  auto index_of = [&](const std::string& n) -> int {
    for (std::size_t i = 0; i < v.props.size(); ++i)
      if (v.props[i].name == n) return static_cast<int>(i);
    return -1;
  };
  const int ix = index_of("x"), iy = index_of("y"), iz = index_of("z");
  if (ix < 0 || iy < 0 || iz < 0) fail(path, pos, "vertex element lacks x/y/z");
  const int ir = index_of("red"), ig = index_of("green"), ib = index_of("blue");
  const int il = index_of("label");
  const bool colors = ir >= 0 && ig >= 0 && ib >= 0;

  PointCloud cloud;
  cloud.positions.resize(v.count);
  if (colors) cloud.colors.emplace(v.count);
  if (il >= 0) cloud.labels.emplace(v.count);
  std::vector<double> row(v.props.size());
  std::size_t stride = 0;
  for (const auto& p : v.props) stride += type_size(p.type);

  std::istringstream text;
  if (!binary) text.str(data.substr(pos));
  for (std::size_t i = 0; i < v.count; ++i) {
    if (binary) {
      if (pos + stride > data.size())
        fail(path, pos, "truncated payload at vertex " + std::to_string(i) + " of " + std::to_string(v.count));
      std::size_t off = pos;
      for (std::size_t k = 0; k < v.props.size(); ++k) {
        row[k] = decode(v.props[k].type, data.data() + off);
        off += type_size(v.props[k].type);
      }
      pos += stride;
    } else {
      for (std::size_t k = 0; k < v.props.size(); ++k)
        if (!(text >> row[k]))
          fail(path, pos + static_cast<std::size_t>(std::max<std::streamoff>(0, text.tellg())),
               "truncated or malformed ascii payload at vertex " + std::to_string(i));
    }
    cloud.positions[i] = Vec3(row[ix], row[iy], row[iz]);
    if (colors) {
      const bool bytes = v.props[ir].type == PlyType::u8;
      const double s = bytes ? 255.0 : 1.0;
      (*cloud.colors)[i] = Vec3(row[ir] / s, row[ig] / s, row[ib] / s);
    }
    if (il >= 0) (*cloud.labels)[i] = static_cast<int>(row[il]);
  }
  try {
    cloud.validate();
  } catch (const GeometryError& e) {
    fail(path, pos, e.what());
  }
  return cloud;
}

void save_pose(const std::filesystem::path& path, const RigidTransform& t,
               const std::optional<Normalization>& normalization) {
  json j;
  j["rotation"] = json::array();
  for (int r = 0; r < 3; ++r)
    j["rotation"].push_back(json::array({t.rotation(r, 0), t.rotation(r, 1), t.rotation(r, 2)}));
  j["translation"] = vec_json(t.translation);
  if (normalization)
    j["normalization"] = {{"center", vec_json(normalization->center)}, {"scale", normalization->scale}};
  std::ofstream os(path);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os << j.dump(2) << '\n';
}

PoseRecord load_pose(const std::filesystem::path& path) {
  PoseRecord rec;
  try {
    const json j = json::parse(read_file(path));
    const auto& r = j.at("rotation");
    if (!r.is_array() || r.size() != 3) throw DataError("rotation must be 3x3");
    for (int i = 0; i < 3; ++i) rec.transform.rotation.row(i) = json_vec(r[i]).transpose();
    rec.transform.translation = json_vec(j.at("translation"));
    if (j.contains("normalization")) {
      const auto& n = j["normalization"];
      rec.normalization = Normalization{json_vec(n.at("center")), n.at("scale").get<double>()};
      if (!(rec.normalization->scale > 0.0)) throw DataError("normalization scale must be positive");
    }
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": malformed pose file: " + e.what());
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  if (!rec.transform.is_valid(1e-6))
    throw DataError(path.string() + ": rotation is not orthonormal with determinant +1");
  return rec;
}

void write_sample(const std::filesystem::path& dir, const RegistrationSample& s, const PhantomConfig& config) {
  std::filesystem::create_directories(dir);
  save_ply(dir / "pre.ply", s.preoperative);
  save_ply(dir / "intra.ply", s.intraoperative);
  save_pose(dir / "pose.json", s.t_gt, s.normalization);
  {
    std::ofstream os(dir / "landmarks.csv");
    os.precision(17);
    os << "x,y,z\n";
    for (const auto& l : s.landmarks) os << l.x() << ',' << l.y() << ',' << l.z() << '\n';
  }
  {
    std::ofstream os(dir / "mask.txt");
    for (int m : s.gt_mask) os << m << '\n';
  }
  json meta = {{"seed", s.seed}, {"attempt", s.attempt}, {"occluded_fraction", s.occluded_fraction},
               {"config", config_json(config)}};
  std::ofstream(dir / "meta.json") << meta.dump(2) << '\n';
}

RegistrationSample read_sample(const std::filesystem::path& dir) {
  RegistrationSample s;
  s.preoperative = load_ply(dir / "pre.ply");
  s.intraoperative = load_ply(dir / "intra.ply");
  auto pose = load_pose(dir / "pose.json");
  s.t_gt = pose.transform;
  s.normalization = pose.normalization.value_or(Normalization{Vec3::Zero(), kAssumedMetersPerUnit});
  {
    std::ifstream in(dir / "landmarks.csv");
    if (!in) throw DataError("cannot open " + (dir / "landmarks.csv").string());
    std::string line;
    std::getline(in, line);
    for (std::size_t n = 2; std::getline(in, line); ++n) {
      if (line.empty()) continue;
      Vec3 p;
      char c1 = 0, c2 = 0;
      std::istringstream ls(line);
      if (!(ls >> p.x() >> c1 >> p.y() >> c2 >> p.z()) || c1 != ',' || c2 != ',')
        throw DataError((dir / "landmarks.csv").string() + ": malformed line " + std::to_string(n));
      s.landmarks.push_back(p);
    }
  }
  if (std::ifstream in{dir / "mask.txt"}) {
    int m;
    while (in >> m) s.gt_mask.push_back(m);
    if (s.gt_mask.size() != s.intraoperative.size())
      throw DataError((dir / "mask.txt").string() + ": " + std::to_string(s.gt_mask.size()) +
                      " labels for " + std::to_string(s.intraoperative.size()) + " points");
  }
  if (std::ifstream in{dir / "meta.json"}) {
    try {
      const json meta = json::parse(in);
      s.seed = meta.value("seed", std::uint64_t{0});
      s.attempt = meta.value("attempt", std::size_t{0});
      s.occluded_fraction = meta.value("occluded_fraction", 0.0);
    } catch (const json::exception& e) {
      throw DataError((dir / "meta.json").string() + ": " + e.what());
    }
  }
  return s;
}

void write_manifest(const std::filesystem::path& root, const std::vector<std::string>& samples,
                    const PhantomConfig& config) {
  std::filesystem::create_directories(root);
  json j = {{"samples", samples}, {"generator", config_json(config)}};
  std::ofstream(root / "manifest.json") << j.dump(2) << '\n';
}

std::vector<std::filesystem::path> read_manifest(const std::filesystem::path& root) {
  std::vector<std::filesystem::path> out;
  try {
    const json j = json::parse(read_file(root / "manifest.json"));
    for (const auto& s : j.at("samples")) out.push_back(root / s.get<std::string>());
  } catch (const json::exception& e) {
    throw DataError((root / "manifest.json").string() + ": " + e.what());
  }
  return out;
}

}  // namespace end2reg
