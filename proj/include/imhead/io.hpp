#pragma once

// File formats: binary little-endian PLY point clouds, OBJ meshes with an
// optional scalar sidecar (JSON array aligned by vertex index), JSON helpers.

#include "imhead/geometry.hpp"

#include "json.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace imhead {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "imhead assumes a little-endian host");

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// PLY

inline std::string encode_ply(const PointCloud& pc) {
  std::ostringstream hdr;
  hdr << "ply\nformat binary_little_endian 1.0\nelement vertex " << pc.size() << "\n"
      << "property float x\nproperty float y\nproperty float z\n";
  if (pc.has_normals()) hdr << "property float nx\nproperty float ny\nproperty float nz\n";
  hdr << "end_header\n";
  std::string out = hdr.str();
  const int stride = pc.has_normals() ? 6 : 3;
  std::vector<float> buf(static_cast<std::size_t>(pc.size() * stride));
  for (Eigen::Index i = 0; i < pc.size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      buf[static_cast<std::size_t>(i * stride + c)] = static_cast<float>(pc.points(i, c));
      if (pc.has_normals()) buf[static_cast<std::size_t>(i * stride + 3 + c)] = static_cast<float>((*pc.normals)(i, c));
    }
  }
  out.append(reinterpret_cast<const char*>(buf.data()), buf.size() * sizeof(float));
  return out;
}

/// Parses binary little-endian float32 vertex PLY with x,y,z and optional nx,ny,nz.
inline PointCloud decode_ply(const std::string& bytes) {
  const std::string end_tag = "end_header\n";
  const auto end = bytes.find(end_tag);
  if (bytes.rfind("ply\n", 0) != 0 || end == std::string::npos) throw IoError("not a PLY file");
  std::istringstream hdr(bytes.substr(0, end));
  std::string line;
  Eigen::Index count = -1;
  std::vector<std::string> props;
  bool in_vertex = false;
  while (std::getline(hdr, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt != "binary_little_endian") throw IoError("unsupported PLY format " + fmt);
    } else if (key == "element") {
      std::string name;
      ls >> name;
      in_vertex = name == "vertex";
      if (in_vertex) ls >> count;
    } else if (key == "property" && in_vertex) {
      std::string type, name;
      ls >> type >> name;
      if (type != "float" && type != "float32") throw IoError("unsupported PLY property type " + type);
      props.push_back(name);
    }
  }
  if (count < 0) throw IoError("PLY without vertex element");
  auto find = [&](const char* n) {
    const auto it = std::find(props.begin(), props.end(), n);
    return it == props.end() ? -1 : static_cast<int>(it - props.begin());
  };
  const int ix = find("x"), iy = find("y"), iz = find("z");
  const int inx = find("nx"), iny = find("ny"), inz = find("nz");
  if (ix < 0 || iy < 0 || iz < 0) throw IoError("PLY lacks x/y/z");
  const bool normals = inx >= 0 && iny >= 0 && inz >= 0;
  const auto stride = props.size();
  const std::size_t need = static_cast<std::size_t>(count) * stride * sizeof(float);
  const std::size_t body = end + end_tag.size();
  if (bytes.size() - body < need) throw IoError("truncated PLY body");
  std::vector<float> buf(static_cast<std::size_t>(count) * stride);
  std::memcpy(buf.data(), bytes.data() + body, need);
  Points pts(count, 3), nrm(normals ? count : 0, 3);
  for (Eigen::Index i = 0; i < count; ++i) {
    const float* r = buf.data() + static_cast<std::size_t>(i) * stride;
    pts.row(i) << r[ix], r[iy], r[iz];
    if (normals) nrm.row(i) << r[inx], r[iny], r[inz];
  }
  if (!normals) return PointCloud(std::move(pts));
  // float32 storage; restore exact unit length.
  nrm.rowwise().normalize();
  return PointCloud(std::move(pts), std::move(nrm));
}

inline void write_ply(const fs::path& path, const PointCloud& pc) { detail::write_file(path, encode_ply(pc)); }
inline PointCloud read_ply(const fs::path& path) { return decode_ply(detail::read_file(path)); }

// ---------------------------------------------------------------------------
// OBJ + scalar sidecar

inline std::string encode_obj(const TriMesh& mesh) {
  std::ostringstream out;
  out.precision(9);
  for (Eigen::Index v = 0; v < mesh.num_vertices(); ++v) {
    out << "v " << mesh.vertices(v, 0) << ' ' << mesh.vertices(v, 1) << ' ' << mesh.vertices(v, 2) << '\n';
  }
  for (Eigen::Index f = 0; f < mesh.num_faces(); ++f) {
    out << "f " << mesh.faces(f, 0) + 1 << ' ' << mesh.faces(f, 1) + 1 << ' ' << mesh.faces(f, 2) + 1 << '\n';
  }
  return out.str();
}

inline TriMesh decode_obj(const std::string& text) {
  std::vector<Vec3> verts;
  std::vector<std::array<int, 3>> faces;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "v") {
      Vec3 p;
      ls >> p.x() >> p.y() >> p.z();
      if (!ls) throw IoError("malformed OBJ vertex: " + line);
      verts.push_back(p);
    } else if (key == "f") {
      std::vector<int> idx;
      std::string tok;
      while (ls >> tok) idx.push_back(std::stoi(tok.substr(0, tok.find('/'))));
      if (idx.size() < 3) throw IoError("malformed OBJ face: " + line);
      for (auto& i : idx) i = i < 0 ? static_cast<int>(verts.size()) + i : i - 1;
      for (std::size_t k = 1; k + 1 < idx.size(); ++k) faces.push_back({idx[0], idx[k], idx[k + 1]});
    }
  }
  TriMesh mesh;
  mesh.vertices.resize(static_cast<Eigen::Index>(verts.size()), 3);
  for (std::size_t i = 0; i < verts.size(); ++i) mesh.vertices.row(static_cast<Eigen::Index>(i)) = verts[i].transpose();
  mesh.faces.resize(static_cast<Eigen::Index>(faces.size()), 3);
  for (std::size_t f = 0; f < faces.size(); ++f) {
    for (int k = 0; k < 3; ++k) {
      const int v = faces[f][static_cast<std::size_t>(k)];
      if (v < 0 || v >= static_cast<int>(verts.size())) throw IoError("OBJ face index out of range");
      mesh.faces(static_cast<Eigen::Index>(f), k) = v;
    }
  }
  return mesh;
}

inline json scalars_to_json(const Eigen::VectorXd& s) { return json(std::vector<double>(s.data(), s.data() + s.size())); }

inline fs::path sidecar_path(const fs::path& obj) {
  fs::path p = obj;
  p += ".json";
  return p;
}

/// Writes FILE.obj and, when the mesh carries scalars, FILE.obj.json beside it.
inline void write_obj(const fs::path& path, const TriMesh& mesh) {
  detail::write_file(path, encode_obj(mesh));
  if (mesh.scalars) detail::write_file(sidecar_path(path), scalars_to_json(*mesh.scalars).dump());
}

inline TriMesh read_obj(const fs::path& path) {
  TriMesh mesh = decode_obj(detail::read_file(path));
  const fs::path side = sidecar_path(path);
  if (fs::exists(side)) {
    const auto values = json::parse(detail::read_file(side)).get<std::vector<double>>();
    if (static_cast<Eigen::Index>(values.size()) != mesh.num_vertices()) throw IoError("sidecar length mismatch");
    mesh.scalars = Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
  }
  return mesh;
}

// ---------------------------------------------------------------------------
// JSON

inline json read_json(const fs::path& path) {
  try {
    return json::parse(detail::read_file(path));
  } catch (const json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const json& j) { detail::write_file(path, j.dump(2) + "\n"); }

inline json to_json(const Eigen::VectorXd& v) { return json(std::vector<double>(v.data(), v.data() + v.size())); }

inline Eigen::VectorXd vector_from_json(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace imhead
