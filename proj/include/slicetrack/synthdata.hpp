#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "slicetrack/common.hpp"
#include "slicetrack/geometry.hpp"
#include "slicetrack/rng.hpp"
#include "slicetrack/tensor.hpp"

namespace slicetrack::synth {

namespace fs = std::filesystem;
using nlohmann::json;

// Instance centers are in voxel-center coordinates (slice/voxel centers sit
// at integers); continuous corner coordinates used by Box3D are center+0.5.

struct VolumeSpec {
  std::array<int, 3> shape{64, 64, 32};        // nx, ny, nz
  std::array<double, 3> spacing{1.0, 1.0, 3.0};  // mm per voxel
  std::array<int, 2> n_instances{3, 6};
  std::array<double, 2> instance_radius_mm{3.0, 10.0};  // per-axis radius range
  std::array<double, 2> target_contrast{0.1, 0.3};      // fraction of dynamic range
  double noise_sigma = 0.05;
  std::array<int, 2> n_distractors{2, 5};
  std::array<double, 2> distractor_radius_mm{1.5, 4.0};
  std::array<double, 2> distractor_length_mm{20.0, 60.0};
  double max_overlap = 0.10;  // pairwise volumetric overlap tolerance
  std::uint64_t seed = 0;

  void validate() const {
    require(shape[0] >= 8 && shape[1] >= 8, "VolumeSpec: in-plane shape must be >= 8");
    require(shape[2] >= 4, "VolumeSpec: nz must be >= 4");
    require(spacing[0] > 0 && spacing[1] > 0 && spacing[2] > 0,
            "VolumeSpec: spacing must be positive");
    require(spacing[0] == spacing[1], "VolumeSpec: in-plane spacing must be isotropic (sx == sy)");
    require(spacing[2] >= spacing[0], "VolumeSpec: sz must be >= sx (anisotropic or isotropic)");
    require(n_instances[0] >= 0 && n_instances[0] <= n_instances[1],
            "VolumeSpec: bad n_instances range");
    require(instance_radius_mm[0] > 0 && instance_radius_mm[0] <= instance_radius_mm[1],
            "VolumeSpec: bad instance_radius range");
    require(target_contrast[0] > 0 && target_contrast[0] <= target_contrast[1],
            "VolumeSpec: bad target_contrast range");
    require(noise_sigma >= 0, "VolumeSpec: noise_sigma must be >= 0");
    require(n_distractors[0] >= 0 && n_distractors[0] <= n_distractors[1],
            "VolumeSpec: bad n_distractors range");
    require(distractor_radius_mm[0] > 0 &&
                distractor_radius_mm[0] <= distractor_radius_mm[1],
            "VolumeSpec: bad distractor_radius range");
    require(distractor_length_mm[0] > 0 && distractor_length_mm[0] <= distractor_length_mm[1],
            "VolumeSpec: bad distractor_length range");
    require(max_overlap >= 0 && max_overlap <= 1, "VolumeSpec: bad max_overlap");
  }
};

struct Volume {
  std::array<int, 3> shape{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<float> data;  // x-fastest

  float& at(int x, int y, int z) {
    return data[static_cast<std::size_t>(x) +
                static_cast<std::size_t>(shape[0]) * (y + static_cast<std::size_t>(shape[1]) * z)];
  }
  float at(int x, int y, int z) const {
    return data[static_cast<std::size_t>(x) +
                static_cast<std::size_t>(shape[0]) * (y + static_cast<std::size_t>(shape[1]) * z)];
  }
};

struct Instance3D {
  long id = 0;
  std::array<double, 3> center{0, 0, 0};  // voxel-center coordinates
  std::array<double, 3> radii{1, 1, 1};   // voxels
  double contrast = 0.0;
};

// Tight box of the ellipse cross-section at integer slice z, in voxel-center
// coordinates; absent when the plane misses the ellipsoid.
inline std::optional<geom::Box2D> instance_slice_box(const Instance3D& inst, int z) {
  const double dz = (static_cast<double>(z) - inst.center[2]) / inst.radii[2];
  if (std::abs(static_cast<double>(z) - inst.center[2]) >= inst.radii[2]) return std::nullopt;
  const double s = std::sqrt(1.0 - dz * dz);
  return geom::Box2D{inst.center[0], inst.center[1], 2.0 * inst.radii[0] * s,
                     2.0 * inst.radii[1] * s};
}

// Same section but normalized to [0,1] slice coordinates (network currency).
inline std::optional<geom::Box2D> normalized_slice_box(const Instance3D& inst, int z, int nx,
                                                       int ny) {
  auto box = instance_slice_box(inst, z);
  if (!box) return std::nullopt;
  return geom::Box2D{(box->cx + 0.5) / nx, (box->cy + 0.5) / ny, box->w / nx, box->h / ny};
}

// Ground-truth Box3D assembled exactly like predictions are: the union of the
// per-slice sections over the slices where the instance is visible.
inline std::optional<geom::Box3D> instance_box3d(const Instance3D& inst, int nx, int ny) {
  const int z_lo = static_cast<int>(std::ceil(inst.center[2] - inst.radii[2]));
  const int z_hi = static_cast<int>(std::floor(inst.center[2] + inst.radii[2]));
  std::vector<std::pair<int, geom::Box2D>> slices;
  for (int z = z_lo; z <= z_hi; ++z) {
    auto box = normalized_slice_box(inst, z, nx, ny);
    if (box) slices.emplace_back(z, *box);
  }
  if (slices.empty()) return std::nullopt;
  return geom::box3d_from_stack(slices, nx, ny);
}

namespace detail {

// Fraction of the smaller ellipsoid's volume inside the other, estimated on a
// fixed lattice of sample points. Deterministic.
inline double overlap_fraction(const Instance3D& a, const Instance3D& b) {
  const double vol_a = a.radii[0] * a.radii[1] * a.radii[2];
  const double vol_b = b.radii[0] * b.radii[1] * b.radii[2];
  const Instance3D& small = vol_a <= vol_b ? a : b;
  const Instance3D& big = vol_a <= vol_b ? b : a;
  const int res = 8;
  long inside_small = 0, inside_both = 0;
  for (int i = 0; i < res; ++i)
    for (int j = 0; j < res; ++j)
      for (int k = 0; k < res; ++k) {
        const double u = -1.0 + (2.0 * i + 1.0) / res;
        const double v = -1.0 + (2.0 * j + 1.0) / res;
        const double w = -1.0 + (2.0 * k + 1.0) / res;
        if (u * u + v * v + w * w > 1.0) continue;
        ++inside_small;
        const double px = small.center[0] + u * small.radii[0];
        const double py = small.center[1] + v * small.radii[1];
        const double pz = small.center[2] + w * small.radii[2];
        const double qx = (px - big.center[0]) / big.radii[0];
        const double qy = (py - big.center[1]) / big.radii[1];
        const double qz = (pz - big.center[2]) / big.radii[2];
        if (qx * qx + qy * qy + qz * qz <= 1.0) ++inside_both;
      }
  return inside_small ? static_cast<double>(inside_both) / inside_small : 0.0;
}

struct Capsule {
  std::array<double, 3> p0_mm, p1_mm;  // segment endpoints in mm
  double radius_mm;
  double contrast;
};

inline double point_segment_dist_mm(const std::array<double, 3>& p, const Capsule& cap) {
  const double dx = cap.p1_mm[0] - cap.p0_mm[0];
  const double dy = cap.p1_mm[1] - cap.p0_mm[1];
  const double dz = cap.p1_mm[2] - cap.p0_mm[2];
  const double len2 = dx * dx + dy * dy + dz * dz;
  double t = 0.0;
  if (len2 > 0.0) {
    t = ((p[0] - cap.p0_mm[0]) * dx + (p[1] - cap.p0_mm[1]) * dy + (p[2] - cap.p0_mm[2]) * dz) /
        len2;
    t = std::clamp(t, 0.0, 1.0);
  }
  const double ex = p[0] - (cap.p0_mm[0] + t * dx);
  const double ey = p[1] - (cap.p0_mm[1] + t * dy);
  const double ez = p[2] - (cap.p0_mm[2] + t * dz);
  return std::sqrt(ex * ex + ey * ey + ez * ez);
}

// soft shell: full weight inside 80% of the radius, linear falloff to zero
inline double soft_profile(double rho2) {
  if (rho2 >= 1.0) return 0.0;
  return std::min(1.0, (1.0 - rho2) / 0.36);
}

}  // namespace detail

// Deterministic synthetic volume: low-contrast ellipsoidal targets plus
// z-elongated capsule distractors over a noisy background.
inline std::pair<Volume, std::vector<Instance3D>> generate_volume(const VolumeSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const int nx = spec.shape[0], ny = spec.shape[1], nz = spec.shape[2];

  Volume vol;
  vol.shape = spec.shape;
  vol.spacing = spec.spacing;
  vol.data.assign(static_cast<std::size_t>(nx) * ny * nz, 0.0f);

  // place target instances with a rejection budget
  const int n_inst = static_cast<int>(rng.uniform_int(spec.n_instances[0], spec.n_instances[1]));
  std::vector<Instance3D> instances;
  const int budget_per_instance = 200;
  for (int i = 0; i < n_inst; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < budget_per_instance && !placed; ++attempt) {
      Instance3D inst;
      inst.id = i + 1;
      for (int axis = 0; axis < 3; ++axis) {
        const double r_mm = rng.uniform(spec.instance_radius_mm[0], spec.instance_radius_mm[1]);
        inst.radii[axis] = r_mm / spec.spacing[axis];
      }
      if (inst.radii[2] < 1.0) continue;  // must be visible on at least one slice
      bool fits = true;
      for (int axis = 0; axis < 3; ++axis) {
        const double lo = inst.radii[axis];
        const double hi = spec.shape[axis] - 1 - inst.radii[axis];
        if (lo > hi) {
          fits = false;
          break;
        }
        inst.center[axis] = rng.uniform(lo, hi);
      }
      if (!fits) continue;
      inst.contrast = rng.uniform(spec.target_contrast[0], spec.target_contrast[1]);
      bool ok = true;
      for (const auto& other : instances) {
        if (detail::overlap_fraction(inst, other) > spec.max_overlap) {
          ok = false;
          break;
        }
      }
      if (!ok) continue;
      instances.push_back(inst);
      placed = true;
    }
    if (!placed)
      throw ConfigError("generate_volume: placement budget exceeded for instance " +
                        std::to_string(i + 1) + " (spec too crowded)");
  }

  // distractor capsules, oriented within 20 degrees of the z axis
  const int n_dis =
      static_cast<int>(rng.uniform_int(spec.n_distractors[0], spec.n_distractors[1]));
  std::vector<detail::Capsule> capsules;
  for (int i = 0; i < n_dis; ++i) {
    detail::Capsule cap;
    cap.radius_mm = rng.uniform(spec.distractor_radius_mm[0], spec.distractor_radius_mm[1]);
    const double length = rng.uniform(spec.distractor_length_mm[0], spec.distractor_length_mm[1]);
    const double theta = rng.uniform(0.0, 20.0 * M_PI / 180.0);
    const double phi = rng.uniform(0.0, 2.0 * M_PI);
    const std::array<double, 3> dir{std::sin(theta) * std::cos(phi),
                                    std::sin(theta) * std::sin(phi), std::cos(theta)};
    std::array<double, 3> center_mm;
    for (int axis = 0; axis < 3; ++axis)
      center_mm[axis] = rng.uniform(0.0, (spec.shape[axis] - 1) * spec.spacing[axis]);
    for (int axis = 0; axis < 3; ++axis) {
      cap.p0_mm[axis] = center_mm[axis] - 0.5 * length * dir[axis];
      cap.p1_mm[axis] = center_mm[axis] + 0.5 * length * dir[axis];
    }
    cap.contrast = rng.uniform(spec.target_contrast[0], spec.target_contrast[1]);
    capsules.push_back(cap);
  }

  // rasterize targets
  for (const auto& inst : instances) {
    const int x0 = std::max(0, static_cast<int>(std::floor(inst.center[0] - inst.radii[0])));
    const int x1 = std::min(nx - 1, static_cast<int>(std::ceil(inst.center[0] + inst.radii[0])));
    const int y0 = std::max(0, static_cast<int>(std::floor(inst.center[1] - inst.radii[1])));
    const int y1 = std::min(ny - 1, static_cast<int>(std::ceil(inst.center[1] + inst.radii[1])));
    const int z0 = std::max(0, static_cast<int>(std::floor(inst.center[2] - inst.radii[2])));
    const int z1 = std::min(nz - 1, static_cast<int>(std::ceil(inst.center[2] + inst.radii[2])));
    for (int z = z0; z <= z1; ++z)
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          const double ux = (x - inst.center[0]) / inst.radii[0];
          const double uy = (y - inst.center[1]) / inst.radii[1];
          const double uz = (z - inst.center[2]) / inst.radii[2];
          const double w = detail::soft_profile(ux * ux + uy * uy + uz * uz);
          if (w > 0.0) vol.at(x, y, z) += static_cast<float>(inst.contrast * w);
        }
  }

  // rasterize distractors (mm-space capsules)
  for (const auto& cap : capsules) {
    const double pad = cap.radius_mm;
    const int x0 = std::max(
        0, static_cast<int>(std::floor((std::min(cap.p0_mm[0], cap.p1_mm[0]) - pad) / spec.spacing[0])));
    const int x1 = std::min(
        nx - 1,
        static_cast<int>(std::ceil((std::max(cap.p0_mm[0], cap.p1_mm[0]) + pad) / spec.spacing[0])));
    const int y0 = std::max(
        0, static_cast<int>(std::floor((std::min(cap.p0_mm[1], cap.p1_mm[1]) - pad) / spec.spacing[1])));
    const int y1 = std::min(
        ny - 1,
        static_cast<int>(std::ceil((std::max(cap.p0_mm[1], cap.p1_mm[1]) + pad) / spec.spacing[1])));
    const int z0 = std::max(
        0, static_cast<int>(std::floor((std::min(cap.p0_mm[2], cap.p1_mm[2]) - pad) / spec.spacing[2])));
    const int z1 = std::min(
        nz - 1,
        static_cast<int>(std::ceil((std::max(cap.p0_mm[2], cap.p1_mm[2]) + pad) / spec.spacing[2])));
    for (int z = z0; z <= z1; ++z)
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          const std::array<double, 3> p_mm{x * spec.spacing[0], y * spec.spacing[1],
                                           z * spec.spacing[2]};
          const double d = detail::point_segment_dist_mm(p_mm, cap);
          const double rho = d / cap.radius_mm;
          const double w = detail::soft_profile(rho * rho);
          if (w > 0.0) vol.at(x, y, z) += static_cast<float>(cap.contrast * w);
        }
  }

  // additive Gaussian noise, fixed voxel order
  if (spec.noise_sigma > 0.0) {
    for (auto& v : vol.data) v += static_cast<float>(rng.normal(0.0, spec.noise_sigma));
  }

  return {std::move(vol), std::move(instances)};
}

// ---- dataset persistence ------------------------------------------------

struct VolumeRecord {
  long id = 0;
  Volume volume;
  std::vector<Instance3D> instances;
};

struct Dataset {
  VolumeSpec spec;
  std::vector<VolumeRecord> volumes;
  std::map<std::string, std::vector<long>> splits;
  std::string config_hash;
};

inline void to_json(json& j, const VolumeSpec& s) {
  j = json{{"shape", s.shape},
           {"spacing", s.spacing},
           {"n_instances", s.n_instances},
           {"instance_radius_mm", s.instance_radius_mm},
           {"target_contrast", s.target_contrast},
           {"noise_sigma", s.noise_sigma},
           {"n_distractors", s.n_distractors},
           {"distractor_radius_mm", s.distractor_radius_mm},
           {"distractor_length_mm", s.distractor_length_mm},
           {"max_overlap", s.max_overlap},
           {"seed", s.seed}};
}

inline void from_json(const json& j, VolumeSpec& s) {
  j.at("shape").get_to(s.shape);
  j.at("spacing").get_to(s.spacing);
  j.at("n_instances").get_to(s.n_instances);
  j.at("instance_radius_mm").get_to(s.instance_radius_mm);
  j.at("target_contrast").get_to(s.target_contrast);
  j.at("noise_sigma").get_to(s.noise_sigma);
  j.at("n_distractors").get_to(s.n_distractors);
  j.at("distractor_radius_mm").get_to(s.distractor_radius_mm);
  j.at("distractor_length_mm").get_to(s.distractor_length_mm);
  if (j.contains("max_overlap")) j.at("max_overlap").get_to(s.max_overlap);
  j.at("seed").get_to(s.seed);
}

namespace detail {

inline json instance_to_json(const Instance3D& inst) {
  return json{{"id", inst.id},
              {"center", inst.center},
              {"radii", inst.radii},
              {"contrast", inst.contrast}};
}

inline Instance3D instance_from_json(const json& j) {
  Instance3D inst;
  j.at("id").get_to(inst.id);
  j.at("center").get_to(inst.center);
  j.at("radii").get_to(inst.radii);
  j.at("contrast").get_to(inst.contrast);
  return inst;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  out << text;
  if (!out) throw DataError("write failed: " + path.string());
}

inline json read_json_file(const fs::path& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw DataError(std::string("missing ") + what + ": " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed ") + what + " (" + e.what() + "): " + path.string());
  }
  return j;
}

}  // namespace detail

inline void write_volume_files(const fs::path& dir, const VolumeRecord& rec) {
  const std::string id = std::to_string(rec.id);
  json header{{"shape", rec.volume.shape}, {"spacing", rec.volume.spacing}};
  detail::write_text(dir / ("vol_" + id + ".json"), header.dump(2) + "\n");

  std::ofstream raw(dir / ("vol_" + id + ".raw"), std::ios::binary);
  if (!raw) throw DataError("cannot open for writing: " + (dir / ("vol_" + id + ".raw")).string());
  raw.write(reinterpret_cast<const char*>(rec.volume.data.data()),
            static_cast<std::streamsize>(rec.volume.data.size() * sizeof(float)));
  if (!raw) throw DataError("write failed: " + (dir / ("vol_" + id + ".raw")).string());

  json ann = json::array();
  for (const auto& inst : rec.instances) ann.push_back(detail::instance_to_json(inst));
  detail::write_text(dir / ("ann_" + id + ".json"), ann.dump(2) + "\n");
}

inline void write_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  json manifest{{"format_version", 1},
                {"rng", Rng::kAlgorithm},
                {"spec", ds.spec},
                {"config_hash", ds.config_hash}};
  json ids = json::array();
  for (const auto& rec : ds.volumes) ids.push_back(rec.id);
  manifest["volume_ids"] = ids;
  if (!ds.splits.empty()) {
    json splits = json::object();
    for (const auto& [name, list] : ds.splits) splits[name] = list;
    manifest["splits"] = splits;
    for (const auto& [name, list] : ds.splits) {
      json sub = manifest;
      sub["volume_ids"] = list;
      sub.erase("splits");
      sub["split"] = name;
      detail::write_text(dir / ("manifest_" + name + ".json"), sub.dump(2) + "\n");
    }
  }
  detail::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  for (const auto& rec : ds.volumes) write_volume_files(dir, rec);
}

inline VolumeRecord read_volume_record(const fs::path& dir, long id) {
  VolumeRecord rec;
  rec.id = id;
  const std::string ids = std::to_string(id);
  const json header = detail::read_json_file(dir / ("vol_" + ids + ".json"), "volume header");
  try {
    header.at("shape").get_to(rec.volume.shape);
    header.at("spacing").get_to(rec.volume.spacing);
  } catch (const json::exception& e) {
    throw DataError("malformed volume header (" + std::string(e.what()) + "): " +
                    (dir / ("vol_" + ids + ".json")).string());
  }

  const fs::path raw_path = dir / ("vol_" + ids + ".raw");
  std::ifstream raw(raw_path, std::ios::binary | std::ios::ate);
  if (!raw) throw DataError("missing raster: " + raw_path.string());
  const auto bytes = static_cast<std::size_t>(raw.tellg());
  const std::size_t expect = static_cast<std::size_t>(rec.volume.shape[0]) *
                             rec.volume.shape[1] * rec.volume.shape[2] * sizeof(float);
  if (bytes != expect)
    throw DataError("raster size mismatch (" + std::to_string(bytes) + " bytes, expected " +
                    std::to_string(expect) + "): " + raw_path.string());
  rec.volume.data.resize(expect / sizeof(float));
  raw.seekg(0);
  raw.read(reinterpret_cast<char*>(rec.volume.data.data()), static_cast<std::streamsize>(expect));
  if (!raw) throw DataError("read failed: " + raw_path.string());

  const json ann = detail::read_json_file(dir / ("ann_" + ids + ".json"), "annotations");
  if (!ann.is_array())
    throw DataError("malformed annotations (expected array): " +
                    (dir / ("ann_" + ids + ".json")).string());
  for (const auto& item : ann) rec.instances.push_back(detail::instance_from_json(item));
  return rec;
}

// Reads manifest.json (or a per-split manifest when `split` is given) and all
// volumes it lists, in manifest order.
inline Dataset read_dataset(const fs::path& dir, const std::string& split = "") {
  const fs::path manifest_path =
      split.empty() ? dir / "manifest.json" : dir / ("manifest_" + split + ".json");
  const json manifest = detail::read_json_file(manifest_path, "manifest");
  Dataset ds;
  try {
    manifest.at("spec").get_to(ds.spec);
    if (manifest.contains("config_hash")) manifest.at("config_hash").get_to(ds.config_hash);
    if (manifest.contains("splits")) {
      for (const auto& [name, list] : manifest.at("splits").items())
        ds.splits[name] = list.get<std::vector<long>>();
    }
    for (const auto& id : manifest.at("volume_ids"))
      ds.volumes.push_back(read_volume_record(dir, id.get<long>()));
  } catch (const json::exception& e) {
    throw DataError("malformed manifest (" + std::string(e.what()) + "): " +
                    manifest_path.string());
  }
  return ds;
}

// [n_slices, ny, nx] stack centered on z with border-clamped indices; the
// network's 2.5D input.
inline Tensor slice_stack(const Volume& vol, int z, int n_slices) {
  const int nx = vol.shape[0], ny = vol.shape[1], nz = vol.shape[2];
  const int half = n_slices / 2;
  Tensor out({n_slices, ny, nx});
  std::size_t p = 0;
  for (int s = 0; s < n_slices; ++s) {
    const int zi = std::clamp(z - half + s, 0, nz - 1);
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x, ++p) out.data[p] = vol.at(x, y, zi);
  }
  return out;
}

}  // namespace slicetrack::synth
