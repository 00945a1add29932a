#include "f3r/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "f3r/binary_io.hpp"
#include "f3r/error.hpp"

namespace f3r {

namespace {

constexpr double kMinHit = 1e-9;

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  Vec3 normal = Vec3::Zero();
};

void plane_basis(const Vec3& n, Vec3& e1, Vec3& e2) {
  const Vec3 helper = std::abs(n.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  e1 = n.cross(helper).normalized();
  e2 = n.cross(e1);
}

bool intersect(const Sphere& s, const Vec3& o, const Vec3& d, Hit& hit) {
  const Vec3 oc = o - s.center;
  const double b = oc.dot(d);
  const double c = oc.squaredNorm() - s.radius * s.radius;
  const double disc = b * b - c;
  if (disc < 0.0) return false;
  const double root = std::sqrt(disc);
  double t = -b - root;
  if (t <= kMinHit) t = -b + root;
  if (t <= kMinHit || t >= hit.t) return false;
  hit.t = t;
  hit.normal = (o + t * d - s.center).normalized();
  return true;
}

bool intersect(const AxisAlignedBox& box, const Vec3& o, const Vec3& d, Hit& hit) {
  double t_near = -std::numeric_limits<double>::infinity();
  double t_far = std::numeric_limits<double>::infinity();
  int near_axis = -1;
  double near_sign = 0.0;
  int far_axis = -1;
  double far_sign = 0.0;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-15) {
      if (o[a] < box.min[a] || o[a] > box.max[a]) return false;
      continue;
    }
    double t0 = (box.min[a] - o[a]) / d[a];
    double t1 = (box.max[a] - o[a]) / d[a];
    double s0 = -1.0;  // outward normal sign of the face at t0
    double s1 = 1.0;
    if (t0 > t1) {
      std::swap(t0, t1);
      std::swap(s0, s1);
    }
    if (t0 > t_near) {
      t_near = t0;
      near_axis = a;
      near_sign = s0;
    }
    if (t1 < t_far) {
      t_far = t1;
      far_axis = a;
      far_sign = s1;
    }
  }
  if (t_near > t_far) return false;
  double t = t_near;
  int axis = near_axis;
  double sign = near_sign;
  if (t <= kMinHit) {
    t = t_far;
    axis = far_axis;
    sign = far_sign;
  }
  if (axis < 0 || t <= kMinHit || t >= hit.t) return false;
  hit.t = t;
  hit.normal = Vec3::Zero();
  hit.normal[axis] = sign;
  return true;
}

bool intersect(const PlanePatch& p, const Vec3& o, const Vec3& d, Hit& hit) {
  const double denom = d.dot(p.normal);
  if (std::abs(denom) < 1e-12) return false;
  const double t = (p.point - o).dot(p.normal) / denom;
  if (t <= kMinHit || t >= hit.t) return false;
  Vec3 e1, e2;
  plane_basis(p.normal, e1, e2);
  const Vec3 rel = o + t * d - p.point;
  if (std::abs(rel.dot(e1)) > p.half_extent || std::abs(rel.dot(e2)) > p.half_extent) return false;
  hit.t = t;
  hit.normal = p.normal;
  return true;
}

Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (;;) {
    Vec3 v(n(rng), n(rng), n(rng));
    if (v.norm() > 1e-6) return v.normalized();
  }
}

Vec3 random_albedo(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.15, 1.0);
  return {u(rng), u(rng), u(rng)};
}

ScenePrimitive random_primitive(std::mt19937_64& rng, double extent, bool anchor) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  const double kind = unit(rng);
  ScenePrimitive prim;
  // The anchor primitive is centred close to the origin so it always meets
  // the unit ball.
  const double reach = anchor ? std::min(0.3, 0.3 * extent) : 1.0;
  if (kind < 0.45) {
    const double r = extent * (0.15 + 0.25 * unit(rng));
    const double room = std::max(0.0, extent - r);
    const double span = anchor ? std::min(reach, room) : room;
    prim.shape = Sphere{Vec3(sym(rng), sym(rng), sym(rng)) * span, r};
  } else if (kind < 0.85) {
    const Vec3 half = extent * Vec3(0.1 + 0.3 * unit(rng), 0.1 + 0.3 * unit(rng), 0.1 + 0.3 * unit(rng));
    Vec3 c;
    for (int a = 0; a < 3; ++a) {
      const double room = std::max(0.0, extent - half[a]);
      c[a] = sym(rng) * (anchor ? std::min(reach, room) : room);
    }
    prim.shape = AxisAlignedBox{c - half, c + half};
  } else {
    const double h = extent * (0.3 + 0.3 * unit(rng));
    const double room = std::max(0.0, extent - h * std::numbers::sqrt2);
    const double span = anchor ? std::min(reach, room) : room;
    prim.shape = PlanePatch{Vec3(sym(rng), sym(rng), sym(rng)) * span, random_unit(rng), h};
  }
  prim.albedo = random_albedo(rng);
  return prim;
}

// Camera-to-world rotation for a camera at `eye` looking at `target`, world
// +z up, camera axes x right, y down, z forward.
RotationMatrix look_at(const Vec3& eye, const Vec3& target) {
  const Vec3 forward = (target - eye).normalized();
  Vec3 up = Vec3::UnitZ();
  if (std::abs(forward.dot(up)) > 0.999) up = Vec3::UnitY();
  const Vec3 right = forward.cross(up).normalized();
  const Vec3 down = forward.cross(right);
  RotationMatrix r;
  r.col(0) = right;
  r.col(1) = down;
  r.col(2) = forward;
  return r;
}

const Vec3& light_direction() {
  static const Vec3 light = Vec3(1.0, 1.0, 1.0).normalized();
  return light;
}

Pointmap reexpress(const Pointmap& pm, const RigidTransform& t, Frame frame) {
  Pointmap out = transform_pointmap(pm, SimilarityTransform::from_rigid(t));
  out.frame = frame;
  return out;
}

}  // namespace

Scene sample_scene(const SceneSpec& spec) {
  if (spec.extent <= 0.0 || spec.min_primitives < 1 || spec.max_primitives < spec.min_primitives) {
    throw Error(ErrorKind::Config, "invalid scene spec");
  }
  std::mt19937_64 rng(spec.rng_seed);
  std::uniform_int_distribution<std::size_t> count_dist(spec.min_primitives, spec.max_primitives);
  const std::size_t count = count_dist(rng);
  Scene scene;
  scene.reserve(count + 1);
  if (spec.table) {
    ScenePrimitive table;
    table.shape = PlanePatch{Vec3(0.0, 0.0, -0.5 * spec.extent), Vec3::UnitZ(), spec.extent};
    table.albedo = random_albedo(rng);
    scene.push_back(table);
  }
  for (std::size_t i = 0; i < count; ++i) scene.push_back(random_primitive(rng, spec.extent, i == 0));
  return scene;
}

std::vector<RigidTransform> camera_ring_world(std::size_t n_views, double radius, std::uint64_t seed) {
  if (n_views < 1) throw Error(ErrorKind::Config, "camera ring needs at least one view");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double phase = 2.0 * std::numbers::pi * unit(rng);
  const double step = 2.0 * std::numbers::pi / static_cast<double>(n_views);
  std::vector<RigidTransform> poses;
  poses.reserve(n_views);
  for (std::size_t i = 0; i < n_views; ++i) {
    const double angle = phase + step * static_cast<double>(i) + 0.25 * step * sym(rng);
    const double r = radius * (1.0 + 0.05 * sym(rng));
    const double height = radius * (0.15 + 0.3 * unit(rng));
    const Vec3 eye(r * std::cos(angle), r * std::sin(angle), height);
    const Vec3 target = 0.03 * Vec3(sym(rng), sym(rng), sym(rng));
    poses.push_back({look_at(eye, target), eye});
  }
  return poses;
}

std::vector<RigidTransform> sample_camera_ring(std::size_t n_views, double radius, std::uint64_t seed) {
  std::vector<RigidTransform> world = camera_ring_world(n_views, radius, seed);
  const RigidTransform anchor_inv = invert(world.front());
  for (auto& pose : world) pose = compose(anchor_inv, pose);
  world.front() = RigidTransform::identity();
  return world;
}

RaycastResult raycast_view(const Scene& scene, const CameraModel& camera, std::size_t h, std::size_t w) {
  if (h < 8 || w < 8) throw Error(ErrorKind::Shape, "render size must be at least 8x8");
  RaycastResult out;
  out.height = h;
  out.width = w;
  out.range.assign(h * w, 0.0);
  out.color.assign(h * w, Vec3::Zero());
  out.mask.assign(h * w, 0);
  const auto& k = camera.intrinsics;
  const Vec3 origin = camera.pose.translation;
  for (std::size_t row = 0; row < h; ++row) {
    for (std::size_t col = 0; col < w; ++col) {
      const Vec3 dir_cam = Vec3((static_cast<double>(col) + 0.5 - k.cx) / k.focal,
                                (static_cast<double>(row) + 0.5 - k.cy) / k.focal, 1.0)
                               .normalized();
      const Vec3 dir = camera.pose.rotation * dir_cam;
      Hit hit;
      const ScenePrimitive* nearest = nullptr;
      for (const auto& prim : scene) {
        const bool hit_this = std::visit([&](const auto& s) { return intersect(s, origin, dir, hit); }, prim.shape);
        if (hit_this) nearest = &prim;
      }
      if (nearest == nullptr) continue;
      const std::size_t idx = row * w + col;
      Vec3 normal = hit.normal;
      if (normal.dot(dir) > 0.0) normal = -normal;
      const double lambert = std::max(0.0, normal.dot(light_direction()));
      out.range[idx] = hit.t;
      out.color[idx] = nearest->albedo * (0.25 + 0.75 * lambert);
      out.mask[idx] = 1;
    }
  }
  return out;
}

GroundTruthSample render_sample(const Scene& scene, std::span<const CameraModel> cameras, std::size_t h,
                                std::size_t w) {
  if (cameras.empty()) throw Error(ErrorKind::Config, "render_sample needs at least one camera");
  const std::size_t n = cameras.size();
  const RigidTransform anchor_inv = invert(cameras.front().pose);
  GroundTruthSample sample;
  sample.images = ImageSet(n, h, w);
  sample.local.reserve(n);
  sample.global.reserve(n);
  sample.cameras.reserve(n);
  for (std::size_t v = 0; v < n; ++v) {
    const CameraModel& cam = cameras[v];
    const RaycastResult ray = raycast_view(scene, cam, h, w);
    if (std::none_of(ray.mask.begin(), ray.mask.end(), [](std::uint8_t m) { return m != 0; })) {
      throw Error(ErrorKind::EmptyView, "view " + std::to_string(v) + " sees no geometry");
    }
    CameraModel rel;
    rel.intrinsics = cam.intrinsics;
    rel.pose = v == 0 ? RigidTransform::identity() : compose(anchor_inv, cam.pose);

    Pointmap local(h, w, Frame::Local);
    float* img = sample.images.view(v);
    const auto& k = cam.intrinsics;
    for (std::size_t row = 0; row < h; ++row) {
      for (std::size_t col = 0; col < w; ++col) {
        const std::size_t idx = row * w + col;
        for (int c = 0; c < 3; ++c) img[idx * 3 + c] = static_cast<float>(std::clamp(ray.color[idx][c], 0.0, 1.0));
        local.valid[idx] = ray.mask[idx];
        if (!ray.mask[idx]) continue;
        const double u = static_cast<double>(col) + 0.5;
        const double vv = static_cast<double>(row) + 0.5;
        const Vec3 dir_cam = Vec3((u - k.cx) / k.focal, (vv - k.cy) / k.focal, 1.0).normalized();
        local.points[idx] = unproject(u, vv, ray.range[idx] * dir_cam.z(), k);
      }
    }
    Pointmap global = reexpress(local, rel.pose, Frame::Global);
    sample.local.push_back(std::move(local));
    sample.global.push_back(std::move(global));
    sample.cameras.push_back(rel);
  }
  return sample;
}

GroundTruthSample select_views(const GroundTruthSample& sample, std::span<const std::size_t> order) {
  if (order.empty()) throw Error(ErrorKind::Shape, "empty view selection");
  const std::size_t h = sample.images.height;
  const std::size_t w = sample.images.width;
  GroundTruthSample out;
  out.images = ImageSet(order.size(), h, w);
  const std::size_t anchor = order.front();
  if (anchor >= sample.view_count()) throw Error(ErrorKind::Shape, "view index out of range");
  const RigidTransform anchor_inv = invert(sample.cameras[anchor].pose);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t v = order[i];
    if (v >= sample.view_count()) throw Error(ErrorKind::Shape, "view index out of range");
    std::copy_n(sample.images.view(v), sample.images.view_stride(), out.images.view(i));
    out.local.push_back(sample.local[v]);
    CameraModel cam = sample.cameras[v];
    if (anchor != 0) {
      cam.pose = i == 0 ? RigidTransform::identity() : compose(anchor_inv, cam.pose);
      out.global.push_back(reexpress(sample.local[v], cam.pose, Frame::Global));
    } else {
      out.global.push_back(sample.global[v]);
    }
    out.cameras.push_back(cam);
  }
  return out;
}

GroundTruthSample generate_sample(const RenderSettings& settings, std::uint64_t seed) {
  SceneSpec spec = settings.scene;
  std::seed_seq seq{seed, std::uint64_t{0x5ce9e}};
  std::mt19937_64 seeder(seq);
  spec.rng_seed = seeder();
  const Scene scene = sample_scene(spec);
  const CameraIntrinsics k = centered_intrinsics(settings.height, settings.width, settings.fov_deg);
  for (int attempt = 0;; ++attempt) {
    const auto poses = camera_ring_world(settings.views, settings.ring_radius, seeder());
    std::vector<CameraModel> cams;
    cams.reserve(poses.size());
    for (const auto& p : poses) cams.push_back({k, p});
    try {
      return render_sample(scene, cams, settings.height, settings.width);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::EmptyView || attempt >= 16) throw;
    }
  }
}

void write_dataset(std::span<const GroundTruthSample> samples, const std::string& path) {
  io::BinaryWriter out(path);
  out.magic(std::string_view(kDatasetMagic, 8));
  out.put<std::uint32_t>(kDatasetVersion);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(samples.size()));
  std::vector<float> buf;
  for (const auto& s : samples) {
    const std::size_t n = s.view_count();
    const std::size_t h = s.images.height;
    const std::size_t w = s.images.width;
    out.put<std::uint32_t>(static_cast<std::uint32_t>(n));
    out.put<std::uint32_t>(static_cast<std::uint32_t>(h));
    out.put<std::uint32_t>(static_cast<std::uint32_t>(w));
    for (std::size_t v = 0; v < n; ++v) {
      const auto& cam = s.cameras[v];
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) out.put<double>(cam.pose.rotation(r, c));
      for (int r = 0; r < 3; ++r) out.put<double>(cam.pose.translation[r]);
      out.put<double>(cam.intrinsics.focal);
      out.put<double>(cam.intrinsics.cx);
      out.put<double>(cam.intrinsics.cy);
      out.put_array<float>(std::span<const float>(s.images.view(v), s.images.view_stride()));
      for (const Pointmap* pm : {&s.local[v], &s.global[v]}) {
        buf.resize(h * w * 3);
        for (std::size_t i = 0; i < h * w; ++i)
          for (int c = 0; c < 3; ++c) buf[i * 3 + c] = static_cast<float>(pm->points[i][c]);
        out.put_array<float>(buf);
      }
      out.put_array<std::uint8_t>(s.local[v].valid);
    }
  }
  out.close();
}

std::vector<GroundTruthSample> read_dataset(const std::string& path) {
  io::BinaryReader in(path);
  in.expect_magic(std::string_view(kDatasetMagic, 8));
  const auto version = in.get<std::uint32_t>();
  if (version != kDatasetVersion) throw Error(ErrorKind::Format, "unsupported dataset version");
  const auto count = in.get<std::uint32_t>();
  std::vector<GroundTruthSample> samples;
  std::vector<float> buf;
  for (std::uint32_t si = 0; si < count; ++si) {
    const std::size_t n = in.get<std::uint32_t>();
    const std::size_t h = in.get<std::uint32_t>();
    const std::size_t w = in.get<std::uint32_t>();
    // Guard against absurd headers before allocating.
    const std::size_t per_view = 15 * 8 + h * w * (3 * 4 * 3 + 1);
    if (n == 0 || h == 0 || w == 0 || in.remaining() / per_view < n) {
      throw Error(ErrorKind::Format, "truncated or invalid sample header");
    }
    GroundTruthSample s;
    s.images = ImageSet(n, h, w);
    for (std::size_t v = 0; v < n; ++v) {
      CameraModel cam;
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) cam.pose.rotation(r, c) = in.get<double>();
      for (int r = 0; r < 3; ++r) cam.pose.translation[r] = in.get<double>();
      cam.intrinsics.focal = in.get<double>();
      cam.intrinsics.cx = in.get<double>();
      cam.intrinsics.cy = in.get<double>();
      in.get_array<float>(std::span<float>(s.images.view(v), s.images.view_stride()));
      Pointmap local(h, w, Frame::Local);
      Pointmap global(h, w, Frame::Global);
      for (Pointmap* pm : {&local, &global}) {
        buf.resize(h * w * 3);
        in.get_array<float>(buf);
        for (std::size_t i = 0; i < h * w; ++i)
          for (int c = 0; c < 3; ++c) pm->points[i][c] = buf[i * 3 + c];
      }
      in.get_array<std::uint8_t>(local.valid);
      global.valid = local.valid;
      s.local.push_back(std::move(local));
      s.global.push_back(std::move(global));
      s.cameras.push_back(cam);
    }
    samples.push_back(std::move(s));
  }
  if (!in.at_end()) throw Error(ErrorKind::Format, "trailing bytes in dataset");
  return samples;
}

}  // namespace f3r
