#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "f3r/geometry.hpp"

namespace f3r {

struct Sphere {
  Vec3 center;
  double radius = 1.0;
};

struct AxisAlignedBox {
  Vec3 min;
  Vec3 max;
};

/// Square patch of side 2 * half_extent centred on `point`.
struct PlanePatch {
  Vec3 point;
  Vec3 normal;
  double half_extent = 1.0;
};

struct ScenePrimitive {
  std::variant<Sphere, AxisAlignedBox, PlanePatch> shape;
  Vec3 albedo{0.5, 0.5, 0.5};
};

using Scene = std::vector<ScenePrimitive>;

struct SceneSpec {
  std::size_t min_primitives = 2;
  std::size_t max_primitives = 5;
  double extent = 1.0;  // primitives stay inside [-extent, extent]^3
  bool table = true;    // horizontal patch under the objects, counted in addition
  std::uint64_t rng_seed = 0;
};

/// Exact per-view targets: images, local/global pointmaps sharing one validity
/// mask per view, and camera-to-world poses with view 0 at the identity.
struct GroundTruthSample {
  ImageSet images;
  std::vector<Pointmap> local;
  std::vector<Pointmap> global;
  std::vector<CameraModel> cameras;

  std::size_t view_count() const { return cameras.size(); }
  const std::vector<std::uint8_t>& mask(std::size_t view) const { return local[view].valid; }
};

Scene sample_scene(const SceneSpec& spec);

/// Ring poses in the scene frame, before re-expression. Each camera looks
/// (up to a small jitter) at the origin.
std::vector<RigidTransform> camera_ring_world(std::size_t n_views, double radius, std::uint64_t seed);
/// Same ring re-expressed so that pose[0] is the identity.
std::vector<RigidTransform> sample_camera_ring(std::size_t n_views, double radius, std::uint64_t seed);

struct RaycastResult {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> range;  // distance along the unit pixel ray; 0 where no hit
  std::vector<Vec3> color;
  std::vector<std::uint8_t> mask;
};

/// Camera pose is expressed in the scene frame.
RaycastResult raycast_view(const Scene& scene, const CameraModel& camera, std::size_t h, std::size_t w);

/// Renders every camera (scene-frame poses) and re-expresses all poses and
/// global pointmaps in the first camera's frame. Throws EmptyView.
GroundTruthSample render_sample(const Scene& scene, std::span<const CameraModel> cameras, std::size_t h,
                                std::size_t w);

/// Sub-sample views in the given order. When order[0] is not view 0 the
/// global frame is moved to the new first camera.
GroundTruthSample select_views(const GroundTruthSample& sample, std::span<const std::size_t> order);

struct RenderSettings {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t views = 4;
  double fov_deg = 60.0;
  double ring_radius = 2.5;
  SceneSpec scene;
};

/// Scene + ring + render for one sample; retries ring seeds if a view is empty.
GroundTruthSample generate_sample(const RenderSettings& settings, std::uint64_t seed);

inline constexpr char kDatasetMagic[] = "F3RDATA1";
inline constexpr std::uint32_t kDatasetVersion = 1;

void write_dataset(std::span<const GroundTruthSample> samples, const std::string& path);
std::vector<GroundTruthSample> read_dataset(const std::string& path);

}  // namespace f3r
