#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "drn/geometry.hpp"

namespace drn {

struct ObjectAnnotation {
  int class_id = 0;
  Septet box;  // input-pixel coordinates, dx = dy = 0
  bool operator==(const ObjectAnnotation&) const = default;
};

struct Provenance {
  std::uint64_t seed = 0;
  std::string generator_version;
  double rotation_deg = 0.0;
  bool operator==(const Provenance&) const = default;
};

struct SceneAnnotation {
  std::string image_id;
  int width = 0;
  int height = 0;
  std::vector<ObjectAnnotation> objects;
  Provenance provenance;
  bool operator==(const SceneAnnotation&) const = default;
};

}  // namespace drn
