#pragma once

// Synthetic densely packed scenes, rotation augmentation and the
// annotation file format.
//
// Annotation files are JSON Lines, one scene per line:
//   {"image": "scene_0003.png", "width": 256, "height": 256,
//    "objects": [{"class": 0, "cx": .., "cy": .., "w": .., "h": .., "theta_deg": ..}],
//    "provenance": {"seed": 7, "generator_version": "..", "rotation_deg": 0}}
// Detection dumps add a "score" to every object.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "drn/annotation.hpp"
#include "drn/image.hpp"

namespace drn {

inline constexpr const char* kGeneratorVersion = "drn-synth/1";

struct SceneConfig {
  int width = 256;
  int height = 256;
  int min_objects = 30;
  int max_objects = 80;
  double min_size = 10.0;  // box side range in pixels
  double max_size = 28.0;
  double min_angle_deg = -45.0;
  double max_angle_deg = 45.0;
  double max_iou = 0.05;
  int num_classes = 1;
  double noise = 10.0;  // background noise amplitude, grey levels
  int attempts_per_object = 2000;

  void validate() const;
  bool operator==(const SceneConfig&) const = default;
};

struct Scene {
  Image image;
  SceneAnnotation annotation;
};

Scene generate_scene(const SceneConfig& config, std::uint64_t seed, const std::string& image_id);

// Rotates about the image center onto a canvas grown to the rotated
// extent, padded with the mean border color.
Scene rotate_scene(const Scene& scene, double degrees);

std::vector<Scene> rotate_dataset(const std::vector<Scene>& scenes,
                                  const std::vector<double>& degrees, bool keep_originals);

// Uniform rescale into a width x height canvas, top-left aligned, padded
// with the mean color. Boxes scale with the image.
Scene letterbox(const Scene& scene, int width, int height);

struct AnnotationReadResult {
  std::vector<SceneAnnotation> scenes;
  std::vector<std::string> warnings;
};

// Throws std::runtime_error naming the line and field on malformed or
// invalid records. Angles outside [-90, 90) are wrapped with a warning.
AnnotationReadResult read_annotations(const std::filesystem::path& path);
void write_annotations(const std::filesystem::path& path, const std::vector<SceneAnnotation>& scenes);

// Writes `<dir>/images/<id>` and `<dir>/annotations.jsonl`.
void write_dataset(const std::filesystem::path& dir, const std::vector<Scene>& scenes);
std::vector<Scene> load_dataset(const std::filesystem::path& dir);

// Writes `text` to `path` through a temporary file and a rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace drn
