#pragma once

// Synthetic multi-scale shape scenes with exact rasterized labels, PGM and
// dataset directory IO, and the IoU / mIoU metric.
//
// A scene is defined in scale-independent "base" coordinates. Rendering at
// scale s zooms about the image center, so the same seed yields the same
// layout at every scale with all radii multiplied by s. Shapes are kept
// disjoint in base coordinates, which keeps them disjoint at every scale.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "scaleadapt/objective.hpp"
#include "scaleadapt/rng.hpp"
#include "scaleadapt/tensor.hpp"

namespace scaleadapt {

inline constexpr int kNumClasses = 4;  // background, disk, square, triangle

enum class ShapeKind : int { Disk = 0, Square = 1, Triangle = 2 };

struct ShapeSpec {
  ShapeKind kind;
  double cx, cy;      // base coordinates
  double radius;      // base units
  double intensity;   // [0, 1]
};

struct GenConfig {
  int min_shapes = 1;
  int max_shapes = 4;
  double radius_min = 4.0;
  double radius_max = 10.0;
  double noise_sigma = 0.05;
  // Per-class intensity band centers and half-width; bands overlap so
  // intensity alone does not identify the class.
  double background = 0.15;
  double band_center[3] = {0.40, 0.60, 0.80};
  double band_half_width = 0.15;
};

template <class T>
struct Scene {
  Tensor<T> image;   // (1, 1, h, w) in [0, 1]
  LabelMap labels;   // classes 0..3
  double scale = 1.0;
  std::uint64_t seed = 0;
  std::vector<ShapeSpec> shapes;
};

namespace detail {

inline bool point_in_shape(const ShapeSpec& s, double x, double y) {
  const double dx = x - s.cx;
  const double dy = y - s.cy;
  switch (s.kind) {
    case ShapeKind::Disk:
      return dx * dx + dy * dy <= s.radius * s.radius;
    case ShapeKind::Square:
      return std::abs(dx) <= s.radius && std::abs(dy) <= s.radius;
    case ShapeKind::Triangle: {
      // Equilateral triangle pointing up, inscribed in the radius.
      if (dy > s.radius * 0.5 || dy < -s.radius) return false;
      const double half_width = (dy + s.radius) / std::sqrt(3.0);
      return std::abs(dx) <= half_width;
    }
  }
  return false;
}

}  // namespace detail

// Deterministic in (seed, size, scale, cfg). Placement happens entirely in
// base coordinates so the sampled layout is independent of the render scale.
template <class T>
Scene<T> gen_scene(std::uint64_t seed, int size, double scale,
                   const GenConfig& cfg = GenConfig{}) {
  if (!(scale > 0.0)) throw std::invalid_argument("gen_scene: scale must be > 0");
  Rng rng(seed);
  Scene<T> scene;
  scene.scale = scale;
  scene.seed = seed;
  scene.image = Tensor<T>(1, 1, size, size);
  scene.labels.h = size;
  scene.labels.w = size;
  scene.labels.values.assign(static_cast<std::size_t>(size) * size, 0);

  const int target = rng.uniform_int(cfg.min_shapes, cfg.max_shapes);
  for (int si = 0; si < target; ++si) {
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      ShapeSpec s;
      s.kind = static_cast<ShapeKind>(rng.uniform_int(0, 2));
      // The first shape stays near the center so it remains in view under
      // the strongest zooms.
      if (si == 0) {
        s.cx = rng.uniform(0.40 * size, 0.60 * size);
        s.cy = rng.uniform(0.40 * size, 0.60 * size);
      } else {
        s.cx = rng.uniform(0.10 * size, 0.90 * size);
        s.cy = rng.uniform(0.10 * size, 0.90 * size);
      }
      s.radius = rng.uniform(cfg.radius_min, cfg.radius_max);
      const int band = static_cast<int>(s.kind);
      s.intensity = cfg.band_center[band] +
                    rng.uniform(-cfg.band_half_width, cfg.band_half_width);
      bool overlaps = false;
      for (const ShapeSpec& other : scene.shapes) {
        const double dx = s.cx - other.cx;
        const double dy = s.cy - other.cy;
        const double min_dist = s.radius + other.radius + 1.0;
        if (dx * dx + dy * dy < min_dist * min_dist) {
          overlaps = true;
          break;
        }
      }
      if (!overlaps) {
        scene.shapes.push_back(s);
        placed = true;
      }
    }
    // Placement failure just yields a scene with fewer shapes.
  }

  // Rasterize: pixel centers mapped to base coordinates by a zoom about the
  // image center.
  const double half = 0.5 * size;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double bx = half + (x + 0.5 - half) / scale;
      const double by = half + (y + 0.5 - half) / scale;
      double value = cfg.background;
      int label = 0;
      for (const ShapeSpec& s : scene.shapes)
        if (detail::point_in_shape(s, bx, by)) {
          value = s.intensity;
          label = static_cast<int>(s.kind) + 1;
          break;
        }
      scene.image.at(0, 0, y, x) = T(value);
      scene.labels.at(y, x) = label;
    }

  if (cfg.noise_sigma > 0.0) {
    for (T& v : scene.image.data) {
      const double noisy = static_cast<double>(v) +
                           cfg.noise_sigma * rng.normal();
      v = T(std::clamp(noisy, 0.0, 1.0));
    }
  }
  return scene;
}

struct IouResult {
  std::vector<double> per_class;  // NaN where the class is absent from both
  double miou = 0.0;
};

inline IouResult iou(const LabelMap& pred, const LabelMap& truth,
                     int num_classes, int ignore_label = -1) {
  if (pred.h != truth.h || pred.w != truth.w)
    throw shape_error("iou: pred " + std::to_string(pred.h) + "x" +
                      std::to_string(pred.w) + " vs truth " +
                      std::to_string(truth.h) + "x" + std::to_string(truth.w));
  std::vector<long long> inter(num_classes, 0), uni(num_classes, 0);
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const int p = pred.values[i];
    const int t = truth.values[i];
    if (t == ignore_label) continue;
    if (p < 0 || p >= num_classes || t < 0 || t >= num_classes)
      throw std::invalid_argument("iou: label out of range");
    if (p == t) {
      ++inter[p];
      ++uni[p];
    } else {
      ++uni[p];
      ++uni[t];
    }
  }
  IouResult r;
  r.per_class.assign(num_classes, std::nan(""));
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < num_classes; ++c)
    if (uni[c] > 0) {
      r.per_class[c] = static_cast<double>(inter[c]) / uni[c];
      sum += r.per_class[c];
      ++present;
    }
  r.miou = present > 0 ? sum / present : 1.0;
  return r;
}

// --- PGM IO (binary P5, big-endian sample order for 16-bit) ---

namespace detail {

inline void skip_pgm_space(std::istream& is) {
  int ch = is.peek();
  while (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r' || ch == '#') {
    if (ch == '#') {
      std::string line;
      std::getline(is, line);
    } else {
      is.get();
    }
    ch = is.peek();
  }
}

inline io_error pgm_error(const std::string& path, std::istream& is,
                          const std::string& what) {
  const auto pos = is.tellg();
  return io_error("PGM parse error in " + path + " at byte offset " +
                  std::to_string(static_cast<long long>(pos)) + ": " + what);
}

}  // namespace detail

template <class T>
void write_pgm16(const std::string& path, const Tensor<T>& image) {
  if (image.n != 1 || image.c != 1)
    throw shape_error("write_pgm16: expected (1,1,h,w), got " +
                      image.dims_str());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("cannot open for writing: " + path);
  os << "P5\n" << image.w << " " << image.h << "\n65535\n";
  for (T v : image.data) {
    const double clamped = std::clamp(static_cast<double>(v), 0.0, 1.0);
    const std::uint16_t q =
        static_cast<std::uint16_t>(std::lround(clamped * 65535.0));
    const char buf[2] = {static_cast<char>(q >> 8), static_cast<char>(q & 0xff)};
    os.write(buf, 2);
  }
  if (!os) throw io_error("write failed: " + path);
}

template <class T>
Tensor<T> read_pgm16(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot open: " + path);
  std::string magic;
  is >> magic;
  if (magic != "P5") throw detail::pgm_error(path, is, "expected P5 magic");
  detail::skip_pgm_space(is);
  int w, h, maxval;
  if (!(is >> w)) throw detail::pgm_error(path, is, "missing width");
  detail::skip_pgm_space(is);
  if (!(is >> h)) throw detail::pgm_error(path, is, "missing height");
  detail::skip_pgm_space(is);
  if (!(is >> maxval)) throw detail::pgm_error(path, is, "missing maxval");
  if (maxval != 65535)
    throw detail::pgm_error(path, is, "expected maxval 65535, got " +
                                          std::to_string(maxval));
  is.get();  // single whitespace before payload
  Tensor<T> out(1, 1, h, w);
  for (T& v : out.data) {
    unsigned char buf[2];
    if (!is.read(reinterpret_cast<char*>(buf), 2))
      throw detail::pgm_error(path, is, "truncated payload");
    const std::uint16_t q =
        static_cast<std::uint16_t>((buf[0] << 8) | buf[1]);
    v = T(q / 65535.0);
  }
  return out;
}

inline void write_pgm8(const std::string& path,
                       const std::vector<std::uint8_t>& values, int h, int w) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("cannot open for writing: " + path);
  os << "P5\n" << w << " " << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(values.data()),
           static_cast<std::streamsize>(values.size()));
  if (!os) throw io_error("write failed: " + path);
}

inline void write_label_pgm(const std::string& path, const LabelMap& labels) {
  std::vector<std::uint8_t> raw(labels.values.size());
  for (std::size_t i = 0; i < raw.size(); ++i)
    raw[i] = static_cast<std::uint8_t>(labels.values[i]);
  write_pgm8(path, raw, labels.h, labels.w);
}

inline LabelMap read_label_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot open: " + path);
  std::string magic;
  is >> magic;
  if (magic != "P5") throw detail::pgm_error(path, is, "expected P5 magic");
  detail::skip_pgm_space(is);
  int w, h, maxval;
  if (!(is >> w) ) throw detail::pgm_error(path, is, "missing width");
  detail::skip_pgm_space(is);
  if (!(is >> h)) throw detail::pgm_error(path, is, "missing height");
  detail::skip_pgm_space(is);
  if (!(is >> maxval)) throw detail::pgm_error(path, is, "missing maxval");
  if (maxval != 255)
    throw detail::pgm_error(path, is, "expected maxval 255, got " +
                                          std::to_string(maxval));
  is.get();
  LabelMap out;
  out.h = h;
  out.w = w;
  out.values.resize(static_cast<std::size_t>(h) * w);
  for (int& v : out.values) {
    const int ch = is.get();
    if (ch == EOF) throw detail::pgm_error(path, is, "truncated payload");
    v = ch;
  }
  return out;
}

// --- Dataset directories: img_NNNN.pgm, lab_NNNN.pgm, index.txt ---

struct SceneMeta {
  int id = 0;
  std::uint64_t seed = 0;
  double scale = 1.0;
  int h = 0, w = 0;
};

namespace detail {

inline std::string scene_name(const char* prefix, int id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%04d.pgm", prefix, id);
  return buf;
}

}  // namespace detail

template <class T>
void write_dataset(const std::string& dir, const std::vector<Scene<T>>& scenes) {
  std::filesystem::create_directories(dir);
  std::ofstream index(dir + "/index.txt");
  if (!index) throw io_error("cannot open for writing: " + dir + "/index.txt");
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const int id = static_cast<int>(i);
    write_pgm16(dir + "/" + detail::scene_name("img", id), scenes[i].image);
    write_label_pgm(dir + "/" + detail::scene_name("lab", id),
                    scenes[i].labels);
    index << id << " " << scenes[i].seed << " " << scenes[i].scale << " "
          << scenes[i].image.h << " " << scenes[i].image.w << "\n";
  }
  if (!index) throw io_error("write failed: " + dir + "/index.txt");
}

template <class T>
std::vector<Scene<T>> read_dataset(const std::string& dir) {
  std::ifstream index(dir + "/index.txt");
  if (!index) throw io_error("cannot open: " + dir + "/index.txt");
  std::vector<Scene<T>> scenes;
  std::string line;
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    SceneMeta meta;
    if (!(ls >> meta.id >> meta.seed >> meta.scale >> meta.h >> meta.w))
      throw io_error("malformed index row in " + dir + "/index.txt: " + line);
    Scene<T> scene;
    scene.seed = meta.seed;
    scene.scale = meta.scale;
    scene.image = read_pgm16<T>(dir + "/" + detail::scene_name("img", meta.id));
    scene.labels = read_label_pgm(dir + "/" + detail::scene_name("lab", meta.id));
    scenes.push_back(std::move(scene));
  }
  return scenes;
}

}  // namespace scaleadapt
