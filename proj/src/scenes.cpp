#include "d3etr/scenes.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "d3etr/rng.hpp"
#include "json.hpp"

namespace d3etr::scene {

namespace {

enum class Shape { kFilled, kHollow, kCross };

struct Pattern {
  Shape shape;
  std::uint8_t channels;  // bit mask
};

constexpr Pattern kPatterns[kMaxPatterns] = {
    {Shape::kFilled, 0b001}, {Shape::kFilled, 0b010}, {Shape::kFilled, 0b100},
    {Shape::kHollow, 0b011}, {Shape::kCross, 0b110},  {Shape::kHollow, 0b100},
    {Shape::kCross, 0b001},  {Shape::kFilled, 0b101},
};

struct CellBox {
  std::size_t x0, y0, w, h;
};

bool acceptable(const CellBox& b, const std::vector<CellBox>& placed, const DatasetSpec& spec) {
  for (const auto& o : placed) {
    if (spec.max_iou <= 0.0) {
      const std::size_t g = spec.min_gap;
      const bool apart_x = b.x0 >= o.x0 + o.w + g || o.x0 >= b.x0 + b.w + g;
      const bool apart_y = b.y0 >= o.y0 + o.h + g || o.y0 >= b.y0 + b.h + g;
      if (!apart_x && !apart_y) return false;
    } else {
      const box::BoxXYXY a{double(b.x0), double(b.y0), double(b.x0 + b.w), double(b.y0 + b.h)};
      const box::BoxXYXY c{double(o.x0), double(o.y0), double(o.x0 + o.w), double(o.y0 + o.h)};
      if (box::iou(a, c) > spec.max_iou) return false;
    }
  }
  return true;
}

bool on_pattern(Shape s, std::size_t dx, std::size_t dy, std::size_t w, std::size_t h) {
  switch (s) {
    case Shape::kFilled: return true;
    case Shape::kHollow: return dx == 0 || dy == 0 || dx + 1 == w || dy + 1 == h;
    case Shape::kCross: return dx == w / 2 || dy == h / 2;
  }
  return false;
}

constexpr int kAttemptsPerObject = 64;

}  // namespace

void DatasetSpec::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("DatasetSpec: " + m); };
  if (n_scenes == 0 || grid_h == 0 || grid_w == 0 || c_in == 0 || n_classes == 0) {
    fail("counts must be positive");
  }
  if (n_classes > kMaxPatterns) fail("at most " + std::to_string(kMaxPatterns) + " classes");
  if (min_size == 0 || min_size > max_size || max_size > std::min(grid_h, grid_w)) {
    fail("object sizes must satisfy 1 <= min_size <= max_size <= grid side");
  }
  if (!(intensity_min <= intensity_max) || noise_std < 0.0 || max_iou < 0.0 || max_iou > 1.0) {
    fail("invalid palette parameters");
  }
}

SceneSample generate_scene(const DatasetSpec& spec, std::size_t index) {
  spec.validate();
  if (index >= spec.n_scenes) {
    throw std::out_of_range("generate_scene: index " + std::to_string(index) + " >= n_scenes " +
                            std::to_string(spec.n_scenes));
  }
  SplitMix64 rng(SplitMix64::derive(spec.seed, index));
  SceneSample s;
  s.grid_h = spec.grid_h;
  s.grid_w = spec.grid_w;
  s.c_in = spec.c_in;
  s.dataset_seed = spec.seed;
  s.index = index;
  s.grid.assign(spec.grid_h * spec.grid_w * spec.c_in, 0.0);

  std::size_t count = spec.max_objects == 0 ? 0 : rng.uniform_int(1, spec.max_objects);
  std::vector<CellBox> placed;
  while (true) {
    placed.clear();
    bool ok = true;
    for (std::size_t o = 0; o < count && ok; ++o) {
      ok = false;
      for (int attempt = 0; attempt < kAttemptsPerObject; ++attempt) {
        CellBox b;
        b.w = rng.uniform_int(spec.min_size, spec.max_size);
        b.h = rng.uniform_int(spec.min_size, spec.max_size);
        b.x0 = rng.uniform_int(0, spec.grid_w - b.w);
        b.y0 = rng.uniform_int(0, spec.grid_h - b.h);
        if (acceptable(b, placed, spec)) {
          placed.push_back(b);
          ok = true;
          break;
        }
      }
    }
    if (ok) break;
    --count;  // fewer objects, same stream
  }

  for (const auto& b : placed) {
    const std::size_t cls = rng.uniform_int(0, spec.n_classes - 1);
    const double intensity = rng.uniform(spec.intensity_min, spec.intensity_max);
    const Pattern pat = kPatterns[cls];
    for (std::size_t dy = 0; dy < b.h; ++dy) {
      for (std::size_t dx = 0; dx < b.w; ++dx) {
        if (!on_pattern(pat.shape, dx, dy, b.w, b.h)) continue;
        double* cell = s.grid.data() + ((b.y0 + dy) * spec.grid_w + (b.x0 + dx)) * spec.c_in;
        for (std::size_t c = 0; c < 3; ++c) {
          if (pat.channels & (1u << c)) cell[c % spec.c_in] = intensity;
        }
      }
    }
    const double gw = static_cast<double>(spec.grid_w), gh = static_cast<double>(spec.grid_h);
    s.gts.push_back({cls,
                     {(static_cast<double>(b.x0) + 0.5 * static_cast<double>(b.w)) / gw,
                      (static_cast<double>(b.y0) + 0.5 * static_cast<double>(b.h)) / gh,
                      static_cast<double>(b.w) / gw, static_cast<double>(b.h) / gh}});
  }
  if (spec.noise_std > 0.0) {
    for (double& v : s.grid) v += rng.normal(0.0, spec.noise_std);
  }
  return s;
}

Split split(const DatasetSpec& spec) {
  std::vector<std::size_t> order(spec.n_scenes);
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::uint64_t> key(spec.n_scenes);
  for (std::size_t i = 0; i < spec.n_scenes; ++i) key[i] = SplitMix64::derive(spec.seed ^ 0x5b117ULL, i);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return key[a] != key[b] ? key[a] < key[b] : a < b;
  });
  const std::size_t n_val = spec.n_scenes < 2 ? 0 : std::max<std::size_t>(1, spec.n_scenes / 10);
  Split out;
  out.val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  out.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.train.begin(), out.train.end());
  return out;
}

std::vector<std::vector<std::size_t>> batch_iter(std::span<const std::size_t> indices,
                                                 std::size_t batch_size, std::uint64_t epoch_seed) {
  if (batch_size == 0) throw std::invalid_argument("batch_iter: batch_size must be >= 1");
  std::vector<std::size_t> order(indices.begin(), indices.end());
  SplitMix64 rng(SplitMix64::derive(epoch_seed, 0xba7c4ULL));
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[rng.uniform_int(0, i - 1)]);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t b = 0; b < order.size(); b += batch_size) {
    const std::size_t e = std::min(order.size(), b + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                         order.begin() + static_cast<std::ptrdiff_t>(e));
  }
  return batches;
}

namespace {

const char* const kSpecFields[] = {"seed",          "n_scenes",      "grid_h",    "grid_w",
                                   "c_in",          "n_classes",     "max_objects", "min_size",
                                   "max_size",      "intensity_min", "intensity_max",
                                   "noise_std",     "max_iou",       "min_gap"};

}  // namespace

DatasetSpec load_spec(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open data spec " + path.string());
  const nlohmann::json j = nlohmann::json::parse(is);
  for (const auto& [k, _] : j.items()) {
    if (std::find(std::begin(kSpecFields), std::end(kSpecFields), k) == std::end(kSpecFields)) {
      throw std::runtime_error("data spec " + path.string() + ": unknown field '" + k + "'");
    }
  }
  DatasetSpec s;
  auto get = [&](const char* k, auto& dst) {
    if (j.contains(k)) j.at(k).get_to(dst);
  };
  get("seed", s.seed);
  get("n_scenes", s.n_scenes);
  get("grid_h", s.grid_h);
  get("grid_w", s.grid_w);
  get("c_in", s.c_in);
  get("n_classes", s.n_classes);
  get("max_objects", s.max_objects);
  get("min_size", s.min_size);
  get("max_size", s.max_size);
  get("intensity_min", s.intensity_min);
  get("intensity_max", s.intensity_max);
  get("noise_std", s.noise_std);
  get("max_iou", s.max_iou);
  get("min_gap", s.min_gap);
  s.validate();
  return s;
}

void save_spec(const DatasetSpec& s, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["seed"] = s.seed;
  j["n_scenes"] = s.n_scenes;
  j["grid_h"] = s.grid_h;
  j["grid_w"] = s.grid_w;
  j["c_in"] = s.c_in;
  j["n_classes"] = s.n_classes;
  j["max_objects"] = s.max_objects;
  j["min_size"] = s.min_size;
  j["max_size"] = s.max_size;
  j["intensity_min"] = s.intensity_min;
  j["intensity_max"] = s.intensity_max;
  j["noise_std"] = s.noise_std;
  j["max_iou"] = s.max_iou;
  j["min_gap"] = s.min_gap;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write data spec " + path.string());
  os << j.dump(2) << '\n';
}

}  // namespace d3etr::scene
