#include "d3etr/param_store.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace d3etr::ad {

namespace {

constexpr char kMagic[4] = {'D', '3', 'P', 'S'};
constexpr std::uint8_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::istream& is, const std::filesystem::path& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw GradError("checkpoint " + path.string() + ": truncated file");
  return v;
}

}  // namespace

DiffArray& ParamStore::add(const std::string& name, DiffArray value) {
  if (contains(name)) throw GradError("ParamStore: duplicate parameter name '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.emplace_back(name, std::move(value));
  return entries_.back().second;
}

DiffArray& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw GradError("ParamStore: unknown parameter '" + name + "'");
  return entries_[it->second].second;
}

const DiffArray& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw GradError("ParamStore: unknown parameter '" + name + "'");
  return entries_[it->second].second;
}

std::size_t ParamStore::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [_, p] : entries_) n += p.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, p] : entries_) p.zero_grad();
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [name, p] : entries_) {
    std::vector<double> v(p.values().begin(), p.values().end());
    out.add(name, p.requires_grad() ? DiffArray::parameter(p.shape(), std::move(v))
                                    : DiffArray::constant(p.shape(), std::move(v)));
  }
  return out;
}

std::uint64_t ParamStore::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, p] : entries_) {
    mix(name.data(), name.size());
    for (std::size_t d : p.shape()) mix(&d, sizeof d);
    mix(p.values().data(), p.size() * sizeof(double));
  }
  return h;
}

void ParamStore::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw GradError("cannot open " + path.string() + " for writing");
  os.write(kMagic, 4);
  put<std::uint8_t>(os, kVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& [name, p] : entries_) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.rank()));
    for (std::size_t d : p.shape()) put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(p.values().data()),
             static_cast<std::streamsize>(p.size() * sizeof(double)));
  }
  if (!os) throw GradError("write failed for " + path.string());
}

ParamStore ParamStore::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw GradError("cannot open checkpoint " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw GradError("checkpoint " + path.string() + ": bad magic bytes");
  }
  const auto version = take<std::uint8_t>(is, path);
  if (version != kVersion) {
    throw GradError("checkpoint " + path.string() + ": unsupported version " +
                    std::to_string(version));
  }
  const auto count = take<std::uint32_t>(is, path);
  ParamStore out;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto len = take<std::uint32_t>(is, path);
    std::string name(len, '\0');
    is.read(name.data(), len);
    const auto rank = take<std::uint32_t>(is, path);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(take<std::uint64_t>(is, path));
    std::vector<double> values(shape_size(shape));
    is.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!is) throw GradError("checkpoint " + path.string() + ": truncated entry '" + name + "'");
    out.add(name, DiffArray::parameter(std::move(shape), std::move(values)));
  }
  return out;
}

GradMap finite_diff_grad(const std::function<double(ParamStore&)>& f, ParamStore& params,
                         double h) {
  GradMap out;
  for (auto& [name, p] : params) {
    std::vector<double> g(p.size());
    auto v = p.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      v[i] = orig + h;
      const double fp = f(params);
      v[i] = orig - h;
      const double fm = f(params);
      v[i] = orig;
      g[i] = (fp - fm) / (2.0 * h);
    }
    out.emplace(name, std::move(g));
  }
  return out;
}

GradMap collect_grads(const ParamStore& params) {
  GradMap out;
  for (const auto& [name, p] : params) {
    out.emplace(name, std::vector<double>(p.grad().begin(), p.grad().end()));
  }
  return out;
}

GradCompare compare_grads(const GradMap& analytic, const GradMap& numeric, double floor) {
  GradCompare cmp;
  for (const auto& [name, a] : analytic) {
    auto it = numeric.find(name);
    if (it == numeric.end() || it->second.size() != a.size()) {
      throw GradError("compare_grads: parameter '" + name + "' missing or resized");
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double b = it->second[i];
      const double denom = std::max({std::fabs(a[i]), std::fabs(b), floor});
      worst = std::max(worst, std::fabs(a[i] - b) / denom);
    }
    cmp.per_param[name] = worst;
    if (worst >= cmp.max_rel_err) {
      cmp.max_rel_err = worst;
      cmp.worst_param = name;
    }
  }
  return cmp;
}

}  // namespace d3etr::ad
