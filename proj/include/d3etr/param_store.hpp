#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "d3etr/grad.hpp"

namespace d3etr::ad {

// Named parameters in insertion order. Names are hierarchical by convention
// ("dec.1.cross.wq") and unique.
class ParamStore {
 public:
  DiffArray& add(const std::string& name, DiffArray value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  DiffArray& get(const std::string& name);
  const DiffArray& get(const std::string& name) const;

  std::size_t size() const { return entries_.size(); }
  std::size_t num_scalars() const;
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grad();
  // Fresh leaves with copied values; no state shared with this store.
  ParamStore clone() const;
  // FNV-1a over names, shapes and value bits.
  std::uint64_t checksum() const;

  void save(const std::filesystem::path& path) const;
  static ParamStore load(const std::filesystem::path& path);

 private:
  std::vector<std::pair<std::string, DiffArray>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

using GradMap = std::map<std::string, std::vector<double>>;

// Central differences (f(p+h) - f(p-h)) / 2h for every coordinate of every
// parameter. Values are restored afterwards.
GradMap finite_diff_grad(const std::function<double(ParamStore&)>& f, ParamStore& params,
                         double h = 1e-5);

// Copies the accumulated gradients out of a store.
GradMap collect_grads(const ParamStore& params);

struct GradCompare {
  std::string worst_param;
  double max_rel_err = 0.0;
  std::map<std::string, double> per_param;
};

// |a-b| / max(|a|, |b|, floor) per coordinate, maximized per parameter.
GradCompare compare_grads(const GradMap& analytic, const GradMap& numeric, double floor = 1e-6);

}  // namespace d3etr::ad
