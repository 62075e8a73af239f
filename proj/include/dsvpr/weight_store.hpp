#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "dsvpr/tensor.hpp"

namespace dsvpr {

struct WeightEntry {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<float> values;  // row-major, exactly what goes on disk
};

// Named tensor container behind the .dswt checkpoint format. Entries keep
// insertion order so that save() is a pure function of the contents and two
// stores built the same way serialize to identical bytes.
class WeightStore {
 public:
  void put(std::string name, std::vector<std::int64_t> shape, std::vector<float> values);
  void put_tensor(const std::string& name, const Tensor& t);

  bool contains(const std::string& name) const;
  const WeightEntry& get(const std::string& name) const;
  Tensor tensor(const std::string& name, bool requires_grad = false) const;
  const std::vector<WeightEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  void save(const std::string& path) const;
  static WeightStore load(const std::string& path);

 private:
  std::vector<WeightEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace dsvpr
