#pragma once

#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "grc/tensor.hpp"

namespace grc::ad {

/// Named trainable tensors in registration order.
class ParameterStore {
 public:
  Tensor& add(const std::string& name, Shape shape, double init_std, std::mt19937_64& rng);
  Tensor& add_constant(const std::string& name, Shape shape, double value);

  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::size_t size() const { return tensors_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  std::size_t total_values() const;

  void zero_grad();
  /// Deep copy of all values into fresh leaves.
  ParameterStore clone() const;
  /// Overwrites values from `other`; names and shapes must match.
  void copy_values_from(const ParameterStore& other);

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::map<std::string, std::size_t> index_;
};

/// Parameter checkpoint: magic, JSON header, then name/shape/raw float64
/// records. Values round-trip bit-exactly.
void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params, const nlohmann::json& header);

struct LoadedCheckpoint {
  nlohmann::json header;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

LoadedCheckpoint read_checkpoint(const std::filesystem::path& path);
/// Loads values into an already shaped store; returns the header.
nlohmann::json load_checkpoint(const std::filesystem::path& path, ParameterStore& params);

}  // namespace grc::ad
