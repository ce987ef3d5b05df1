#include "grc/params.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace grc::ad {

namespace {

constexpr char kMagic[8] = {'G', 'R', 'C', 'P', 'A', 'R', 'M', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes little-endian hosts");

void write_u64(std::ofstream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint64_t read_u64(std::ifstream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace

Tensor& ParameterStore::add(const std::string& name, Shape shape, double init_std, std::mt19937_64& rng) {
  if (contains(name)) throw ContractViolation("duplicate parameter " + name);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> values(numel_of(shape));
  for (double& v : values) v = init_std * dist(rng);
  index_[name] = tensors_.size();
  names_.push_back(name);
  tensors_.push_back(Tensor::from(std::move(shape), std::move(values), true));
  return tensors_.back();
}

Tensor& ParameterStore::add_constant(const std::string& name, Shape shape, double value) {
  if (contains(name)) throw ContractViolation("duplicate parameter " + name);
  index_[name] = tensors_.size();
  names_.push_back(name);
  tensors_.push_back(Tensor::full(std::move(shape), value, true));
  return tensors_.back();
}

Tensor& ParameterStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractViolation("unknown parameter " + name);
  return tensors_[it->second];
}

const Tensor& ParameterStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractViolation("unknown parameter " + name);
  return tensors_[it->second];
}

std::size_t ParameterStore::total_values() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& t : tensors_) t.zero_grad();
}

ParameterStore ParameterStore::clone() const {
  ParameterStore out;
  out.names_ = names_;
  out.index_ = index_;
  out.tensors_.reserve(tensors_.size());
  for (const auto& t : tensors_) out.tensors_.push_back(Tensor::from(t.shape(), {t.data().begin(), t.data().end()}, true));
  return out;
}

void ParameterStore::copy_values_from(const ParameterStore& other) {
  if (other.names_ != names_) throw ContractViolation("copy_values_from: parameter sets differ");
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    if (tensors_[i].shape() != other.tensors_[i].shape()) {
      throw ContractViolation("copy_values_from: shape mismatch for " + names_[i]);
    }
    auto src = other.tensors_[i].data();
    std::copy(src.begin(), src.end(), tensors_[i].mutable_data().begin());
  }
}

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params, const nlohmann::json& header) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kMagic, sizeof kMagic);
  const std::string head = header.dump();
  write_u64(os, head.size());
  os.write(head.data(), static_cast<std::streamsize>(head.size()));
  write_u64(os, params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.names()[i];
    const Tensor& t = params.tensors()[i];
    write_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u64(os, t.rank());
    for (auto d : t.shape()) write_u64(os, d);
    os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

LoadedCheckpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[sizeof kMagic];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw std::runtime_error("not a parameter checkpoint: " + path.string());
  }
  LoadedCheckpoint out;
  std::string head(read_u64(is), '\0');
  is.read(head.data(), static_cast<std::streamsize>(head.size()));
  out.header = nlohmann::json::parse(head);
  const auto count = read_u64(is);
  for (std::uint64_t k = 0; k < count; ++k) {
    std::string name(read_u64(is), '\0');
    is.read(name.data(), static_cast<std::streamsize>(name.size()));
    Shape shape(read_u64(is));
    for (auto& d : shape) d = read_u64(is);
    std::vector<double> values(numel_of(shape));
    is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated tensor " + name);
    out.tensors.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(values), true));
  }
  return out;
}

nlohmann::json load_checkpoint(const std::filesystem::path& path, ParameterStore& params) {
  auto loaded = read_checkpoint(path);
  if (loaded.tensors.size() != params.size()) {
    throw std::runtime_error("checkpoint " + path.string() + " holds " + std::to_string(loaded.tensors.size()) +
                             " tensors, model expects " + std::to_string(params.size()));
  }
  for (auto& [name, t] : loaded.tensors) {
    Tensor& dst = params.at(name);
    if (dst.shape() != t.shape()) {
      throw std::runtime_error("checkpoint shape mismatch for " + name + ": " + shape_str(t.shape()) + " vs " +
                               shape_str(dst.shape()));
    }
    auto src = t.data();
    std::copy(src.begin(), src.end(), dst.mutable_data().begin());
  }
  return loaded.header;
}

}  // namespace grc::ad
