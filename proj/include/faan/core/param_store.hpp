#ifndef FAAN_CORE_PARAM_STORE_HPP
#define FAAN_CORE_PARAM_STORE_HPP

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "faan/core/tensor.hpp"

namespace faan {

/// Named tensors in insertion order.
template <typename Scalar>
class ParamStore {
 public:
  using TensorType = Tensor<Scalar>;

  ParamStore() = default;
  ParamStore(const ParamStore& other) { *this = other; }
  ParamStore& operator=(const ParamStore& other);
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  /// Throws if the name is taken. The returned reference stays valid for the
  /// lifetime of the store.
  TensorType& add(const std::string& name, TensorType tensor);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  TensorType& at(const std::string& name);
  const TensorType& at(const std::string& name) const;

  std::size_t size() const noexcept { return names_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  TensorType& operator[](std::size_t i) { return *tensors_[i]; }
  const TensorType& operator[](std::size_t i) const { return *tensors_[i]; }

  void zero_grad();
  /// Number of scalar values over all tensors.
  Index total_size() const;

  template <typename Other>
  ParamStore<Other> cast() const {
    ParamStore<Other> out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], tensors_[i]->template cast<Other>());
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<std::unique_ptr<TensorType>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Binary checkpoint layout (all integers little-endian):
///
///   magic "FAANCKPT" (8 bytes) | u32 version | u32 bytes per value (4 or 8)
///   | u64 tensor count, then per tensor:
///   u32 name length | name bytes | u32 rank | u64 dims[rank]
///   | u8 requires_grad | values (row-major, IEEE-754 little-endian)
///
/// Values are stored at `precision_bytes`; loading converts to Scalar.
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Scalar>
void write_checkpoint(std::ostream& out, const ParamStore<Scalar>& store, int precision_bytes = sizeof(Scalar));

template <typename Scalar>
ParamStore<Scalar> read_checkpoint(std::istream& in);

/// File variants write to a temporary sibling and rename into place.
template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<Scalar>& store,
                     int precision_bytes = sizeof(Scalar));

template <typename Scalar>
ParamStore<Scalar> load_checkpoint(const std::filesystem::path& path);

/// Bytes per value recorded in a checkpoint header.
int checkpoint_precision(const std::filesystem::path& path);

/// Writes `contents` to `path` through a temporary file and rename.
void atomic_write(const std::filesystem::path& path, const std::string& contents);

}  // namespace faan

#endif  // FAAN_CORE_PARAM_STORE_HPP
