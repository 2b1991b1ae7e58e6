#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "faan/core/grad_check.hpp"
#include "faan/core/param_store.hpp"
#include "faan/core/rng.hpp"

namespace faan {

namespace {

#ifdef NDEBUG
std::atomic<bool> g_finite_checks{false};
#else
std::atomic<bool> g_finite_checks{true};
#endif

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

constexpr char kMagic[8] = {'F', 'A', 'A', 'N', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const char* what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw Error(std::string("truncated checkpoint while reading ") + what);
  return v;
}

}  // namespace

bool finite_checks_enabled() noexcept { return g_finite_checks.load(std::memory_order_relaxed); }
void set_finite_checks(bool enabled) noexcept { g_finite_checks.store(enabled, std::memory_order_relaxed); }

// ---------------------------------------------------------------------------
// ParamStore

template <typename Scalar>
ParamStore<Scalar>& ParamStore<Scalar>::operator=(const ParamStore& other) {
  if (this == &other) return *this;
  names_ = other.names_;
  index_ = other.index_;
  tensors_.clear();
  tensors_.reserve(other.tensors_.size());
  for (const auto& t : other.tensors_) tensors_.push_back(std::make_unique<TensorType>(*t));
  return *this;
}

template <typename Scalar>
typename ParamStore<Scalar>::TensorType& ParamStore<Scalar>::add(const std::string& name, TensorType tensor) {
  if (name.empty()) throw Error("parameter name must not be empty");
  if (contains(name)) throw Error("duplicate parameter name: " + name);
  index_.emplace(name, names_.size());
  names_.push_back(name);
  tensors_.push_back(std::make_unique<TensorType>(std::move(tensor)));
  return *tensors_.back();
}

template <typename Scalar>
typename ParamStore<Scalar>::TensorType& ParamStore<Scalar>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter: " + name);
  return *tensors_[it->second];
}

template <typename Scalar>
const typename ParamStore<Scalar>::TensorType& ParamStore<Scalar>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter: " + name);
  return *tensors_[it->second];
}

template <typename Scalar>
void ParamStore<Scalar>::zero_grad() {
  for (auto& t : tensors_) t->zero_grad();
}

template <typename Scalar>
Index ParamStore<Scalar>::total_size() const {
  Index n = 0;
  for (const auto& t : tensors_) n += t->size();
  return n;
}

// ---------------------------------------------------------------------------
// Checkpoints

template <typename Scalar>
void write_checkpoint(std::ostream& out, const ParamStore<Scalar>& store, int precision_bytes) {
  if (precision_bytes != 4 && precision_bytes != 8) throw Error("checkpoint precision must be 4 or 8 bytes");
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(precision_bytes));
  put<std::uint64_t>(out, store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& name = store.names()[i];
    const auto& t = store[i];
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    put<std::uint8_t>(out, t.requires_grad() ? 1 : 0);
    const Scalar* data = t.value().data();
    for (Index j = 0; j < t.size(); ++j) {
      if (precision_bytes == 8) {
        put<double>(out, static_cast<double>(data[j]));
      } else {
        put<float>(out, static_cast<float>(data[j]));
      }
    }
  }
  if (!out) throw Error("failed writing checkpoint");
}

template <typename Scalar>
ParamStore<Scalar> read_checkpoint(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw Error("not a checkpoint file (bad magic)");
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
  const auto precision = get<std::uint32_t>(in, "precision");
  if (precision != 4 && precision != 8) throw Error("bad checkpoint precision " + std::to_string(precision));
  const auto count = get<std::uint64_t>(in, "tensor count");
  ParamStore<Scalar> store;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(in, "name length");
    if (len > (1u << 20)) throw Error("implausible parameter name length in checkpoint");
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (!in) throw Error("truncated checkpoint while reading name");
    const auto rank = get<std::uint32_t>(in, "rank");
    std::vector<Index> shape(rank);
    for (auto& d : shape) d = static_cast<Index>(get<std::uint64_t>(in, "dims"));
    const bool requires_grad = get<std::uint8_t>(in, "flags") != 0;
    Tensor<Scalar> t(shape, false);
    Scalar* data = t.value().data();
    for (Index j = 0; j < t.size(); ++j) {
      data[j] = precision == 8 ? static_cast<Scalar>(get<double>(in, name.c_str()))
                               : static_cast<Scalar>(get<float>(in, name.c_str()));
    }
    t.set_requires_grad(requires_grad);
    store.add(name, std::move(t));
  }
  return store;
}

void atomic_write(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw Error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<Scalar>& store, int precision_bytes) {
  std::ostringstream buf(std::ios::binary);
  write_checkpoint(buf, store, precision_bytes);
  atomic_write(path, buf.str());
}

template <typename Scalar>
ParamStore<Scalar> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  try {
    return read_checkpoint<Scalar>(in);
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

int checkpoint_precision(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw Error(path.string() + ": bad magic");
  get<std::uint32_t>(in, "version");
  return static_cast<int>(get<std::uint32_t>(in, "precision"));
}

template class ParamStore<float>;
template class ParamStore<double>;
template void write_checkpoint<float>(std::ostream&, const ParamStore<float>&, int);
template void write_checkpoint<double>(std::ostream&, const ParamStore<double>&, int);
template ParamStore<float> read_checkpoint<float>(std::istream&);
template ParamStore<double> read_checkpoint<double>(std::istream&);
template void save_checkpoint<float>(const std::filesystem::path&, const ParamStore<float>&, int);
template void save_checkpoint<double>(const std::filesystem::path&, const ParamStore<double>&, int);
template ParamStore<float> load_checkpoint<float>(const std::filesystem::path&);
template ParamStore<double> load_checkpoint<double>(const std::filesystem::path&);

// ---------------------------------------------------------------------------
// Gradient check

namespace {

double evaluate_loss(const LossBuilder& loss_fn, ParamStore<double>& params) {
  Tape<double> tape(false);
  const double v = loss_fn(tape, params).scalar();
  if (!std::isfinite(v)) throw Error("grad_check: non-finite loss");
  return v;
}

}  // namespace

GradCheckResult grad_check(const LossBuilder& loss_fn, ParamStore<double>& params, double eps,
                           Index max_coords_per_tensor, std::uint64_t seed, double floor) {
  params.zero_grad();
  {
    Tape<double> tape(true);
    Var<double> loss = loss_fn(tape, params);
    if (!std::isfinite(loss.scalar())) throw Error("grad_check: non-finite loss");
    tape.backward(loss);
  }

  GradCheckResult result;
  Rng rng = Rng::substream(seed, "grad_check");
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& t = params[p];
    if (!t.requires_grad()) continue;
    std::vector<Index> coords(static_cast<std::size_t>(t.size()));
    std::iota(coords.begin(), coords.end(), Index{0});
    if (max_coords_per_tensor > 0 && t.size() > max_coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng.engine());
      coords.resize(static_cast<std::size_t>(max_coords_per_tensor));
    }
    for (Index c : coords) {
      double* w = t.value().data() + c;
      const double saved = *w;
      *w = saved + eps;
      const double up = evaluate_loss(loss_fn, params);
      *w = saved - eps;
      const double down = evaluate_loss(loss_fn, params);
      *w = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = t.grad().data()[c];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
      const double err = std::abs(analytic - numeric) / denom;
      ++result.coordinates;
      if (err > result.max_relative_error || result.worst_index < 0) {
        result.max_relative_error = err;
        result.worst_param = params.names()[p];
        result.worst_index = c;
        result.analytic = analytic;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace faan
