#include "end2reg/params.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

namespace end2reg {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little endian");

Tensor ParamSet::add(const std::string& name, Shape shape, double bound, std::mt19937_64& rng) {
  if (contains(name)) throw std::invalid_argument("ParamSet: duplicate parameter " + name);
  std::vector<double> v(shape_numel(shape), 0.0);
  if (bound > 0.0) {
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& x : v) x = u(rng);
  }
  auto t = Tensor::from(std::move(shape), std::move(v), true);
  entries_.emplace_back(name, t);
  return t;
}

Tensor ParamSet::add_constant(const std::string& name, Shape shape, double value) {
  if (contains(name)) throw std::invalid_argument("ParamSet: duplicate parameter " + name);
  auto t = Tensor::full(std::move(shape), value, true);
  entries_.emplace_back(name, t);
  return t;
}

const Tensor& ParamSet::get(const std::string& name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return t;
  throw std::out_of_range("ParamSet: no parameter named " + name);
}

bool ParamSet::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
}

std::size_t ParamSet::numel() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

std::vector<Tensor> ParamSet::tensors() const {
  std::vector<Tensor> out;
  for (const auto& e : entries_) out.push_back(e.second);
  return out;
}

void ParamSet::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

std::vector<NamedArray> ParamSet::to_arrays(const std::string& prefix) const {
  std::vector<NamedArray> out;
  for (const auto& [n, t] : entries_)
    out.push_back({prefix + n, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
  return out;
}

void ParamSet::load_arrays(const std::vector<NamedArray>& arrays, const std::string& prefix) {
  for (auto& [n, t] : entries_) {
    auto it = std::find_if(arrays.begin(), arrays.end(),
                           [&](const NamedArray& a) { return a.name == prefix + n; });
    if (it == arrays.end()) throw CheckpointError("checkpoint is missing parameter " + prefix + n);
    if (it->shape != t.shape())
      throw CheckpointError("checkpoint parameter " + prefix + n + " has shape " +
                            shape_str(it->shape) + ", expected " + shape_str(t.shape()));
    auto dst = t.mutable_data();
    std::copy(it->values.begin(), it->values.end(), dst.begin());
  }
}

const NamedArray* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return &a;
  return nullptr;
}

namespace {

constexpr char kMagic[8] = {'E', '2', 'R', 'C', 'K', 'P', 'T', '\0'};

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}

  template <class T>
  T get(const char* what) {
    T v;
    read(reinterpret_cast<char*>(&v), sizeof(T), what);
    return v;
  }

  void read(char* dst, std::size_t n, const char* what) {
    if (!is_.read(dst, static_cast<std::streamsize>(n)))
      throw CheckpointError(std::string("truncated checkpoint while reading ") + what +
                            " at byte " + std::to_string(offset_));
    offset_ += n;
  }

  std::uint64_t bounded(const char* what, std::uint64_t limit) {
    const auto v = get<std::uint64_t>(what);
    if (v > limit)
      throw CheckpointError(std::string("implausible ") + what + " " + std::to_string(v) +
                            " at byte " + std::to_string(offset_ - 8));
    return v;
  }

 private:
  std::istream& is_;
  std::size_t offset_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kCheckpointVersion);
  const std::string cfg = ckpt.config.dump();
  put<std::uint64_t>(os, cfg.size());
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  put<std::uint64_t>(os, ckpt.arrays.size());
  for (const auto& a : ckpt.arrays) {
    if (shape_numel(a.shape) != a.values.size())
      throw CheckpointError("array " + a.name + " has inconsistent shape");
    put<std::uint64_t>(os, a.name.size());
    os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    put<std::uint64_t>(os, a.shape.size());
    for (auto d : a.shape) put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(a.values.data()),
             static_cast<std::streamsize>(a.values.size() * sizeof(double)));
  }
  if (!os) throw CheckpointError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  Reader r(is);
  char magic[8];
  r.read(magic, 8, "magic");
  if (std::memcmp(magic, kMagic, 8) != 0) throw CheckpointError(path.string() + " is not a checkpoint");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  std::string cfg(r.bounded("config length", 1u << 26), '\0');
  r.read(cfg.data(), cfg.size(), "config");
  try {
    ckpt.config = nlohmann::json::parse(cfg);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint config: ") + e.what());
  }
  const auto count = r.bounded("array count", 1u << 20);
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name.resize(r.bounded("name length", 4096));
    r.read(a.name.data(), a.name.size(), "name");
    const auto rank = r.bounded("rank", 8);
    for (std::uint64_t d = 0; d < rank; ++d) a.shape.push_back(r.bounded("dimension", 1ull << 32));
    const auto n = shape_numel(a.shape);
    if (n > (1ull << 30)) throw CheckpointError("array " + a.name + " is implausibly large");
    a.values.resize(n);
    r.read(reinterpret_cast<char*>(a.values.data()), n * sizeof(double), "values");
    ckpt.arrays.push_back(std::move(a));
  }
  return ckpt;
}

}  // namespace end2reg
