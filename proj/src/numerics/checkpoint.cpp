#include "ctdet/numerics/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ctdet/errors.hpp"

namespace ctdet {

namespace {

constexpr char kMagic[8] = {'C', 'T', 'D', 'E', 'T', 'C', 'K', 'P'};

static_assert(std::endian::native == std::endian::little ||
                  std::endian::native == std::endian::big,
              "mixed-endian platforms are not supported");

template <typename U>
void put(std::vector<std::uint8_t>& out, U v) {
  std::uint8_t buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(std::begin(buf), std::end(buf));
  }
  out.insert(out.end(), std::begin(buf), std::end(buf));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    std::uint8_t buf[sizeof(U)];
    std::memcpy(buf, bytes_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) {
      std::reverse(std::begin(buf), std::end(buf));
    }
    pos_ += sizeof(U);
    U v;
    std::memcpy(&v, buf, sizeof(U));
    return v;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FileError("checkpoint truncated");
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> Checkpoint::serialize() const {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put<std::uint32_t>(out, version);
  put<std::uint64_t>(out, global_step);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(metadata.size()));
  out.insert(out.end(), metadata.begin(), metadata.end());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, entry] : entries) {
    if (shape_numel(entry.shape) != std::visit([](const auto& v) { return v.size(); }, entry.payload)) {
      throw DimensionError("checkpoint entry '" + name + "' payload does not match shape " +
                           shape_str(entry.shape));
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint8_t>(out, static_cast<std::uint8_t>(entry.dtype()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(entry.shape.size()));
    for (auto d : entry.shape) put<std::uint64_t>(out, d);
    std::visit(
        [&](const auto& v) {
          for (auto x : v) put(out, x);
        },
        entry.payload);
  }
  return out;
}

Checkpoint Checkpoint::deserialize(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.get_string(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) {
    throw FileError("not a checkpoint (bad magic)");
  }
  Checkpoint ckpt;
  ckpt.version = r.get<std::uint32_t>();
  if (ckpt.version != kFormatVersion) {
    throw FileError("unsupported checkpoint version " + std::to_string(ckpt.version));
  }
  ckpt.global_step = r.get<std::uint64_t>();
  ckpt.metadata = r.get_string(r.get<std::uint32_t>());
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t e = 0; e < count; ++e) {
    std::string name = r.get_string(r.get<std::uint32_t>());
    const auto dtype = static_cast<DType>(r.get<std::uint8_t>());
    Shape shape(r.get<std::uint32_t>());
    for (auto& d : shape) d = r.get<std::uint64_t>();
    CheckpointEntry entry{shape, {}};
    const std::size_t n = shape_numel(shape);
    if (dtype == DType::kFloat32) {
      std::vector<float> v(n);
      for (auto& x : v) x = r.get<float>();
      entry.payload = std::move(v);
    } else if (dtype == DType::kFloat64) {
      std::vector<double> v(n);
      for (auto& x : v) x = r.get<double>();
      entry.payload = std::move(v);
    } else {
      throw FileError("unknown dtype tag in checkpoint entry '" + name + "'");
    }
    ckpt.entries.emplace(std::move(name), std::move(entry));
  }
  if (!r.done()) throw FileError("trailing bytes after checkpoint entries");
  return ckpt;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FileError("cannot open '" + path.string() + "' for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
  if (!os) throw FileError("failed writing checkpoint '" + path.string() + "'");
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FileError("checkpoint not found: '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

const CheckpointEntry& Checkpoint::at(const std::string& name) const {
  auto it = entries.find(name);
  if (it == entries.end()) throw FileError("checkpoint has no entry '" + name + "'");
  return it->second;
}

}  // namespace ctdet
