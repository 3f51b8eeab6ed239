#include "doamo/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace doamo {

namespace {

constexpr char kMagic[8] = {'D', 'O', 'A', 'M', 'A', 'R', 'C', '1'};

static_assert(std::endian::native == std::endian::little,
              "archive I/O assumes a little-endian host");

void put_u32(std::string& out, std::uint32_t v) {
  char buf[4];
  std::memcpy(buf, &v, 4);
  out.append(buf, 4);
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  void read(void* dst, std::size_t n) {
    if (pos_ + n > bytes_.size()) throw std::runtime_error("archive truncated");
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    read(&v, 4);
    return v;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_archive(const ArrayArchive& archive) {
  std::string out(kMagic, sizeof(kMagic));
  put_u32(out, static_cast<std::uint32_t>(archive.size()));
  for (const auto& [name, t] : archive) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    out.append(reinterpret_cast<const char*>(t.data()), t.numel() * sizeof(double));
  }
  return out;
}

ArrayArchive deserialize_archive(const std::string& bytes) {
  Reader r(bytes);
  char magic[8];
  r.read(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) throw std::runtime_error("not a DOAMARC1 archive");
  const std::uint32_t count = r.u32();
  ArrayArchive out;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(r.u32(), '\0');
    r.read(name.data(), name.size());
    Shape shape(r.u32());
    for (int& d : shape) d = static_cast<int>(r.u32());
    Tensor t(shape);
    r.read(t.data(), t.numel() * sizeof(double));
    if (!out.emplace(name, std::move(t)).second) {
      throw std::runtime_error("duplicate array name in archive: " + name);
    }
  }
  if (!r.done()) throw std::runtime_error("trailing bytes after archive");
  return out;
}

void save_archive(const std::filesystem::path& path, const ArrayArchive& archive) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path.string());
  const std::string bytes = serialize_archive(archive);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("failed writing checkpoint " + path.string());
}

ArrayArchive load_archive(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_archive(ss.str());
}

}  // namespace doamo
