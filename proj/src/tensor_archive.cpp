#include "blindpaint/tensor_archive.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <iterator>

#include "blindpaint/error.hpp"

namespace blindpaint {

namespace {

constexpr std::array<char, 8> kMagic{'B', 'L', 'N', 'D', 'P', 'N', 'T', '\0'};

std::uint8_t dtype_code(torch::ScalarType type) {
  switch (type) {
    case torch::kFloat32: return 0;
    case torch::kFloat64: return 1;
    case torch::kInt64: return 2;
    default: throw Error(std::string("unsupported tensor dtype in archive: ") + c10::toString(type));
  }
}

torch::ScalarType dtype_from_code(std::uint8_t code, const std::string& field) {
  switch (code) {
    case 0: return torch::kFloat32;
    case 1: return torch::kFloat64;
    case 2: return torch::kInt64;
    default: throw Error("archive field '" + field + "': unknown dtype code " + std::to_string(code));
  }
}

class Writer {
 public:
  template <typename T>
  void pod(const T& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class Reader {
 public:
  explicit Reader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

  template <typename T>
  T pod(const std::string& field) {
    T v;
    std::memcpy(&v, take(sizeof(T), field), sizeof(T));
    return v;
  }
  const char* take(std::size_t n, const std::string& field) {
    if (n > bytes_.size() - pos_) {
      throw Error("archive truncated while reading field '" + field + "'");
    }
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::vector<char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const torch::Tensor& TensorArchive::at(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw Error("archive has no tensor named '" + name + "'");
}

bool TensorArchive::contains(const std::string& name) const {
  for (const auto& entry : tensors) {
    if (entry.first == name) return true;
  }
  return false;
}

void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  Writer w;
  w.raw(kMagic.data(), kMagic.size());
  w.pod(TensorArchive::kVersion);
  w.pod(static_cast<std::uint64_t>(archive.meta.size()));
  w.raw(archive.meta.data(), archive.meta.size());
  w.pod(static_cast<std::uint32_t>(archive.tensors.size()));
  for (const auto& [name, tensor] : archive.tensors) {
    auto t = tensor.detach().cpu().contiguous();
    w.pod(static_cast<std::uint32_t>(name.size()));
    w.raw(name.data(), name.size());
    w.pod(dtype_code(t.scalar_type()));
    w.pod(static_cast<std::uint32_t>(t.dim()));
    for (auto d : t.sizes()) w.pod(static_cast<std::int64_t>(d));
    w.raw(t.data_ptr(), t.numel() * t.element_size());
  }

  // Write to a sibling temp file first so a failed write never leaves a half-written archive.
  auto tmp = path;
  tmp += ".tmp";
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open for writing: " + tmp.string());
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    out.flush();
    if (!out) throw Error("write failed (disk full?): " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

TensorArchive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open archive: " + path.string());
  Reader r(std::vector<char>(std::istreambuf_iterator<char>(in), {}));

  const char* magic = r.take(kMagic.size(), "magic");
  if (std::memcmp(magic, kMagic.data(), kMagic.size()) != 0) {
    throw Error("not a blindpaint archive (bad field 'magic'): " + path.string());
  }
  const auto version = r.pod<std::uint32_t>("version");
  if (version != TensorArchive::kVersion) {
    throw Error("archive field 'version' is " + std::to_string(version) + ", expected " +
                std::to_string(TensorArchive::kVersion));
  }
  TensorArchive archive;
  const auto meta_len = r.pod<std::uint64_t>("meta_length");
  archive.meta.assign(r.take(meta_len, "meta"), meta_len);
  const auto count = r.pod<std::uint32_t>("tensor_count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string slot = "tensor[" + std::to_string(i) + "]";
    const auto name_len = r.pod<std::uint32_t>(slot + ".name_length");
    std::string name(r.take(name_len, slot + ".name"), name_len);
    const auto dtype = dtype_from_code(r.pod<std::uint8_t>(name + ".dtype"), name);
    const auto ndim = r.pod<std::uint32_t>(name + ".ndim");
    std::vector<std::int64_t> dims(ndim);
    std::int64_t numel = 1;
    for (auto& d : dims) {
      d = r.pod<std::int64_t>(name + ".shape");
      if (d < 0) throw Error("archive field '" + name + ".shape' is negative");
      numel *= d;
    }
    auto t = torch::empty(dims, torch::TensorOptions().dtype(dtype));
    const std::size_t nbytes = static_cast<std::size_t>(numel) * t.element_size();
    std::memcpy(t.data_ptr(), r.take(nbytes, name + ".data"), nbytes);
    archive.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) throw Error("archive has trailing bytes after last tensor: " + path.string());
  return archive;
}

}  // namespace blindpaint
