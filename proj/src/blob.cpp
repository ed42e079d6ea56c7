#include "bgvc/blob.hpp"

#include <cstring>
#include <fstream>

#include <torch/torch.h>

#include "bgvc/error.hpp"

namespace bgvc::blob {

namespace {

constexpr char kMagic[8] = {'B', 'G', 'V', 'C', 'B', 'L', 'O', 'B'};
constexpr uint64_t kFnvOffset = 1469598103934665603ull;
constexpr uint64_t kFnvPrime = 1099511628211ull;

uint64_t fnv1a(const void* data, size_t n, uint64_t h = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

uint8_t dtype_code(torch::Dtype t) {
  switch (t) {
  case torch::kFloat32: return 1;
  case torch::kFloat64: return 2;
  case torch::kInt64: return 3;
  case torch::kInt32: return 4;
  case torch::kUInt8: return 5;
  default:
    throw ConfigError("blob: unsupported tensor dtype");
  }
}

torch::Dtype dtype_from(uint8_t c) {
  switch (c) {
  case 1: return torch::kFloat32;
  case 2: return torch::kFloat64;
  case 3: return torch::kInt64;
  case 4: return torch::kInt32;
  case 5: return torch::kUInt8;
  default:
    throw FormatError("blob: unknown dtype code " + std::to_string(c));
  }
}

class Writer {
public:
  template <typename T> void pod(T v) {
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T)); // little-endian hosts only
    buf_.insert(buf_.end(), b, b + sizeof(T));
  }
  void bytes(const void* p, size_t n) {
    const char* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void str32(const std::string& s) {
    pod<uint32_t>(uint32_t(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<char>& buf() { return buf_; }

private:
  std::vector<char> buf_;
};

class Reader {
public:
  Reader(const char* p, size_t n) : p_(p), n_(n) {}
  template <typename T> T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, p_ + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  const char* take(size_t n) {
    need(n);
    const char* r = p_ + pos_;
    pos_ += n;
    return r;
  }
  std::string str32() {
    auto n = pod<uint32_t>();
    const char* s = take(n);
    return {s, n};
  }
  size_t pos() const { return pos_; }

private:
  void need(size_t n) const {
    if (n > n_ - pos_)
      throw FormatError("blob: truncated file");
  }
  const char* p_;
  size_t n_;
  size_t pos_ = 0;
};

} // namespace

const torch::Tensor& Blob::tensor(const std::string& name) const {
  for (const auto& [k, t] : tensors)
    if (k == name)
      return t;
  throw FormatError("blob: missing tensor '" + name + "'");
}

bool Blob::has(const std::string& name) const {
  for (const auto& [k, t] : tensors)
    if (k == name)
      return true;
  return false;
}

std::vector<char> serialize(const Blob& b) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.pod<uint32_t>(kFormatVersion);
  w.str32(b.kind);
  const std::string header = b.header.dump();
  w.pod<uint64_t>(header.size());
  w.bytes(header.data(), header.size());
  w.pod<uint32_t>(uint32_t(b.tensors.size()));
  for (const auto& [name, t] : b.tensors) {
    auto c = t.detach().to(torch::kCPU).contiguous();
    w.str32(name);
    w.pod<uint8_t>(dtype_code(c.scalar_type()));
    w.pod<uint32_t>(uint32_t(c.dim()));
    for (int64_t d : c.sizes())
      w.pod<int64_t>(d);
    const uint64_t nbytes = uint64_t(c.numel()) * c.element_size();
    w.pod<uint64_t>(nbytes);
    w.bytes(c.data_ptr(), nbytes);
  }
  const uint64_t sum = fnv1a(w.buf().data(), w.buf().size());
  w.pod<uint64_t>(sum);
  return std::move(w.buf());
}

void write(const std::filesystem::path& path, const Blob& b) {
  auto bytes = serialize(b);
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os)
      throw DataError("blob: cannot write " + path.string());
    os.write(bytes.data(), std::streamsize(bytes.size()));
    if (!os)
      throw DataError("blob: short write to " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Blob deserialize(const std::vector<char>& bytes, const std::string& expected_kind) {
  if (bytes.size() < sizeof(kMagic) + 4 + 8 ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw FormatError("blob: bad magic (not a bgvc file)");
  const size_t body = bytes.size() - 8;
  uint64_t stored;
  std::memcpy(&stored, bytes.data() + body, 8);
  if (fnv1a(bytes.data(), body) != stored)
    throw FormatError("blob: checksum mismatch (file is corrupt)");

  Reader r(bytes.data(), body);
  r.take(sizeof(kMagic));
  const auto version = r.pod<uint32_t>();
  if (version != kFormatVersion)
    throw FormatError("blob: format version " + std::to_string(version) +
                      " is not supported (expected " +
                      std::to_string(kFormatVersion) + ")");
  Blob b;
  b.kind = r.str32();
  if (!expected_kind.empty() && b.kind != expected_kind)
    throw FormatError("blob: expected a '" + expected_kind + "' file, found '" +
                      b.kind + "'");
  const auto hlen = r.pod<uint64_t>();
  const char* h = r.take(hlen);
  try {
    b.header = nlohmann::json::parse(h, h + hlen);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("blob: bad header: ") + e.what());
  }
  const auto count = r.pod<uint32_t>();
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = r.str32();
    const auto dt = dtype_from(r.pod<uint8_t>());
    const auto ndim = r.pod<uint32_t>();
    if (ndim > 16)
      throw FormatError("blob: implausible rank for tensor '" + name + "'");
    std::vector<int64_t> dims(ndim);
    for (auto& d : dims) {
      d = r.pod<int64_t>();
      if (d < 0)
        throw FormatError("blob: negative dimension in tensor '" + name + "'");
    }
    const auto nbytes = r.pod<uint64_t>();
    auto t = torch::empty(dims, torch::TensorOptions().dtype(dt));
    if (uint64_t(t.numel()) * t.element_size() != nbytes)
      throw FormatError("blob: size mismatch for tensor '" + name + "'");
    std::memcpy(t.data_ptr(), r.take(nbytes), nbytes);
    b.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (r.pos() != body)
    throw FormatError("blob: trailing bytes before checksum");
  return b;
}

Blob read(const std::filesystem::path& path, const std::string& expected_kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw DataError("blob: cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  return deserialize(bytes, expected_kind);
}

void append_module(Blob& b, const std::string& prefix, const torch::nn::Module& m) {
  for (const auto& item : m.named_parameters(true))
    b.tensors.emplace_back(prefix + "." + item.key(), item.value().detach().clone());
  for (const auto& item : m.named_buffers(true))
    b.tensors.emplace_back(prefix + ".buffer." + item.key(),
                           item.value().detach().clone());
}

void load_module(const Blob& b, const std::string& prefix, torch::nn::Module& m) {
  std::map<std::string, const torch::Tensor*> index;
  for (const auto& [k, t] : b.tensors)
    index[k] = &t;
  auto assign = [&](const std::string& key, torch::Tensor& dst) {
    auto it = index.find(key);
    if (it == index.end())
      throw ConfigError("checkpoint: missing tensor '" + key +
                        "' (architecture mismatch)");
    if (it->second->sizes() != dst.sizes())
      throw ConfigError("checkpoint: shape mismatch for '" + key +
                        "' (architecture mismatch)");
    torch::NoGradGuard no_grad;
    dst.copy_(*it->second);
  };
  for (auto& item : m.named_parameters(true))
    assign(prefix + "." + item.key(), item.value());
  for (auto& item : m.named_buffers(true))
    assign(prefix + ".buffer." + item.key(), item.value());
}

uint64_t hash_tensors(const std::vector<std::pair<std::string, torch::Tensor>>& ts) {
  uint64_t h = kFnvOffset;
  for (const auto& [name, t] : ts) {
    auto c = t.detach().to(torch::kCPU).contiguous();
    h = fnv1a(name.data(), name.size(), h);
    const uint8_t code = dtype_code(c.scalar_type());
    h = fnv1a(&code, 1, h);
    for (int64_t d : c.sizes())
      h = fnv1a(&d, sizeof(d), h);
    h = fnv1a(c.data_ptr(), size_t(c.numel()) * c.element_size(), h);
  }
  return h;
}

uint64_t hash_module(const torch::nn::Module& m) {
  std::vector<std::pair<std::string, torch::Tensor>> ts;
  for (const auto& item : m.named_parameters(true))
    ts.emplace_back(item.key(), item.value());
  for (const auto& item : m.named_buffers(true))
    ts.emplace_back("buffer." + item.key(), item.value());
  return hash_tensors(ts);
}

std::string hex(uint64_t h) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4)
    s[size_t(i)] = digits[h & 0xf];
  return s;
}

} // namespace bgvc::blob
