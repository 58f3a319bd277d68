#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "pan/engine.hpp"
#include "pan/error.hpp"

namespace pan {

namespace {

constexpr char kMagic[8] = {'P', 'A', 'N', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;
const std::string kVelocityPrefix = "velocity/";
const std::string kNextIter = "meta/next_iter";

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint64_t offset() const { return pos_; }

  const char* take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(pos_, std::string("checkpoint truncated while reading ") + what);
    }
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint64_t le(std::size_t n, const char* what) {
    const auto* p = reinterpret_cast<const unsigned char*>(take(n, what));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  std::set<std::string> seen;
  for (const auto& t : tensors) {
    if (!seen.insert(t.name).second) throw FormatError(out.size(), "duplicate tensor name " + t.name);
    if (t.value.ndim() > 255) throw ShapeError(t.name, "checkpoint: too many dimensions");
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    out.push_back(static_cast<char>(t.value.ndim()));
    for (auto d : t.value.shape()) put_u64(out, static_cast<std::uint64_t>(d));
    for (double v : t.value.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

std::vector<NamedTensor> decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw FormatError(0, "bad magic");
  }
  r.take(sizeof kMagic, "magic");
  const std::uint64_t version_at = r.offset();
  const auto version = static_cast<std::uint32_t>(r.le(4, "version"));
  if (version != kVersion) {
    throw FormatError(version_at, "version mismatch: file has " + std::to_string(version) + ", expected " +
                                      std::to_string(kVersion));
  }
  const auto count = static_cast<std::uint32_t>(r.le(4, "tensor count"));
  std::vector<NamedTensor> out;
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint64_t entry_at = r.offset();
    const auto len = static_cast<std::size_t>(r.le(4, "name length"));
    NamedTensor t;
    t.name.assign(r.take(len, "name"), len);
    if (!seen.insert(t.name).second) throw FormatError(entry_at, "duplicate tensor name " + t.name);
    const auto ndim = static_cast<std::size_t>(r.le(1, "ndim"));
    Shape shape;
    std::uint64_t numel = 1;
    for (std::size_t d = 0; d < ndim; ++d) {
      const std::uint64_t extent = r.le(8, "dims");
      if (extent == 0 || extent > (std::uint64_t{1} << 40)) throw FormatError(r.offset() - 8, "invalid extent in " + t.name);
      numel *= extent;
      if (numel > (std::uint64_t{1} << 40)) throw FormatError(r.offset() - 8, "tensor too large: " + t.name);
      shape.push_back(static_cast<std::int64_t>(extent));
    }
    if ((bytes.size() - r.offset()) / 8 < numel) throw FormatError(r.offset(), "checkpoint truncated in payload of " + t.name);
    std::vector<double> data(static_cast<std::size_t>(numel));
    for (auto& v : data) v = std::bit_cast<double>(r.le(8, "payload"));
    t.value = Tensor(shape, std::move(data));
    out.push_back(std::move(t));
  }
  if (r.offset() != bytes.size()) throw FormatError(r.offset(), "trailing bytes after last tensor");
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const PanModel& model, const Sgd* optimizer,
                     std::int64_t next_iter) {
  std::vector<NamedTensor> tensors;
  for (const auto& p : model.params().parameters()) tensors.push_back({p->name, p->value});
  for (const auto& b : model.params().buffers()) tensors.push_back({b->name, b->value});
  if (optimizer) {
    for (const auto& [name, v] : optimizer->velocity()) tensors.push_back({kVelocityPrefix + name, v});
  }
  tensors.push_back({kNextIter, Tensor({1}, static_cast<double>(next_iter))});

  const std::string bytes = encode_checkpoint(tensors);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // write-then-rename so an interrupted save never clobbers the previous checkpoint
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("short write on checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::int64_t load_checkpoint(const std::filesystem::path& path, PanModel& model, Sgd* optimizer) {
  const std::vector<NamedTensor> tensors = decode_checkpoint(read_all(path));
  std::map<std::string, const Tensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t.value;

  auto fetch = [&](const std::string& name, const Shape& shape) -> const Tensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError(0, "checkpoint is missing tensor " + name);
    if (it->second->shape() != shape) {
      throw ShapeError(name, "checkpoint tensor " + name + " has shape " + shape_str(it->second->shape()) +
                                 ", model expects " + shape_str(shape));
    }
    return *it->second;
  };

  std::size_t used = 0;
  for (const auto& p : model.params().parameters()) {
    p->value = fetch(p->name, p->value.shape());
    ++used;
  }
  for (const auto& b : model.params().buffers()) {
    b->value = fetch(b->name, b->value.shape());
    ++used;
  }
  std::int64_t next_iter = 0;
  if (auto it = by_name.find(kNextIter); it != by_name.end()) {
    next_iter = static_cast<std::int64_t>(it->second->item());
    ++used;
  }
  for (const auto& t : tensors) {
    if (t.name.rfind(kVelocityPrefix, 0) != 0) continue;
    const std::string pname = t.name.substr(kVelocityPrefix.size());
    if (model.params().find_parameter(pname) == nullptr) {
      throw FormatError(0, "checkpoint velocity for unknown parameter " + pname);
    }
    if (optimizer) optimizer->velocity()[pname] = t.value;
    ++used;
  }
  if (used != tensors.size()) throw FormatError(0, "checkpoint contains tensors the model does not define");
  return next_iter;
}

}  // namespace pan
