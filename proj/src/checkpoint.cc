#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "dithc/dit.h"

namespace dithc::dit {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[6] = {'D', 'I', 'T', 'H', 'C', '1'};

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

struct Reader {
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;
  const std::string& path;

  void need(std::size_t n) {
    if (buf.size() - pos < n) throw ConfigError("checkpoint " + path + ": truncated at byte " + std::to_string(pos));
  }
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
};

}  // namespace

std::vector<std::uint8_t> checkpoint_bytes(const std::vector<Parameter*>& params) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 6);
  const Dtype dt = params.empty() ? Dtype::F32 : params.front()->value().dtype();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(dt));
  put<std::uint64_t>(out, params.size());
  for (const Parameter* p : params) {
    const Tensor& v = p->value();
    if (v.dtype() != dt) throw_argument("checkpoint: mixed dtypes");
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p->name().size()));
    out.insert(out.end(), p->name().begin(), p->name().end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(v.rank()));
    for (auto e : v.shape()) put<std::uint64_t>(out, static_cast<std::uint64_t>(e));
    const Tensor c = v.contiguous();
    const auto* d = reinterpret_cast<const std::uint8_t*>(c.raw());
    out.insert(out.end(), d, d + c.nbytes());
  }
  return out;
}

void save_checkpoint(const std::string& path, const std::vector<Parameter*>& params) {
  const auto bytes = checkpoint_bytes(params);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot write checkpoint " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ConfigError("short write to checkpoint " + path);
}

void load_checkpoint(const std::string& path, const std::vector<Parameter*>& params) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open checkpoint " + path);
  const std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r{buf, 0, path};
  r.need(6);
  if (std::memcmp(buf.data(), kMagic, 6) != 0) throw ConfigError("checkpoint " + path + ": bad magic");
  r.pos = 6;
  const auto dt = r.get<std::uint32_t>();
  const auto count = r.get<std::uint64_t>();
  if (count != params.size())
    throw ConfigError("checkpoint " + path + ": holds " + std::to_string(count) + " tensors, model has " +
                      std::to_string(params.size()));
  for (Parameter* p : params) {
    if (dt != static_cast<std::uint32_t>(p->value().dtype())) throw ConfigError("checkpoint " + path + ": dtype mismatch");
    const auto len = r.get<std::uint32_t>();
    r.need(len);
    const std::string name(reinterpret_cast<const char*>(buf.data() + r.pos), len);
    r.pos += len;
    if (name != p->name()) throw ConfigError("checkpoint " + path + ": expected " + p->name() + ", found " + name);
    const auto rank = r.get<std::uint32_t>();
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::int64_t>(r.get<std::uint64_t>()));
    if (shape != p->value().shape())
      throw ConfigError("checkpoint " + path + ": " + name + " has shape " + shape_str(shape));
    const std::size_t nb = p->value().nbytes();
    r.need(nb);
    Tensor tmp = Tensor::empty(shape, p->value().dtype());
    std::memcpy(tmp.raw(), buf.data() + r.pos, nb);
    r.pos += nb;
    p->value().copy_from(tmp);
  }
  if (r.pos != buf.size()) throw ConfigError("checkpoint " + path + ": trailing bytes");
}

}  // namespace dithc::dit
