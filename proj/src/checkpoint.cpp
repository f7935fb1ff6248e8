#include "imf/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

#include "imf/config.hpp"

namespace imf {

namespace {

constexpr char kMagic[4] = {'I', 'M', 'F', '1'};

template <class U>
void put(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_bytes(std::string& out, const std::string& s) { out.append(s); }

void put_store(std::string& out, const ParamStore& store, Dtype dtype) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& [name, t] : store) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    put_bytes(out, name);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(dtype));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    for (double v : t.data()) {
      if (dtype == Dtype::f64) {
        put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
      } else {
        const float f = static_cast<float>(v);
        if (static_cast<double>(f) != v && !(std::isnan(v) && std::isnan(f))) {
          throw ContractViolation("checkpoint: tensor '" + name + "' is not exactly representable as f32");
        }
        put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
      }
    }
  }
}

class Reader {
 public:
  explicit Reader(const std::string& s) : s_(s) {}

  template <class U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(s_[pos_ + i])) << (8 * i));
    }
    pos_ += sizeof(U);
    return v;
  }

  std::string bytes(std::uint64_t n) {
    need(n);
    std::string out = s_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t remaining() const { return s_.size() - pos_; }

 private:
  void need(std::uint64_t n) const {
    if (n > remaining()) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }

  const std::string& s_;
  std::size_t pos_ = 0;
};

ParamStore get_store(Reader& in, Dtype& dtype, bool first) {
  ParamStore store;
  const std::uint32_t count = in.get<std::uint32_t>();
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string name = in.bytes(in.get<std::uint32_t>());
    const std::uint8_t tag = in.get<std::uint8_t>();
    if (tag > 1) throw CheckpointError("checkpoint: unknown dtype tag " + std::to_string(tag));
    if (first && k == 0) dtype = static_cast<Dtype>(tag);
    if (static_cast<Dtype>(tag) != dtype) throw CheckpointError("checkpoint: mixed dtypes are not supported");
    const std::uint32_t rank = in.get<std::uint32_t>();
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape.push_back(in.get<std::uint64_t>());
      numel *= shape.back();
    }
    const std::size_t width = tag == 0 ? 8 : 4;
    if (numel > in.remaining() / width) throw CheckpointError("checkpoint truncated in tensor '" + name + "'");
    std::vector<double> data(numel);
    for (double& v : data) {
      v = tag == 0 ? std::bit_cast<double>(in.get<std::uint64_t>())
                   : static_cast<double>(std::bit_cast<float>(in.get<std::uint32_t>()));
    }
    if (!store.emplace(name, Tensor(std::move(shape), std::move(data))).second) {
      throw CheckpointError("checkpoint: duplicate tensor '" + name + "'");
    }
  }
  return store;
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, ck.step);
  put<std::uint64_t>(out, ck.config_json.size());
  put_bytes(out, ck.config_json);
  put_store(out, ck.params, ck.dtype);
  put_store(out, ck.ema, ck.dtype);
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, kMagic, 4) != 0) throw CheckpointError("not an IMF1 checkpoint");
  Reader in(bytes);
  in.bytes(4);
  const std::uint32_t version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.step = in.get<std::uint64_t>();
  ck.config_json = in.bytes(in.get<std::uint64_t>());
  ck.params = get_store(in, ck.dtype, true);
  ck.ema = get_store(in, ck.dtype, ck.params.empty());
  if (in.remaining() != 0) throw CheckpointError("checkpoint has trailing bytes");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_file_atomic(path, encode_checkpoint(ck));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace imf
