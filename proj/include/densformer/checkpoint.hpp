#ifndef DENSFORMER_CHECKPOINT_HPP
#define DENSFORMER_CHECKPOINT_HPP

// DSF1 checkpoint files, little-endian throughout:
//
//   "DSF1"  u16 version
//   u32 config length, UTF-8 key=value lines (model, training, resume state)
//   tensor records until EOF:
//     u16 name length, name, u8 dtype (1 = f32), u8 rank, u64 dims[rank], data
//
// ADAM moments are stored as tensors named "adam.m/<param>" and
// "adam.v/<param>".

#include <bit>
#include <set>

#include "densformer/training.hpp"

namespace densformer {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[4] = {'D', 'S', 'F', '1'};
inline constexpr std::uint16_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 1;
inline const std::string kAdamFirstPrefix = "adam.m/";
inline const std::string kAdamSecondPrefix = "adam.v/";

namespace detail {

class ByteWriter {
 public:
  template <class U>
  void put(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void put_f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
  void put_bytes(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& b) : b_(b) {}
  bool at_end() const { return pos_ == b_.size(); }
  template <class U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s(b_.begin() + static_cast<std::ptrdiff_t>(pos_), b_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw CheckpointError("checkpoint: truncated file");
  }
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

inline void write_tensor(ByteWriter& w, const std::string& name, const Shape& shape, std::span<const float> data) {
  w.put(static_cast<std::uint16_t>(name.size()));
  w.put_bytes(name);
  w.put(kDtypeF32);
  w.put(static_cast<std::uint8_t>(shape.size()));
  for (auto d : shape) w.put(static_cast<std::uint64_t>(d));
  for (float v : data) w.put_f32(v);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const TrainState& s) {
  detail::ByteWriter w;
  w.put_bytes(std::string_view(kCheckpointMagic, 4));
  w.put(kCheckpointVersion);
  KeyValues kv = to_key_values(s.model);
  for (auto& e : to_key_values(s.train)) kv.push_back(std::move(e));
  kv.emplace_back("iteration", std::to_string(s.iteration));
  kv.emplace_back("rng_state", std::to_string(s.rng_state));
  kv.emplace_back("adam_step", std::to_string(s.adam.step));
  const std::string text = format_key_values(kv);
  w.put(static_cast<std::uint32_t>(text.size()));
  w.put_bytes(text);
  for (const auto& e : s.params) detail::write_tensor(w, e.name, e.tensor.shape(), e.tensor.data());
  const bool have_adam = s.adam.m.size() == s.params.size();
  std::size_t i = 0;
  for (const auto& e : s.params) {
    const std::vector<float> zeros(have_adam ? 0 : e.tensor.numel(), 0.0f);
    detail::write_tensor(w, kAdamFirstPrefix + e.name, e.tensor.shape(), have_adam ? s.adam.m[i] : zeros);
    detail::write_tensor(w, kAdamSecondPrefix + e.name, e.tensor.shape(), have_adam ? s.adam.v[i] : zeros);
    ++i;
  }
  return w.take();
}

/// Decodes a whole checkpoint; nothing is returned unless every check passes.
inline TrainState decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  if (bytes.size() < 4 || !std::equal(kCheckpointMagic, kCheckpointMagic + 4, bytes.begin())) {
    throw CheckpointError("checkpoint: bad magic (not a DSF1 file)");
  }
  r.get_string(4);
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  const auto text_len = r.get<std::uint32_t>();
  KeyValues kv;
  try {
    kv = parse_key_values(r.get_string(text_len));
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
  TrainState s;
  KeyValues config;
  try {
    for (auto& [k, v] : kv) {
      if (k == "iteration") s.iteration = detail::parse_uint(k, v);
      else if (k == "rng_state") s.rng_state = detail::parse_uint(k, v);
      else if (k == "adam_step") s.adam.step = detail::parse_uint(k, v);
      else config.emplace_back(k, v);
    }
    apply_key_values(config, s.model, s.train);
    s.model.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }

  const auto layout = param_layout(s.model);
  std::unordered_map<std::string, std::pair<Shape, std::vector<float>>> records;
  while (!r.at_end()) {
    const auto name = r.get_string(r.get<std::uint16_t>());
    if (r.get<std::uint8_t>() != kDtypeF32) throw CheckpointError("checkpoint: unsupported dtype for " + name);
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>();
    if (shape_numel(shape) > bytes.size()) throw CheckpointError("checkpoint: truncated file");
    std::vector<float> data(shape_numel(shape));
    for (float& v : data) v = r.get_f32();
    if (!records.emplace(name, std::make_pair(std::move(shape), std::move(data))).second) {
      throw CheckpointError("checkpoint: duplicate tensor " + name);
    }
  }
  std::set<std::string> expected;
  for (const auto& spec : layout) {
    expected.insert(spec.name);
    expected.insert(kAdamFirstPrefix + spec.name);
    expected.insert(kAdamSecondPrefix + spec.name);
  }
  for (const auto& [name, rec] : records) {
    if (!expected.count(name)) throw CheckpointError("checkpoint: unknown tensor name " + name);
  }
  auto take = [&](const std::string& name, const Shape& shape) {
    auto it = records.find(name);
    if (it == records.end()) throw CheckpointError("checkpoint: missing tensor " + name);
    if (it->second.first != shape) {
      throw CheckpointError("checkpoint: tensor " + name + " has shape " + shape_str(it->second.first) + ", expected " +
                            shape_str(shape));
    }
    return std::move(it->second.second);
  };
  for (const auto& spec : layout) s.params.add(spec.name, Tensor<float>(spec.shape, take(spec.name, spec.shape)));
  for (const auto& spec : layout) {
    s.adam.m.push_back(take(kAdamFirstPrefix + spec.name, spec.shape));
    s.adam.v.push_back(take(kAdamSecondPrefix + spec.name, spec.shape));
  }
  return s;
}

inline void save_checkpoint(const std::filesystem::path& path, const TrainState& s) {
  const auto bytes = encode_checkpoint(s);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for " + path.string());
}

inline TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace densformer

#endif  // DENSFORMER_CHECKPOINT_HPP
