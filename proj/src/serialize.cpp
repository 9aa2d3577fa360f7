#include "ubcl/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ubcl/evalkit.hpp"

namespace ubcl {

namespace {

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

constexpr char kMagic[4] = {'U', 'B', 'C', 'L'};

class Writer {
 public:
  template <typename V>
  void put(V v) {
    char buf[sizeof(V)];
    std::memcpy(buf, &v, sizeof(V));
    out_.append(buf, sizeof(V));
  }
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void str(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    out_ += s;
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& in) : in_(in) {}
  template <typename V>
  V get() {
    V v;
    need(sizeof(V));
    std::memcpy(&v, in_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  void bytes(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  std::string str() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw ModelFileError("model file truncated");
  }
  const std::string& in_;
  std::size_t pos_ = 0;
};

void write_header(Writer& w, PayloadKind kind, const ModelConfig& c) {
  w.bytes(kMagic, 4);
  w.put(kModelFormatVersion);
  w.put(static_cast<std::uint8_t>(kind));
  for (int v : {c.channels, c.window_len, c.num_classes, c.conv_filters, c.kernel, c.lstm_hidden}) {
    w.put(static_cast<std::int32_t>(v));
  }
  w.put(c.dropout);
  w.put(static_cast<std::uint8_t>(c.variant));
}

std::pair<PayloadKind, ModelConfig> read_header(Reader& r) {
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw ModelFileError("not a UBCL model file");
  const auto version = r.get<std::uint32_t>();
  if (version != kModelFormatVersion) {
    throw ModelFileError("unsupported model format version " + std::to_string(version) +
                         " (expected " + std::to_string(kModelFormatVersion) + ")");
  }
  const auto kind = r.get<std::uint8_t>();
  if (kind > 1) throw ModelFileError("unknown payload kind " + std::to_string(kind));
  ModelConfig c;
  c.channels = r.get<std::int32_t>();
  c.window_len = r.get<std::int32_t>();
  c.num_classes = r.get<std::int32_t>();
  c.conv_filters = r.get<std::int32_t>();
  c.kernel = r.get<std::int32_t>();
  c.lstm_hidden = r.get<std::int32_t>();
  c.dropout = r.get<double>();
  const auto variant = r.get<std::uint8_t>();
  if (variant >= kAllVariants.size()) throw ModelFileError("unknown variant in model file");
  c.variant = static_cast<Variant>(variant);
  try {
    c.validate();
  } catch (const std::exception& e) {
    throw ModelFileError(std::string("invalid config in model file: ") + e.what());
  }
  return {static_cast<PayloadKind>(kind), c};
}

void write_shape(Writer& w, const Shape& shape) {
  w.put(static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) w.put(static_cast<std::uint32_t>(d));
}

Shape read_shape(Reader& r) {
  const auto rank = r.get<std::uint32_t>();
  if (rank > 8) throw ModelFileError("implausible tensor rank");
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.get<std::uint32_t>());
  return shape;
}

void write_params(Writer& w, const QuantParams& p) {
  w.put(p.scale);
  w.put(static_cast<std::int32_t>(p.zero_point));
  w.put(static_cast<std::uint8_t>(p.scheme));
}

QuantParams read_params(Reader& r) {
  QuantParams p;
  p.scale = r.get<double>();
  p.zero_point = r.get<std::int32_t>();
  const auto scheme = r.get<std::uint8_t>();
  if (scheme > 1 || !(p.scale > 0.0)) throw ModelFileError("invalid quantization parameters");
  p.scheme = static_cast<QuantScheme>(scheme);
  return p;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelFileError("cannot open model file " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ModelFileError("cannot write model file " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ModelFileError("failed writing " + path.string());
}

void write_sidecar(const std::filesystem::path& path, const ModelConfig& config, PayloadKind kind) {
  nlohmann::json j = {{"format", "UBCL"},
                      {"version", kModelFormatVersion},
                      {"payload", kind == PayloadKind::kInt8 ? "int8" : "fp32"},
                      {"config", to_json(config)}};
  std::ofstream out(path.string() + ".json");
  if (!out) throw ModelFileError("cannot write sidecar for " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace

std::string encode_model(const ModelConfig& config, const WeightsF& weights) {
  Writer w;
  write_header(w, PayloadKind::kFloat32, config);
  std::uint32_t count = 0;
  weights.for_each([&](const std::string&, const TensorF&, bool) { ++count; });
  w.put(count);
  weights.for_each([&](const std::string& name, const TensorF& t, bool) {
    w.str(name);
    w.put(std::uint8_t{0});
    write_shape(w, t.shape());
    w.bytes(t.data(), t.size() * sizeof(float));
  });
  return w.take();
}

LoadedModel decode_model(const std::string& bytes) {
  Reader r(bytes);
  auto [kind, config] = read_header(r);
  if (kind != PayloadKind::kFloat32) throw ModelFileError("expected an fp32 model, found int8");
  Rng unused(0);
  LoadedModel m{config, build_model(config, unused)};
  std::uint32_t expected = 0;
  m.weights.for_each([&](const std::string&, const TensorF&, bool) { ++expected; });
  if (r.get<std::uint32_t>() != expected) throw ModelFileError("tensor count does not match config");
  m.weights.for_each([&](const std::string& name, TensorF& t, bool) {
    const std::string got = r.str();
    if (got != name) throw ModelFileError("expected tensor '" + name + "', found '" + got + "'");
    if (r.get<std::uint8_t>() != 0) throw ModelFileError("tensor '" + name + "' is not fp32");
    const Shape shape = read_shape(r);
    if (shape != t.shape()) {
      throw ModelFileError("tensor '" + name + "' has shape " + shape_to_string(shape) +
                           ", config implies " + shape_to_string(t.shape()));
    }
    r.bytes(t.data(), t.size() * sizeof(float));
  });
  if (!r.done()) throw ModelFileError("trailing bytes after model payload");
  return m;
}

std::string encode_quantized(const QuantizedModel& model) {
  Writer w;
  write_header(w, PayloadKind::kInt8, model.config);
  w.put(static_cast<std::uint32_t>(model.tensors.size()));
  for (const auto& t : model.tensors) {
    w.str(t.name);
    w.put(std::uint8_t{1});
    write_shape(w, t.values.shape());
    w.bytes(t.values.data(), t.values.size());
    write_params(w, t.params);
  }
  w.put(static_cast<std::uint32_t>(model.activations.size()));
  for (const auto& [name, p] : model.activations) {
    w.str(name);
    write_params(w, p);
  }
  return w.take();
}

QuantizedModel decode_quantized(const std::string& bytes) {
  Reader r(bytes);
  auto [kind, config] = read_header(r);
  if (kind != PayloadKind::kInt8) throw ModelFileError("expected an int8 model, found fp32");
  QuantizedModel m;
  m.config = config;
  const auto count = r.get<std::uint32_t>();
  if (count > 1024) throw ModelFileError("implausible tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    QuantizedTensor t;
    t.name = r.str();
    if (r.get<std::uint8_t>() != 1) throw ModelFileError("tensor '" + t.name + "' is not int8");
    t.values = Tensor<std::int8_t>(read_shape(r));
    r.bytes(t.values.data(), t.values.size());
    t.params = read_params(r);
    m.tensors.push_back(std::move(t));
  }
  const auto acts = r.get<std::uint32_t>();
  if (acts > 1024) throw ModelFileError("implausible activation count");
  for (std::uint32_t i = 0; i < acts; ++i) {
    std::string name = r.str();
    m.activations[name] = read_params(r);
  }
  if (!r.done()) throw ModelFileError("trailing bytes after model payload");
  return m;
}

void save_model(const std::filesystem::path& path, const ModelConfig& config,
                const WeightsF& weights) {
  write_file(path, encode_model(config, weights));
  write_sidecar(path, config, PayloadKind::kFloat32);
}

void save_quantized(const std::filesystem::path& path, const QuantizedModel& model) {
  write_file(path, encode_quantized(model));
  write_sidecar(path, model.config, PayloadKind::kInt8);
}

LoadedModel load_model(const std::filesystem::path& path) { return decode_model(read_file(path)); }

QuantizedModel load_quantized(const std::filesystem::path& path) {
  return decode_quantized(read_file(path));
}

PayloadKind peek_payload_kind(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  Reader r(bytes);
  return read_header(r).first;
}

}  // namespace ubcl
