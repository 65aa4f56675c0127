#include "fedenergy/wire.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <fmt/format.h>

#include "bytes.hpp"
#include "fedenergy/errors.hpp"

namespace fedenergy::wire {

namespace {

constexpr std::string_view kWeightsMagic = "FEDW";
constexpr std::string_view kMessageMagic = "FEDM";
constexpr std::size_t kWeightsHeader = 6;  // magic + version + layer_count
constexpr std::size_t kLayerHeader = 8;
// Guards the size arithmetic below; far above any model this system trains.
constexpr std::uint64_t kMaxLayerScalars = std::uint64_t{1} << 32;

constexpr std::uint8_t kFlagImproved = 1;
constexpr std::uint8_t kFlagDiverged = 2;

void check_magic(detail::ByteReader& r, std::string_view magic, std::string_view what) {
  if (r.str(4) != magic) throw FormatError(fmt::format("{}: bad magic", what));
  if (const auto v = r.u8(); v != kFormatVersion) {
    throw FormatError(fmt::format("{}: unsupported version {}", what, v));
  }
}

bool is_network_char(char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' ||
         c == '-';
}

}  // namespace

Bytes encode_weights(const nn::ModelWeights& weights) {
  weights.validate();
  if (weights.layers.size() > 255) throw FormatError("FEDW holds at most 255 layers");
  detail::ByteWriter w;
  w.str(kWeightsMagic);
  w.u8(kFormatVersion);
  w.u8(static_cast<std::uint8_t>(weights.layers.size()));
  for (const auto& layer : weights.layers) {
    if (layer.in() > std::numeric_limits<std::uint32_t>::max() ||
        layer.out() > std::numeric_limits<std::uint32_t>::max()) {
      throw FormatError("layer dimension exceeds u32");
    }
    w.u32(static_cast<std::uint32_t>(layer.in()));
    w.u32(static_cast<std::uint32_t>(layer.out()));
    // Matrix is row-major, so its storage is already out x in row-major.
    w.f64s(layer.weights.data(), static_cast<std::size_t>(layer.weights.size()));
    w.f64s(layer.bias.data(), static_cast<std::size_t>(layer.bias.size()));
  }
  w.crc();
  return w.take();
}

std::optional<std::size_t> declared_weights_length(std::span<const std::uint8_t> prefix) {
  if (prefix.size() < kWeightsHeader) return std::nullopt;
  detail::ByteReader r(prefix);
  check_magic(r, kWeightsMagic, "weights");
  const std::size_t layers = r.u8();
  std::size_t offset = kWeightsHeader;
  for (std::size_t i = 0; i < layers; ++i) {
    if (prefix.size() < offset + kLayerHeader) return std::nullopt;
    detail::ByteReader dims(prefix.subspan(offset, kLayerHeader));
    const std::uint64_t in = dims.u32();
    const std::uint64_t out = dims.u32();
    const std::uint64_t scalars = out * in + out;
    if (scalars > kMaxLayerScalars) {
      throw FormatError(fmt::format("weights: layer {} declares {} x {} parameters", i, out, in));
    }
    offset += kLayerHeader + static_cast<std::size_t>(scalars) * sizeof(double);
  }
  return offset + 4;
}

nn::ModelWeights decode_weights(std::span<const std::uint8_t> bytes) {
  const auto declared = declared_weights_length(bytes);
  if (!declared || *declared > bytes.size()) {
    throw LengthError(fmt::format("weights: truncated frame ({} bytes{})", bytes.size(),
                                  declared ? fmt::format(", header declares {}", *declared) : ""));
  }
  if (*declared < bytes.size()) {
    throw FormatError(fmt::format("weights: {} trailing bytes after the declared frame",
                                  bytes.size() - *declared));
  }
  detail::check_trailing_crc(bytes, "weights");

  detail::ByteReader r(bytes.first(*declared - 4));
  check_magic(r, kWeightsMagic, "weights");
  const std::size_t layer_count = r.u8();
  if (layer_count == 0) throw FormatError("weights: zero layers");
  nn::ModelWeights w;
  w.layers.reserve(layer_count);
  for (std::size_t i = 0; i < layer_count; ++i) {
    const auto in = static_cast<Eigen::Index>(r.u32());
    const auto out = static_cast<Eigen::Index>(r.u32());
    if (in == 0 || out == 0) throw FormatError(fmt::format("weights: layer {} is empty", i));
    nn::DenseLayer layer{nn::Matrix(out, in), nn::Vector(out)};
    r.f64s(layer.weights.data(), static_cast<std::size_t>(out * in));
    r.f64s(layer.bias.data(), static_cast<std::size_t>(out));
    w.layers.push_back(std::move(layer));
  }
  try {
    w.validate();
  } catch (const ShapeError& e) {
    throw FormatError(fmt::format("weights: {}", e.what()));
  }
  return w;
}

void save_weights(const std::filesystem::path& path, const nn::ModelWeights& weights) {
  const auto bytes = encode_weights(weights);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError(fmt::format("cannot write {}", path.string()));
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

nn::ModelWeights load_weights(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError(fmt::format("cannot read {}", path.string()));
  Bytes bytes((std::istreambuf_iterator<char>(f)), {});
  return decode_weights(bytes);
}

Bytes encode_message(const WireMessage& msg) {
  if (msg.node_id.size() > std::numeric_limits<std::uint16_t>::max()) {
    throw FormatError("node id too long");
  }
  if (msg.payload.size() > std::numeric_limits<std::uint32_t>::max()) {
    throw FormatError("payload too large");
  }
  detail::ByteWriter w;
  w.str(kMessageMagic);
  w.u8(kFormatVersion);
  w.u8(static_cast<std::uint8_t>(msg.kind));
  w.u32(msg.round);
  w.u16(static_cast<std::uint16_t>(msg.node_id.size()));
  w.str(msg.node_id);
  w.u32(msg.sample_count);
  if (msg.kind == MessageKind::LocalUpdate) {
    w.f64(msg.mae_before);
    w.f64(msg.mae_after);
    w.u8(static_cast<std::uint8_t>((msg.improved ? kFlagImproved : 0) |
                                   (msg.diverged ? kFlagDiverged : 0)));
  }
  w.u32(static_cast<std::uint32_t>(msg.payload.size()));
  w.bytes(msg.payload);
  w.crc();
  return w.take();
}

WireMessage decode_message(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  check_magic(r, kMessageMagic, "message");
  WireMessage msg;
  const auto kind = r.u8();
  if (kind != static_cast<std::uint8_t>(MessageKind::LocalUpdate) &&
      kind != static_cast<std::uint8_t>(MessageKind::GlobalModel)) {
    throw FormatError(fmt::format("message: unknown kind {}", kind));
  }
  msg.kind = static_cast<MessageKind>(kind);
  msg.round = r.u32();
  const std::size_t id_len = r.u16();
  msg.node_id = r.str(id_len);
  msg.sample_count = r.u32();
  std::uint8_t flags = 0;
  if (msg.kind == MessageKind::LocalUpdate) {
    msg.mae_before = r.f64();
    msg.mae_after = r.f64();
    flags = r.u8();
    if (flags & ~(kFlagImproved | kFlagDiverged)) {
      throw FormatError(fmt::format("message: unknown flags {:#x}", flags));
    }
    msg.improved = flags & kFlagImproved;
    msg.diverged = flags & kFlagDiverged;
  }
  const std::size_t payload_len = r.u32();
  const std::size_t declared = r.pos() + payload_len + 4;
  if (bytes.size() < declared) {
    throw LengthError(fmt::format("message: truncated ({} of {} bytes)", bytes.size(), declared));
  }
  if (bytes.size() > declared) {
    throw FormatError(fmt::format("message: {} trailing bytes", bytes.size() - declared));
  }
  detail::check_trailing_crc(bytes, "message");
  const auto payload = r.bytes(payload_len);
  msg.payload.assign(payload.begin(), payload.end());
  return msg;
}

WireMessage to_message(const fedavg::LocalUpdate& update) {
  WireMessage m;
  m.kind = MessageKind::LocalUpdate;
  m.round = update.round;
  m.node_id = update.node_id;
  m.sample_count = update.sample_count;
  m.payload = encode_weights(update.weights);
  m.mae_before = update.mae_before;
  m.mae_after = update.mae_after;
  m.improved = update.improved;
  m.diverged = update.diverged;
  return m;
}

fedavg::LocalUpdate to_local_update(const WireMessage& msg) {
  if (msg.kind != MessageKind::LocalUpdate) throw ProtocolError("expected a LocalUpdate message");
  fedavg::LocalUpdate u;
  u.node_id = msg.node_id;
  u.round = msg.round;
  u.weights = decode_weights(msg.payload);
  u.sample_count = msg.sample_count;
  u.mae_before = msg.mae_before;
  u.mae_after = msg.mae_after;
  u.improved = msg.improved;
  u.diverged = msg.diverged;
  return u;
}

WireMessage to_message(const GlobalModel& model, const std::string& sender) {
  WireMessage m;
  m.kind = MessageKind::GlobalModel;
  m.round = model.round;
  m.node_id = sender;
  m.sample_count = static_cast<std::uint32_t>(
      std::min<std::uint64_t>(model.total_samples, std::numeric_limits<std::uint32_t>::max()));
  m.payload = encode_weights(model.weights);
  return m;
}

GlobalModel to_global_model(const WireMessage& msg) {
  if (msg.kind != MessageKind::GlobalModel) throw ProtocolError("expected a GlobalModel message");
  return {msg.round, decode_weights(msg.payload), msg.sample_count};
}

std::string Topic::str() const {
  return fmt::format("fed/{}/{}", network, kind == TopicKind::Updates ? "updates" : "global");
}

Topic Topic::parse(const std::string& text) {
  constexpr std::string_view prefix = "fed/";
  const auto last = text.rfind('/');
  if (!text.starts_with(prefix) || last == std::string::npos || last < prefix.size()) {
    throw ProtocolError(fmt::format("malformed topic '{}'", text));
  }
  Topic t;
  t.network = text.substr(prefix.size(), last - prefix.size());
  const std::string leaf = text.substr(last + 1);
  if (t.network.empty() ||
      !std::all_of(t.network.begin(), t.network.end(), is_network_char)) {
    throw ProtocolError(fmt::format("malformed network name in topic '{}'", text));
  }
  if (leaf == "updates") {
    t.kind = TopicKind::Updates;
  } else if (leaf == "global") {
    t.kind = TopicKind::Global;
  } else {
    throw ProtocolError(fmt::format("unknown topic leaf in '{}'", text));
  }
  return t;
}

std::string updates_topic(const std::string& network) {
  return Topic::parse(Topic{network, TopicKind::Updates}.str()).str();
}

std::string global_topic(const std::string& network) {
  return Topic::parse(Topic{network, TopicKind::Global}.str()).str();
}

}  // namespace fedenergy::wire
