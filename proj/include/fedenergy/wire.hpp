#pragma once

// Binary formats exchanged between nodes and written to disk.
//
// FEDW (model weights), all integers little-endian:
//   "FEDW" | u8 version=1 | u8 layer_count
//   per layer: u32 in | u32 out | out*in f64 weights (row-major) | out f64 bias
//   u32 CRC32 (IEEE) of every preceding byte
//
// FEDM (round message):
//   "FEDM" | u8 version=1 | u8 kind | u32 round | u16 id_len | id bytes |
//   u32 sample_count | [LocalUpdate only: f64 mae_before | f64 mae_after | u8 flags] |
//   u32 payload_len | payload (a FEDW frame) | u32 CRC32

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedenergy/fedavg.hpp"
#include "fedenergy/nn.hpp"

namespace fedenergy::wire {

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::uint8_t kFormatVersion = 1;

Bytes encode_weights(const nn::ModelWeights& weights);
nn::ModelWeights decode_weights(std::span<const std::uint8_t> bytes);

// Total frame length implied by the FEDW header and layer dimensions, or
// nullopt when `prefix` is too short to tell. Throws FormatError on bad magic/version.
std::optional<std::size_t> declared_weights_length(std::span<const std::uint8_t> prefix);

void save_weights(const std::filesystem::path& path, const nn::ModelWeights& weights);
nn::ModelWeights load_weights(const std::filesystem::path& path);

enum class MessageKind : std::uint8_t { LocalUpdate = 1, GlobalModel = 2 };

struct WireMessage {
  MessageKind kind = MessageKind::LocalUpdate;
  std::uint32_t round = 0;
  std::string node_id;
  std::uint32_t sample_count = 0;
  Bytes payload;  // FEDW frame
  // LocalUpdate only.
  double mae_before = 0.0;
  double mae_after = 0.0;
  bool improved = false;
  bool diverged = false;
};

Bytes encode_message(const WireMessage& msg);
WireMessage decode_message(std::span<const std::uint8_t> bytes);

WireMessage to_message(const fedavg::LocalUpdate& update);
fedavg::LocalUpdate to_local_update(const WireMessage& msg);

struct GlobalModel {
  std::uint32_t round = 0;
  nn::ModelWeights weights;
  std::uint64_t total_samples = 0;
};

WireMessage to_message(const GlobalModel& model, const std::string& sender);
GlobalModel to_global_model(const WireMessage& msg);

// Topic grammar: fed/<network>/updates and fed/<network>/global, where
// <network> is a nonempty run of [A-Za-z0-9_-].
enum class TopicKind { Updates, Global };

struct Topic {
  std::string network;
  TopicKind kind;

  std::string str() const;
  static Topic parse(const std::string& text);  // throws ProtocolError
};

std::string updates_topic(const std::string& network);
std::string global_topic(const std::string& network);

}  // namespace fedenergy::wire
