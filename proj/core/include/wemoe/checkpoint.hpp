#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "wemoe/params.hpp"

namespace wemoe {

constexpr uint32_t kCheckpointVersion = 1;

// Ordered key/value metadata block written verbatim into the manifest
// (task name, seed, model config, ...). Order is preserved so identical
// inputs serialize to identical bytes.
struct CheckpointMeta {
    std::vector<std::pair<std::string, std::string>> entries;
    void set(std::string key, std::string value);
    std::optional<std::string> get(std::string_view key) const;
};

// .wemc container: 4-byte magic "WEMC", little-endian u32 version, u64
// manifest length, UTF-8 manifest (one line per meta entry and per tensor:
// name, shape, byte offset), then the concatenated little-endian float32
// blob. Load(save(x)) round-trips bit-identically.
std::string encode_checkpoint(const NamedParamSet& params, const CheckpointMeta& meta);
std::pair<NamedParamSet, CheckpointMeta> decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::string& path, const NamedParamSet& params,
                     const CheckpointMeta& meta);
std::pair<NamedParamSet, CheckpointMeta> load_checkpoint(const std::string& path);

}  // namespace wemoe
