#include "wemoe/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace wemoe {

void CheckpointMeta::set(std::string key, std::string value) {
    for (auto& [k, v] : entries)
        if (k == key) {
            v = std::move(value);
            return;
        }
    entries.emplace_back(std::move(key), std::move(value));
}

std::optional<std::string> CheckpointMeta::get(std::string_view key) const {
    for (const auto& [k, v] : entries)
        if (k == key) return v;
    return std::nullopt;
}

namespace {

constexpr char kMagic[4] = {'W', 'E', 'M', 'C'};

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t read_u32(const char* p) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
}

uint64_t read_u64(const char* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
}

std::string shape_token(const Shape& s) {
    std::string out;
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out;
}

Shape parse_shape_token(const std::string& tok) {
    Shape s;
    size_t pos = 0;
    while (pos < tok.size()) {
        size_t next = tok.find('x', pos);
        if (next == std::string::npos) next = tok.size();
        s.push_back(std::stoll(tok.substr(pos, next - pos)));
        pos = next + 1;
    }
    return s;
}

}  // namespace

std::string encode_checkpoint(const NamedParamSet& params, const CheckpointMeta& meta) {
    // manifest: human-readable; blob: raw little-endian float32, contiguous
    std::string manifest;
    for (const auto& [k, v] : meta.entries) {
        if (v.find('\n') != std::string::npos)
            throw ConfigError("checkpoint metadata value for '" + k + "' contains a newline");
        manifest += "meta " + k + "=" + v + "\n";
    }
    uint64_t offset = 0;
    for (size_t i = 0; i < params.size(); ++i) {
        const Tensor& t = params.tensor(i);
        manifest += "tensor " + params.name(i) + " " + shape_token(t.shape) + " " +
                    std::to_string(offset) + "\n";
        offset += static_cast<uint64_t>(t.numel()) * sizeof(float);
    }

    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kCheckpointVersion);
    put_u64(out, manifest.size());
    out += manifest;
    size_t blob_start = out.size();
    out.resize(blob_start + offset);
    char* blob = out.data() + blob_start;
    for (size_t i = 0; i < params.size(); ++i) {
        const Tensor& t = params.tensor(i);
        size_t bytes = t.data.size() * sizeof(float);
        std::memcpy(blob, t.data.data(), bytes);
        blob += bytes;
    }
    return out;
}

std::pair<NamedParamSet, CheckpointMeta> decode_checkpoint(std::string_view bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw FormatError("not a WEMC checkpoint (bad magic)");
    uint32_t version = read_u32(bytes.data() + 4);
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint version " + std::to_string(version) +
                          " unsupported (this build reads version " +
                          std::to_string(kCheckpointVersion) + ")");
    uint64_t manifest_len = read_u64(bytes.data() + 8);
    if (16 + manifest_len > bytes.size())
        throw IntegrityError("manifest length exceeds file size");
    std::string manifest(bytes.substr(16, manifest_len));
    std::string_view blob = bytes.substr(16 + manifest_len);

    NamedParamSet params;
    CheckpointMeta meta;
    uint64_t expected_offset = 0;
    std::istringstream lines(manifest);
    std::string line;
    while (std::getline(lines, line)) {
        if (line.empty()) continue;
        if (line.rfind("meta ", 0) == 0) {
            std::string kv = line.substr(5);
            size_t eq = kv.find('=');
            if (eq == std::string::npos) throw FormatError("malformed meta line: " + line);
            meta.entries.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
        } else if (line.rfind("tensor ", 0) == 0) {
            std::istringstream fields(line.substr(7));
            std::string name, shape_tok, offset_tok;
            if (!(fields >> name >> shape_tok >> offset_tok))
                throw FormatError("malformed tensor line: " + line);
            Shape shape = parse_shape_token(shape_tok);
            uint64_t offset = std::stoull(offset_tok);
            uint64_t size = static_cast<uint64_t>(shape_numel(shape)) * sizeof(float);
            // offsets must be exactly contiguous: strictly increasing,
            // non-overlapping, summing to the blob length
            if (offset != expected_offset)
                throw IntegrityError("tensor '" + name + "' offset " + std::to_string(offset) +
                                     " does not match expected " + std::to_string(expected_offset));
            if (offset + size > blob.size())
                throw IntegrityError("tensor '" + name + "' extends past end of blob");
            std::vector<float> data(static_cast<size_t>(shape_numel(shape)));
            std::memcpy(data.data(), blob.data() + offset, static_cast<size_t>(size));
            params.add(name, Tensor(std::move(shape), std::move(data)));
            expected_offset = offset + size;
        } else {
            throw FormatError("unknown manifest line: " + line);
        }
    }
    if (expected_offset != blob.size())
        throw IntegrityError("blob length " + std::to_string(blob.size()) +
                             " does not equal sum of tensor sizes " +
                             std::to_string(expected_offset));
    return {std::move(params), std::move(meta)};
}

void save_checkpoint(const std::string& path, const NamedParamSet& params,
                     const CheckpointMeta& meta) {
    std::string bytes = encode_checkpoint(params, meta);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for '" + path + "'");
}

std::pair<NamedParamSet, CheckpointMeta> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("cannot open checkpoint '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

}  // namespace wemoe
