#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include "reform/tensor.hpp"

namespace reform {

/// Checkpoint container: a UTF-8 header (version, stage tag, metadata,
/// tensor manifest with per-tensor CRC32) followed by a little-endian
/// float32 blob. Shared by policy, optimizer-state and verifier files.
inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { Io, Format, Version, Shape, Checksum };
  CheckpointError(Kind k, const std::string& what) : std::runtime_error(what), kind_(k) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

struct NamedTensor {
  std::string name;
  Mat value;
  bool frozen = false;
};

struct CheckpointData {
  std::string stage;
  std::map<std::string, std::string> meta;
  std::vector<NamedTensor> tensors;
};

/// Rounds through float32; the value a checkpoint would store.
inline double to_f32(double v) noexcept { return static_cast<double>(static_cast<float>(v)); }

namespace detail {
inline void put_f32_le(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFFu));
}

inline float get_f32_le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[b]) << (8 * b);
  return std::bit_cast<float>(bits);
}

inline std::uint32_t crc_of(const char* p, std::size_t n) {
  return static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(p), static_cast<uInt>(n)));
}
}  // namespace detail

inline void write_checkpoint(const std::string& path, const CheckpointData& ck) {
  std::string blob;
  std::ostringstream header;
  header << "REFORM-CHECKPOINT\n";
  header << "version " << kCheckpointVersion << "\n";
  header << "stage " << ck.stage << "\n";
  for (const auto& [k, v] : ck.meta) header << "meta " << k << " " << v << "\n";
  for (const auto& t : ck.tensors) {
    const std::size_t offset = blob.size() / 4;
    for (double v : t.value.data) detail::put_f32_le(blob, v);
    const std::uint32_t crc = detail::crc_of(blob.data() + offset * 4, t.value.size() * 4);
    header << "tensor " << t.name << " " << t.value.rows << " " << t.value.cols << " " << (t.frozen ? 1 : 0) << " "
           << offset << " " << crc << "\n";
  }
  header << "blob " << blob.size() / 4 << "\n";
  header << "end\n";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError(CheckpointError::Kind::Io, "cannot write checkpoint " + path);
  const std::string h = header.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw CheckpointError(CheckpointError::Kind::Io, "failed writing checkpoint " + path);
}

inline CheckpointData read_checkpoint(const std::string& path) {
  using K = CheckpointError::Kind;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(K::Io, "cannot open checkpoint " + path);
  std::string line;
  if (!std::getline(in, line) || line != "REFORM-CHECKPOINT") throw CheckpointError(K::Format, path + ": not a checkpoint");
  CheckpointData ck;
  struct Entry {
    std::size_t rows, cols, offset;
    bool frozen;
    std::uint32_t crc;
  };
  std::vector<Entry> entries;
  std::size_t blob_floats = 0;
  bool have_version = false, have_end = false;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "version") {
      int v = 0;
      ls >> v;
      if (v != kCheckpointVersion)
        throw CheckpointError(K::Version, path + ": unsupported checkpoint version " + std::to_string(v));
      have_version = true;
    } else if (key == "stage") {
      ls >> ck.stage;
    } else if (key == "meta") {
      std::string k, v;
      ls >> k;
      std::getline(ls >> std::ws, v);
      ck.meta[k] = v;
    } else if (key == "tensor") {
      NamedTensor t;
      Entry e{};
      int frozen = 0;
      if (!(ls >> t.name >> e.rows >> e.cols >> frozen >> e.offset >> e.crc))
        throw CheckpointError(K::Format, path + ": malformed tensor manifest line");
      e.frozen = frozen != 0;
      entries.push_back(e);
      ck.tensors.push_back(std::move(t));
    } else if (key == "blob") {
      ls >> blob_floats;
    } else if (key == "end") {
      have_end = true;
      break;
    } else {
      throw CheckpointError(K::Format, path + ": unknown header line '" + line + "'");
    }
  }
  if (!have_version || !have_end) throw CheckpointError(K::Format, path + ": incomplete header");
  std::string blob(blob_floats * 4, '\0');
  in.read(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (static_cast<std::size_t>(in.gcount()) != blob.size())
    throw CheckpointError(K::Checksum, path + ": truncated blob (checksum cannot be verified)");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    const std::size_t n = e.rows * e.cols;
    if ((e.offset + n) * 4 > blob.size()) throw CheckpointError(K::Checksum, path + ": tensor extends past blob");
    if (detail::crc_of(blob.data() + e.offset * 4, n * 4) != e.crc)
      throw CheckpointError(K::Checksum, path + ": checksum mismatch for tensor " + ck.tensors[i].name);
    Mat m(e.rows, e.cols);
    const auto* p = reinterpret_cast<const unsigned char*>(blob.data()) + e.offset * 4;
    for (std::size_t j = 0; j < n; ++j) m.data[j] = detail::get_f32_le(p + 4 * j);
    ck.tensors[i].value = std::move(m);
    ck.tensors[i].frozen = e.frozen;
  }
  return ck;
}

}  // namespace reform
