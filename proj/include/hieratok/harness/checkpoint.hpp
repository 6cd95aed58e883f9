#pragma once

// "HTOK" checkpoints. Layout, all integers u32 little-endian:
//   magic "HTOK" | version | config length | config text (key=value lines)
//   | record count | records
// Each record: name length | name | rank | dims... | f32 LE values.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "hieratok/errors.hpp"
#include "hieratok/harness/config.hpp"
#include "hieratok/harness/ppm.hpp"
#include "hieratok/tokenizer.hpp"

namespace hieratok {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(const std::string& s) { bytes.insert(bytes.end(), s.begin(), s.end()); }

  std::vector<std::uint8_t> bytes;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& b, std::string context) : b_(b), context_(std::move(context)) {}

  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) throw FormatError(context_ + ": truncated while reading " + what, pos_);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::string raw(std::size_t n, const char* what) {
    need(n, what);
    std::string s(b_.begin() + static_cast<std::ptrdiff_t>(pos_), b_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }
  [[noreturn]] void fail(const std::string& msg, std::size_t at) const { throw FormatError(context_ + ": " + msg, at); }

 private:
  const std::vector<std::uint8_t>& b_;
  std::string context_;
  std::size_t pos_ = 0;
};

/// Writes next to the target and renames, so an interrupted save never leaves a torn file.
inline void write_file_atomically(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  const std::string tmp = path + ".tmp";
  write_file_bytes(tmp, bytes);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw FormatError("cannot move " + tmp + " to " + path + ": " + ec.message(), 0);
}

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const RunConfig& cfg, const TokenizerModel<T>& m) {
  detail::ByteWriter w;
  w.raw("HTOK");
  w.u32(kCheckpointVersion);
  const std::string text = to_config_text(cfg);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.raw(text);
  const auto params = m.parameters();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.u32(static_cast<std::uint32_t>(p.name.size()));
    w.raw(p.name);
    w.u32(static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t d : p.tensor.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (T v : p.tensor.data()) w.f32(static_cast<float>(v));
  }
  return std::move(w.bytes);
}

template <typename T>
void save_checkpoint(const std::string& path, const RunConfig& cfg, const TokenizerModel<T>& m) {
  detail::write_file_atomically(path, encode_checkpoint(cfg, m));
}

struct Checkpoint {
  RunConfig config;
  TokenizerModel<float> model;
};

/// The stored config rebuilds the architecture; every record must then match
/// a parameter by position, name and shape.
inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& context = "checkpoint") {
  detail::ByteReader r(bytes, context);
  if (r.raw(4, "magic") != "HTOK") r.fail("not an HTOK checkpoint", 0);
  const std::size_t version_at = r.pos();
  if (const auto v = r.u32("version"); v != kCheckpointVersion)
    r.fail("unsupported version " + std::to_string(v), version_at);
  const std::uint32_t text_len = r.u32("config length");
  const std::size_t text_at = r.pos();
  Checkpoint ck;
  try {
    ck.config = parse_config_text(r.raw(text_len, "config text"));
    ck.model = make_model<float>(ck.config.model);
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    r.fail(std::string("invalid embedded config: ") + e.what(), text_at);
  }
  auto params = ck.model.parameters();
  const std::size_t count_at = r.pos();
  if (const auto n = r.u32("record count"); n != params.size())
    r.fail("expected " + std::to_string(params.size()) + " records, found " + std::to_string(n), count_at);
  for (auto& p : params) {
    const std::size_t rec_at = r.pos();
    const std::string name = r.raw(r.u32("name length"), "name");
    if (name != p.name) r.fail("expected record '" + p.name + "', found '" + name + "'", rec_at);
    Shape shape(r.u32("rank"));
    for (auto& d : shape) d = r.u32("dims");
    if (shape != p.tensor.shape())
      r.fail(name + ": stored shape " + to_string(shape) + " does not match " + to_string(p.tensor.shape()), rec_at);
    r.need(4 * p.tensor.numel(), "values");
    for (auto& v : p.tensor.mutable_data()) v = r.f32("values");
  }
  if (!r.done()) r.fail("trailing bytes after last record", r.pos());
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file_bytes(path), path); }

}  // namespace hieratok
