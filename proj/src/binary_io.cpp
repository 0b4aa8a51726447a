#include "mmrobust/binary_io.hpp"

#include <fstream>
#include <iterator>
#include <limits>

namespace mmrobust::io {

void Writer::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes_.data()),
            static_cast<std::streamsize>(bytes_.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

Reader Reader::open(const std::filesystem::path& path, std::string what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return Reader(std::move(bytes), std::move(what));
}

void Reader::expect_magic(std::string_view tag) {
  if (bytes_.size() < pos_ + tag.size() ||
      std::memcmp(bytes_.data() + pos_, tag.data(), tag.size()) != 0) {
    throw FormatError(what_ + ": bad magic, expected \"" + std::string(tag) + "\"");
  }
  pos_ += tag.size();
}

void Reader::expect_end() const {
  if (!at_end()) {
    throw FormatError(what_ + ": " + std::to_string(bytes_.size() - pos_) +
                      " trailing bytes after payload");
  }
}

std::uint64_t Reader::get(int width) {
  if (bytes_.size() - pos_ < static_cast<std::size_t>(width)) {
    throw FormatError(what_ + ": truncated file at byte " + std::to_string(pos_));
  }
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
  pos_ += static_cast<std::size_t>(width);
  return v;
}

std::uint32_t checked_u32(std::size_t v, const char* field) {
  if (v > std::numeric_limits<std::uint32_t>::max()) {
    throw SpecError(std::string(field) + " does not fit in 32 bits");
  }
  return static_cast<std::uint32_t>(v);
}

}  // namespace mmrobust::io
