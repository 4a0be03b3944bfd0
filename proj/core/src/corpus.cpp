#include "layerlens/corpus.hpp"

#include <fmt/format.h>

#include "byte_io.hpp"
#include "layerlens/error.hpp"
#include "layerlens/rng.hpp"

namespace layerlens::corpus {

std::vector<std::uint32_t> load_bytes(const std::filesystem::path& file) {
  const std::string bytes = detail::read_file_bytes(file.string());
  std::vector<std::uint32_t> out;
  out.reserve(bytes.size());
  for (char c : bytes) out.push_back(static_cast<unsigned char>(c));
  return out;
}

std::vector<std::size_t> window_starts(std::size_t begin, std::size_t end,
                                       std::size_t length, std::size_t count,
                                       std::uint64_t seed) {
  if (end < begin || end - begin < length) {
    throw Error(ErrorKind::kConfig,
                fmt::format("corpus range [{}, {}) shorter than window {}", begin,
                            end, length));
  }
  Rng rng(seed);
  std::vector<std::size_t> out;
  out.reserve(count);
  const std::size_t span = end - begin - length + 1;
  for (std::size_t i = 0; i < count; ++i) out.push_back(begin + rng.below(span));
  return out;
}

}  // namespace layerlens::corpus
