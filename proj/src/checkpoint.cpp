#include "pisco/checkpoint.hpp"

#include <fstream>
#include <unordered_map>

#include "binary_io.hpp"

namespace pisco {
inline namespace PISCO_ABI {

namespace {
constexpr char kMagic[5] = "PSCO";
}

void save_checkpoint(const std::filesystem::path& path, std::span<const Parameter* const> params) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::io, "cannot open " + tmp + " for writing");
    binio::write_magic(out, kMagic);
    binio::write_le<std::uint32_t>(out, kCheckpointVersion);
    for (const Parameter* p : params) {
      binio::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
      out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
      binio::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(p->value.rank()));
      for (std::size_t d : p->value.shape()) binio::write_le<std::uint64_t>(out, d);
      for (Scalar v : p->value.values()) binio::write_le<float>(out, static_cast<float>(v));
    }
    if (!out) fail(ErrorCode::io, "write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open checkpoint " + path.string());
  binio::expect_magic(in, kMagic, path.string());
  const auto version = binio::read_le<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    fail(ErrorCode::format, path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  std::vector<NamedTensor> out;
  while (in.peek() != std::char_traits<char>::eof()) {
    NamedTensor nt;
    const auto len = binio::read_le<std::uint32_t>(in, "name length");
    nt.name.resize(len);
    in.read(nt.name.data(), len);
    if (in.gcount() != static_cast<std::streamsize>(len)) fail(ErrorCode::format, "truncated tensor name");
    const auto rank = binio::read_le<std::uint32_t>(in, "rank of " + nt.name);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(binio::read_le<std::uint64_t>(in, "dims of " + nt.name));
    std::vector<Scalar> data(element_count(shape));
    for (auto& v : data) v = static_cast<Scalar>(binio::read_le<float>(in, "payload of " + nt.name));
    nt.value = Tensor(std::move(shape), std::move(data));
    out.push_back(std::move(nt));
  }
  return out;
}

void load_checkpoint(const std::filesystem::path& path, std::span<Parameter* const> params) {
  auto stored = read_checkpoint(path);
  std::unordered_map<std::string, Tensor*> by_name;
  for (auto& nt : stored) by_name[nt.name] = &nt.value;
  for (Parameter* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) {
      fail(ErrorCode::format, path.string() + ": missing tensor " + p->name);
    }
    if (it->second->shape() != p->value.shape()) {
      fail(ErrorCode::shape_mismatch, path.string() + ": tensor " + p->name + " has shape " +
                                          to_string(it->second->shape()) + ", expected " +
                                          to_string(p->value.shape()));
    }
    p->value = *it->second;
  }
}

}  // namespace PISCO_ABI
}  // namespace pisco
