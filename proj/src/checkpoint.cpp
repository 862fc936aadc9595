#include "bevis/checkpoint.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>

namespace bevis {

std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

std::vector<unsigned char> encode_checkpoint(std::span<const NamedTensor> records) {
  ByteWriter w;
  w.bytes(kCheckpointMagic);
  for (const auto& r : records) {
    w.scalar<std::uint32_t>(static_cast<std::uint32_t>(r.name.size()));
    w.bytes(r.name);
    w.scalar<std::uint32_t>(static_cast<std::uint32_t>(r.tensor.rank()));
    for (auto d : r.tensor.shape()) w.scalar<std::uint64_t>(d);
    w.array(r.tensor.data());
  }
  return w.take();
}

std::vector<NamedTensor> decode_checkpoint(std::span<const unsigned char> bytes) {
  ByteReader r(bytes);
  if (bytes.size() < kCheckpointMagic.size() ||
      r.bytes(kCheckpointMagic.size(), "magic") != kCheckpointMagic) {
    throw FormatError("bad magic", 0);
  }
  std::vector<NamedTensor> out;
  while (!r.at_end()) {
    const auto name_len = r.scalar<std::uint32_t>("name length");
    std::string name = r.bytes(name_len, "name");
    const auto rank = r.scalar<std::uint32_t>("rank");
    if (rank > 8) throw FormatError("implausible rank " + std::to_string(rank), r.offset() - 4);
    Shape shape;
    std::size_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const auto d = r.scalar<std::uint64_t>("dimension");
      shape.push_back(static_cast<std::size_t>(d));
      numel *= static_cast<std::size_t>(d);
    }
    auto values = r.array<double>(numel, "tensor values");
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> records) {
  write_file_bytes(path, encode_checkpoint(records));
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

const Tensor& find_record(std::span<const NamedTensor> records, std::string_view name) {
  auto it = std::find_if(records.begin(), records.end(),
                         [&](const NamedTensor& r) { return r.name == name; });
  if (it == records.end()) {
    throw std::runtime_error("checkpoint lacks record '" + std::string(name) + "'");
  }
  return it->tensor;
}

void assign_records(const ParameterRegistry& reg, std::span<const NamedTensor> records) {
  auto assign = [&](const NamedTensor& dst) {
    const Tensor& src = find_record(records, dst.name);
    if (src.shape() != dst.tensor.shape()) {
      throw ShapeError("checkpoint record '" + dst.name + "' has shape " +
                       shape_string(src.shape()) + ", network expects " +
                       shape_string(dst.tensor.shape()));
    }
    Tensor target = dst.tensor;
    std::copy(src.data().begin(), src.data().end(), target.mutable_data().begin());
  };
  for (const auto& p : reg.params) assign(p);
  for (const auto& b : reg.buffers) assign(b);
}

}  // namespace bevis
