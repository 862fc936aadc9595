#include "bevis/cloud_io.hpp"

namespace bevis {

std::vector<unsigned char> encode_cloud(const PointCloud& cloud, const CloudExtras& extras) {
  const std::size_t n = cloud.size();
  if (extras.feature_dim && extras.features.size() != n * extras.feature_dim) {
    throw std::invalid_argument("encode_cloud: feature block size mismatch");
  }
  if (extras.num_logits && extras.logits.size() != n * extras.num_logits) {
    throw std::invalid_argument("encode_cloud: logit block size mismatch");
  }
  std::uint32_t flags = 0;
  if (cloud.gt_semantic) flags |= kHasSemantic;
  if (cloud.gt_instance) flags |= kHasInstance;
  if (extras.feature_dim) flags |= kHasInstanceFeatures;
  if (extras.num_logits) flags |= kHasLogits;

  ByteWriter w;
  w.bytes(kCloudMagic);
  w.scalar<std::uint64_t>(n);
  w.scalar<std::uint32_t>(static_cast<std::uint32_t>(kPointFeatures));
  w.scalar<std::uint32_t>(flags);
  if (flags & kHasInstanceFeatures) w.scalar<std::uint32_t>(static_cast<std::uint32_t>(extras.feature_dim));
  if (flags & kHasLogits) w.scalar<std::uint32_t>(static_cast<std::uint32_t>(extras.num_logits));
  w.array(std::span<const double>(cloud.points));
  auto labels = [&](const std::vector<int>& v) {
    for (int x : v) w.scalar<std::int32_t>(static_cast<std::int32_t>(x));
  };
  if (cloud.gt_semantic) labels(*cloud.gt_semantic);
  if (cloud.gt_instance) labels(*cloud.gt_instance);
  if (flags & kHasInstanceFeatures) w.array(std::span<const double>(extras.features));
  if (flags & kHasLogits) w.array(std::span<const double>(extras.logits));
  return w.take();
}

CloudFile decode_cloud(std::span<const unsigned char> bytes) {
  ByteReader r(bytes);
  if (bytes.size() < kCloudMagic.size() || r.bytes(kCloudMagic.size(), "magic") != kCloudMagic) {
    throw FormatError("bad magic", 0);
  }
  const auto n = r.scalar<std::uint64_t>("point count");
  const std::size_t f_offset = r.offset();
  const auto f = r.scalar<std::uint32_t>("feature count");
  if (f != kPointFeatures) {
    throw FormatError("unsupported feature count " + std::to_string(f), f_offset);
  }
  const std::size_t flags_offset = r.offset();
  const auto flags = r.scalar<std::uint32_t>("flags");
  if (flags & ~std::uint32_t{kHasSemantic | kHasInstance | kHasInstanceFeatures | kHasLogits}) {
    throw FormatError("unknown flag bits", flags_offset);
  }
  CloudFile out;
  if (flags & kHasInstanceFeatures) out.extras.feature_dim = r.scalar<std::uint32_t>("feature dim");
  if (flags & kHasLogits) out.extras.num_logits = r.scalar<std::uint32_t>("logit count");
  if (n > r.remaining() / (kPointFeatures * sizeof(double))) {
    throw FormatError("truncated payload: header declares " + std::to_string(n) + " points",
                      r.offset());
  }
  out.cloud.points = r.array<double>(static_cast<std::size_t>(n) * kPointFeatures, "points");
  auto labels = [&](const char* what) {
    auto raw = r.array<std::int32_t>(static_cast<std::size_t>(n), what);
    return std::vector<int>(raw.begin(), raw.end());
  };
  if (flags & kHasSemantic) out.cloud.gt_semantic = labels("semantic labels");
  if (flags & kHasInstance) out.cloud.gt_instance = labels("instance labels");
  if (out.extras.feature_dim) {
    out.extras.features = r.array<double>(n * out.extras.feature_dim, "instance features");
  }
  if (out.extras.num_logits) {
    out.extras.logits = r.array<double>(n * out.extras.num_logits, "logits");
  }
  if (!r.at_end()) throw FormatError("trailing bytes after payload", r.offset());
  return out;
}

void save_cloud(const std::filesystem::path& path, const PointCloud& cloud, const CloudExtras& extras) {
  write_file_bytes(path, encode_cloud(cloud, extras));
}

CloudFile load_cloud(const std::filesystem::path& path) {
  return decode_cloud(read_file_bytes(path));
}

}  // namespace bevis
