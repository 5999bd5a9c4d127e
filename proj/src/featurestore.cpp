#include "scale/featurestore.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace scale {

namespace {

constexpr char kMagic[4] = {'S', 'C', 'F', 'S'};
constexpr std::uint32_t kVersion = 1;

// Little-endian writers/readers; byte-order explicit so files are portable.
void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_i32(std::string& out, std::int32_t v) { put_u32(out, static_cast<std::uint32_t>(v)); }
void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;

  void need(size_t n, const char* what) {
    if (pos + n > buf.size())
      throw StoreError(StoreErrorKind::truncated,
                       std::string("store truncated while reading ") + what + ": need " +
                           std::to_string(pos + n) + " bytes, file has " +
                           std::to_string(buf.size()));
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return v;
  }
  std::int32_t i32(const char* what) { return static_cast<std::int32_t>(u32(what)); }
  float f32(const char* what) {
    std::uint32_t bits = u32(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string bytes(size_t n, const char* what) {
    need(n, what);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

void validate_video(const VideoRecord& v, std::uint32_t feature_dim) {
  if (v.clips.empty())
    throw StoreError(StoreErrorKind::invalid, "video '" + v.id + "' has no clips");
  if (v.height == 0 || v.width == 0 || v.frames == 0)
    throw StoreError(StoreErrorKind::invalid, "video '" + v.id + "' has zero dims");
  for (const ClipRecord& c : v.clips) {
    const CropBox& b = c.coords;
    if (b.x < 0 || b.y < 0 || b.q < 0 || b.h <= 0 || b.w <= 0 || b.t <= 0 ||
        b.x + b.h > static_cast<float>(v.height) || b.y + b.w > static_cast<float>(v.width) ||
        b.q + b.t > static_cast<float>(v.frames))
      throw StoreError(StoreErrorKind::invalid,
                       "video '" + v.id + "': crop box does not fit video dims");
    if (c.feature.size() != feature_dim)
      throw StoreError(StoreErrorKind::invalid,
                       "video '" + v.id + "': feature length " + std::to_string(c.feature.size()) +
                           " != store dim " + std::to_string(feature_dim));
    for (float f : c.feature)
      if (!std::isfinite(f))
        throw StoreError(StoreErrorKind::invalid, "video '" + v.id + "': non-finite feature");
  }
}

}  // namespace

bool FeatureStore::labeled() const {
  return !videos.empty() &&
         std::all_of(videos.begin(), videos.end(), [](const VideoRecord& v) { return v.label != kNoLabel; });
}

i64 FeatureStore::clip_count() const {
  i64 n = 0;
  for (const auto& v : videos) n += static_cast<i64>(v.clips.size());
  return n;
}

void validate_store(const FeatureStore& store) {
  std::set<std::string> ids;
  for (const VideoRecord& v : store.videos) {
    if (!ids.insert(v.id).second)
      throw StoreError(StoreErrorKind::invalid, "duplicate video id '" + v.id + "'");
    validate_video(v, store.feature_dim);
  }
}

std::uint64_t write_store(const FeatureStore& store, const std::string& path) {
  validate_store(store);
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, store.feature_dim);
  put_u64(out, static_cast<std::uint64_t>(store.videos.size()));
  for (const VideoRecord& v : store.videos) {
    put_u32(out, static_cast<std::uint32_t>(v.id.size()));
    out.append(v.id);
    put_i32(out, v.label);
    put_u32(out, v.height);
    put_u32(out, v.width);
    put_u32(out, v.frames);
    put_u32(out, static_cast<std::uint32_t>(v.clips.size()));
    for (const ClipRecord& c : v.clips) {
      put_f32(out, c.coords.x);
      put_f32(out, c.coords.y);
      put_f32(out, c.coords.q);
      put_f32(out, c.coords.h);
      put_f32(out, c.coords.w);
      put_f32(out, c.coords.t);
      for (float f : c.feature) put_f32(out, f);
    }
  }
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw StoreError(StoreErrorKind::io, "cannot open for writing: " + tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw StoreError(StoreErrorKind::io, "write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw StoreError(StoreErrorKind::io, "rename failed: " + path + ": " + ec.message());
  return out.size();
}

FeatureStore read_store(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw StoreError(StoreErrorKind::io, "cannot open: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  std::string buf = ss.str();

  Reader r{buf};
  std::string magic = r.bytes(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0)
    throw StoreError(StoreErrorKind::bad_magic, "bad magic in " + path + ": '" + magic + "'");
  std::uint32_t version = r.u32("version");
  if (version != kVersion)
    throw StoreError(StoreErrorKind::bad_version,
                     "unsupported store version " + std::to_string(version));
  FeatureStore store;
  store.feature_dim = r.u32("feature_dim");
  std::uint64_t count = r.u64("video_count");
  store.videos.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    VideoRecord v;
    std::uint32_t id_len = r.u32("id_len");
    v.id = r.bytes(id_len, "id");
    v.label = r.i32("label");
    v.height = r.u32("H");
    v.width = r.u32("W");
    v.frames = r.u32("T");
    std::uint32_t clips = r.u32("clip_count");
    v.clips.reserve(clips);
    for (std::uint32_t c = 0; c < clips; ++c) {
      ClipRecord clip;
      clip.coords.x = r.f32("crop");
      clip.coords.y = r.f32("crop");
      clip.coords.q = r.f32("crop");
      clip.coords.h = r.f32("crop");
      clip.coords.w = r.f32("crop");
      clip.coords.t = r.f32("crop");
      clip.feature.resize(store.feature_dim);
      for (std::uint32_t d = 0; d < store.feature_dim; ++d) clip.feature[d] = r.f32("feature");
      v.clips.push_back(std::move(clip));
    }
    store.videos.push_back(std::move(v));
  }
  if (r.pos != buf.size())
    throw StoreError(StoreErrorKind::truncated,
                     "trailing bytes: expected " + std::to_string(r.pos) + ", file has " +
                         std::to_string(buf.size()));
  validate_store(store);
  return store;
}

FeatureStore import_delimited(const std::string& path, std::uint32_t height, std::uint32_t width,
                              std::uint32_t frames, std::uint32_t feature_dim) {
  std::ifstream f(path);
  if (!f) throw StoreError(StoreErrorKind::io, "cannot open: " + path);

  FeatureStore store;
  store.feature_dim = feature_dim;
  std::map<std::string, size_t> index;       // id -> position in store.videos
  std::map<std::string, size_t> first_line;  // id -> line that introduced it

  std::string line;
  size_t lineno = 0;
  const size_t expected_fields = 8 + feature_dim;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ls(line);
    std::string tok;
    while (std::getline(ls, tok, ',')) fields.push_back(tok);
    if (fields.size() != expected_fields)
      throw StoreError(StoreErrorKind::invalid,
                       "line " + std::to_string(lineno) + ": expected " +
                           std::to_string(expected_fields) + " fields, got " +
                           std::to_string(fields.size()));
    auto num = [&](size_t i) -> double {
      try {
        size_t used = 0;
        double v = std::stod(fields[i], &used);
        if (used != fields[i].size()) throw std::invalid_argument("trailing");
        return v;
      } catch (const std::exception&) {
        throw StoreError(StoreErrorKind::invalid, "line " + std::to_string(lineno) +
                                                      ": cannot parse number '" + fields[i] + "'");
      }
    };
    const std::string& id = fields[0];
    auto label = static_cast<std::int32_t>(num(1));
    ClipRecord clip;
    clip.coords.x = static_cast<float>(num(2));
    clip.coords.y = static_cast<float>(num(3));
    clip.coords.q = static_cast<float>(num(4));
    clip.coords.h = static_cast<float>(num(5));
    clip.coords.w = static_cast<float>(num(6));
    clip.coords.t = static_cast<float>(num(7));
    clip.feature.resize(feature_dim);
    for (std::uint32_t d = 0; d < feature_dim; ++d) clip.feature[d] = static_cast<float>(num(8 + d));

    auto it = index.find(id);
    if (it == index.end()) {
      VideoRecord v;
      v.id = id;
      v.label = label;
      v.height = height;
      v.width = width;
      v.frames = frames;
      v.clips.push_back(std::move(clip));
      index[id] = store.videos.size();
      first_line[id] = lineno;
      store.videos.push_back(std::move(v));
    } else {
      VideoRecord& v = store.videos[it->second];
      if (v.label != label)
        throw StoreError(StoreErrorKind::invalid,
                         "line " + std::to_string(lineno) + ": label " + std::to_string(label) +
                             " conflicts with label " + std::to_string(v.label) + " from line " +
                             std::to_string(first_line[id]) + " for video '" + id + "'");
      v.clips.push_back(std::move(clip));
    }
  }
  try {
    validate_store(store);
  } catch (const StoreError& e) {
    throw StoreError(e.kind, std::string(e.what()) + " (imported from " + path + ")");
  }
  return store;
}

void SyntheticSpec::validate() const {
  if (num_classes <= 0 || train_videos_per_class <= 0 || eval_videos_per_class <= 0 ||
      feature_dim <= 0 || clips_per_train_video <= 0 || clips_per_eval_video <= 0)
    throw std::invalid_argument("synthetic spec: all counts must be positive");
  if (base_scale < 0 || drift_scale < 0 || noise_scale < 0)
    throw std::invalid_argument("synthetic spec: scales must be >= 0");
  if (clips_per_eval_video % 3 != 0)
    throw std::invalid_argument("synthetic spec: clips_per_eval_video must be a multiple of 3");
}

SyntheticStores generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  constexpr std::uint32_t H = 224, W = 224, T = 160;
  constexpr i64 clip_frames = 16;
  const i64 D = spec.feature_dim;

  Rng rng(spec.seed);

  auto gauss_vec = [&](double sigma) {
    std::vector<double> v(static_cast<size_t>(D));
    for (auto& x : v) x = sigma * rng.normal();
    return v;
  };

  // One unit direction per class.
  std::vector<std::vector<double>> class_dirs;
  class_dirs.reserve(spec.num_classes);
  for (i64 c = 0; c < spec.num_classes; ++c) {
    Tensor<double> raw({D}, gauss_vec(1.0));
    class_dirs.push_back(l2_normalize(raw).data);
  }

  auto clip_feature = [&](const std::vector<double>& z, const std::vector<double>& dir,
                          const CropBox& box) {
    double m = (static_cast<double>(box.q) + static_cast<double>(box.t) / 2.0) / T;
    std::vector<float> feat(static_cast<size_t>(D));
    for (i64 d = 0; d < D; ++d) {
      double v = z[static_cast<size_t>(d)] + (m - 0.5) * spec.drift_scale * dir[static_cast<size_t>(d)] +
                 spec.noise_scale * rng.normal();
      feat[static_cast<size_t>(d)] = static_cast<float>(v);
    }
    return feat;
  };

  auto make_video = [&](i64 cls, const std::string& id, bool train) {
    VideoRecord v;
    v.id = id;
    v.label = static_cast<std::int32_t>(cls);
    v.height = H;
    v.width = W;
    v.frames = T;
    std::vector<double> z = gauss_vec(spec.base_scale);
    const auto& dir = class_dirs[static_cast<size_t>(cls)];
    if (train) {
      for (i64 k = 0; k < spec.clips_per_train_video; ++k) {
        CropBox b;
        b.q = static_cast<float>(rng.uniform_int(0, T - clip_frames));
        b.t = static_cast<float>(clip_frames);
        i64 extent = rng.uniform_int(H / 2, H);
        b.h = b.w = static_cast<float>(extent);
        b.x = static_cast<float>(rng.uniform_int(0, H - extent));
        b.y = static_cast<float>(rng.uniform_int(0, W - extent));
        v.clips.push_back({b, clip_feature(z, dir, b)});
      }
    } else {
      // Uniform temporal grid x 3 spatial crops (left/center/right).
      i64 n_temporal = spec.clips_per_eval_video / 3;
      constexpr i64 e = H / 2;
      const i64 y_offsets[3] = {0, (W - e) / 2, W - e};
      for (i64 ti = 0; ti < n_temporal; ++ti) {
        double frac = n_temporal > 1 ? static_cast<double>(ti) / static_cast<double>(n_temporal - 1) : 0.5;
        i64 q = static_cast<i64>(std::llround(frac * (T - clip_frames)));
        for (i64 s = 0; s < 3; ++s) {
          CropBox b;
          b.q = static_cast<float>(q);
          b.t = static_cast<float>(clip_frames);
          b.h = b.w = static_cast<float>(e);
          b.x = static_cast<float>((H - e) / 2);
          b.y = static_cast<float>(y_offsets[s]);
          v.clips.push_back({b, clip_feature(z, dir, b)});
        }
      }
    }
    return v;
  };

  SyntheticStores out;
  out.train.feature_dim = static_cast<std::uint32_t>(D);
  out.eval.feature_dim = static_cast<std::uint32_t>(D);
  for (i64 c = 0; c < spec.num_classes; ++c)
    for (i64 i = 0; i < spec.train_videos_per_class; ++i)
      out.train.videos.push_back(make_video(c, "train_c" + std::to_string(c) + "_v" + std::to_string(i), true));
  for (i64 c = 0; c < spec.num_classes; ++c)
    for (i64 i = 0; i < spec.eval_videos_per_class; ++i)
      out.eval.videos.push_back(make_video(c, "eval_c" + std::to_string(c) + "_v" + std::to_string(i), false));
  return out;
}

StoreStats store_stats(const FeatureStore& store) {
  StoreStats s;
  s.video_count = static_cast<i64>(store.videos.size());
  s.clip_count = store.clip_count();
  s.feature_dim = store.feature_dim;
  s.labeled = store.labeled();
  bool first = true;
  for (const VideoRecord& v : store.videos) {
    if (v.label != kNoLabel) s.label_histogram[v.label] += 1;
    for (const ClipRecord& c : v.clips) {
      const CropBox& b = c.coords;
      if (first) {
        s.coord_min = s.coord_max = b;
        first = false;
      } else {
        s.coord_min.x = std::min(s.coord_min.x, b.x);
        s.coord_min.y = std::min(s.coord_min.y, b.y);
        s.coord_min.q = std::min(s.coord_min.q, b.q);
        s.coord_min.h = std::min(s.coord_min.h, b.h);
        s.coord_min.w = std::min(s.coord_min.w, b.w);
        s.coord_min.t = std::min(s.coord_min.t, b.t);
        s.coord_max.x = std::max(s.coord_max.x, b.x);
        s.coord_max.y = std::max(s.coord_max.y, b.y);
        s.coord_max.q = std::max(s.coord_max.q, b.q);
        s.coord_max.h = std::max(s.coord_max.h, b.h);
        s.coord_max.w = std::max(s.coord_max.w, b.w);
        s.coord_max.t = std::max(s.coord_max.t, b.t);
      }
    }
  }
  return s;
}

std::string format_stats(const StoreStats& s) {
  std::ostringstream os;
  os << "videos: " << s.video_count << "\n";
  os << "clips: " << s.clip_count << "\n";
  os << "feature_dim: " << s.feature_dim << "\n";
  if (s.labeled) {
    os << "labels:";
    for (const auto& [cls, n] : s.label_histogram) os << " " << cls << ":" << n;
    os << "\n";
  } else {
    os << "labels: absent\n";
  }
  if (s.clip_count > 0) {
    os << "crop x: [" << s.coord_min.x << ", " << s.coord_max.x << "]\n";
    os << "crop y: [" << s.coord_min.y << ", " << s.coord_max.y << "]\n";
    os << "crop q: [" << s.coord_min.q << ", " << s.coord_max.q << "]\n";
    os << "crop h: [" << s.coord_min.h << ", " << s.coord_max.h << "]\n";
    os << "crop w: [" << s.coord_min.w << ", " << s.coord_max.w << "]\n";
    os << "crop t: [" << s.coord_min.t << ", " << s.coord_max.t << "]\n";
  }
  return os.str();
}

}  // namespace scale
