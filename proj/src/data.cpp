#include "demt/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

namespace demt {
namespace {

namespace fs = std::filesystem;
using Kind = DataError::Kind;

constexpr char kMagic[4] = {'D', 'M', 'T', '1'};
constexpr uint32_t kPlaneChannels[4] = {3, 1, 1, 3};

constexpr double kAlbedo[8][3] = {
    {0.55, 0.50, 0.45}, {0.80, 0.25, 0.20}, {0.20, 0.65, 0.30},
    {0.20, 0.35, 0.80}, {0.80, 0.70, 0.20}, {0.60, 0.25, 0.70},
    {0.20, 0.70, 0.70}, {0.85, 0.50, 0.15}};

// Quantize through f32 so disk round trips reproduce values bitwise. The
// narrowing must survive optimization (gcc's vectorizer elides a plain
// double->float->double chain at -O3), hence the volatile store.
double q32(double v) {
  volatile float f = static_cast<float>(v);
  return static_cast<double>(f);
}

// Scene geometry lives in world units of min(height, width) pixels; the
// camera is orthographic, looking along +z, so the nearest (smallest z)
// surface wins at every pixel.
struct Surface {
  bool is_sphere = false;
  int64_t label = 0;
  double cx = 0, cy = 0, cz = 0;  // anchor point / sphere center
  double ax = 0, ay = 0;          // plane slopes dz/dx, dz/dy
  double hx = -1, hy = -1;        // plane half extents; negative = unbounded
  double r = 0;                   // sphere radius

  bool hit(double x, double y, double* z, double n[3]) const {
    const double dx = x - cx;
    const double dy = y - cy;
    if (is_sphere) {
      const double s = r * r - dx * dx - dy * dy;
      if (s <= 0.0) return false;
      const double root = std::sqrt(s);
      *z = cz - root;
      n[0] = dx / r;
      n[1] = dy / r;
      n[2] = -root / r;
      return true;
    }
    if (hx >= 0.0 && (std::abs(dx) > hx || std::abs(dy) > hy)) return false;
    *z = cz + ax * dx + ay * dy;
    const double len = std::sqrt(ax * ax + ay * ay + 1.0);
    n[0] = ax / len;
    n[1] = ay / len;
    n[2] = -1.0 / len;
    return true;
  }
};

std::string sample_name(int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "sample_%06lld.dmt",
                static_cast<long long>(index));
  return buf;
}

void put_u32(std::vector<unsigned char>& out, uint32_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
}

void put_u16(std::vector<unsigned char>& out, uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
}

void put_f32(std::vector<unsigned char>& out, double v) {
  put_u32(out, std::bit_cast<uint32_t>(static_cast<float>(v)));
}

struct Cursor {
  const std::vector<unsigned char>& buf;
  const std::string& file;
  size_t off = 0;

  void need(size_t bytes, const char* what) {
    if (off + bytes > buf.size()) {
      throw DataError(Kind::truncated,
                      file + ": truncated while reading " + what);
    }
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = static_cast<uint32_t>(buf[off]) |
                 static_cast<uint32_t>(buf[off + 1]) << 8 |
                 static_cast<uint32_t>(buf[off + 2]) << 16 |
                 static_cast<uint32_t>(buf[off + 3]) << 24;
    off += 4;
    return v;
  }
  uint16_t u16(const char* what) {
    need(2, what);
    uint16_t v = static_cast<uint16_t>(
        static_cast<uint32_t>(buf[off]) |
        static_cast<uint32_t>(buf[off + 1]) << 8);
    off += 2;
    return v;
  }
  double f32(const char* what) {
    return static_cast<double>(std::bit_cast<float>(u32(what)));
  }
};

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

int64_t manifest_int(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    int64_t v = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw DataError(Kind::corrupt_header,
                    "manifest.txt: bad value for " + key + ": " + value);
  }
}

void check_sample_shapes(const Sample& s, int64_t h, int64_t w) {
  if (s.image.shape() != Shape{h, w, 3} || s.semseg.shape() != Shape{h, w} ||
      s.depth.shape() != Shape{h, w} || s.normal.shape() != Shape{h, w, 3}) {
    throw std::invalid_argument("dataset sample has inconsistent shapes");
  }
}

}  // namespace

Sample generate_scene(uint64_t seed, int64_t height, int64_t width,
                      int64_t num_classes) {
  if (height < 8 || width < 8) {
    throw std::invalid_argument("generate_scene: extents must be at least 8x8");
  }
  if (num_classes < 2) {
    throw std::invalid_argument("generate_scene: need at least 2 classes");
  }
  Rng rng(seed);
  const double m = static_cast<double>(std::min(height, width));
  const double aspect = m / static_cast<double>(std::max(height, width));

  std::vector<Surface> scene;
  {
    Surface ground;
    ground.label = 0;
    ground.cx = 0.5 * static_cast<double>(width) / m;
    ground.cy = 0.5 * static_cast<double>(height) / m;
    ground.cz = rng.uniform(3.8, 4.4);
    // Slopes shrink with aspect ratio so the far corners stay well in front
    // of the objects and the depth stays positive.
    ground.ax = rng.uniform(-0.15, 0.15) * aspect;
    ground.ay = rng.uniform(-0.15, 0.15) * aspect;
    scene.push_back(ground);
  }
  const int64_t objects = 2 + rng.uniform_int(4);
  for (int64_t i = 0; i < objects; ++i) {
    Surface s;
    s.label = 1 + i % (num_classes - 1);
    s.cx = rng.uniform(0.2, 0.8) * static_cast<double>(width) / m;
    s.cy = rng.uniform(0.2, 0.8) * static_cast<double>(height) / m;
    s.cz = rng.uniform(1.4, 3.2);
    if (rng.uniform_int(2) == 0) {
      s.is_sphere = true;
      s.r = rng.uniform(0.10, 0.22);
    } else {
      s.hx = rng.uniform(0.10, 0.28);
      s.hy = rng.uniform(0.10, 0.28);
      s.ax = rng.uniform(-0.5, 0.5);
      s.ay = rng.uniform(-0.5, 0.5);
    }
    scene.push_back(s);
  }

  const double llen = std::sqrt(0.4 * 0.4 + 0.3 * 0.3 + 0.85 * 0.85);
  const double light[3] = {0.4 / llen, 0.3 / llen, -0.85 / llen};

  const int64_t pixels = height * width;
  std::vector<double> image(pixels * 3);
  std::vector<double> depth(pixels);
  std::vector<double> normal(pixels * 3);
  std::vector<int64_t> raw_label(pixels);

  for (int64_t i = 0; i < height; ++i) {
    for (int64_t j = 0; j < width; ++j) {
      const double x = (static_cast<double>(j) + 0.5) / m;
      const double y = (static_cast<double>(i) + 0.5) / m;
      double best_z = std::numeric_limits<double>::infinity();
      double best_n[3] = {0, 0, -1};
      int64_t best_label = 0;
      for (const Surface& s : scene) {
        double z = 0;
        double n[3];
        if (s.hit(x, y, &z, n) && z < best_z) {
          best_z = z;
          best_label = s.label;
          std::memcpy(best_n, n, sizeof(best_n));
        }
      }
      const int64_t p = i * width + j;
      raw_label[p] = best_label;
      depth[p] = q32(best_z);
      for (int c = 0; c < 3; ++c) normal[p * 3 + c] = q32(best_n[c]);
      const double shade =
          std::max(0.0, best_n[0] * light[0] + best_n[1] * light[1] +
                            best_n[2] * light[2]);
      const double* albedo = kAlbedo[best_label % 8];
      for (int c = 0; c < 3; ++c) {
        const double v =
            albedo[c] * (0.25 + 0.7 * shade) + rng.uniform(-0.02, 0.02);
        image[p * 3 + c] = q32(std::clamp(v, 0.0, 1.0));
      }
    }
  }

  // One-pixel ignore band wherever the class changes between 4-neighbors.
  std::vector<double> label(pixels);
  for (int64_t i = 0; i < height; ++i) {
    for (int64_t j = 0; j < width; ++j) {
      const int64_t p = i * width + j;
      bool edge = false;
      if (i > 0 && raw_label[p - width] != raw_label[p]) edge = true;
      if (i + 1 < height && raw_label[p + width] != raw_label[p]) edge = true;
      if (j > 0 && raw_label[p - 1] != raw_label[p]) edge = true;
      if (j + 1 < width && raw_label[p + 1] != raw_label[p]) edge = true;
      label[p] = edge ? 255.0 : static_cast<double>(raw_label[p]);
    }
  }

  Sample out;
  out.image = Tensor({height, width, 3}, std::move(image));
  out.semseg = Tensor({height, width}, std::move(label));
  out.depth = Tensor({height, width}, std::move(depth));
  out.normal = Tensor({height, width, 3}, std::move(normal));
  return out;
}

void write_dataset(const std::string& dir, const DatasetManifest& manifest,
                   const std::vector<Sample>& samples) {
  if (manifest.count != static_cast<int64_t>(samples.size())) {
    throw std::invalid_argument("write_dataset: manifest count " +
                                std::to_string(manifest.count) +
                                " != " + std::to_string(samples.size()) +
                                " samples");
  }
  if (manifest.height < 1 || manifest.width < 1 || manifest.classes < 2) {
    throw std::invalid_argument("write_dataset: bad manifest geometry");
  }
  const fs::path root(dir);
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw DataError(Kind::io, "cannot create " + root.string());

  {
    std::ofstream out(root / "manifest.txt");
    if (!out) {
      throw DataError(Kind::io,
                      "cannot write " + (root / "manifest.txt").string());
    }
    out << "count = " << manifest.count << "\n"
        << "height = " << manifest.height << "\n"
        << "width = " << manifest.width << "\n"
        << "classes = " << manifest.classes << "\n"
        << "split = " << manifest.split << "\n"
        << "seed = " << manifest.seed << "\n";
    if (!out.flush()) {
      throw DataError(Kind::io,
                      "failed writing " + (root / "manifest.txt").string());
    }
  }

  const int64_t h = manifest.height;
  const int64_t w = manifest.width;
  for (int64_t i = 0; i < manifest.count; ++i) {
    const Sample& s = samples[static_cast<size_t>(i)];
    check_sample_shapes(s, h, w);

    std::vector<unsigned char> buf;
    buf.reserve(static_cast<size_t>(h * w) * 30 + 32);
    buf.insert(buf.end(), kMagic, kMagic + 4);
    put_u32(buf, static_cast<uint32_t>(h));
    put_u32(buf, static_cast<uint32_t>(w));
    for (uint32_t c : kPlaneChannels) put_u32(buf, c);
    for (double v : s.image.data()) put_f32(buf, v);
    for (double v : s.semseg.data()) {
      const long long lab = std::llround(v);
      if (static_cast<double>(lab) != v || lab < 0 || lab > 65535) {
        throw std::invalid_argument("write_dataset: label out of u16 range");
      }
      put_u16(buf, static_cast<uint16_t>(lab));
    }
    for (double v : s.depth.data()) put_f32(buf, v);
    for (double v : s.normal.data()) put_f32(buf, v);

    const fs::path path = root / sample_name(i);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(Kind::io, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
    if (!out.flush()) {
      throw DataError(Kind::io, "failed writing " + path.string());
    }
  }
}

Dataset load_dataset(const std::string& dir) {
  const fs::path root(dir);
  std::ifstream man(root / "manifest.txt");
  if (!man) {
    throw DataError(Kind::io,
                    "cannot open " + (root / "manifest.txt").string());
  }

  DatasetManifest manifest;
  bool seen[6] = {};
  std::string line;
  while (std::getline(man, line)) {
    const std::string text = trim(line);
    if (text.empty()) continue;
    const size_t eq = text.find('=');
    if (eq == std::string::npos) {
      throw DataError(Kind::corrupt_header,
                      "manifest.txt: expected key = value, got: " + text);
    }
    const std::string key = trim(text.substr(0, eq));
    const std::string value = trim(text.substr(eq + 1));
    if (key == "count") {
      manifest.count = manifest_int(key, value);
      seen[0] = true;
    } else if (key == "height") {
      manifest.height = manifest_int(key, value);
      seen[1] = true;
    } else if (key == "width") {
      manifest.width = manifest_int(key, value);
      seen[2] = true;
    } else if (key == "classes") {
      manifest.classes = manifest_int(key, value);
      seen[3] = true;
    } else if (key == "split") {
      manifest.split = value;
      seen[4] = true;
    } else if (key == "seed") {
      manifest.seed = static_cast<uint64_t>(manifest_int(key, value));
      seen[5] = true;
    } else {
      throw DataError(Kind::corrupt_header,
                      "manifest.txt: unknown key: " + key);
    }
  }
  for (bool s : seen) {
    if (!s) {
      throw DataError(Kind::corrupt_header,
                      "manifest.txt: missing required key");
    }
  }
  if (manifest.count < 0 || manifest.height < 1 || manifest.width < 1 ||
      manifest.classes < 2) {
    throw DataError(Kind::corrupt_header, "manifest.txt: bad geometry");
  }

  int64_t present = 0;
  for (const auto& entry : fs::directory_iterator(root)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("sample_", 0) == 0 && name.size() > 4 &&
        name.substr(name.size() - 4) == ".dmt") {
      ++present;
    }
  }
  if (present != manifest.count) {
    throw DataError(Kind::manifest_mismatch,
                    "manifest count " + std::to_string(manifest.count) +
                        " != " + std::to_string(present) + " sample files");
  }

  Dataset data;
  data.manifest = manifest;
  data.samples.reserve(static_cast<size_t>(manifest.count));
  const int64_t h = manifest.height;
  const int64_t w = manifest.width;
  const int64_t pixels = h * w;

  for (int64_t i = 0; i < manifest.count; ++i) {
    const std::string name = sample_name(i);
    const fs::path path = root / name;
    std::ifstream in(path, std::ios::binary);
    if (!in) {
      throw DataError(Kind::manifest_mismatch,
                      "manifest promises " + std::to_string(manifest.count) +
                          " samples but " + name + " is missing");
    }
    std::vector<unsigned char> bytes(
        (std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    Cursor cur{bytes, name};

    cur.need(4, "magic");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
      throw DataError(Kind::corrupt_header, name + ": bad magic");
    }
    cur.off = 4;
    const uint32_t fh = cur.u32("height");
    const uint32_t fw = cur.u32("width");
    if (static_cast<int64_t>(fh) != h || static_cast<int64_t>(fw) != w) {
      throw DataError(Kind::manifest_mismatch,
                      name + ": size " + std::to_string(fh) + "x" +
                          std::to_string(fw) + " does not match manifest " +
                          std::to_string(h) + "x" + std::to_string(w));
    }
    for (uint32_t c : kPlaneChannels) {
      if (cur.u32("plane channels") != c) {
        throw DataError(Kind::corrupt_header,
                        name + ": unexpected plane layout");
      }
    }

    std::vector<double> image(static_cast<size_t>(pixels * 3));
    std::vector<double> label(static_cast<size_t>(pixels));
    std::vector<double> depth(static_cast<size_t>(pixels));
    std::vector<double> normal(static_cast<size_t>(pixels * 3));
    for (double& v : image) v = cur.f32("image plane");
    for (double& v : label) v = static_cast<double>(cur.u16("label plane"));
    for (double& v : depth) v = cur.f32("depth plane");
    for (double& v : normal) v = cur.f32("normal plane");
    if (cur.off != bytes.size()) {
      throw DataError(Kind::corrupt_header, name + ": trailing bytes");
    }

    Sample s;
    s.image = Tensor({h, w, 3}, std::move(image));
    s.semseg = Tensor({h, w}, std::move(label));
    s.depth = Tensor({h, w}, std::move(depth));
    s.normal = Tensor({h, w, 3}, std::move(normal));
    data.samples.push_back(std::move(s));
  }
  return data;
}

std::vector<int64_t> epoch_permutation(int64_t count, uint64_t shuffle_seed,
                                       int64_t epoch) {
  if (count < 0) throw std::invalid_argument("epoch_permutation: count < 0");
  if (epoch < 0) throw std::invalid_argument("epoch_permutation: epoch < 0");
  std::vector<int64_t> order(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) order[static_cast<size_t>(i)] = i;
  Rng rng(shuffle_seed ^
          0x9e3779b97f4a7c15ULL * (static_cast<uint64_t>(epoch) + 1));
  for (int64_t i = count - 1; i > 0; --i) {
    const int64_t j = rng.uniform_int(i + 1);
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
  }
  return order;
}

Batch make_batch(const Dataset& data, const std::vector<int64_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty batch");
  const int64_t h = data.manifest.height;
  const int64_t w = data.manifest.width;
  const int64_t b = static_cast<int64_t>(indices.size());
  const int64_t pixels = h * w;

  std::vector<double> image(static_cast<size_t>(b * pixels * 3));
  std::vector<double> label(static_cast<size_t>(b * pixels));
  std::vector<double> depth(static_cast<size_t>(b * pixels));
  std::vector<double> normal(static_cast<size_t>(b * pixels * 3));
  for (int64_t r = 0; r < b; ++r) {
    const int64_t idx = indices[static_cast<size_t>(r)];
    if (idx < 0 || idx >= static_cast<int64_t>(data.samples.size())) {
      throw std::invalid_argument("make_batch: index out of range");
    }
    const Sample& s = data.samples[static_cast<size_t>(idx)];
    check_sample_shapes(s, h, w);
    std::copy_n(s.image.data().begin(), pixels * 3,
                image.begin() + r * pixels * 3);
    std::copy_n(s.semseg.data().begin(), pixels,
                label.begin() + r * pixels);
    std::copy_n(s.depth.data().begin(), pixels, depth.begin() + r * pixels);
    std::copy_n(s.normal.data().begin(), pixels * 3,
                normal.begin() + r * pixels * 3);
  }

  Batch out;
  out.image = Tensor({b, h, w, 3}, std::move(image));
  out.semseg = Tensor({b, h, w}, std::move(label));
  out.depth = Tensor({b, h, w, 1}, std::move(depth));
  out.normal = Tensor({b, h, w, 3}, std::move(normal));
  out.indices = indices;
  return out;
}

std::vector<Batch> batch_iter(const Dataset& data, int64_t batch_size,
                              uint64_t shuffle_seed, int64_t epoch) {
  if (batch_size < 1) throw std::invalid_argument("batch_iter: batch_size < 1");
  const int64_t n = static_cast<int64_t>(data.samples.size());
  const std::vector<int64_t> order = epoch_permutation(n, shuffle_seed, epoch);
  std::vector<Batch> batches;
  for (int64_t start = 0; start < n; start += batch_size) {
    const int64_t stop = std::min(n, start + batch_size);
    batches.push_back(make_batch(
        data, std::vector<int64_t>(order.begin() + start,
                                   order.begin() + stop)));
  }
  return batches;
}

}  // namespace demt
