#include "vasa/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

namespace vasa {

void clamp_(Tensor& t, double lo, double hi) {
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = clamp(t[i], lo, hi);
}

Tensor clamped(const Tensor& t, double lo, double hi) {
  Tensor r = t;
  clamp_(r, lo, hi);
  return r;
}

void save_pgm(const std::string& path, const Tensor& img) {
  const Tensor* p = &img;
  Tensor flat;
  if (img.rank() == 3) {
    require(img.dim(0) == 1, "save_pgm expects a single channel");
    flat = img.reshaped({img.dim(1), img.dim(2)});
    p = &flat;
  }
  require(p->rank() == 2, "save_pgm expects HW or 1HW");
  int64_t h = p->dim(0), w = p->dim(1);
  std::ofstream f(path, std::ios::binary);
  require(f.good(), "cannot write image: " + path);
  f << "P5\n" << w << " " << h << "\n255\n";
  for (int64_t i = 0; i < h * w; ++i) {
    double v = clamp(((*p)[i] + 1.0) * 0.5, 0.0, 1.0);
    unsigned char b = static_cast<unsigned char>(std::lround(v * 255.0));
    f.write(reinterpret_cast<const char*>(&b), 1);
  }
}

Tensor load_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "cannot open image: " + path);
  std::string magic;
  f >> magic;
  require(magic == "P5", "not a binary PGM: " + path);
  auto next_int = [&f, &path]() {
    // Skip whitespace and '#' comment lines between header fields.
    while (true) {
      int c = f.peek();
      if (c == '#') {
        std::string line;
        std::getline(f, line);
      } else if (std::isspace(c)) {
        f.get();
      } else {
        break;
      }
    }
    int64_t v;
    f >> v;
    require(f.good(), "bad PGM header: " + path);
    return v;
  };
  int64_t w = next_int(), h = next_int(), maxv = next_int();
  require(maxv == 255, "only 8-bit PGM supported: " + path);
  f.get();
  Tensor t({1, h, w});
  for (int64_t i = 0; i < h * w; ++i) {
    unsigned char b;
    f.read(reinterpret_cast<char*>(&b), 1);
    require(f.good(), "truncated PGM: " + path);
    t[i] = static_cast<double>(b) / 255.0 * 2.0 - 1.0;
  }
  return t;
}

Tensor load_pgm_dir(const std::string& dir) {
  std::vector<std::string> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path().string());
  require(!files.empty(), "no .pgm files under " + dir);
  std::sort(files.begin(), files.end());

  Tensor first = load_pgm(files[0]);
  int64_t h = first.dim(1), w = first.dim(2);
  Tensor out({static_cast<int64_t>(files.size()), 1, h, w});
  int64_t stride = h * w;
  std::copy(first.data(), first.data() + stride, out.data());
  for (size_t i = 1; i < files.size(); ++i) {
    Tensor img = load_pgm(files[i]);
    require(img.dim(1) == h && img.dim(2) == w,
            "image size mismatch in " + dir + ": " + files[i]);
    std::copy(img.data(), img.data() + stride, out.data() + i * stride);
  }
  return out;
}

void save_pgm_batch(const std::string& dir, const std::string& prefix, const Tensor& batch) {
  require(batch.rank() == 4 && batch.dim(1) == 1, "save_pgm_batch expects [N,1,H,W]");
  std::filesystem::create_directories(dir);
  int64_t h = batch.dim(2), w = batch.dim(3), stride = h * w;
  char name[64];
  Tensor img({1, h, w});
  for (int64_t i = 0; i < batch.dim(0); ++i) {
    std::snprintf(name, sizeof(name), "%s_%06lld.pgm", prefix.c_str(),
                  static_cast<long long>(i));
    std::copy(batch.data() + i * stride, batch.data() + (i + 1) * stride, img.data());
    save_pgm(dir + "/" + name, img);
  }
}

Tensor tile_images(const Tensor& batch, int64_t cols) {
  require(batch.rank() == 4, "tile_images expects NCHW");
  int64_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  require(cols > 0, "tile_images needs cols > 0");
  int64_t rows = (n + cols - 1) / cols;
  Tensor out = Tensor::full({c, rows * h, cols * w}, -1.0);
  for (int64_t i = 0; i < n; ++i) {
    int64_t r = i / cols, q = i % cols;
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
          out.at(ch, r * h + y, q * w + x) = batch.at(i, ch, y, x);
  }
  return out;
}

}  // namespace vasa
