#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>

#include "ornet/datagen.hpp"
#include "ornet/errors.hpp"

namespace ornet::data {

namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& buf, std::size_t offset,
                        const fs::path& path) {
  if (buf.size() < offset + 4) throw LengthError(path.string() + ": truncated IDX header");
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

void put_be32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                              static_cast<char>(v >> 8), static_cast<char>(v)};
  os.write(b.data(), 4);
}

std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

ImageDataset load_mnist_idx(const fs::path& images_path, const fs::path& labels_path, Split split) {
  const auto buf = read_all(images_path);
  const std::uint32_t magic = read_be32(buf, 0, images_path);
  if (magic != kIdxImageMagic) {
    throw FormatError(images_path.string() + ": IDX image magic " + std::to_string(magic) +
                      ", expected 2051");
  }
  ImageDataset ds;
  ds.split = split;
  ds.count = read_be32(buf, 4, images_path);
  ds.height = read_be32(buf, 8, images_path);
  ds.width = read_be32(buf, 12, images_path);
  ds.channels = 1;
  const std::size_t payload = ds.count * ds.height * ds.width;
  if (buf.size() < 16 + payload) {
    throw LengthError(images_path.string() + ": expected " + std::to_string(payload) +
                      " pixel bytes, found " + std::to_string(buf.size() - 16));
  }
  ds.pixels.resize(payload);
  for (std::size_t i = 0; i < payload; ++i) ds.pixels[i] = static_cast<double>(buf[16 + i]) / 255.0;

  if (!labels_path.empty()) {
    const auto lbuf = read_all(labels_path);
    const std::uint32_t lmagic = read_be32(lbuf, 0, labels_path);
    if (lmagic != kIdxLabelMagic) {
      throw FormatError(labels_path.string() + ": IDX label magic " + std::to_string(lmagic) +
                        ", expected 2049");
    }
    const std::uint32_t n = read_be32(lbuf, 4, labels_path);
    if (n != ds.count) {
      throw FormatError(labels_path.string() + ": " + std::to_string(n) + " labels for " +
                        std::to_string(ds.count) + " images");
    }
    if (lbuf.size() < 8 + std::size_t{n}) throw LengthError(labels_path.string() + ": truncated labels");
    ds.labels.assign(lbuf.begin() + 8, lbuf.begin() + 8 + n);
  }
  return ds;
}

ImageDataset load_mnist_split(const fs::path& dir, Split split) {
  const bool train = split == Split::train;
  const fs::path images = dir / (train ? "train-images-idx3-ubyte" : "t10k-images-idx3-ubyte");
  const fs::path labels = dir / (train ? "train-labels-idx1-ubyte" : "t10k-labels-idx1-ubyte");
  return load_mnist_idx(images, fs::exists(labels) ? labels : fs::path{}, split);
}

void write_idx_images(const fs::path& path, const ImageDataset& data) {
  if (data.channels != 1) throw InputError("IDX image files hold single-channel images");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  put_be32(os, kIdxImageMagic);
  put_be32(os, static_cast<std::uint32_t>(data.count));
  put_be32(os, static_cast<std::uint32_t>(data.height));
  put_be32(os, static_cast<std::uint32_t>(data.width));
  std::vector<char> bytes(data.pixels.size());
  std::transform(data.pixels.begin(), data.pixels.end(), bytes.begin(),
                 [](double v) { return static_cast<char>(quantize(v)); });
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed for " + path.string());
}

void write_idx_labels(const fs::path& path, const ImageDataset& data) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  put_be32(os, kIdxLabelMagic);
  put_be32(os, static_cast<std::uint32_t>(data.labels.size()));
  os.write(reinterpret_cast<const char*>(data.labels.data()),
           static_cast<std::streamsize>(data.labels.size()));
  if (!os) throw IoError("write failed for " + path.string());
}

ImageDataset load_rgb_directory(const fs::path& dir, Split split, std::size_t limit,
                                std::size_t crop, std::size_t size) {
  if (!fs::is_directory(dir)) throw IoError(dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  ImageDataset ds;
  ds.split = split;
  ds.height = size;
  ds.width = size;
  ds.channels = 3;
  for (const auto& file : files) {
    if (limit != 0 && ds.count == limit) break;
    cv::Mat img = cv::imread(file.string(), cv::IMREAD_COLOR);
    if (img.empty()) continue;
    const int side = static_cast<int>(std::min<std::size_t>(crop, std::min(img.rows, img.cols)));
    const cv::Rect roi((img.cols - side) / 2, (img.rows - side) / 2, side, side);
    cv::Mat resized;
    cv::resize(img(roi), resized, cv::Size(static_cast<int>(size), static_cast<int>(size)), 0, 0,
               cv::INTER_AREA);
    cv::cvtColor(resized, resized, cv::COLOR_BGR2RGB);
    for (int r = 0; r < resized.rows; ++r) {
      const auto* row = resized.ptr<cv::Vec3b>(r);
      for (int c = 0; c < resized.cols; ++c)
        for (int ch = 0; ch < 3; ++ch) ds.pixels.push_back(row[c][ch] / 255.0);
    }
    ++ds.count;
  }
  if (ds.count == 0) throw IoError("no readable images in " + dir.string());
  return ds;
}

}  // namespace ornet::data
