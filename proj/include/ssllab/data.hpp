#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ssllab/common.hpp"
#include "ssllab/rng.hpp"
#include "ssllab/tensor.hpp"

namespace ssllab {

enum class LabelKind { unlabeled, single_label, multi_label };

enum class Cifar10Split { train, test };
enum class Stl10Split { unlabeled, train, test };

/// Per-channel normalization constants in [0,1] pixel units.
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

// ---------------------------------------------------------------------------
// DatasetSource: an in-memory dataset of normalized images plus labels.
// Images are stored post-normalization; the constants used are retained so
// checkpoints can persist them and serializers can invert them.
// ---------------------------------------------------------------------------

template <typename T>
class DatasetSource {
 public:
  DatasetSource() = default;
  DatasetSource(std::string name, Shape item_shape, LabelKind kind,
                int64_t label_width)
      : name_(std::move(name)),
        item_shape_(std::move(item_shape)),
        kind_(kind),
        label_width_(label_width) {
    if (item_shape_.size() != 3)
      throw ShapeError("dataset item shape must be (C,H,W), got " +
                       shape_str(item_shape_));
  }

  const std::string& name() const { return name_; }
  int64_t size() const { return num_items_; }
  const Shape& item_shape() const { return item_shape_; }
  LabelKind label_kind() const { return kind_; }
  /// Class count for single-label data, attribute count for multi-label.
  int64_t label_width() const { return label_width_; }
  const ChannelStats& stats() const { return stats_; }

  int64_t pixels_per_item() const { return shape_numel(item_shape_); }

  /// One image as a [C,H,W] tensor of normalized values.
  Tensor<T> image(int64_t idx) const {
    check_index(idx);
    const int64_t n = pixels_per_item();
    std::vector<T> out(static_cast<size_t>(n));
    std::copy_n(data_.begin() + static_cast<size_t>(idx * n),
                static_cast<size_t>(n), out.begin());
    return Tensor<T>::from_values(item_shape_, out);
  }

  /// Batch of images as [N,C,H,W].
  Tensor<T> batch(const std::vector<int64_t>& indices) const {
    const int64_t n = pixels_per_item();
    std::vector<T> out;
    out.reserve(indices.size() * static_cast<size_t>(n));
    for (int64_t idx : indices) {
      check_index(idx);
      out.insert(out.end(), data_.begin() + static_cast<size_t>(idx * n),
                 data_.begin() + static_cast<size_t>((idx + 1) * n));
    }
    Shape s = item_shape_;
    s.insert(s.begin(), static_cast<int64_t>(indices.size()));
    return Tensor<T>::from_values(s, out);
  }

  /// Single-label class id.
  int64_t label(int64_t idx) const {
    if (kind_ != LabelKind::single_label)
      throw ValueError("dataset '" + name_ +
                       "': this split has no single-class labels");
    check_index(idx);
    return labels_[static_cast<size_t>(idx)];
  }

  /// Multi-label attribute bits (length label_width).
  std::vector<int64_t> attributes(int64_t idx) const {
    if (kind_ != LabelKind::multi_label)
      throw ValueError("dataset '" + name_ + "': this split has no attribute bits");
    check_index(idx);
    return {labels_.begin() + static_cast<size_t>(idx * label_width_),
            labels_.begin() + static_cast<size_t>((idx + 1) * label_width_)};
  }

  std::vector<int64_t> label_batch(const std::vector<int64_t>& indices) const {
    std::vector<int64_t> out;
    out.reserve(indices.size());
    for (int64_t idx : indices) out.push_back(label(idx));
    return out;
  }

  /// Multi-label targets as a [N,m] tensor of 0/1 values.
  Tensor<T> attribute_batch(const std::vector<int64_t>& indices) const {
    std::vector<T> out;
    out.reserve(indices.size() * static_cast<size_t>(label_width_));
    for (int64_t idx : indices)
      for (int64_t b : attributes(idx)) out.push_back(static_cast<T>(b));
    return Tensor<T>::from_values(
        {static_cast<int64_t>(indices.size()), label_width_}, out);
  }

  /// Epoch visitation order: a seeded permutation of [0, size).
  std::vector<int64_t> shuffled_order(uint64_t seed, uint64_t epoch) const {
    auto order = shuffled_indices(num_items_, mix_seed(seed, epoch, 0xe90cull));
    return order;
  }

  // -- construction helpers ------------------------------------------------

  /// Build from raw uint8 pixels (values 0..255, CHW per item). Pixels are
  /// scaled to [0,1] and standardized with `stats` (computed from the data
  /// when null).
  static DatasetSource from_u8(std::string name, Shape item_shape,
                               LabelKind kind, int64_t label_width,
                               const std::vector<uint8_t>& pixels,
                               std::vector<int64_t> labels,
                               const ChannelStats* stats = nullptr) {
    DatasetSource ds(std::move(name), std::move(item_shape), kind, label_width);
    const int64_t per = ds.pixels_per_item();
    if (per <= 0 || pixels.size() % static_cast<size_t>(per) != 0)
      throw FormatError("dataset '" + ds.name_ + "': pixel buffer size " +
                        std::to_string(pixels.size()) +
                        " is not a multiple of the item size " +
                        std::to_string(per));
    ds.num_items_ = static_cast<int64_t>(pixels.size()) / per;
    ds.labels_ = std::move(labels);
    ds.check_label_storage();
    ds.stats_ = stats ? *stats : compute_stats(pixels, ds.item_shape_);
    ds.check_stats();
    const int64_t chw = per;
    const int64_t hw = ds.item_shape_[1] * ds.item_shape_[2];
    ds.data_.resize(pixels.size());
    for (size_t i = 0; i < pixels.size(); ++i) {
      const int64_t c = (static_cast<int64_t>(i) % chw) / hw;
      const double u = static_cast<double>(pixels[i]) / 255.0;
      ds.data_[i] = static_cast<T>(
          (u - ds.stats_.mean[static_cast<size_t>(c)]) /
          ds.stats_.stddev[static_cast<size_t>(c)]);
    }
    return ds;
  }

  /// Build directly from already-normalized values (synthetic sources).
  static DatasetSource from_values(std::string name, Shape item_shape,
                                   LabelKind kind, int64_t label_width,
                                   std::vector<T> values,
                                   std::vector<int64_t> labels,
                                   ChannelStats stats) {
    DatasetSource ds(std::move(name), std::move(item_shape), kind, label_width);
    const int64_t per = ds.pixels_per_item();
    if (per <= 0 || values.size() % static_cast<size_t>(per) != 0)
      throw FormatError("dataset '" + ds.name_ + "': value buffer size " +
                        std::to_string(values.size()) +
                        " is not a multiple of the item size " +
                        std::to_string(per));
    ds.num_items_ = static_cast<int64_t>(values.size()) / per;
    ds.data_ = std::move(values);
    ds.labels_ = std::move(labels);
    ds.check_label_storage();
    ds.stats_ = std::move(stats);
    ds.check_stats();
    return ds;
  }

  static ChannelStats compute_stats(const std::vector<uint8_t>& pixels,
                                    const Shape& item_shape) {
    const int64_t c_count = item_shape[0];
    const int64_t hw = item_shape[1] * item_shape[2];
    const int64_t chw = c_count * hw;
    ChannelStats st;
    st.mean.assign(static_cast<size_t>(c_count), 0.0);
    st.stddev.assign(static_cast<size_t>(c_count), 0.0);
    std::vector<double> sq(static_cast<size_t>(c_count), 0.0);
    std::vector<int64_t> n(static_cast<size_t>(c_count), 0);
    for (size_t i = 0; i < pixels.size(); ++i) {
      const auto c = static_cast<size_t>((static_cast<int64_t>(i) % chw) / hw);
      const double u = static_cast<double>(pixels[i]) / 255.0;
      st.mean[c] += u;
      sq[c] += u * u;
      ++n[c];
    }
    for (size_t c = 0; c < st.mean.size(); ++c) {
      if (n[c] == 0) {
        st.mean[c] = 0.0;
        st.stddev[c] = 1.0;
        continue;
      }
      st.mean[c] /= static_cast<double>(n[c]);
      const double var = sq[c] / static_cast<double>(n[c]) - st.mean[c] * st.mean[c];
      st.stddev[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
    }
    return st;
  }

 private:
  void check_index(int64_t idx) const {
    if (idx < 0 || idx >= num_items_)
      throw ValueError("dataset '" + name_ + "': index " + std::to_string(idx) +
                       " out of range [0, " + std::to_string(num_items_) + ")");
  }

  void check_label_storage() const {
    const size_t want =
        kind_ == LabelKind::unlabeled
            ? 0
            : static_cast<size_t>(num_items_) *
                  (kind_ == LabelKind::multi_label
                       ? static_cast<size_t>(label_width_)
                       : 1);
    if (labels_.size() != want)
      throw FormatError("dataset '" + name_ + "': label storage has " +
                        std::to_string(labels_.size()) + " entries, expected " +
                        std::to_string(want));
  }

  void check_stats() const {
    if (static_cast<int64_t>(stats_.mean.size()) != item_shape_[0] ||
        static_cast<int64_t>(stats_.stddev.size()) != item_shape_[0])
      throw ValueError("dataset '" + name_ +
                       "': normalization constants must have one entry per channel");
  }

  std::string name_;
  Shape item_shape_;
  LabelKind kind_ = LabelKind::unlabeled;
  int64_t label_width_ = 0;
  int64_t num_items_ = 0;
  std::vector<T> data_;
  std::vector<int64_t> labels_;
  ChannelStats stats_;
};

// ---------------------------------------------------------------------------
// CIFAR-layout binary records: 1 label byte + C*H*W channel-major pixel bytes.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path + "'");
  f.seekg(0, std::ios::end);
  const auto len = static_cast<size_t>(f.tellg());
  f.seekg(0, std::ios::beg);
  std::vector<uint8_t> buf(len);
  if (len > 0) f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(len));
  if (!f) throw FormatError("failed reading '" + path + "'");
  return buf;
}

}  // namespace detail

/// Parse one or more files of CIFAR-layout records into a single-label
/// dataset. `max_label` bounds the legal label byte (9 for CIFAR-10).
template <typename T>
DatasetSource<T> load_cifar_layout(const std::vector<std::string>& files,
                                   const Shape& item_shape,
                                   const std::string& name,
                                   int64_t max_label = 9,
                                   const ChannelStats* stats = nullptr) {
  const int64_t per = shape_numel(item_shape);
  const int64_t record = per + 1;
  std::vector<uint8_t> pixels;
  std::vector<int64_t> labels;
  for (const auto& path : files) {
    auto buf = detail::read_file_bytes(path);
    if (buf.size() % static_cast<size_t>(record) != 0)
      throw FormatError("'" + path + "': size " + std::to_string(buf.size()) +
                        " is not a multiple of the record size " +
                        std::to_string(record));
    const size_t n = buf.size() / static_cast<size_t>(record);
    for (size_t r = 0; r < n; ++r) {
      const uint8_t lab = buf[r * static_cast<size_t>(record)];
      if (lab > max_label)
        throw FormatError("'" + path + "': corrupt record " + std::to_string(r) +
                          ": label byte " + std::to_string(lab) + " > " +
                          std::to_string(max_label));
      labels.push_back(lab);
      const auto* src = buf.data() + r * static_cast<size_t>(record) + 1;
      pixels.insert(pixels.end(), src, src + per);
    }
  }
  return DatasetSource<T>::from_u8(name, item_shape, LabelKind::single_label,
                                   max_label + 1, pixels, std::move(labels),
                                   stats);
}

/// Official CIFAR-10 directory layout: data_batch_1..5.bin + test_batch.bin,
/// 3073-byte records.
template <typename T>
DatasetSource<T> load_cifar10(const std::string& dir, Cifar10Split split,
                              const ChannelStats* stats = nullptr) {
  std::vector<std::string> files;
  if (split == Cifar10Split::train) {
    for (int i = 1; i <= 5; ++i)
      files.push_back(dir + "/data_batch_" + std::to_string(i) + ".bin");
  } else {
    files.push_back(dir + "/test_batch.bin");
  }
  return load_cifar_layout<T>(files, {3, 32, 32},
                              split == Cifar10Split::train ? "cifar10-train"
                                                           : "cifar10-test",
                              9, stats);
}

/// Serialize a dataset back to CIFAR-layout records, inverting the stored
/// normalization (label byte 0 for unlabeled sources).
template <typename T>
void save_cifar_layout(const DatasetSource<T>& ds, const std::string& path) {
  if (ds.label_kind() == LabelKind::multi_label)
    throw ValueError("CIFAR-layout records hold one label byte; multi-label "
                     "sources cannot be serialized");
  if (ds.label_kind() == LabelKind::single_label && ds.label_width() > 256)
    throw ValueError("label does not fit in one byte");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path + "' for writing");
  const auto& st = ds.stats();
  const int64_t hw = ds.item_shape()[1] * ds.item_shape()[2];
  for (int64_t i = 0; i < ds.size(); ++i) {
    const uint8_t lab =
        ds.label_kind() == LabelKind::single_label
            ? static_cast<uint8_t>(ds.label(i))
            : 0;
    f.put(static_cast<char>(lab));
    auto img = ds.image(i);
    for (int64_t j = 0; j < img.numel(); ++j) {
      const auto c = static_cast<size_t>(j / hw);
      const double u =
          (static_cast<double>(img.data()[static_cast<size_t>(j)]) *
               st.stddev[c] +
           st.mean[c]) *
          255.0;
      const double q = std::round(std::min(255.0, std::max(0.0, u)));
      f.put(static_cast<char>(static_cast<uint8_t>(q)));
    }
  }
  if (!f) throw FormatError("failed writing '" + path + "'");
}

// ---------------------------------------------------------------------------
// STL-10: 96x96x3 records, column-major pixels within each channel plane,
// labels 1..10 in a separate file.
// ---------------------------------------------------------------------------

template <typename T>
DatasetSource<T> load_stl10(const std::string& dir, Stl10Split split,
                            const ChannelStats* stats = nullptr) {
  const int64_t side = 96;
  const int64_t per = 3 * side * side;
  std::string x_file, y_file, name;
  switch (split) {
    case Stl10Split::unlabeled:
      x_file = dir + "/unlabeled_X.bin";
      name = "stl10-unlabeled";
      break;
    case Stl10Split::train:
      x_file = dir + "/train_X.bin";
      y_file = dir + "/train_y.bin";
      name = "stl10-train";
      break;
    case Stl10Split::test:
      x_file = dir + "/test_X.bin";
      y_file = dir + "/test_y.bin";
      name = "stl10-test";
      break;
  }
  auto buf = detail::read_file_bytes(x_file);
  if (buf.size() % static_cast<size_t>(per) != 0)
    throw FormatError("'" + x_file + "': size " + std::to_string(buf.size()) +
                      " is not a multiple of the image size " +
                      std::to_string(per));
  const size_t n = buf.size() / static_cast<size_t>(per);

  // transpose each plane from column-major to row-major
  std::vector<uint8_t> pixels(buf.size());
  for (size_t i = 0; i < n; ++i)
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < side; ++y)
        for (int64_t x = 0; x < side; ++x)
          pixels[i * static_cast<size_t>(per) +
                 static_cast<size_t>(c * side * side + y * side + x)] =
              buf[i * static_cast<size_t>(per) +
                  static_cast<size_t>(c * side * side + x * side + y)];

  std::vector<int64_t> labels;
  LabelKind kind = LabelKind::unlabeled;
  if (!y_file.empty()) {
    auto ybuf = detail::read_file_bytes(y_file);
    if (ybuf.size() != n)
      throw FormatError("'" + y_file + "': has " + std::to_string(ybuf.size()) +
                        " labels for " + std::to_string(n) + " images");
    for (uint8_t b : ybuf) {
      if (b < 1 || b > 10)
        throw FormatError("'" + y_file + "': corrupt label byte " +
                          std::to_string(b) + " outside 1..10");
      labels.push_back(b - 1);
    }
    kind = LabelKind::single_label;
  }
  return DatasetSource<T>::from_u8(name, {3, side, side}, kind,
                                   kind == LabelKind::unlabeled ? 0 : 10,
                                   pixels, std::move(labels), stats);
}

// ---------------------------------------------------------------------------
// Synthetic sources
// ---------------------------------------------------------------------------

/// Unlabeled i.i.d. standard-normal images (already in normalized units).
template <typename T>
DatasetSource<T> synth_gaussian(int64_t num, const Shape& item_shape,
                                uint64_t seed) {
  if (num < 1) throw ValueError("synth_gaussian: num must be >= 1");
  const int64_t per = shape_numel(item_shape);
  std::vector<T> values;
  values.reserve(static_cast<size_t>(num * per));
  for (int64_t i = 0; i < num; ++i) {
    RandomStream rs(mix_seed(seed, static_cast<uint64_t>(i), 0x6a05ull));
    for (int64_t j = 0; j < per; ++j)
      values.push_back(static_cast<T>(rs.gaussian()));
  }
  ChannelStats st;
  st.mean.assign(static_cast<size_t>(item_shape[0]), 0.0);
  st.stddev.assign(static_cast<size_t>(item_shape[0]), 1.0);
  return DatasetSource<T>::from_values("synth-gaussian", item_shape,
                                       LabelKind::unlabeled, 0,
                                       std::move(values), {}, std::move(st));
}

namespace detail {

/// Render one shape program onto a CHW uint8 canvas in the given color.
inline void render_shape_program(int64_t program, std::vector<uint8_t>& img,
                                 int64_t c_count, int64_t h, int64_t w,
                                 const std::vector<uint8_t>& color,
                                 RandomStream& rs) {
  auto put = [&](int64_t y, int64_t x) {
    if (y < 0 || y >= h || x < 0 || x >= w) return;
    for (int64_t c = 0; c < c_count; ++c)
      img[static_cast<size_t>(c * h * w + y * w + x)] =
          color[static_cast<size_t>(c)];
  };
  const int64_t side = std::min(h, w);
  switch (program % 8) {
    case 0: {  // vertical bars
      const int64_t period = 2 + static_cast<int64_t>(rs.next_below(
                                     static_cast<uint64_t>(std::max<int64_t>(1, w / 4))));
      const int64_t phase = static_cast<int64_t>(rs.next_below(static_cast<uint64_t>(2 * period)));
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
          if (((x + phase) / period) % 2 == 0) put(y, x);
      break;
    }
    case 1: {  // horizontal bars
      const int64_t period = 2 + static_cast<int64_t>(rs.next_below(
                                     static_cast<uint64_t>(std::max<int64_t>(1, h / 4))));
      const int64_t phase = static_cast<int64_t>(rs.next_below(static_cast<uint64_t>(2 * period)));
      for (int64_t y = 0; y < h; ++y)
        if (((y + phase) / period) % 2 == 0)
          for (int64_t x = 0; x < w; ++x) put(y, x);
      break;
    }
    case 2: {  // filled disk
      const int64_t r = side / 6 + static_cast<int64_t>(rs.next_below(
                                       static_cast<uint64_t>(std::max<int64_t>(1, side / 6))));
      const int64_t cy = r + static_cast<int64_t>(rs.next_below(static_cast<uint64_t>(std::max<int64_t>(1, h - 2 * r))));
      const int64_t cx = r + static_cast<int64_t>(rs.next_below(static_cast<uint64_t>(std::max<int64_t>(1, w - 2 * r))));
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
          if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) put(y, x);
      break;
    }
    case 3: {  // plus / cross
      const int64_t t = 1 + static_cast<int64_t>(rs.next_below(static_cast<uint64_t>(std::max<int64_t>(1, side / 8))));
      const int64_t cy = t + static_cast<int64_t>(rs.next_below(static_cast<uint64_t>(std::max<int64_t>(1, h - 2 * t))));
      const int64_t cx = t + static_cast<int64_t>(rs.next_below(static_cast<uint64_t>(std::max<int64_t>(1, w - 2 * t))));
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = cx - t; x <= cx + t; ++x) put(y, x);
      for (int64_t y = cy - t; y <= cy + t; ++y)
        for (int64_t x = 0; x < w; ++x) put(y, x);
      break;
    }
    case 4: {  // diagonal stripes
      const int64_t period = 2 + static_cast<int64_t>(rs.next_below(
                                     static_cast<uint64_t>(std::max<int64_t>(1, side / 4))));
      const int64_t phase = static_cast<int64_t>(rs.next_below(static_cast<uint64_t>(2 * period)));
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
          if (((x + y + phase) / period) % 2 == 0) put(y, x);
      break;
    }
    case 5: {  // ring
      const int64_t ro = side / 4 + static_cast<int64_t>(rs.next_below(
                                        static_cast<uint64_t>(std::max<int64_t>(1, side / 8))));
      const int64_t ri = std::max<int64_t>(1, ro - std::max<int64_t>(2, side / 10));
      const int64_t cy = ro + static_cast<int64_t>(rs.next_below(static_cast<uint64_t>(std::max<int64_t>(1, h - 2 * ro))));
      const int64_t cx = ro + static_cast<int64_t>(rs.next_below(static_cast<uint64_t>(std::max<int64_t>(1, w - 2 * ro))));
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
          const int64_t d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
          if (d2 <= ro * ro && d2 >= ri * ri) put(y, x);
        }
      break;
    }
    case 6: {  // checker blocks
      const int64_t b = 2 + static_cast<int64_t>(rs.next_below(
                                static_cast<uint64_t>(std::max<int64_t>(1, side / 4))));
      const int64_t phase = static_cast<int64_t>(rs.next_below(2));
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
          if ((y / b + x / b + phase) % 2 == 0) put(y, x);
      break;
    }
    default: {  // two small disks
      for (int rep = 0; rep < 2; ++rep) {
        const int64_t r = std::max<int64_t>(1, side / 8);
        const int64_t cy = r + static_cast<int64_t>(rs.next_below(static_cast<uint64_t>(std::max<int64_t>(1, h - 2 * r))));
        const int64_t cx = r + static_cast<int64_t>(rs.next_below(static_cast<uint64_t>(std::max<int64_t>(1, w - 2 * r))));
        for (int64_t y = 0; y < h; ++y)
          for (int64_t x = 0; x < w; ++x)
            if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) put(y, x);
      }
      break;
    }
  }
}

template <typename T>
DatasetSource<T> synth_shapes_impl(int64_t num, const Shape& item_shape,
                                   LabelKind kind, int64_t width,
                                   uint64_t seed, const std::string& name) {
  if (width < 2) throw ValueError(name + ": class/attribute count must be >= 2");
  if (width > 8) throw ValueError(name + ": at most 8 shape programs available");
  if (num < 1) throw ValueError(name + ": num must be >= 1");
  const int64_t c_count = item_shape[0], h = item_shape[1], w = item_shape[2];
  const int64_t per = c_count * h * w;
  std::vector<uint8_t> pixels;
  pixels.reserve(static_cast<size_t>(num * per));
  std::vector<int64_t> labels;

  for (int64_t i = 0; i < num; ++i) {
    RandomStream rs(mix_seed(seed, static_cast<uint64_t>(i), 0xa11cull));
    std::vector<uint8_t> img(static_cast<size_t>(per));
    for (auto& px : img) px = static_cast<uint8_t>(rs.next_below(60));  // dim noise
    auto draw_color = [&] {
      std::vector<uint8_t> color(static_cast<size_t>(c_count));
      for (auto& v : color) v = static_cast<uint8_t>(128 + rs.next_below(128));
      return color;
    };
    if (kind == LabelKind::single_label) {
      const int64_t cls = i % width;  // stratified by construction
      render_shape_program(cls, img, c_count, h, w, draw_color(), rs);
      labels.push_back(cls);
    } else {
      RandomStream bit_rs(mix_seed(seed, static_cast<uint64_t>(i), 0xb175ull));
      for (int64_t bit = 0; bit < width; ++bit) {
        const int64_t on = bit_rs.next_below(2) ? 1 : 0;
        labels.push_back(on);
        if (on) render_shape_program(bit, img, c_count, h, w, draw_color(), rs);
      }
    }
    pixels.insert(pixels.end(), img.begin(), img.end());
  }
  return DatasetSource<T>::from_u8(name, item_shape, kind, width, pixels,
                                   std::move(labels), nullptr);
}

}  // namespace detail

/// Single-label shape dataset: class = which shape program was rendered.
/// Classes are exactly stratified (item i gets class i mod k).
template <typename T>
DatasetSource<T> synth_shapes(int64_t num, const Shape& item_shape, int64_t k,
                              uint64_t seed) {
  return detail::synth_shapes_impl<T>(num, item_shape, LabelKind::single_label,
                                      k, seed, "synth-shapes");
}

/// Multi-label shape dataset: bit j ~ Bernoulli(0.5) controls whether shape
/// program j is overlaid.
template <typename T>
DatasetSource<T> synth_shapes_multilabel(int64_t num, const Shape& item_shape,
                                         int64_t m, uint64_t seed) {
  return detail::synth_shapes_impl<T>(num, item_shape, LabelKind::multi_label,
                                      m, seed, "synth-shapes-multi");
}

}  // namespace ssllab
