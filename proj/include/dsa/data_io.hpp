#pragma once

#include <png.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dsa/core/error.hpp"
#include "dsa/core/tensor.hpp"
#include "dsa/model.hpp"
#include "dsa/synthetic.hpp"

namespace dsa {

namespace fs = std::filesystem;

/// Pixels in [0,255] with labels, before normalization.
struct RawImages {
    Tensor<float> pixels; // (N, C, H, W)
    std::vector<int> labels;
};

struct Dataset {
    std::string name;
    int classes = 0;
    bool digits = false;
    Tensor<float> train_x, test_x;
    std::vector<int> train_y, test_y;
    std::vector<float> mean, std;

    ImageShape shape() const { return {train_x.dim(1), train_x.dim(2), train_x.dim(3)}; }
    int train_size() const { return train_x.dim(0); }
    int test_size() const { return test_x.dim(0); }

    /// Row indices of the training images of each class.
    std::vector<std::vector<int>> class_index() const
    {
        std::vector<std::vector<int>> idx(static_cast<std::size_t>(classes));
        for (std::size_t i = 0; i < train_y.size(); ++i) idx[static_cast<std::size_t>(train_y[i])].push_back(static_cast<int>(i));
        return idx;
    }
};

/// Whole file as bytes; gzip streams are inflated transparently.
inline std::vector<unsigned char> read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open", path.string(), 0);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 2 || bytes[0] != 0x1f || bytes[1] != 0x8b) return bytes;

    gzFile gz = gzopen(path.string().c_str(), "rb");
    if (!gz) throw DataError("cannot open gzip stream", path.string(), 0);
    std::vector<unsigned char> out;
    unsigned char buf[1 << 16];
    int n = 0;
    while ((n = gzread(gz, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
    int err = 0;
    const char* msg = gzerror(gz, &err);
    gzclose(gz);
    if (n < 0 || (err != Z_OK && err != Z_STREAM_END))
        throw TruncatedError(std::string("corrupt gzip stream: ") + msg, path.string(), out.size());
    return out;
}

namespace detail {

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off)
{
    return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8)
           | std::uint32_t{b[off + 3]};
}

/// Returns the dims of an IDX file after checking magic and payload length.
inline std::vector<std::uint32_t> idx_header(const std::vector<unsigned char>& b, std::uint32_t magic,
                                             const std::string& path)
{
    if (b.size() < 4) throw TruncatedError("IDX header truncated", path, b.size());
    const std::uint32_t m = be32(b, 0);
    if (m != magic) {
        char msg[96];
        std::snprintf(msg, sizeof msg, "bad IDX magic 0x%08x, expected 0x%08x", m, magic);
        throw BadMagicError(msg, path, 0);
    }
    const std::size_t rank = magic & 0xff;
    if (b.size() < 4 + 4 * rank) throw TruncatedError("IDX dimensions truncated", path, b.size());
    std::vector<std::uint32_t> dims(rank);
    std::size_t payload = 1;
    for (std::size_t i = 0; i < rank; ++i) {
        dims[i] = be32(b, 4 + 4 * i);
        payload *= dims[i];
    }
    const std::size_t need = 4 + 4 * rank + payload;
    if (b.size() < need)
        throw TruncatedError("IDX payload truncated: need " + std::to_string(need) + " bytes, have " + std::to_string(b.size()),
                             path, b.size());
    return dims;
}

} // namespace detail

/// Big-endian IDX pair: images 0x00000803 (N, H, W), labels 0x00000801 (N).
inline RawImages load_idx(const fs::path& images_path, const fs::path& labels_path)
{
    const auto ib = read_file(images_path);
    const auto lb = read_file(labels_path);
    const auto id = detail::idx_header(ib, 0x00000803, images_path.string());
    const auto ld = detail::idx_header(lb, 0x00000801, labels_path.string());
    if (id[0] != ld[0])
        throw CountMismatchError(std::to_string(id[0]) + " images but " + std::to_string(ld[0]) + " labels",
                                 labels_path.string(), 4);
    const int n = static_cast<int>(id[0]), h = static_cast<int>(id[1]), w = static_cast<int>(id[2]);
    RawImages out{Tensor<float>(Shape{n, 1, h, w}), std::vector<int>(static_cast<std::size_t>(n))};
    for (std::size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] = static_cast<float>(ib[16 + i]);
    for (int i = 0; i < n; ++i) out.labels[static_cast<std::size_t>(i)] = lb[8 + static_cast<std::size_t>(i)];
    return out;
}

/// Fixed-size records: `label_bytes` bytes (label taken from the last of them) then a C×H×W plane-major image.
inline RawImages load_records(const fs::path& path, int label_bytes, ImageShape s)
{
    const auto b = read_file(path);
    const std::size_t pixels = static_cast<std::size_t>(s.channels) * s.height * s.width;
    const std::size_t rec = static_cast<std::size_t>(label_bytes) + pixels;
    if (b.empty() || b.size() % rec != 0)
        throw FileSizeError("expected a positive multiple of " + std::to_string(rec) + " bytes, got " + std::to_string(b.size()),
                            path.string(), b.size() - b.size() % rec);
    const int n = static_cast<int>(b.size() / rec);
    RawImages out{Tensor<float>(Shape{n, s.channels, s.height, s.width}), std::vector<int>(static_cast<std::size_t>(n))};
    for (int i = 0; i < n; ++i) {
        const unsigned char* r = b.data() + static_cast<std::size_t>(i) * rec;
        out.labels[static_cast<std::size_t>(i)] = r[label_bytes - 1];
        for (std::size_t j = 0; j < pixels; ++j) out.pixels[static_cast<std::size_t>(i) * pixels + j] = r[label_bytes + j];
    }
    return out;
}

inline RawImages concat(const std::vector<RawImages>& parts)
{
    if (parts.empty()) return {};
    Shape s = parts[0].pixels.shape();
    s[0] = 0;
    for (const auto& p : parts) s[0] += p.pixels.dim(0);
    RawImages out{Tensor<float>(s), {}};
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.pixels.vec().begin(), p.pixels.vec().end(), out.pixels.vec().begin() + static_cast<std::ptrdiff_t>(off));
        off += p.pixels.size();
        out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    }
    return out;
}

/// Normalizes both splits with per-channel mean/std of the training split.
inline Dataset make_dataset(std::string name, int classes, RawImages train, RawImages test, bool digits)
{
    Dataset d;
    d.name = std::move(name);
    d.classes = classes;
    d.digits = digits;
    for (const auto* split : {&train, &test})
        for (int y : split->labels)
            if (y < 0 || y >= classes)
                throw DataError("label " + std::to_string(y) + " outside [0," + std::to_string(classes) + ")", d.name, 0);
    const int c = train.pixels.dim(1);
    const std::size_t hw = static_cast<std::size_t>(train.pixels.dim(2)) * train.pixels.dim(3);
    d.mean.assign(static_cast<std::size_t>(c), 0.f);
    d.std.assign(static_cast<std::size_t>(c), 1.f);
    for (int ch = 0; ch < c; ++ch) {
        double s = 0, s2 = 0;
        std::size_t cnt = 0;
        for (int i = 0; i < train.pixels.dim(0); ++i) {
            const float* p = train.pixels.data() + (static_cast<std::size_t>(i) * c + ch) * hw;
            for (std::size_t j = 0; j < hw; ++j) {
                const double v = p[j] / 255.0;
                s += v;
                s2 += v * v;
            }
            cnt += hw;
        }
        const double m = s / static_cast<double>(cnt);
        d.mean[static_cast<std::size_t>(ch)] = static_cast<float>(m);
        d.std[static_cast<std::size_t>(ch)] = static_cast<float>(std::sqrt(std::max(s2 / static_cast<double>(cnt) - m * m, 1e-12)));
    }
    auto normalize = [&](Tensor<float>& t) {
        for (int i = 0; i < t.dim(0); ++i)
            for (int ch = 0; ch < c; ++ch) {
                float* p = t.data() + (static_cast<std::size_t>(i) * c + ch) * hw;
                for (std::size_t j = 0; j < hw; ++j) p[j] = (p[j] / 255.f - d.mean[ch]) / d.std[ch];
            }
    };
    normalize(train.pixels);
    normalize(test.pixels);
    d.train_x = std::move(train.pixels);
    d.train_y = std::move(train.labels);
    d.test_x = std::move(test.pixels);
    d.test_y = std::move(test.labels);
    return d;
}

/// Inverse of the dataset normalization, in [0,1] units (no clamping).
inline Tensor<float> denormalize(const Tensor<float>& x, const std::vector<float>& mean, const std::vector<float>& std)
{
    Tensor<float> out = x;
    const int c = x.dim(1);
    const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    for (int i = 0; i < x.dim(0); ++i)
        for (int ch = 0; ch < c; ++ch) {
            float* p = out.data() + (static_cast<std::size_t>(i) * c + ch) * hw;
            for (std::size_t j = 0; j < hw; ++j) p[j] = p[j] * std[ch] + mean[ch];
        }
    return out;
}

namespace detail {

inline fs::path existing(const fs::path& dir, const std::string& stem)
{
    for (const fs::path& p : {dir / stem, dir / (stem + ".gz")})
        if (fs::exists(p)) return p;
    throw DataError("missing data file " + stem + "[.gz]", dir.string(), 0);
}

} // namespace detail

/// MNIST-layout directory: train-/t10k- images and labels, optionally gzipped.
inline Dataset load_mnist_dir(const fs::path& dir, const std::string& name)
{
    RawImages tr = load_idx(detail::existing(dir, "train-images-idx3-ubyte"), detail::existing(dir, "train-labels-idx1-ubyte"));
    RawImages te = load_idx(detail::existing(dir, "t10k-images-idx3-ubyte"), detail::existing(dir, "t10k-labels-idx1-ubyte"));
    return make_dataset(name, 10, std::move(tr), std::move(te), name != "fashionmnist");
}

/// CIFAR-10 binary batches: data_batch_1..5.bin and test_batch.bin, 3073-byte records.
inline Dataset load_cifar10(const fs::path& dir)
{
    std::vector<RawImages> parts;
    for (int i = 1; i <= 5; ++i) parts.push_back(load_records(dir / ("data_batch_" + std::to_string(i) + ".bin"), 1, {3, 32, 32}));
    return make_dataset("cifar10", 10, concat(parts), load_records(dir / "test_batch.bin", 1, {3, 32, 32}), false);
}

/// CIFAR-100 binary: train.bin / test.bin with (coarse, fine) label bytes; fine labels are used.
inline Dataset load_cifar100(const fs::path& dir)
{
    return make_dataset("cifar100", 100, load_records(dir / "train.bin", 2, {3, 32, 32}),
                        load_records(dir / "test.bin", 2, {3, 32, 32}), false);
}

/// Pre-converted SVHN: train.bin / test.bin of (label byte, 3×32×32 plane-major) records, labels 0..9.
inline Dataset load_svhn(const fs::path& dir)
{
    return make_dataset("svhn", 10, load_records(dir / "train.bin", 1, {3, 32, 32}),
                        load_records(dir / "test.bin", 1, {3, 32, 32}), true);
}

inline fs::path data_root(const std::string& configured = "")
{
    if (!configured.empty()) return configured;
    if (const char* env = std::getenv("DSA_DATA_ROOT")) return env;
    return "data";
}

/// Dataset by name under `root`: mnist, fashionmnist, mnist5k, cifar10, cifar100, svhn.
inline Dataset load_dataset(const std::string& name, const fs::path& root)
{
    if (name == "mnist" || name == "fashionmnist" || name == "mnist5k") return load_mnist_dir(root / name, name);
    if (name == "cifar10") return load_cifar10(root / "cifar-10-batches-bin");
    if (name == "cifar100") return load_cifar100(root / "cifar-100-binary");
    if (name == "svhn") return load_svhn(root / "svhn");
    throw ConfigError("unknown dataset '" + name + "'");
}

// ---------------------------------------------------------------- synthetic set files

inline constexpr std::uint32_t kSyntheticVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "synthetic set files are written in host byte order");

struct Writer {
    std::vector<unsigned char> bytes;

    template <typename V>
    void put(V v)
    {
        const auto* p = reinterpret_cast<const unsigned char*>(&v);
        bytes.insert(bytes.end(), p, p + sizeof(V));
    }
    template <typename V>
    void put_array(const V* p, std::size_t n)
    {
        const auto* b = reinterpret_cast<const unsigned char*>(p);
        bytes.insert(bytes.end(), b, b + n * sizeof(V));
    }
    void put_string(const std::string& s)
    {
        put(static_cast<std::uint32_t>(s.size()));
        bytes.insert(bytes.end(), s.begin(), s.end());
    }
};

struct Reader {
    const std::vector<unsigned char>& bytes;
    std::size_t end;
    std::string path;
    std::size_t pos = 0;

    void need(std::size_t n) const
    {
        if (pos + n > end) throw TruncatedError("synthetic set truncated", path, pos);
    }
    template <typename V>
    V get()
    {
        need(sizeof(V));
        V v;
        std::memcpy(&v, bytes.data() + pos, sizeof(V));
        pos += sizeof(V);
        return v;
    }
    template <typename V>
    void get_array(V* p, std::size_t n)
    {
        need(n * sizeof(V));
        std::memcpy(p, bytes.data() + pos, n * sizeof(V));
        pos += n * sizeof(V);
    }
    std::string get_string()
    {
        const auto n = get<std::uint32_t>();
        need(n);
        std::string s(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
        pos += n;
        return s;
    }
};

/// Writes via a sibling temporary and renames it into place.
inline void write_atomically(const fs::path& path, const unsigned char* data, std::size_t n)
{
    fs::path tmp = path;
    tmp += ".partial";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write", tmp.string(), 0);
        out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n));
        if (!out) throw DataError("write failed", tmp.string(), 0);
    }
    fs::rename(tmp, path);
}

} // namespace detail

/// Layout (little-endian): "DSA1", u32 version, u32 rank, u32 dims[rank], u8 dtype (1 = f32),
/// u32 classes, u32 ipc, u32 channels, f32 mean[channels], f32 std[channels], f32 images,
/// i32 labels, config (u32 length + bytes), u32 trace length + f64 trace, u32 CRC32 of all prior bytes.
inline std::vector<unsigned char> encode_synthetic(const SyntheticSet& s, std::uint32_t version = kSyntheticVersion)
{
    detail::Writer w;
    w.put_array("DSA1", 4);
    w.put(version);
    w.put(static_cast<std::uint32_t>(s.images.rank()));
    for (int d : s.images.shape()) w.put(static_cast<std::uint32_t>(d));
    w.put(std::uint8_t{1});
    w.put(static_cast<std::uint32_t>(s.classes));
    w.put(static_cast<std::uint32_t>(s.ipc));
    w.put(static_cast<std::uint32_t>(s.mean.size()));
    w.put_array(s.mean.data(), s.mean.size());
    w.put_array(s.std.data(), s.std.size());
    w.put_array(s.images.data(), s.images.size());
    for (int y : s.labels) w.put(static_cast<std::int32_t>(y));
    w.put_string(s.config);
    w.put(static_cast<std::uint32_t>(s.loss_trace.size()));
    w.put_array(s.loss_trace.data(), s.loss_trace.size());
    w.put(static_cast<std::uint32_t>(crc32(0L, w.bytes.data(), static_cast<uInt>(w.bytes.size()))));
    return w.bytes;
}

inline SyntheticSet decode_synthetic(const std::vector<unsigned char>& b, const std::string& path)
{
    if (b.size() < 8 || std::memcmp(b.data(), "DSA1", 4) != 0) throw BadMagicError("not a synthetic set file", path, 0);
    std::uint32_t version = 0;
    std::memcpy(&version, b.data() + 4, 4);
    if (version != kSyntheticVersion)
        throw VersionError("synthetic set version " + std::to_string(version) + ", this build reads version "
                               + std::to_string(kSyntheticVersion),
                           path, 4);
    if (b.size() < 12) throw TruncatedError("synthetic set truncated", path, b.size());
    std::uint32_t stored = 0;
    std::memcpy(&stored, b.data() + b.size() - 4, 4);
    const auto actual = static_cast<std::uint32_t>(crc32(0L, b.data(), static_cast<uInt>(b.size() - 4)));
    if (stored != actual) throw ChecksumError("synthetic set checksum mismatch", path, b.size() - 4);

    detail::Reader r{b, b.size() - 4, path, 8};
    SyntheticSet s;
    const auto rank = r.get<std::uint32_t>();
    if (rank != 4) throw DataError("synthetic set rank " + std::to_string(rank), path, r.pos - 4);
    Shape shape(4);
    for (auto& d : shape) d = static_cast<int>(r.get<std::uint32_t>());
    if (r.get<std::uint8_t>() != 1) throw DataError("unsupported dtype tag", path, r.pos - 1);
    s.classes = static_cast<int>(r.get<std::uint32_t>());
    s.ipc = static_cast<int>(r.get<std::uint32_t>());
    const auto ch = r.get<std::uint32_t>();
    s.mean.resize(ch);
    s.std.resize(ch);
    r.get_array(s.mean.data(), ch);
    r.get_array(s.std.data(), ch);
    r.need(numel(shape) * sizeof(float));
    s.images = Tensor<float>(shape);
    r.get_array(s.images.data(), s.images.size());
    s.labels.resize(static_cast<std::size_t>(shape[0]));
    for (auto& y : s.labels) y = r.get<std::int32_t>();
    s.config = r.get_string();
    s.loss_trace.resize(r.get<std::uint32_t>());
    r.get_array(s.loss_trace.data(), s.loss_trace.size());
    if (r.pos != r.end) throw DataError("trailing bytes in synthetic set", path, r.pos);
    return s;
}

inline void save_synthetic(const fs::path& path, const SyntheticSet& s)
{
    for (float v : s.images.vec())
        if (!std::isfinite(v)) throw DataError("refusing to save non-finite pixels", path.string(), 0);
    const auto bytes = encode_synthetic(s);
    detail::write_atomically(path, bytes.data(), bytes.size());
}

inline SyntheticSet load_synthetic(const fs::path& path) { return decode_synthetic(read_file(path), path.string()); }

// ---------------------------------------------------------------- image grid export

struct GridImage {
    int width = 0, height = 0, channels = 0;
    std::vector<unsigned char> pixels; // row-major, interleaved channels
};

/// One row per class, ipc tiles per row, denormalized and clamped to [0,255].
inline GridImage make_grid(const SyntheticSet& s, bool denorm = true)
{
    if (s.images.size() == 0 || s.classes < 1 || s.ipc < 1) throw DataError("empty synthetic set", "", 0);
    const Tensor<float> x = denorm ? denormalize(s.images, s.mean, s.std) : s.images;
    const int c = x.dim(1), h = x.dim(2), w = x.dim(3);
    GridImage g{w * s.ipc, h * s.classes, c == 1 ? 1 : 3, {}};
    g.pixels.assign(static_cast<std::size_t>(g.width) * g.height * g.channels, 0);
    for (int n = 0; n < x.dim(0); ++n) {
        const int row = s.labels[static_cast<std::size_t>(n)], col = n - s.first_of(row);
        for (int ch = 0; ch < g.channels; ++ch)
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) {
                    const double v = std::clamp(std::round(static_cast<double>(x.at(n, ch, i, j)) * 255.0), 0.0, 255.0);
                    const std::size_t o = (static_cast<std::size_t>(row * h + i) * g.width + col * w + j) * g.channels + ch;
                    g.pixels[o] = static_cast<unsigned char>(v);
                }
    }
    return g;
}

/// `comment`, when nonempty, goes into a tEXt chunk keyed "Comment".
inline void write_png(const fs::path& path, const GridImage& g, const std::string& comment = "")
{
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(g.width);
    img.height = static_cast<png_uint_32>(g.height);
    img.format = g.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&img, nullptr, &size, 0, g.pixels.data(), 0, nullptr))
        throw DataError(std::string("png encode failed: ") + img.message, path.string(), 0);
    std::vector<unsigned char> buf(size);
    if (!png_image_write_to_memory(&img, buf.data(), &size, 0, g.pixels.data(), 0, nullptr))
        throw DataError(std::string("png encode failed: ") + img.message, path.string(), 0);
    buf.resize(size);
    if (!comment.empty()) {
        std::vector<unsigned char> chunk;
        auto be32 = [&](std::uint32_t v) {
            for (int k = 3; k >= 0; --k) chunk.push_back(static_cast<unsigned char>(v >> (8 * k)));
        };
        const std::string body = std::string("tEXtComment") + '\0' + comment;
        be32(static_cast<std::uint32_t>(body.size() - 4));
        chunk.insert(chunk.end(), body.begin(), body.end());
        be32(static_cast<std::uint32_t>(::crc32(0L, chunk.data() + 4, static_cast<uInt>(body.size()))));
        // the simplified writer always ends with the 12-byte IEND chunk
        buf.insert(buf.end() - 12, chunk.begin(), chunk.end());
    }
    detail::write_atomically(path, buf.data(), buf.size());
}

inline void write_ppm(const fs::path& path, const GridImage& g, const std::string& comment = "")
{
    std::string head = g.channels == 1 ? "P5\n" : "P6\n";
    std::istringstream lines(comment);
    for (std::string line; std::getline(lines, line);) head += "# " + line + "\n";
    head += std::to_string(g.width) + " " + std::to_string(g.height) + "\n255\n";
    std::vector<unsigned char> buf(head.begin(), head.end());
    buf.insert(buf.end(), g.pixels.begin(), g.pixels.end());
    detail::write_atomically(path, buf.data(), buf.size());
}

/// PNG unless the path ends in .ppm/.pgm. The set's config is embedded as a comment.
inline GridImage export_grid(const SyntheticSet& s, const fs::path& path, bool denorm = true)
{
    GridImage g = make_grid(s, denorm);
    const auto ext = path.extension().string();
    if (ext == ".ppm" || ext == ".pgm") write_ppm(path, g, s.config);
    else write_png(path, g, s.config);
    return g;
}

inline GridImage read_png(const fs::path& path)
{
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.string().c_str()))
        throw DataError(std::string("png read failed: ") + img.message, path.string(), 0);
    const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
    img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    GridImage g{static_cast<int>(img.width), static_cast<int>(img.height), gray ? 1 : 3, {}};
    g.pixels.resize(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, g.pixels.data(), 0, nullptr))
        throw DataError(std::string("png read failed: ") + img.message, path.string(), 0);
    return g;
}

} // namespace dsa
