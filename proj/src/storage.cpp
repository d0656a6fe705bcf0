#include "consolidator/storage.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

namespace consolidator {

namespace {

constexpr char kCheckpointMagic[4] = {'C', 'N', 'S', 'B'};
constexpr char kDeltaMagic[4] = {'C', 'N', 'S', 'D'};

class ByteWriter {
public:
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::byte*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    void u8(std::uint8_t v) { out_.push_back(static_cast<std::byte>(v)); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::byte>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::byte>(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void text(const std::string& s) {
        u32(checked_u32(s.size(), "name length"));
        raw(s.data(), s.size());
    }

    static std::uint32_t checked_u32(std::size_t v, const char* what) {
        if (v > std::numeric_limits<std::uint32_t>::max()) {
            throw std::length_error(std::string(what) + " does not fit in 32 bits");
        }
        return static_cast<std::uint32_t>(v);
    }

    std::vector<std::byte> take() { return std::move(out_); }

private:
    std::vector<std::byte> out_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::byte> bytes) : bytes_(bytes) {}

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

    void need(std::size_t n, const char* what) const {
        if (remaining() < n) {
            throw FormatError(std::string("truncated input reading ") + what + ": need " + std::to_string(n) +
                                  " bytes, have " + std::to_string(remaining()),
                              pos_);
        }
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<std::uint8_t>(bytes_[pos_++]);
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }
    float f32(const char* what) {
        const std::size_t at = pos_;
        const float v = std::bit_cast<float>(u32(what));
        if (!std::isfinite(v)) throw FormatError(std::string("non-finite value in ") + what, at);
        return v;
    }
    double f64(const char* what) {
        const std::size_t at = pos_;
        const double v = std::bit_cast<double>(u64(what));
        if (!std::isfinite(v)) throw FormatError(std::string("non-finite value in ") + what, at);
        return v;
    }
    std::string text(const char* what) {
        const std::uint32_t n = u32(what);
        need(n, what);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    void magic(const char (&expected)[4]) {
        need(4, "magic");
        if (std::memcmp(bytes_.data(), expected, 4) != 0) {
            throw FormatError("bad magic, expected '" + std::string(expected, 4) + "'", 0);
        }
        pos_ += 4;
    }
    void expect_end() const {
        if (remaining() != 0) throw FormatError(std::to_string(remaining()) + " trailing bytes", pos_);
    }

private:
    std::span<const std::byte> bytes_;
    std::size_t pos_ = 0;
};

void write_entry(ByteWriter& w, const CheckpointEntry& e) {
    w.text(e.name);
    w.u8(static_cast<std::uint8_t>(e.dtype()));
    const Shape& shape = e.shape();
    if (shape.size() > 255) throw std::length_error("tensor rank exceeds 255");
    w.u8(static_cast<std::uint8_t>(shape.size()));
    for (auto x : shape) w.u64(x);
    std::visit(
        [&](const auto& t) {
            for (auto v : t.data()) {
                if constexpr (std::is_same_v<std::decay_t<decltype(v)>, float>) {
                    w.f32(v);
                } else {
                    w.f64(v);
                }
            }
        },
        e.value);
}

CheckpointEntry read_entry(ByteReader& r) {
    CheckpointEntry e;
    e.name = r.text("tensor name");
    const std::size_t dtype_at = r.offset();
    const std::uint8_t dtype = r.u8("dtype");
    if (dtype != static_cast<std::uint8_t>(DType::F32) && dtype != static_cast<std::uint8_t>(DType::F64)) {
        throw FormatError("unknown dtype code " + std::to_string(dtype) + " for '" + e.name + "'", dtype_at);
    }
    const std::size_t width = dtype == 1 ? 4 : 8;
    const std::uint8_t rank = r.u8("rank");
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& x : shape) {
        const std::size_t at = r.offset();
        const std::uint64_t v = r.u64("extent");
        if (v == 0) throw FormatError("zero extent in '" + e.name + "'", at);
        if (v > r.remaining() || numel > r.remaining() / v) {
            throw FormatError("extent of '" + e.name + "' exceeds the remaining input", at);
        }
        x = static_cast<std::size_t>(v);
        numel *= x;
    }
    r.need(numel * width, "tensor values");
    if (dtype == 1) {
        std::vector<float> data(numel);
        for (auto& v : data) v = r.f32("tensor values");
        e.value = Tensor<float>(std::move(shape), std::move(data));
    } else {
        std::vector<double> data(numel);
        for (auto& v : data) v = r.f64("tensor values");
        e.value = Tensor<double>(std::move(shape), std::move(data));
    }
    return e;
}

void read_entries(ByteReader& r, std::uint32_t count, Checkpoint& into) {
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::size_t at = r.offset();
        CheckpointEntry e = read_entry(r);
        if (into.contains(e.name)) throw FormatError("duplicate tensor name '" + e.name + "'", at);
        into.add_entry(std::move(e));
    }
}

void check_version(ByteReader& r, std::uint32_t expected) {
    const std::size_t at = r.offset();
    const std::uint32_t version = r.u32("version");
    if (version != expected) throw FormatError("unsupported version " + std::to_string(version), at);
}

}  // namespace

std::vector<std::byte> encode_checkpoint(const Checkpoint& ckpt) {
    ByteWriter w;
    w.raw(kCheckpointMagic, 4);
    w.u32(Checkpoint::kVersion);
    w.u32(ByteWriter::checked_u32(ckpt.size(), "tensor count"));
    for (const auto& e : ckpt.entries()) write_entry(w, e);
    return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::byte> bytes) {
    ByteReader r(bytes);
    r.magic(kCheckpointMagic);
    check_version(r, Checkpoint::kVersion);
    const std::uint32_t count = r.u32("tensor count");
    Checkpoint ckpt;
    read_entries(r, count, ckpt);
    r.expect_end();
    return ckpt;
}

std::vector<std::byte> encode_delta(const TaskDelta& delta) {
    ByteWriter w;
    w.raw(kDeltaMagic, 4);
    w.u32(kDeltaVersion);
    w.u64(delta.backbone_fingerprint);
    w.u32(ByteWriter::checked_u32(delta.layers.size(), "layer count"));
    for (const auto& l : delta.layers) {
        l.weight.validate();
        if (l.bias.size() != l.weight.rows) throw std::invalid_argument("bias length of '" + l.name + "' != rows");
        w.text(l.name);
        w.u32(ByteWriter::checked_u32(l.weight.rows, "rows"));
        w.u32(ByteWriter::checked_u32(l.weight.cols, "cols"));
        for (auto b : l.bias) w.f32(static_cast<float>(b));
        w.u32(ByteWriter::checked_u32(l.weight.groups_meta.size(), "groups count"));
        for (auto g : l.weight.groups_meta) w.u32(g);
        w.u64(l.weight.entries.size());
        for (const auto& e : l.weight.entries) {
            w.u32(e.row);
            w.u32(e.col);
            w.f32(static_cast<float>(e.value));
        }
    }
    w.u32(ByteWriter::checked_u32(delta.extras.size(), "extra tensor count"));
    for (const auto& e : delta.extras.entries()) write_entry(w, e);
    return w.take();
}

TaskDelta decode_delta(std::span<const std::byte> bytes) {
    ByteReader r(bytes);
    r.magic(kDeltaMagic);
    check_version(r, kDeltaVersion);
    TaskDelta delta;
    delta.backbone_fingerprint = r.u64("fingerprint");
    const std::uint32_t layer_count = r.u32("layer count");
    std::set<std::string> seen;
    for (std::uint32_t i = 0; i < layer_count; ++i) {
        LayerDelta l;
        const std::size_t name_at = r.offset();
        l.name = r.text("layer name");
        if (!seen.insert(l.name).second) throw FormatError("duplicate layer '" + l.name + "'", name_at);
        const std::size_t dims_at = r.offset();
        l.weight.rows = r.u32("rows");
        l.weight.cols = r.u32("cols");
        if (l.weight.rows == 0 || l.weight.cols == 0) throw FormatError("empty layer '" + l.name + "'", dims_at);
        r.need(l.weight.rows * 4, "bias");
        l.bias.resize(l.weight.rows);
        for (auto& b : l.bias) b = r.f32("bias");
        const std::uint32_t group_count = r.u32("groups count");
        r.need(static_cast<std::size_t>(group_count) * 4, "groups");
        bool structural = true;
        for (std::uint32_t k = 0; k < group_count; ++k) {
            const std::size_t at = r.offset();
            const std::uint32_t tag = r.u32("group tag");
            const std::uint32_t g = tag & ~kUnshuffledFlag;
            if (tag == kUnstructuredTag) {
                structural = false;
            } else if (g == 0 || l.weight.rows % g != 0 || l.weight.cols % g != 0) {
                throw FormatError("group tag " + std::to_string(tag) + " invalid for layer '" + l.name + "'", at);
            }
            l.weight.groups_meta.push_back(tag);
        }
        const std::size_t nnz_at = r.offset();
        const std::uint64_t nnz = r.u64("nnz");
        if (nnz > r.remaining() / 12) throw FormatError("nnz exceeds the remaining input", nnz_at);
        l.weight.entries.resize(static_cast<std::size_t>(nnz));
        std::vector<std::size_t> entry_offsets(l.weight.entries.size());
        for (std::size_t k = 0; k < l.weight.entries.size(); ++k) {
            entry_offsets[k] = r.offset();
            auto& e = l.weight.entries[k];
            e.row = r.u32("entry row");
            e.col = r.u32("entry col");
            e.value = r.f32("entry value");
            if (e.row >= l.weight.rows || e.col >= l.weight.cols) {
                throw FormatError("entry outside " + std::to_string(l.weight.rows) + "x" +
                                      std::to_string(l.weight.cols) + " in '" + l.name + "'",
                                  entry_offsets[k]);
            }
            if (k > 0) {
                const auto& p = l.weight.entries[k - 1];
                if (std::pair(p.row, p.col) >= std::pair(e.row, e.col)) {
                    throw FormatError("unsorted or duplicate entry in '" + l.name + "'", entry_offsets[k]);
                }
            }
        }
        if (structural && group_count > 0) {
            const auto support = support_union_tags(l.weight.groups_meta, l.weight.cols, l.weight.rows);
            std::size_t s = 0;
            for (std::size_t k = 0; k < l.weight.entries.size(); ++k) {
                const auto& e = l.weight.entries[k];
                const std::pair<std::size_t, std::size_t> pos(e.row, e.col);
                while (s < support.positions.size() && support.positions[s] < pos) ++s;
                if (s == support.positions.size() || support.positions[s] != pos) {
                    throw FormatError("entry outside the structural support of '" + l.name + "'", entry_offsets[k]);
                }
            }
        } else if (group_count == 0 && !l.weight.entries.empty()) {
            throw FormatError("entries without any producing branch in '" + l.name + "'", nnz_at);
        }
        delta.layers.push_back(std::move(l));
    }
    const std::uint32_t extra_count = r.u32("extra tensor count");
    read_entries(r, extra_count, delta.extras);
    r.expect_end();
    return delta;
}

std::vector<std::byte> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0, std::ios::beg);
    std::vector<std::byte> bytes(size);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
    if (!in) throw std::runtime_error("failed reading '" + path.string() + "'");
    return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::byte> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(read_file(path));
}

void save_delta(const TaskDelta& delta, const std::filesystem::path& path) {
    write_file(path, encode_delta(delta));
}

TaskDelta load_delta(const std::filesystem::path& path) {
    return decode_delta(read_file(path));
}

}  // namespace consolidator
