#pragma once

// Snapshot serialization: one flat binary blob per snapshot. Layout, all
// integers 32-bit little-endian, all floats 64-bit little-endian:
//
//   magic "FLSN" | schema hash | param count
//   per param:  name length | name bytes | ndims | dims...
//   step_fraction (f64) | provenance length | provenance bytes
//   per param:  values (f64 x size)
//
// The schema hash (FNV-1a over the schema string) lets a reader reject blobs
// written under a different parameter layout before touching the payload.
// Round-trips are bit-exact.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "nets.hpp"
#include "tensor.hpp"

namespace forgetlab {

class IoError : public TensorError {
public:
    using TensorError::TensorError;
};

namespace detail {

inline constexpr std::uint32_t kSnapshotMagic = 0x4e534c46u; // "FLSN"

inline std::uint32_t fnv1a_32(const std::string& s) {
    std::uint32_t h = 0x811c9dc5u;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x01000193u;
    }
    return h;
}

inline void put_u32(std::string& buf, std::uint32_t v) {
    buf.push_back(static_cast<char>(v & 0xff));
    buf.push_back(static_cast<char>((v >> 8) & 0xff));
    buf.push_back(static_cast<char>((v >> 16) & 0xff));
    buf.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_f64(std::string& buf, double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, sizeof v);
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class BlobReader {
public:
    BlobReader(const std::string& data, std::string ctx) : data_(data), ctx_(std::move(ctx)) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + static_cast<std::size_t>(i)])) << (8 * i);
        pos_ += 4;
        return v;
    }

    double f64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + static_cast<std::size_t>(i)])) << (8 * i);
        pos_ += 8;
        double d;
        std::memcpy(&d, &v, sizeof d);
        return d;
    }

    std::string bytes(std::size_t n) {
        need(n);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool exhausted() const { return pos_ == data_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > data_.size())
            throw IoError(ctx_ + ": truncated snapshot blob");
    }
    const std::string& data_;
    std::string ctx_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::uint32_t snapshot_schema_hash(const ModelSnapshot& snap) {
    return detail::fnv1a_32(snap.schema_string());
}

inline std::string serialize_snapshot(const ModelSnapshot& snap) {
    using detail::put_f64;
    using detail::put_u32;
    std::string buf;
    put_u32(buf, detail::kSnapshotMagic);
    put_u32(buf, snapshot_schema_hash(snap));
    put_u32(buf, static_cast<std::uint32_t>(snap.params.size()));
    for (const auto& p : snap.params) {
        put_u32(buf, static_cast<std::uint32_t>(p.name.size()));
        buf += p.name;
        put_u32(buf, static_cast<std::uint32_t>(p.tensor.shape.size()));
        for (std::size_t d : p.tensor.shape) put_u32(buf, static_cast<std::uint32_t>(d));
    }
    put_f64(buf, snap.step_fraction);
    put_u32(buf, static_cast<std::uint32_t>(snap.provenance.size()));
    buf += snap.provenance;
    for (const auto& p : snap.params)
        for (double v : p.tensor.values) put_f64(buf, v);
    return buf;
}

inline ModelSnapshot deserialize_snapshot(const std::string& blob, const std::string& ctx = "snapshot") {
    detail::BlobReader r(blob, ctx);
    if (r.u32() != detail::kSnapshotMagic)
        throw IoError(ctx + ": not a snapshot blob (bad magic)");
    std::uint32_t stored_hash = r.u32();
    std::uint32_t count = r.u32();
    ModelSnapshot snap;
    snap.params.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.bytes(r.u32());
        std::uint32_t ndims = r.u32();
        Shape shape(ndims);
        for (std::uint32_t d = 0; d < ndims; ++d) shape[d] = r.u32();
        snap.params.push_back({std::move(name), Tensor::zeros(shape)});
    }
    snap.step_fraction = r.f64();
    snap.provenance = r.bytes(r.u32());
    for (auto& p : snap.params)
        for (double& v : p.tensor.values) v = r.f64();
    if (!r.exhausted()) throw IoError(ctx + ": trailing bytes after snapshot payload");
    if (snapshot_schema_hash(snap) != stored_hash)
        throw IoError(ctx + ": schema hash mismatch");
    return snap;
}

inline void save_snapshot(const ModelSnapshot& snap, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("save_snapshot: cannot open " + path);
    std::string blob = serialize_snapshot(snap);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("save_snapshot: write failed for " + path);
}

inline ModelSnapshot load_snapshot(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_snapshot: cannot open " + path);
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_snapshot(blob, path);
}

} // namespace forgetlab
