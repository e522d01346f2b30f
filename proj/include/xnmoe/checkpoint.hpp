#pragma once

// Checkpoint file layout (all integers little-endian):
//
//   "XNM1"                      4-byte magic
//   u32 version                 currently 1
//   u32 tensor count
//   per tensor:
//     u16 name length, UTF-8 name bytes
//     u8 rank, rank × u32 dims
//     numel × f32 values
//   u64 checksum                FNV-1a 64 over every preceding byte
//
// Model parameters and buffers use their store names. Optimizer state lives under
// "opt/": opt/m/<name>, opt/v/<name>, and opt/step. Integer and double scalars
// that must round-trip exactly are stored as raw 32-bit words (see pack_u64).

#include "xnmoe/adam.hpp"
#include "xnmoe/parameters.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace xnmoe {

inline constexpr char kCheckpointMagic[4] = {'X', 'N', 'M', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

inline std::uint64_t fnv1a64(const unsigned char* data, std::size_t n) noexcept
{
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

/// Stores the 64 bits of an integer as two float-typed words (bit pattern preserved).
inline std::vector<float> pack_u64(std::uint64_t v)
{
    return {std::bit_cast<float>(static_cast<std::uint32_t>(v)), std::bit_cast<float>(static_cast<std::uint32_t>(v >> 32))};
}

inline std::uint64_t unpack_u64(const float* words)
{
    return static_cast<std::uint64_t>(std::bit_cast<std::uint32_t>(words[0]))
           | (static_cast<std::uint64_t>(std::bit_cast<std::uint32_t>(words[1])) << 32);
}

inline std::vector<float> pack_f64(double v) { return pack_u64(std::bit_cast<std::uint64_t>(v)); }
inline double unpack_f64(const float* words) { return std::bit_cast<double>(unpack_u64(words)); }

namespace detail {

class ByteWriter {
public:
    void u8(std::uint8_t v) { bytes_.push_back(v); }
    void u16(std::uint16_t v) { put(v, 2); }
    void u32(std::uint32_t v) { put(v, 4); }
    void u64(std::uint64_t v) { put(v, 8); }
    void raw(const void* p, std::size_t n)
    {
        auto c = static_cast<const unsigned char*>(p);
        bytes_.insert(bytes_.end(), c, c + n);
    }
    std::vector<unsigned char>& bytes() { return bytes_; }

private:
    void put(std::uint64_t v, int n)
    {
        for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    std::vector<unsigned char> bytes_;
};

class ByteReader {
public:
    ByteReader(const unsigned char* data, std::size_t size) : data_(data), size_(size) {}
    std::uint64_t get(int n)
    {
        need(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
        pos_ += static_cast<std::size_t>(n);
        return v;
    }
    std::string str(std::size_t n)
    {
        need(n);
        std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
        pos_ += n;
        return s;
    }
    std::size_t pos() const { return pos_; }

private:
    void need(std::size_t n) const
    {
        if (pos_ + n > size_) throw CheckpointError("corrupt checkpoint: truncated file");
    }
    const unsigned char* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries)
{
    detail::ByteWriter w;
    w.raw(kCheckpointMagic, 4);
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        if (e.name.size() > 0xFFFF) throw CheckpointError("tensor name too long: " + e.name);
        if (e.values.size() != e.shape.numel()) throw CheckpointError("entry size mismatch: " + e.name);
        w.u16(static_cast<std::uint16_t>(e.name.size()));
        w.raw(e.name.data(), e.name.size());
        w.u8(static_cast<std::uint8_t>(e.shape.rank()));
        for (auto d : e.shape.dims()) w.u32(static_cast<std::uint32_t>(d));
        for (float f : e.values) w.u32(std::bit_cast<std::uint32_t>(f));
    }
    w.u64(fnv1a64(w.bytes().data(), w.bytes().size()));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open checkpoint for writing: " + path.string());
    out.write(reinterpret_cast<const char*>(w.bytes().data()), static_cast<std::streamsize>(w.bytes().size()));
    if (!out) throw CheckpointError("failed writing checkpoint: " + path.string());
}

inline std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint: " + path.string());
    const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 4 + 4 + 4 + 8) throw CheckpointError("corrupt checkpoint: truncated file");
    if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw CheckpointError("corrupt checkpoint: bad magic");

    detail::ByteReader r(bytes.data(), bytes.size() - 8);
    r.str(4);
    const auto version = static_cast<std::uint32_t>(r.get(4));
    if (version != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    const auto count = static_cast<std::uint32_t>(r.get(4));
    std::vector<CheckpointEntry> entries;
    for (std::uint32_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        e.name = r.str(static_cast<std::size_t>(r.get(2)));
        const auto rank = static_cast<std::size_t>(r.get(1));
        std::vector<std::size_t> dims(rank);
        for (auto& d : dims) {
            d = static_cast<std::size_t>(r.get(4));
            if (d == 0) throw CheckpointError("corrupt checkpoint: zero extent in " + e.name);
        }
        e.shape = Shape(std::move(dims));
        e.values.resize(e.shape.numel());
        for (auto& f : e.values) f = std::bit_cast<float>(static_cast<std::uint32_t>(r.get(4)));
        entries.push_back(std::move(e));
    }
    if (r.pos() != bytes.size() - 8) throw CheckpointError("corrupt checkpoint: trailing bytes before checksum");
    detail::ByteReader tail(bytes.data() + bytes.size() - 8, 8);
    if (tail.get(8) != fnv1a64(bytes.data(), bytes.size() - 8))
        throw CheckpointError("corrupt checkpoint: checksum mismatch");
    return entries;
}

/// Scalars carried alongside parameters so an interrupted run can resume exactly.
struct TrainingProgress {
    std::uint64_t epoch = 0;
    double lr = 0.0;
    double best_val_acc = -1.0;
    std::uint64_t best_epoch = 0;
    std::uint64_t epochs_since_improvement = 0;
};

template <class T>
std::vector<CheckpointEntry> snapshot(const ParameterStore<T>& params, const AdamState<T>* opt,
                                      const TrainingProgress* progress)
{
    std::vector<CheckpointEntry> out;
    auto put = [&](std::string name, const Tensor<T>& t) {
        std::vector<float> v(t.numel());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(t[i]);
        out.push_back(CheckpointEntry{std::move(name), t.shape(), std::move(v)});
    };
    for (const auto& p : params.entries()) put(p.name, p.tensor);
    if (opt) {
        out.push_back(CheckpointEntry{"opt/step", Shape{2}, pack_u64(opt->step)});
        for (const auto& [name, mom] : opt->moments) {
            put("opt/m/" + name, mom.m);
            put("opt/v/" + name, mom.v);
        }
    }
    if (progress) {
        std::vector<float> words;
        for (auto part : {pack_u64(progress->epoch), pack_f64(progress->lr), pack_f64(progress->best_val_acc),
                          pack_u64(progress->best_epoch), pack_u64(progress->epochs_since_improvement)})
            words.insert(words.end(), part.begin(), part.end());
        out.push_back(CheckpointEntry{"train/progress", Shape{words.size()}, std::move(words)});
    }
    return out;
}

/// Writes parameters, buffers and (optionally) optimizer state and progress.
template <class T>
void save_checkpoint(const ParameterStore<T>& params, const std::filesystem::path& path,
                     const AdamState<T>* opt = nullptr, const TrainingProgress* progress = nullptr)
{
    write_checkpoint(path, snapshot(params, opt, progress));
}

/// Loads a checkpoint into an already-built model. Every model tensor must be present
/// with an identical shape, and the file may not carry parameters the model lacks.
/// Returns the stored progress, if any.
template <class T>
std::optional<TrainingProgress> load_checkpoint(const ParameterStore<T>& params, const std::filesystem::path& path,
                                                AdamState<T>* opt = nullptr)
{
    const auto entries = read_checkpoint(path);
    std::map<std::string, const CheckpointEntry*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e;

    auto fill = [](Tensor<T> t, const CheckpointEntry& e) {
        std::vector<T> v(e.values.begin(), e.values.end());
        t.assign(v);
    };
    for (const auto& p : params.entries()) {
        auto it = by_name.find(p.name);
        if (it == by_name.end()) throw CheckpointError("checkpoint is missing tensor " + p.name);
        if (!(it->second->shape == p.tensor.shape()))
            throw CheckpointError("shape mismatch for " + p.name + ": checkpoint " + it->second->shape.str()
                                  + " vs model " + p.tensor.shape().str());
        fill(p.tensor, *it->second);
    }
    for (const auto& e : entries) {
        const bool aux = e.name.rfind("opt/", 0) == 0 || e.name.rfind("train/", 0) == 0;
        if (!aux && !params.find(e.name))
            throw CheckpointError("checkpoint tensor " + e.name + " does not exist in the model");
    }
    if (opt) {
        *opt = AdamState<T>{};
        if (auto it = by_name.find("opt/step"); it != by_name.end()) opt->step = unpack_u64(it->second->values.data());
        for (const auto& p : params.entries()) {
            auto m = by_name.find("opt/m/" + p.name);
            auto v = by_name.find("opt/v/" + p.name);
            if (m == by_name.end() || v == by_name.end()) continue;
            if (!(m->second->shape == p.tensor.shape()) || !(v->second->shape == p.tensor.shape()))
                throw CheckpointError("optimizer state shape mismatch for " + p.name);
            auto& slot = opt->slot(p.name, p.tensor.shape());
            fill(slot.m, *m->second);
            fill(slot.v, *v->second);
        }
    }
    if (auto it = by_name.find("train/progress"); it != by_name.end()) {
        if (it->second->values.size() != 10) throw CheckpointError("corrupt checkpoint: bad train/progress");
        const float* w = it->second->values.data();
        return TrainingProgress{unpack_u64(w), unpack_f64(w + 2), unpack_f64(w + 4), unpack_u64(w + 6),
                                unpack_u64(w + 8)};
    }
    return std::nullopt;
}

} // namespace xnmoe
