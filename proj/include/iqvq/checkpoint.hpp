#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "iqvq/tensor.hpp"

namespace iqvq {

/// Named tensor collection with a key=value metadata trailer.
///
/// Binary layout: magic "IQVQ", format version u32, record count u32, then per
/// record: name length u16 + UTF-8 name, rank u8, extents as u32s, payload as
/// little-endian 64-bit reals; finally a u32 byte length followed by the
/// metadata block as `key=value` lines.
class Checkpoint {
public:
    static constexpr std::uint32_t kFormatVersion = 1;

    void add(const std::string& name, Tensor t) {
        if (index_.count(name)) throw std::logic_error("Checkpoint: duplicate record " + name);
        index_[name] = records_.size();
        records_.emplace_back(name, std::move(t));
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    const Tensor& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("Checkpoint: missing record " + name);
        return records_[it->second].second;
    }

    Tensor& mutable_get(const std::string& name) {
        return const_cast<Tensor&>(static_cast<const Checkpoint*>(this)->get(name));
    }

    const std::vector<std::pair<std::string, Tensor>>& records() const { return records_; }

    void set_meta(const std::string& key, const std::string& value) {
        for (auto& kv : meta_)
            if (kv.first == key) {
                kv.second = value;
                return;
            }
        meta_.emplace_back(key, value);
    }

    bool has_meta(const std::string& key) const {
        for (const auto& kv : meta_)
            if (kv.first == key) return true;
        return false;
    }

    const std::string& meta(const std::string& key) const {
        for (const auto& kv : meta_)
            if (kv.first == key) return kv.second;
        throw std::out_of_range("Checkpoint: missing metadata key " + key);
    }

    double meta_double(const std::string& key) const { return std::stod(meta(key)); }
    int meta_int(const std::string& key) const { return std::stoi(meta(key)); }

    const std::vector<std::pair<std::string, std::string>>& meta_entries() const { return meta_; }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("Checkpoint: cannot open " + path + " for writing");
        out.write("IQVQ", 4);
        write_u32(out, kFormatVersion);
        write_u32(out, static_cast<std::uint32_t>(records_.size()));
        for (const auto& [name, tensor] : records_) {
            if (name.size() > 0xFFFF) throw std::logic_error("Checkpoint: record name too long");
            write_u16(out, static_cast<std::uint16_t>(name.size()));
            out.write(name.data(), static_cast<std::streamsize>(name.size()));
            out.put(static_cast<char>(tensor.rank()));
            for (int e : tensor.shape) write_u32(out, static_cast<std::uint32_t>(e));
            for (double v : tensor.data) write_f64(out, v);
        }
        std::string block;
        for (const auto& [k, v] : meta_) block += k + "=" + v + "\n";
        write_u32(out, static_cast<std::uint32_t>(block.size()));
        out.write(block.data(), static_cast<std::streamsize>(block.size()));
        if (!out) throw std::runtime_error("Checkpoint: write failed for " + path);
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("Checkpoint: cannot open " + path);
        char magic[4];
        in.read(magic, 4);
        if (!in || std::memcmp(magic, "IQVQ", 4) != 0)
            throw std::runtime_error("Checkpoint: " + path + " is not an IQVQ checkpoint");
        const std::uint32_t version = read_u32(in);
        if (version != kFormatVersion)
            throw std::runtime_error("Checkpoint: unsupported format version " + std::to_string(version));
        Checkpoint ckpt;
        const std::uint32_t count = read_u32(in);
        for (std::uint32_t i = 0; i < count; ++i) {
            const std::uint16_t name_len = read_u16(in);
            std::string name(name_len, '\0');
            in.read(name.data(), name_len);
            const int rank = in.get();
            Shape shape(static_cast<std::size_t>(rank));
            for (int d = 0; d < rank; ++d) shape[static_cast<std::size_t>(d)] = static_cast<int>(read_u32(in));
            Tensor t(shape);
            for (std::int64_t j = 0; j < t.size(); ++j) t[j] = read_f64(in);
            if (!in) throw std::runtime_error("Checkpoint: truncated record in " + path);
            ckpt.add(name, std::move(t));
        }
        const std::uint32_t block_len = read_u32(in);
        std::string block(block_len, '\0');
        in.read(block.data(), block_len);
        if (!in) throw std::runtime_error("Checkpoint: truncated metadata in " + path);
        std::size_t pos = 0;
        while (pos < block.size()) {
            const std::size_t nl = block.find('\n', pos);
            const std::string line = block.substr(pos, nl - pos);
            pos = (nl == std::string::npos) ? block.size() : nl + 1;
            const std::size_t eq = line.find('=');
            if (eq != std::string::npos) ckpt.set_meta(line.substr(0, eq), line.substr(eq + 1));
        }
        return ckpt;
    }

private:
    std::vector<std::pair<std::string, Tensor>> records_;
    std::map<std::string, std::size_t> index_;
    std::vector<std::pair<std::string, std::string>> meta_;

    static void write_u16(std::ofstream& out, std::uint16_t v) {
        const char bytes[2] = {static_cast<char>(v & 0xFF), static_cast<char>(v >> 8)};
        out.write(bytes, 2);
    }
    static void write_u32(std::ofstream& out, std::uint32_t v) {
        char bytes[4];
        for (int i = 0; i < 4; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
        out.write(bytes, 4);
    }
    static void write_f64(std::ofstream& out, double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        char bytes[8];
        for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
        out.write(bytes, 8);
    }
    static std::uint16_t read_u16(std::ifstream& in) {
        unsigned char bytes[2];
        in.read(reinterpret_cast<char*>(bytes), 2);
        return static_cast<std::uint16_t>(bytes[0] | (bytes[1] << 8));
    }
    static std::uint32_t read_u32(std::ifstream& in) {
        unsigned char bytes[4];
        in.read(reinterpret_cast<char*>(bytes), 4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[i]) << (8 * i);
        return v;
    }
    static double read_f64(std::ifstream& in) {
        unsigned char bytes[8];
        in.read(reinterpret_cast<char*>(bytes), 8);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
};

}  // namespace iqvq
