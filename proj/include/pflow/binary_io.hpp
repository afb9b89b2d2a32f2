#pragma once

// Little-endian primitives for the PFDS / PFLB / PFNN containers.
//
// Every container is: 4 magic bytes, u16 version, a format-specific header of
// u64 counts, the f64 payload, then a metadata trailer (u64 byte length
// followed by UTF-8 JSON). Readers that only know the fixed prefix can ignore
// the trailer.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pflow/errors.hpp"

namespace pflow::io {

class ByteWriter {
public:
    void magic(std::string_view tag) { bytes_.insert(bytes_.end(), tag.begin(), tag.end()); }

    void u16(std::uint16_t v)
    {
        for (int i = 0; i < 2; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }

    void u64(std::uint64_t v)
    {
        for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }

    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

    void text(std::string_view s)
    {
        u64(s.size());
        bytes_.insert(bytes_.end(), s.begin(), s.end());
    }

    const std::vector<char>& bytes() const { return bytes_; }

    void write_file(const std::filesystem::path& path) const
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
        out.write(bytes_.data(), static_cast<std::streamsize>(bytes_.size()));
        if (!out) throw std::runtime_error("write failed for " + path.string());
    }

    void reserve(std::size_t n) { bytes_.reserve(n); }

private:
    std::vector<char> bytes_;
};

class ByteReader {
public:
    ByteReader(std::vector<char> bytes, std::string source) : bytes_(std::move(bytes)), source_(std::move(source)) {}

    static ByteReader from_file(const std::filesystem::path& path)
    {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("cannot open " + path.string());
        std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return ByteReader(std::move(bytes), path.string());
    }

    void expect_magic(std::string_view tag)
    {
        need(tag.size(), "magic");
        if (std::memcmp(bytes_.data() + pos_, tag.data(), tag.size()) != 0)
            throw FormatError(source_ + ": bad magic, expected \"" + std::string(tag) + "\"");
        pos_ += tag.size();
    }

    std::uint16_t u16()
    {
        need(2, "u16");
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(static_cast<unsigned char>(bytes_[pos_ + i]) << (8 * i));
        pos_ += 2;
        return v;
    }

    std::uint64_t u64()
    {
        need(8, "u64");
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }

    double f64() { return std::bit_cast<double>(u64()); }

    std::string text()
    {
        const std::uint64_t n = u64();
        need(n, "text");
        std::string s(bytes_.data() + pos_, bytes_.data() + pos_ + n);
        pos_ += n;
        return s;
    }

    /// Fails early when a declared payload cannot fit in what remains.
    void expect_remaining_at_least(std::uint64_t count, const char* what) const { need(count, what); }

    std::size_t remaining() const { return bytes_.size() - pos_; }
    const std::string& source() const { return source_; }

private:
    void need(std::uint64_t n, const char* what) const
    {
        if (n > bytes_.size() - pos_)
            throw FormatError(source_ + ": truncated while reading " + what);
    }

    std::vector<char> bytes_;
    std::string source_;
    std::size_t pos_ = 0;
};

/// Checks the version and rejects anything this build does not understand.
inline void expect_version(ByteReader& in, std::uint16_t supported)
{
    const std::uint16_t v = in.u16();
    if (v != supported)
        throw FormatError(in.source() + ": unsupported version " + std::to_string(v) + " (expected " + std::to_string(supported) + ")");
}

/// Safe product for header counts; rejects absurd sizes before allocating.
inline std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b, const std::string& source)
{
    if (a != 0 && b > ~std::uint64_t{0} / a) throw FormatError(source + ": header counts overflow");
    return a * b;
}

}  // namespace pflow::io
