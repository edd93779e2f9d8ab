#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>

#include "spos/error.hpp"

// Little-endian buffer helpers shared by the binary file formats.
namespace spos::bytes {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_scalar(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }
inline void put_scalar(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

struct Reader {
    std::string buf;
    std::string path;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (n > buf.size() - pos) throw IoError("'" + path + "' is truncated");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
    void scalar(float& v) { v = std::bit_cast<float>(u32()); }
    void scalar(double& v) { v = std::bit_cast<double>(u64()); }
};

inline Reader read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    Reader r;
    r.buf.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    r.path = path;
    return r;
}

inline void write_file(const std::string& path, const std::string& data) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f.write(data.data(), static_cast<std::streamsize>(data.size()));
    f.flush();
    if (!f) throw IoError("cannot write '" + path + "'");
}

}  // namespace spos::bytes
