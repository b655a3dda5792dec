#include "coview/io.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace coview {

namespace {
void put_u32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}
void put_u16(std::ostream& out, uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    out.write(reinterpret_cast<const char*>(b), 2);
}
uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return b[0] | (b[1] << 8) | (b[2] << 16) | (uint32_t(b[3]) << 24);
}
uint16_t get_u16(std::istream& in) {
    unsigned char b[2];
    in.read(reinterpret_cast<char*>(b), 2);
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
}
} // namespace

void write_bev_file(const BevGrid& grid, const std::string& path) {
    const Shape& s = grid.occupancy.shape;
    require(s.size() == 3, "write_bev_file: grid must be [H,W,C]");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_bev_file: cannot open " + path);
    out.write("BEV0", 4);
    put_u32(out, static_cast<uint32_t>(s[0]));
    put_u32(out, static_cast<uint32_t>(s[1]));
    put_u16(out, static_cast<uint16_t>(s[2]));
    put_u16(out, 0);  // dtype u8
    std::vector<unsigned char> bytes(grid.occupancy.numel());
    const std::vector<double>& v = grid.occupancy.data();
    for (size_t i = 0; i < bytes.size(); ++i) bytes[i] = v[i] != 0.0 ? 1 : 0;
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

BevGrid read_bev_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_bev_file: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (std::memcmp(magic, "BEV0", 4) != 0)
        throw std::runtime_error("read_bev_file: bad magic in " + path);
    int h = static_cast<int>(get_u32(in));
    int w = static_cast<int>(get_u32(in));
    int c = get_u16(in);
    int dtype = get_u16(in);
    if (dtype != 0) throw std::runtime_error("read_bev_file: unsupported dtype in " + path);
    std::vector<unsigned char> bytes(static_cast<size_t>(h) * w * c);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw std::runtime_error("read_bev_file: truncated payload in " + path);
    std::vector<double> vals(bytes.size());
    for (size_t i = 0; i < bytes.size(); ++i) vals[i] = bytes[i] ? 1.0 : 0.0;
    BevGrid g;
    g.occupancy = tensor_of({h, w, c}, std::move(vals));
    return g;
}

void write_csv_matrix(const Tensor& t, const std::string& path) {
    require(t.shape.size() == 2 || (t.shape.size() == 3 && t.shape[2] == 1),
            "write_csv_matrix: tensor must be a matrix");
    int h = t.shape[0], w = t.shape[1];
    std::string out;
    char buf[32];
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            std::snprintf(buf, sizeof(buf), "%.17g", t.data()[static_cast<size_t>(r) * w + c]);
            out += buf;
            out += (c + 1 == w) ? '\n' : ',';
        }
    }
    write_text_file_atomic(path, out);
}

void write_text_file_atomic(const std::string& path, const std::string& content) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("write_text_file_atomic: cannot open " + tmp);
        out << content;
    }
    std::filesystem::rename(tmp, path);
}

} // namespace coview
