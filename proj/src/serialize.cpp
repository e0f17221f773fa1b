#include "xct/serialize.hpp"

#include <cstring>
#include <filesystem>

namespace xct {

BinWriter::BinWriter(const std::string& path) : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw InputError("cannot open for writing: " + path);
}

void BinWriter::magic(const char m[4]) { out_.write(m, 4); }
void BinWriter::u32(std::uint32_t v) { out_.write(reinterpret_cast<const char*>(&v), 4); }
void BinWriter::u64(std::uint64_t v) { out_.write(reinterpret_cast<const char*>(&v), 8); }
void BinWriter::f32(float v) { out_.write(reinterpret_cast<const char*>(&v), 4); }
void BinWriter::f64(double v) { out_.write(reinterpret_cast<const char*>(&v), 8); }

void BinWriter::str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void BinWriter::bytes(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void BinWriter::tensor(const std::string& name, const Eigen::MatrixXd& m) {
    str(name);
    u32(2);
    u64(static_cast<std::uint64_t>(m.rows()));
    u64(static_cast<std::uint64_t>(m.cols()));
    std::vector<float> row(static_cast<size_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<size_t>(c)] = static_cast<float>(m(r, c));
        bytes(row.data(), row.size() * sizeof(float));
    }
}

void BinWriter::close() {
    out_.close();
    if (!out_) throw InputError("write failed: " + path_);
}

BinReader::BinReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw MissingInputError("cannot open: " + path);
}

void BinReader::expect_magic(const char m[4], const std::string& what) {
    char got[4];
    in_.read(got, 4);
    if (!in_ || std::memcmp(got, m, 4) != 0)
        throw InputError(path_ + ": not a " + what + " file (bad magic)");
}

std::uint32_t BinReader::u32() {
    std::uint32_t v;
    in_.read(reinterpret_cast<char*>(&v), 4);
    if (!in_) throw InputError(path_ + ": truncated file");
    return v;
}

std::uint64_t BinReader::u64() {
    std::uint64_t v;
    in_.read(reinterpret_cast<char*>(&v), 8);
    if (!in_) throw InputError(path_ + ": truncated file");
    return v;
}

float BinReader::f32() {
    float v;
    in_.read(reinterpret_cast<char*>(&v), 4);
    if (!in_) throw InputError(path_ + ": truncated file");
    return v;
}

double BinReader::f64() {
    double v;
    in_.read(reinterpret_cast<char*>(&v), 8);
    if (!in_) throw InputError(path_ + ": truncated file");
    return v;
}

std::string BinReader::str() {
    std::uint32_t n = u32();
    std::string s(n, '\0');
    in_.read(s.data(), n);
    if (!in_) throw InputError(path_ + ": truncated file");
    return s;
}

void BinReader::bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in_) throw InputError(path_ + ": truncated file");
}

std::pair<std::string, Eigen::MatrixXd> BinReader::tensor() {
    std::string name = str();
    std::uint32_t ndim = u32();
    if (ndim != 2) throw InputError(path_ + ": unexpected tensor rank " + std::to_string(ndim));
    std::uint64_t rows = u64(), cols = u64();
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    std::vector<float> row(static_cast<size_t>(cols));
    for (std::uint64_t r = 0; r < rows; ++r) {
        bytes(row.data(), row.size() * sizeof(float));
        for (std::uint64_t c = 0; c < cols; ++c)
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = row[static_cast<size_t>(c)];
    }
    return {name, std::move(m)};
}

bool BinReader::eof() {
    return in_.peek() == std::char_traits<char>::eof();
}

void write_file_atomic(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw InputError("cannot open for writing: " + tmp);
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.close();
        if (!out) throw InputError("write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingInputError("cannot open: " + path);
    std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return s;
}

}  // namespace xct
