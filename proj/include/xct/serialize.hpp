#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "xct/common.hpp"

namespace xct {

// Little-endian binary primitives. All on-disk containers in this project
// ("XTOK", "XCLM", "XACT", "XCCX") are built from these.

class BinWriter {
public:
    explicit BinWriter(const std::string& path);
    void magic(const char m[4]);
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f32(float v);
    void f64(double v);
    void str(const std::string& s);  // u32 length + bytes
    void bytes(const void* p, std::size_t n);
    // Row-major f32 dump of a double matrix (values rounded to float).
    void tensor(const std::string& name, const Eigen::MatrixXd& m);
    void close();

private:
    std::ofstream out_;
    std::string path_;
};

class BinReader {
public:
    explicit BinReader(const std::string& path);
    void expect_magic(const char m[4], const std::string& what);
    std::uint32_t u32();
    std::uint64_t u64();
    float f32();
    double f64();
    std::string str();
    void bytes(void* p, std::size_t n);
    // Reads a tensor written by BinWriter::tensor; returns (name, matrix).
    std::pair<std::string, Eigen::MatrixXd> tensor();
    bool eof();

private:
    std::ifstream in_;
    std::string path_;
};

// Writes `content` to `path` via a temp file + atomic rename.
void write_file_atomic(const std::string& path, const std::string& content);
std::string read_file(const std::string& path);

}  // namespace xct
