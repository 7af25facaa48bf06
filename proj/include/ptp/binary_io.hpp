#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>

namespace ptp::io {

void write_u8(std::ostream& os, std::uint8_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
void write_bytes(std::ostream& os, std::string_view bytes);

std::uint8_t read_u8(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
std::string read_bytes(std::istream& is, std::size_t n);

/// Reads exactly 4 bytes and throws IoError unless they equal `magic`.
void expect_magic(std::istream& is, std::string_view magic, std::string_view what);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

using Digest = std::array<std::uint8_t, 32>;
Digest sha256(std::string_view bytes);
std::string hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view bytes);

}  // namespace ptp::io
