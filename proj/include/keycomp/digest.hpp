#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace keycomp {

/// Lowercase hex SHA-256 of `data`.
std::string sha256_hex(std::string_view data);

/// Lowercase hex SHA-256 of a file's bytes. Throws LoadError when unreadable.
std::string sha256_file(const std::filesystem::path& path);

std::string base64_encode(std::string_view data);

/// Throws ParseError on malformed input.
std::string base64_decode(std::string_view text);

/// Whole file as bytes. Throws LoadError.
std::string read_file(const std::filesystem::path& path);

}  // namespace keycomp
