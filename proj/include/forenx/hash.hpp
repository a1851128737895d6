#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace forenx {

/// Incremental SHA-256; hex digests are lowercase.
class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(std::span<const std::uint8_t> bytes);
    void update(std::string_view text);
    void update(std::span<const double> values);
    std::string hex_digest();

private:
    void* ctx_;
};

std::string sha256_hex(std::string_view text);
std::string sha256_file(const std::filesystem::path& path);

std::string base64_encode(std::span<const std::uint8_t> bytes);

}  // namespace forenx
