// Run manifest: config hash, seed, version, timing and output checksums.
#pragma once

#include "mixest/io.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <ctime>
#include <iomanip>

namespace mixest::cli {

inline constexpr const char* kVersion = "0.1.0";

inline std::string sha256_hex(const std::string& bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("SHA-256 failed");
    std::ostringstream out;
    for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return out.str();
}

inline std::string utc_timestamp(std::chrono::system_clock::time_point tp) {
    const std::time_t t = std::chrono::system_clock::to_time_t(tp);
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream out;
    out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return out.str();
}

/// Collects outputs of one run and writes manifest.json last.
class Manifest {
public:
    Manifest(std::string command, const io::fs::path& config, const std::string& config_bytes, std::uint64_t seed)
        : started_(std::chrono::system_clock::now()), clock_(std::chrono::steady_clock::now()) {
        doc_ = {{"command", std::move(command)},
                {"config", config.string()},
                {"config_sha256", sha256_hex(config_bytes)},
                {"seed", seed},
                {"version", kVersion},
                {"started_utc", utc_timestamp(started_)},
                {"outputs", io::json::array()}};
    }

    /// Writes one output atomically and records its checksum.
    void write(const io::fs::path& dir, const std::string& name, const std::string& content) {
        io::write_file_atomic(dir / name, content);
        doc_["outputs"].push_back({{"file", name}, {"sha256", sha256_hex(content)}, {"bytes", content.size()}});
    }

    void set(const std::string& key, io::json value) { doc_[key] = std::move(value); }

    void finish(const io::fs::path& dir) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_).count();
        doc_["wall_clock_seconds"] = secs;
        io::write_file_atomic(dir / "manifest.json", io::dump(doc_));
    }

private:
    std::chrono::system_clock::time_point started_;
    std::chrono::steady_clock::time_point clock_;
    io::json doc_;
};

}  // namespace mixest::cli
