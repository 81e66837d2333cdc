#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hsidiff {

// Error categories map 1:1 onto CLI exit codes: config 2, digest 3, numeric 4.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};
struct DigestError : std::runtime_error {
    explicit DigestError(const std::string& m) : std::runtime_error(m) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};
struct IoError : std::runtime_error {
    explicit IoError(const std::string& m) : std::runtime_error(m) {}
};

inline void check_config(bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
}

// ----------------------------- content digest -----------------------------
// FNV-1a 64-bit over raw bytes. Used to chain pipeline artifacts; detects
// accidental mixing of incompatible stages, not adversarial tampering.
struct Fnv1a64 {
    uint64_t h = 1469598103934665603ull;
    void update(const void* data, size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ull;
        }
    }
    std::string hex() const {
        char buf[17];
        std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
        return std::string(buf);
    }
};

inline std::string digest_bytes(const void* data, size_t n) {
    Fnv1a64 f;
    f.update(data, n);
    return f.hex();
}

inline std::string digest_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for digest: " + path.string());
    Fnv1a64 f;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof(buf));
        f.update(buf, static_cast<size_t>(in.gcount()));
    }
    return f.hex();
}

// ----------------------------- binary blobs -----------------------------
// All payloads are little-endian. Hosts are LE everywhere we run; byteswap
// on the odd BE machine.

template <class T>
inline void to_little_endian_bytes(const T* src, size_t n, std::vector<char>& out) {
    static_assert(std::is_trivially_copyable_v<T>);
    out.resize(n * sizeof(T));
    std::memcpy(out.data(), src, n * sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        for (size_t i = 0; i < n; ++i)
            std::reverse(out.data() + i * sizeof(T), out.data() + (i + 1) * sizeof(T));
    }
}

template <class T>
inline void from_little_endian_bytes(const char* src, size_t n, T* dst) {
    std::memcpy(dst, src, n * sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        auto* p = reinterpret_cast<char*>(dst);
        for (size_t i = 0; i < n; ++i)
            std::reverse(p + i * sizeof(T), p + (i + 1) * sizeof(T));
    }
}

template <class T>
inline void write_blob(const std::filesystem::path& path, const T* data, size_t n) {
    std::vector<char> bytes;
    to_little_endian_bytes(data, n, bytes);
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("short write: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

template <class T>
inline std::vector<T> read_blob(const std::filesystem::path& path, size_t expected_count) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() != expected_count * sizeof(T))
        throw IoError("size mismatch in " + path.string() + ": expected " +
                      std::to_string(expected_count * sizeof(T)) + " bytes, got " +
                      std::to_string(bytes.size()));
    std::vector<T> out(expected_count);
    from_little_endian_bytes(bytes.data(), expected_count, out.data());
    return out;
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out << text;
        if (!out) throw IoError("short write: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ----------------------------- rng -----------------------------
using Rng = std::mt19937_64;

// Distinct deterministic substreams from one user seed. seed_seq consumes
// 32-bit words, so each 64-bit input is split into two.
inline Rng make_rng(uint64_t seed, uint64_t stream = 0) {
    uint64_t mixed = stream ^ 0x9e3779b97f4a7c15ull;
    std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32),
                      static_cast<uint32_t>(mixed), static_cast<uint32_t>(mixed >> 32)};
    return Rng(seq);
}

inline std::string rng_state_string(const Rng& rng) {
    std::ostringstream ss;
    ss << rng;
    return ss.str();
}

inline void rng_set_state(Rng& rng, const std::string& state) {
    std::istringstream ss(state);
    ss >> rng;
    if (ss.fail()) throw IoError("bad rng state string");
}

} // namespace hsidiff
