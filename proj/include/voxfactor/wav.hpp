#pragma once

// Minimal RIFF/WAVE reader and writer for 16-bit PCM mono files.

#include "voxfactor/common.hpp"

#include <cstring>
#include <fstream>

namespace voxfactor {

struct WavData {
    int sample_rate = 16000;
    std::vector<double> samples;  // in [-1, 1]
};

namespace detail {
inline uint32_t rd_u32(const unsigned char* p) {
    return (uint32_t)p[0] | ((uint32_t)p[1] << 8) | ((uint32_t)p[2] << 16) |
           ((uint32_t)p[3] << 24);
}
inline uint16_t rd_u16(const unsigned char* p) {
    return (uint16_t)((uint32_t)p[0] | ((uint32_t)p[1] << 8));
}
inline void wr_u32(std::ostream& o, uint32_t v) {
    unsigned char b[4] = {(unsigned char)(v & 255), (unsigned char)((v >> 8) & 255),
                          (unsigned char)((v >> 16) & 255), (unsigned char)((v >> 24) & 255)};
    o.write((const char*)b, 4);
}
inline void wr_u16(std::ostream& o, uint16_t v) {
    unsigned char b[2] = {(unsigned char)(v & 255), (unsigned char)((v >> 8) & 255)};
    o.write((const char*)b, 2);
}
}  // namespace detail

inline WavData read_wav(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "wav: cannot open " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
    check(buf.size() >= 44, "wav: file too small: " + path);
    check(std::memcmp(buf.data(), "RIFF", 4) == 0 && std::memcmp(buf.data() + 8, "WAVE", 4) == 0,
          "wav: not a RIFF/WAVE file: " + path);

    size_t pos = 12;
    int channels = 0, bits = 0, rate = 0;
    const unsigned char* data = nullptr;
    size_t data_len = 0;
    while (pos + 8 <= buf.size()) {
        uint32_t chunk_len = detail::rd_u32(buf.data() + pos + 4);
        if (std::memcmp(buf.data() + pos, "fmt ", 4) == 0) {
            check(pos + 8 + 16 <= buf.size(), "wav: truncated fmt chunk: " + path);
            uint16_t fmt = detail::rd_u16(buf.data() + pos + 8);
            check(fmt == 1, "wav: only PCM supported: " + path);
            channels = detail::rd_u16(buf.data() + pos + 10);
            rate = (int)detail::rd_u32(buf.data() + pos + 12);
            bits = detail::rd_u16(buf.data() + pos + 22);
        } else if (std::memcmp(buf.data() + pos, "data", 4) == 0) {
            check(pos + 8 + chunk_len <= buf.size(), "wav: truncated data chunk: " + path);
            data = buf.data() + pos + 8;
            data_len = chunk_len;
        }
        pos += 8 + chunk_len + (chunk_len & 1);
    }
    check(channels == 1, "wav: mono required: " + path);
    check(bits == 16, "wav: 16-bit PCM required: " + path);
    check(data != nullptr && data_len >= 2, "wav: no sample data: " + path);

    WavData w;
    w.sample_rate = rate;
    size_t n = data_len / 2;
    w.samples.resize(n);
    for (size_t i = 0; i < n; ++i) {
        int16_t s = (int16_t)detail::rd_u16(data + 2 * i);
        w.samples[i] = (double)s / 32768.0;
    }
    return w;
}

inline void write_wav(const std::string& path, const std::vector<double>& samples,
                      int sample_rate) {
    std::ofstream out(path, std::ios::binary);
    check(out.good(), "wav: cannot write " + path);
    uint32_t data_len = (uint32_t)(samples.size() * 2);
    out.write("RIFF", 4);
    detail::wr_u32(out, 36 + data_len);
    out.write("WAVE", 4);
    out.write("fmt ", 4);
    detail::wr_u32(out, 16);
    detail::wr_u16(out, 1);   // PCM
    detail::wr_u16(out, 1);   // mono
    detail::wr_u32(out, (uint32_t)sample_rate);
    detail::wr_u32(out, (uint32_t)(sample_rate * 2));
    detail::wr_u16(out, 2);   // block align
    detail::wr_u16(out, 16);  // bits
    out.write("data", 4);
    detail::wr_u32(out, data_len);
    for (double s : samples) {
        double clamped = std::max(-1.0, std::min(1.0, s));
        int16_t v = (int16_t)std::lrint(clamped * 32767.0);
        detail::wr_u16(out, (uint16_t)v);
    }
    check(out.good(), "wav: write failed for " + path);
}

}  // namespace voxfactor
