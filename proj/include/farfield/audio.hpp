#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "farfield/common.hpp"

namespace farfield {

/// Sample-domain multichannel signal. One row per channel, all channels equal
/// length, samples nominally in [-1, 1].
struct MultichannelAudio {
    Eigen::MatrixXd samples;  // channels x num_samples
    int sample_rate = 0;

    int channels() const { return static_cast<int>(samples.rows()); }
    Eigen::Index num_samples() const { return samples.cols(); }
    double duration_sec() const {
        return sample_rate > 0 ? static_cast<double>(samples.cols()) / sample_rate : 0.0;
    }
};

namespace detail {

inline std::uint32_t read_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint16_t read_u16(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline void put_u32(std::vector<unsigned char>& v, std::uint32_t x) {
    v.push_back(x & 0xff);
    v.push_back((x >> 8) & 0xff);
    v.push_back((x >> 16) & 0xff);
    v.push_back((x >> 24) & 0xff);
}

inline void put_u16(std::vector<unsigned char>& v, std::uint16_t x) {
    v.push_back(x & 0xff);
    v.push_back((x >> 8) & 0xff);
}

}  // namespace detail

/// Reads a RIFF/WAVE file. PCM 16-bit and IEEE float 32-bit encodings only.
/// Samples are scaled to [-1, 1]; channel count and rate come from the header.
inline MultichannelAudio read_wav(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("read_wav: cannot open " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
    if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
        std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
        throw FormatError("read_wav: not a RIFF/WAVE file: " + path);

    std::uint16_t format = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    bool have_fmt = false;
    const unsigned char* data = nullptr;
    std::uint32_t data_len = 0;
    bool have_data = false;

    std::size_t pos = 12;
    while (pos + 8 <= buf.size()) {
        const char* id = reinterpret_cast<const char*>(buf.data() + pos);
        std::uint32_t len = detail::read_u32(buf.data() + pos + 4);
        std::size_t body = pos + 8;
        if (std::memcmp(id, "fmt ", 4) == 0) {
            if (body + 16 > buf.size()) throw DataError("read_wav: truncated fmt chunk");
            format = detail::read_u16(buf.data() + body);
            channels = detail::read_u16(buf.data() + body + 2);
            rate = detail::read_u32(buf.data() + body + 4);
            bits = detail::read_u16(buf.data() + body + 14);
            have_fmt = true;
        } else if (std::memcmp(id, "data", 4) == 0) {
            if (body + len > buf.size()) throw DataError("read_wav: truncated data chunk");
            data = buf.data() + body;
            data_len = len;
            have_data = true;
        }
        pos = body + len + (len & 1);  // chunks are word-aligned
    }
    if (!have_fmt || !have_data) throw FormatError("read_wav: missing fmt or data chunk");
    if (channels == 0 || rate == 0) throw FormatError("read_wav: bad fmt fields");

    const bool pcm16 = (format == 1 && bits == 16);
    const bool float32 = (format == 3 && bits == 32);
    if (!pcm16 && !float32)
        throw FormatError("read_wav: unsupported encoding (format " + std::to_string(format) +
                          ", " + std::to_string(bits) + " bit)");

    const std::uint32_t bytes_per_sample = bits / 8;
    const std::uint32_t frame_size = bytes_per_sample * channels;
    if (frame_size != 0 && data_len % frame_size != 0)
        throw DataError("read_wav: data chunk is not a whole number of frames");
    const std::uint32_t frames = frame_size ? data_len / frame_size : 0;

    MultichannelAudio audio;
    audio.sample_rate = static_cast<int>(rate);
    audio.samples.resize(channels, frames);
    for (std::uint32_t t = 0; t < frames; ++t) {
        for (std::uint16_t c = 0; c < channels; ++c) {
            const unsigned char* p = data + (t * channels + c) * bytes_per_sample;
            if (pcm16) {
                std::int16_t v = static_cast<std::int16_t>(p[0] | (p[1] << 8));
                audio.samples(c, t) = static_cast<double>(v) / 32768.0;
            } else {
                std::uint32_t u = detail::read_u32(p);
                float f;
                std::memcpy(&f, &u, 4);
                audio.samples(c, t) = static_cast<double>(f);
            }
        }
    }
    return audio;
}

/// Writes 16-bit PCM, clipping at +-1. read_wav inverts it to within one LSB.
inline void write_wav(const std::string& path, const MultichannelAudio& audio) {
    if (!audio.samples.allFinite()) throw DataError("write_wav: non-finite samples");
    const int channels = audio.channels();
    const Eigen::Index frames = audio.num_samples();
    const std::uint32_t data_len = static_cast<std::uint32_t>(frames) * channels * 2;

    std::vector<unsigned char> out;
    out.reserve(44 + data_len);
    out.insert(out.end(), {'R', 'I', 'F', 'F'});
    detail::put_u32(out, 36 + data_len);
    out.insert(out.end(), {'W', 'A', 'V', 'E'});
    out.insert(out.end(), {'f', 'm', 't', ' '});
    detail::put_u32(out, 16);
    detail::put_u16(out, 1);  // PCM
    detail::put_u16(out, static_cast<std::uint16_t>(channels));
    detail::put_u32(out, static_cast<std::uint32_t>(audio.sample_rate));
    detail::put_u32(out, static_cast<std::uint32_t>(audio.sample_rate) * channels * 2);
    detail::put_u16(out, static_cast<std::uint16_t>(channels * 2));
    detail::put_u16(out, 16);
    out.insert(out.end(), {'d', 'a', 't', 'a'});
    detail::put_u32(out, data_len);
    for (Eigen::Index t = 0; t < frames; ++t) {
        for (int c = 0; c < channels; ++c) {
            double x = std::clamp(audio.samples(c, t), -1.0, 1.0);
            long v = std::lround(x * 32768.0);
            v = std::clamp(v, -32768L, 32767L);
            detail::put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(v)));
        }
    }

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("write_wav: cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("write_wav: write failed for " + path);
}

}  // namespace farfield
