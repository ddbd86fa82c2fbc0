#pragma once

// RIFF/WAVE PCM16 reading (mono or stereo) and mono PCM16 writing.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "refgen/audio/clip.hpp"
#include "refgen/core/archive.hpp"

namespace refgen::audio {

struct WavData {
  int sample_rate = 0;
  int channels = 0;
  std::vector<std::int16_t> interleaved;
};

inline WavData read_wav_pcm16(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open WAV file " + path.string());
  const std::string ctx = path.string();
  auto fail = [&](const std::string& why) { return IoError("unsupported or corrupt WAV " + ctx + ": " + why); };
  char riff[4], wave[4];
  is.read(riff, 4);
  io_detail::get<std::uint32_t>(is, ctx);
  is.read(wave, 4);
  if (!is || std::memcmp(riff, "RIFF", 4) != 0 || std::memcmp(wave, "WAVE", 4) != 0) throw fail("missing RIFF/WAVE header");
  WavData out;
  bool have_fmt = false;
  while (is) {
    char id[4];
    is.read(id, 4);
    if (!is) break;
    auto size = io_detail::get<std::uint32_t>(is, ctx);
    if (std::memcmp(id, "fmt ", 4) == 0) {
      auto format = io_detail::get<std::uint16_t>(is, ctx);
      out.channels = io_detail::get<std::uint16_t>(is, ctx);
      out.sample_rate = static_cast<int>(io_detail::get<std::uint32_t>(is, ctx));
      io_detail::get<std::uint32_t>(is, ctx);
      io_detail::get<std::uint16_t>(is, ctx);
      auto bits = io_detail::get<std::uint16_t>(is, ctx);
      if (format != 1 && format != 0xFFFE) throw fail("not PCM (format " + std::to_string(format) + ")");
      if (bits != 16) throw fail(std::to_string(bits) + "-bit samples");
      if (out.channels < 1 || out.channels > 2) throw fail(std::to_string(out.channels) + " channels");
      if (out.sample_rate <= 0) throw fail("bad sample rate");
      is.seekg(size - 16 + (size & 1), std::ios::cur);
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      if (!have_fmt) throw fail("data chunk before fmt chunk");
      out.interleaved.resize(size / 2);
      is.read(reinterpret_cast<char*>(out.interleaved.data()), static_cast<std::streamsize>(out.interleaved.size() * 2));
      if (!is) throw fail("truncated data chunk");
      return out;
    } else {
      is.seekg(size + (size & 1), std::ios::cur);
    }
  }
  throw fail("no data chunk");
}

inline std::int16_t to_pcm16(float v) {
  float c = std::clamp(v, -1.0f, 1.0f);
  return static_cast<std::int16_t>(std::lround(std::clamp(c * 32768.0f, -32768.0f, 32767.0f)));
}

inline void write_wav_pcm16(const std::filesystem::path& path, const std::vector<std::int16_t>& interleaved, int rate,
                            int channels) {
  write_atomically(path, [&](std::ostream& os) {
    const std::uint32_t data_bytes = static_cast<std::uint32_t>(interleaved.size() * 2);
    os.write("RIFF", 4);
    io_detail::put<std::uint32_t>(os, 36 + data_bytes);
    os.write("WAVEfmt ", 8);
    io_detail::put<std::uint32_t>(os, 16);
    io_detail::put<std::uint16_t>(os, 1);
    io_detail::put<std::uint16_t>(os, static_cast<std::uint16_t>(channels));
    io_detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(rate));
    io_detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(rate * channels * 2));
    io_detail::put<std::uint16_t>(os, static_cast<std::uint16_t>(channels * 2));
    io_detail::put<std::uint16_t>(os, 16);
    os.write("data", 4);
    io_detail::put<std::uint32_t>(os, data_bytes);
    os.write(reinterpret_cast<const char*>(interleaved.data()), data_bytes);
  });
}

inline void write_wav(const std::filesystem::path& path, const AudioClip& clip) {
  std::vector<std::int16_t> pcm(clip.samples.size());
  std::transform(clip.samples.begin(), clip.samples.end(), pcm.begin(), to_pcm16);
  write_wav_pcm16(path, pcm, clip.sample_rate, 1);
}

}  // namespace refgen::audio
