#include <array>
#include <bit>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>

#include "dsaa/digest.hpp"
#include "dsaa/log.hpp"
#include "dsaa/rng.hpp"

namespace dsaa {

Rng::Rng(std::uint64_t seed) : engine_(seed) {}

Rng Rng::stream(std::uint64_t seed, std::string_view label) {
  const std::uint64_t h = fnv1a64(label);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  Rng rng(0);
  rng.engine_.seed(seq);
  return rng;
}

double Rng::normal(double mean, double stddev) {
  return std::normal_distribution<double>(mean, stddev)(engine_);
}

double Rng::uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }

std::size_t Rng::index(std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::array<char, 17> buf{};
  std::snprintf(buf.data(), buf.size(), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf.data(), 16);
}

std::string digest_of(std::string_view bytes) { return hex64(fnv1a64(bytes)); }

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string() + " for hashing");
  std::ostringstream ss;
  ss << in.rdbuf();
  return digest_of(ss.str());
}

namespace log {
namespace {
std::mutex g_mu;
Level g_level = Level::Info;
std::vector<std::string> g_recent;

const char* tag(Level l) {
  switch (l) {
    case Level::Debug: return "debug";
    case Level::Info: return "info";
    case Level::Warn: return "warn";
    case Level::Error: return "error";
  }
  return "?";
}
}  // namespace

void set_level(Level level) {
  std::lock_guard lock(g_mu);
  g_level = level;
}

void write(Level level, std::string_view msg) {
  std::lock_guard lock(g_mu);
  if (level >= Level::Warn) {
    g_recent.emplace_back(msg);
    if (g_recent.size() > 1000) g_recent.erase(g_recent.begin());
  }
  if (level < g_level) return;
  std::cerr << "[" << tag(level) << "] " << msg << '\n';
}

std::vector<std::string> recent_warnings() {
  std::lock_guard lock(g_mu);
  return g_recent;
}

void clear_recent() {
  std::lock_guard lock(g_mu);
  g_recent.clear();
}

}  // namespace log
}  // namespace dsaa
