#pragma once

// Run manifests: what a command was asked to do and digests of everything it
// read and wrote. No timestamps or host details, so two identical runs
// produce byte-identical manifests.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>
#include <openssl/evp.h>

namespace sgz {

inline constexpr const char* kManifestName = "manifest.json";

#ifndef SGZERO_VERSION
#define SGZERO_VERSION "0.0.0"
#endif

/// Lower-case hex SHA-256 of a file's bytes.
inline std::string sha256_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path + " for hashing");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("sha256: digest init failed");
  }
  std::array<char, 1 << 16> buf;
  while (is) {
    is.read(buf.data(), buf.size());
    if (is.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

struct FileDigest {
  std::string path;
  std::string sha256;
  friend bool operator==(const FileDigest&, const FileDigest&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(FileDigest, path, sha256)

struct RunManifest {
  std::string tool = "sgzero";
  std::string version = SGZERO_VERSION;
  std::string command;
  std::uint64_t seed = 0;
  nlohmann::json config;   // fully resolved experiment config
  nlohmann::json options;  // command-specific arguments
  std::map<std::string, std::string> input_args;  // role -> path as given
  std::vector<FileDigest> inputs;
  std::vector<FileDigest> outputs;  // relative to the output directory
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(RunManifest, tool, version, command, seed, config, options, input_args,
                                   inputs, outputs)

inline void write_manifest(const std::string& dir, const RunManifest& m) {
  std::ofstream os(std::filesystem::path(dir) / kManifestName);
  if (!os) throw std::runtime_error("cannot write manifest in " + dir);
  os << nlohmann::json(m).dump(2) << '\n';
}

inline RunManifest read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot open manifest " + path);
  try {
    return nlohmann::json::parse(is).get<RunManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("manifest " + path + ": " + e.what());
  }
}

}  // namespace sgz
