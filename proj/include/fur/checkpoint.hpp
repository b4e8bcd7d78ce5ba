// Checkpoint file: little-endian u64 header length, JSON header (config,
// vocab, tensor manifest), then a raw little-endian float32 blob. Offsets in
// the manifest are byte positions from the start of the blob.
#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fur/model.hpp"
#include "fur/vocab.hpp"

namespace fur {

struct IoFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointVersion = 1;

struct LoadedModel {
  Params<float> params;
  Vocab vocab;
};

inline void save_checkpoint(const Params<float>& p, const Vocab& vocab,
                            const std::string& path) {
  nlohmann::ordered_json header;
  header["format"] = "furlab-checkpoint";
  header["version"] = kCheckpointVersion;
  header["config"] = {
      {"d_model", p.config.d_model},   {"n_layers", p.config.n_layers},
      {"n_heads", p.config.n_heads},   {"d_ff", p.config.d_ff},
      {"vocab_size", p.config.vocab_size}, {"max_seq", p.config.max_seq},
      {"init_seed", p.config.init_seed}};
  header["vocab"] = {{"tokens", vocab.tokens()}};
  nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  p.for_each_tensor([&](const std::string& name, const Mat<float>& m) {
    manifest.push_back({{"name", name},
                        {"rows", m.rows()},
                        {"cols", m.cols()},
                        {"offset", offset}});
    offset += sizeof(float) * static_cast<std::uint64_t>(m.size());
  });
  header["tensors"] = std::move(manifest);

  const std::string htext = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoFailure("cannot open checkpoint for writing: " + path);
  std::uint64_t hlen = htext.size();
  unsigned char lenbuf[8];
  for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<unsigned char>((hlen >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(lenbuf), 8);
  out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  p.for_each_tensor([&](const std::string&, const Mat<float>& m) {
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(m.size())));
  });
  if (!out) throw IoFailure("short write to checkpoint: " + path);
}

inline LoadedModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoFailure("cannot open checkpoint: " + path);
  unsigned char lenbuf[8];
  in.read(reinterpret_cast<char*>(lenbuf), 8);
  if (!in) throw FormatError("checkpoint truncated before header length");
  std::uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i) hlen |= static_cast<std::uint64_t>(lenbuf[i]) << (8 * i);
  std::string htext(hlen, '\0');
  in.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw FormatError("checkpoint truncated inside header");
  nlohmann::json header = nlohmann::json::parse(htext, nullptr, false);
  if (header.is_discarded() || header.value("format", "") != "furlab-checkpoint") {
    throw FormatError("not a furlab checkpoint: " + path);
  }
  if (header.value("version", -1) != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version");
  }

  ModelConfig cfg;
  const auto& jc = header.at("config");
  cfg.d_model = jc.at("d_model").get<int>();
  cfg.n_layers = jc.at("n_layers").get<int>();
  cfg.n_heads = jc.at("n_heads").get<int>();
  cfg.d_ff = jc.at("d_ff").get<int>();
  cfg.vocab_size = jc.at("vocab_size").get<int>();
  cfg.max_seq = jc.at("max_seq").get<int>();
  cfg.init_seed = jc.at("init_seed").get<std::uint64_t>();
  cfg.validate();

  LoadedModel loaded{Params<float>::zeros_like(cfg), Vocab()};
  std::vector<std::string> words;
  for (const auto& t : header.at("vocab").at("tokens")) {
    const auto w = t.get<std::string>();
    if (w == Vocab::kPad || w == Vocab::kBos || w == Vocab::kEos || w == Vocab::kNewline)
      continue;
    words.push_back(w);
  }
  loaded.vocab = Vocab::build(words);
  if (loaded.vocab.size() != cfg.vocab_size) {
    throw FormatError("vocab size does not match config");
  }

  const std::streampos blob_start = in.tellg();
  std::size_t idx = 0;
  const auto& manifest = header.at("tensors");
  loaded.params.for_each_tensor([&](const std::string& name, Mat<float>& m) {
    if (idx >= manifest.size()) throw FormatError("manifest shorter than model");
    const auto& entry = manifest[idx++];
    if (entry.at("name").get<std::string>() != name ||
        entry.at("rows").get<Eigen::Index>() != m.rows() ||
        entry.at("cols").get<Eigen::Index>() != m.cols()) {
      throw FormatError("manifest mismatch at tensor " + name);
    }
    in.seekg(blob_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(m.size())));
    if (!in) throw FormatError("checkpoint truncated inside blob at " + name);
  });
  if (idx != manifest.size()) throw FormatError("manifest longer than model");
  return loaded;
}

}  // namespace fur
