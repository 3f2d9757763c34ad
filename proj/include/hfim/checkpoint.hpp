#pragma once

// Checkpoint file layout ("hfim-ckpt-1"):
//   8 bytes   little-endian uint64: JSON header length in bytes
//   header    JSON: {version, config, has_heads, tensors: [{name, shape,
//             offset}], opt?: {step}}
//   data      raw little-endian float32, tensors packed in manifest order;
//             offsets are relative to the start of the data region
// Optimizer moments ride along as extra tensors named opt.m.* / opt.v.*.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "hfim/errors.hpp"
#include "hfim/optimizer.hpp"
#include "hfim/params.hpp"

namespace hfim {

inline constexpr const char* kCheckpointVersion = "hfim-ckpt-1";

struct Checkpoint {
  ModelConfig config;
  Params params;
  bool has_opt = false;
  AdamState opt_state;
  long tokens_seen = 0;  // cumulative at save time; restored on resume
};

namespace detail {

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"n_layers", c.n_layers},
                        {"n_heads", c.n_heads},
                        {"d_model", c.d_model},
                        {"d_ff", c.d_ff},
                        {"vocab_size", c.vocab_size},
                        {"max_seq", c.max_seq},
                        {"init_seed", c.init_seed},
                        {"hlp_convention", convention_name(c.hlp_convention)}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq = j.at("max_seq").get<int>();
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
    c.hlp_convention = parse_convention(j.at("hlp_convention").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: bad config in header: ") + e.what());
  }
  validate(c);
  return c;
}

struct TensorEntry {
  std::string name;
  std::vector<long> shape;
  std::uint64_t offset = 0;
};

template <typename P>
void collect_entries(const std::string& prefix, P& params,
                     std::vector<TensorEntry>& entries,
                     std::vector<const float*>& data, std::uint64_t& offset) {
  visit_tensors(params, [&](const std::string& name, const auto& t) {
    TensorEntry e;
    e.name = prefix + name;
    if (t.cols() == 1) {
      e.shape = {static_cast<long>(t.rows())};
    } else {
      e.shape = {static_cast<long>(t.rows()), static_cast<long>(t.cols())};
    }
    e.offset = offset;
    offset += static_cast<std::uint64_t>(t.size()) * sizeof(float);
    entries.push_back(std::move(e));
    data.push_back(t.data());
  });
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                            const Params& params, const AdamState* opt = nullptr,
                            long tokens_seen = 0) {
  validate(cfg);
  std::vector<detail::TensorEntry> entries;
  std::vector<const float*> data;
  std::uint64_t offset = 0;
  detail::collect_entries("", params, entries, data, offset);
  if (opt) {
    detail::collect_entries("opt.m.", opt->m, entries, data, offset);
    detail::collect_entries("opt.v.", opt->v, entries, data, offset);
  }

  nlohmann::json header;
  header["version"] = kCheckpointVersion;
  header["config"] = detail::config_to_json(cfg);
  header["has_heads"] = params.has_heads;
  auto& tensors = header["tensors"] = nlohmann::json::array();
  for (const auto& e : entries) {
    tensors.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", e.offset}});
  }
  if (opt) header["opt"] = {{"step", opt->t}, {"tokens_seen", tokens_seen}};

  const std::string header_str = header.dump();
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("checkpoint: cannot open " + tmp + " for writing");
    std::uint64_t hlen = header_str.size();
    std::uint8_t lenbuf[8];
    for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<std::uint8_t>((hlen >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(lenbuf), 8);
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    std::size_t idx = 0;
    std::uint64_t written = 0;
    for (const auto& e : entries) {
      std::uint64_t count = 1;
      for (long s : e.shape) count *= static_cast<std::uint64_t>(s);
      out.write(reinterpret_cast<const char*>(data[idx]),
                static_cast<std::streamsize>(count * sizeof(float)));
      written += count * sizeof(float);
      ++idx;
    }
    if (!out) throw IoError("checkpoint: short write to " + tmp);
    (void)written;
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("checkpoint: cannot move " + tmp + " to " + path + ": " + ec.message());
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path);
  std::uint8_t lenbuf[8];
  in.read(reinterpret_cast<char*>(lenbuf), 8);
  if (in.gcount() != 8) throw IoError("checkpoint: truncated header length in " + path);
  std::uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i) hlen |= static_cast<std::uint64_t>(lenbuf[i]) << (8 * i);
  if (hlen == 0 || hlen > (1u << 26)) throw IoError("checkpoint: implausible header length in " + path);
  std::string header_str(hlen, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(hlen));
  if (static_cast<std::uint64_t>(in.gcount()) != hlen) {
    throw IoError("checkpoint: truncated header in " + path);
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: header is not valid JSON: ") + e.what());
  }
  if (!header.contains("version") || header["version"] != kCheckpointVersion) {
    throw IoError("checkpoint: unsupported version in " + path);
  }

  Checkpoint ck;
  ck.config = detail::config_from_json(header.at("config"));
  const bool has_heads = header.value("has_heads", false);
  ck.params = zero_params<float>(ck.config, has_heads);
  ck.has_opt = header.contains("opt");
  if (ck.has_opt) {
    ck.opt_state = make_adam_state<float>(ck.config, has_heads);
    ck.opt_state.t = header["opt"].value("step", 0L);
    ck.tokens_seen = header["opt"].value("tokens_seen", 0L);
  }

  struct Entry {
    std::vector<long> shape;
    std::uint64_t offset;
  };
  std::unordered_map<std::string, Entry> manifest;
  for (const auto& t : header.at("tensors")) {
    manifest[t.at("name").get<std::string>()] =
        Entry{t.at("shape").get<std::vector<long>>(), t.at("offset").get<std::uint64_t>()};
  }

  const std::uint64_t data_start = 8 + hlen;
  auto read_into = [&](const std::string& name, auto& tensor) {
    auto it = manifest.find(name);
    if (it == manifest.end()) throw IoError("checkpoint: missing tensor " + name);
    std::vector<long> want;
    if (tensor.cols() == 1) {
      want = {static_cast<long>(tensor.rows())};
    } else {
      want = {static_cast<long>(tensor.rows()), static_cast<long>(tensor.cols())};
    }
    if (it->second.shape != want) throw IoError("checkpoint: shape mismatch for " + name);
    in.clear();
    in.seekg(static_cast<std::streamoff>(data_start + it->second.offset));
    in.read(reinterpret_cast<char*>(tensor.data()),
            static_cast<std::streamsize>(tensor.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(tensor.size() * sizeof(float))) {
      throw IoError("checkpoint: truncated data for " + name);
    }
  };
  visit_tensors(ck.params, [&](const std::string& n, auto& t) { read_into(n, t); });
  if (ck.has_opt) {
    visit_tensors(ck.opt_state.m, [&](const std::string& n, auto& t) { read_into("opt.m." + n, t); });
    visit_tensors(ck.opt_state.v, [&](const std::string& n, auto& t) { read_into("opt.v." + n, t); });
  }
  return ck;
}

}  // namespace hfim
