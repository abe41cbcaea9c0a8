#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/calibration.hpp"
#include "moelab/digest.hpp"
#include "moelab/errors.hpp"
#include "moelab/model.hpp"

namespace moelab {

// Binary container layout (all integers little-endian):
//   magic "MOEL" | version u16 | meta_len u64 | metadata JSON text |
//   n_records u64 | records | payload
// record: name_len u64, name, dtype u8, rank u8, dims u64[rank],
//         offset u64 (into payload), byte_length u64
// The metadata carries the FNV-1a64 of the payload; load verifies it.
inline constexpr char kContainerMagic[4] = {'M', 'O', 'E', 'L'};
inline constexpr std::uint16_t kContainerVersion = 1;

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1, I64 = 2 };

inline std::size_t dtype_size(Dtype d) { return d == Dtype::F32 ? 4 : 8; }

struct TensorRecord {
  std::string name;
  Dtype dtype = Dtype::F64;
  std::vector<std::uint64_t> dims;
  std::vector<unsigned char> bytes;

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

struct Container {
  nlohmann::json metadata;
  std::vector<TensorRecord> records;

  void add_f64(const std::string& name, std::vector<std::uint64_t> dims,
               const double* data) {
    TensorRecord r;
    r.name = name;
    r.dtype = Dtype::F64;
    r.dims = std::move(dims);
    r.bytes.resize(r.element_count() * 8);
    std::memcpy(r.bytes.data(), data, r.bytes.size());
    push(std::move(r));
  }

  void add_f32_from_double(const std::string& name, std::vector<std::uint64_t> dims,
                           const double* data) {
    TensorRecord r;
    r.name = name;
    r.dtype = Dtype::F32;
    r.dims = std::move(dims);
    const std::uint64_t n = r.element_count();
    r.bytes.resize(n * 4);
    auto* out = reinterpret_cast<float*>(r.bytes.data());
    for (std::uint64_t i = 0; i < n; ++i) out[i] = static_cast<float>(data[i]);
    push(std::move(r));
  }

  void add_real(const std::string& name, std::vector<std::uint64_t> dims,
                const double* data, bool fp64) {
    if (fp64) {
      add_f64(name, std::move(dims), data);
    } else {
      add_f32_from_double(name, std::move(dims), data);
    }
  }

  void add_i64(const std::string& name, std::vector<std::uint64_t> dims,
               const std::int64_t* data) {
    TensorRecord r;
    r.name = name;
    r.dtype = Dtype::I64;
    r.dims = std::move(dims);
    r.bytes.resize(r.element_count() * 8);
    std::memcpy(r.bytes.data(), data, r.bytes.size());
    push(std::move(r));
  }

  bool has(const std::string& name) const {
    for (const auto& r : records)
      if (r.name == name) return true;
    return false;
  }

  const TensorRecord& get(const std::string& name) const {
    for (const auto& r : records)
      if (r.name == name) return r;
    throw BadShapeError("container: missing record '" + name + "'");
  }

  std::vector<double> get_real(const std::string& name) const {
    const auto& r = get(name);
    const std::uint64_t n = r.element_count();
    std::vector<double> out(n);
    if (r.dtype == Dtype::F64) {
      std::memcpy(out.data(), r.bytes.data(), n * 8);
    } else if (r.dtype == Dtype::F32) {
      const auto* in = reinterpret_cast<const float*>(r.bytes.data());
      for (std::uint64_t i = 0; i < n; ++i) out[i] = static_cast<double>(in[i]);
    } else {
      throw BadShapeError("container: record '" + name + "' is not real-valued");
    }
    return out;
  }

  std::vector<std::int64_t> get_i64(const std::string& name) const {
    const auto& r = get(name);
    if (r.dtype != Dtype::I64) {
      throw BadShapeError("container: record '" + name + "' is not i64");
    }
    std::vector<std::int64_t> out(r.element_count());
    std::memcpy(out.data(), r.bytes.data(), out.size() * 8);
    return out;
  }

 private:
  void push(TensorRecord r) {
    if (has(r.name)) {
      throw ValidationError("container: duplicate record name '" + r.name + "'");
    }
    records.push_back(std::move(r));
  }
};

namespace detail {

inline void append_u16(std::vector<unsigned char>& buf, std::uint16_t v) {
  buf.push_back(static_cast<unsigned char>(v & 0xFF));
  buf.push_back(static_cast<unsigned char>(v >> 8));
}

inline void append_u64(std::vector<unsigned char>& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

struct ByteReader {
  const std::vector<unsigned char>& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw BadShapeError("container: truncated file");
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(buf[pos] | (buf[pos + 1] << 8));
    pos += 2;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
  std::uint8_t u8() {
    need(1);
    return buf[pos++];
  }
};

}  // namespace detail

inline std::vector<unsigned char> serialize_container(const Container& c) {
  // payload first, so its hash can go into the metadata
  std::vector<unsigned char> payload;
  std::vector<std::uint64_t> offsets;
  offsets.reserve(c.records.size());
  for (const auto& r : c.records) {
    if (r.bytes.size() != r.element_count() * dtype_size(r.dtype)) {
      throw ValidationError("container: record '" + r.name +
                            "' byte length does not match dims");
    }
    offsets.push_back(payload.size());
    payload.insert(payload.end(), r.bytes.begin(), r.bytes.end());
  }
  nlohmann::json meta = c.metadata;
  meta["payload_hash"] = fnv64_hex(payload.data(), payload.size());
  const std::string meta_text = meta.dump();

  std::vector<unsigned char> buf;
  buf.insert(buf.end(), kContainerMagic, kContainerMagic + 4);
  detail::append_u16(buf, kContainerVersion);
  detail::append_u64(buf, meta_text.size());
  buf.insert(buf.end(), meta_text.begin(), meta_text.end());
  detail::append_u64(buf, c.records.size());
  for (std::size_t i = 0; i < c.records.size(); ++i) {
    const auto& r = c.records[i];
    detail::append_u64(buf, r.name.size());
    buf.insert(buf.end(), r.name.begin(), r.name.end());
    buf.push_back(static_cast<unsigned char>(r.dtype));
    buf.push_back(static_cast<unsigned char>(r.dims.size()));
    for (auto d : r.dims) detail::append_u64(buf, d);
    detail::append_u64(buf, offsets[i]);
    detail::append_u64(buf, r.bytes.size());
  }
  buf.insert(buf.end(), payload.begin(), payload.end());
  return buf;
}

// Atomic write via temp + rename; returns the whole-file content digest.
inline std::string save_container(const Container& c, const std::string& path) {
  const std::vector<unsigned char> buf = serialize_container(c);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for write: " + tmp);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("write failure: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw IoError("rename failure: " + tmp + " -> " + path);
  }
  return fnv64_hex(buf.data(), buf.size());
}

inline Container parse_container(const std::vector<unsigned char>& buf,
                                 const std::string& origin) {
  detail::ByteReader rd{buf};
  const std::string magic = rd.str(4);
  if (std::memcmp(magic.data(), kContainerMagic, 4) != 0) {
    throw BadMagicError("bad magic in " + origin);
  }
  const std::uint16_t version = rd.u16();
  if (version > kContainerVersion) {
    throw BadVersionError("unsupported container version " + std::to_string(version) +
                          " (tool supports <= " + std::to_string(kContainerVersion) +
                          ") in " + origin);
  }
  const std::uint64_t meta_len = rd.u64();
  const std::string meta_text = rd.str(meta_len);
  Container c;
  try {
    c.metadata = nlohmann::json::parse(meta_text);
  } catch (const nlohmann::json::exception& e) {
    throw BadShapeError("invalid metadata JSON in " + origin + ": " + e.what());
  }
  const std::uint64_t n_records = rd.u64();
  struct RawRec {
    TensorRecord rec;
    std::uint64_t offset, length;
  };
  std::vector<RawRec> raw;
  raw.reserve(n_records);
  std::map<std::string, bool> seen;
  for (std::uint64_t i = 0; i < n_records; ++i) {
    RawRec rr;
    const std::uint64_t name_len = rd.u64();
    rr.rec.name = rd.str(name_len);
    if (seen.count(rr.rec.name)) {
      throw BadShapeError("duplicate record name '" + rr.rec.name + "' in " + origin);
    }
    seen[rr.rec.name] = true;
    const std::uint8_t dt = rd.u8();
    if (dt > 2) throw BadShapeError("unknown dtype tag in " + origin);
    rr.rec.dtype = static_cast<Dtype>(dt);
    const std::uint8_t rank = rd.u8();
    rr.rec.dims.resize(rank);
    for (auto& d : rr.rec.dims) d = rd.u64();
    rr.offset = rd.u64();
    rr.length = rd.u64();
    if (rr.length != rr.rec.element_count() * dtype_size(rr.rec.dtype)) {
      throw BadShapeError("record '" + rr.rec.name + "' length/dims mismatch in " + origin);
    }
    raw.push_back(std::move(rr));
  }
  const std::size_t payload_start = rd.pos;
  const std::size_t payload_size = buf.size() - payload_start;
  // non-overlap check: records must tile the payload in order
  std::uint64_t cursor = 0;
  for (const auto& rr : raw) {
    if (rr.offset != cursor) {
      throw BadShapeError("overlapping or misordered payload records in " + origin);
    }
    cursor += rr.length;
  }
  if (cursor != payload_size) {
    throw BadShapeError("payload size mismatch in " + origin);
  }
  const std::string expect_hash =
      c.metadata.value("payload_hash", std::string());
  const std::string got_hash = fnv64_hex(buf.data() + payload_start, payload_size);
  if (expect_hash != got_hash) {
    throw BadDigestError("payload digest mismatch in " + origin + " (expected " +
                         expect_hash + ", got " + got_hash + ")");
  }
  for (auto& rr : raw) {
    rr.rec.bytes.assign(buf.begin() + static_cast<std::ptrdiff_t>(payload_start + rr.offset),
                        buf.begin() + static_cast<std::ptrdiff_t>(payload_start + rr.offset + rr.length));
    c.records.push_back(std::move(rr.rec));
  }
  return c;
}

inline Container load_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::vector<unsigned char> buf(std::istreambuf_iterator<char>(in),
                                 std::istreambuf_iterator<char>{});
  return parse_container(buf, path);
}

inline std::string file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::vector<unsigned char> buf(std::istreambuf_iterator<char>(in),
                                 std::istreambuf_iterator<char>{});
  return fnv64_hex(buf.data(), buf.size());
}

// ---- model checkpoints ----

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                        {"n_layers", c.n_layers},     {"n_experts", c.n_experts},
                        {"top_k", c.top_k},           {"d_hidden", c.d_hidden},
                        {"seq_len", c.seq_len},       {"renormalize_topk", c.renormalize_topk},
                        {"seed", c.seed}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_experts = j.at("n_experts").get<std::size_t>();
  c.top_k = j.at("top_k").get<std::size_t>();
  c.d_hidden = j.at("d_hidden").get<std::size_t>();
  c.seq_len = j.at("seq_len").get<std::size_t>();
  c.renormalize_topk = j.at("renormalize_topk").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

inline Container model_to_container(const MoEModel& m, bool fp64 = false) {
  Container c;
  c.metadata["kind"] = "model";
  c.metadata["format"] = "moelab-checkpoint";
  c.metadata["config"] = config_to_json(m.config);
  c.metadata["fp64"] = fp64;
  nlohmann::json ids = nlohmann::json::array();
  for (const auto& layer : m.layers) ids.push_back(layer.expert_ids);
  c.metadata["expert_ids"] = ids;

  auto add = [&](const std::string& name, const Matrix& t) {
    c.add_real(name, {t.rows, t.cols}, t.data.data(), fp64);
  };
  auto addv = [&](const std::string& name, const Vector& v) {
    c.add_real(name, {v.size()}, v.data(), fp64);
  };
  add("tok_embed", m.tok_embed);
  add("pos_embed", m.pos_embed);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const auto& layer = m.layers[l];
    const std::string p = "L" + std::to_string(l) + ".";
    add(p + "wq", layer.wq);
    add(p + "wk", layer.wk);
    add(p + "wv", layer.wv);
    add(p + "wo", layer.wo);
    addv(p + "ln1.gamma", layer.ln1.gamma);
    addv(p + "ln1.beta", layer.ln1.beta);
    addv(p + "ln2.gamma", layer.ln2.gamma);
    addv(p + "ln2.beta", layer.ln2.beta);
    add(p + "w_gate", layer.router.w_gate);
    for (std::size_t e = 0; e < layer.experts.size(); ++e) {
      const std::string ep = p + "E" + std::to_string(layer.expert_ids[e]) + ".";
      add(ep + "w_up", layer.experts[e].w_up);
      add(ep + "w_down", layer.experts[e].w_down);
    }
  }
  addv("ln_final.gamma", m.ln_final.gamma);
  addv("ln_final.beta", m.ln_final.beta);
  return c;
}

inline MoEModel model_from_container(const Container& c) {
  if (c.metadata.value("kind", std::string()) != "model") {
    throw BadShapeError("container is not a model checkpoint");
  }
  MoEModel m;
  m.config = config_from_json(c.metadata.at("config"));
  m.config.validate();
  const std::size_t d = m.config.d_model, dh = m.config.d_hidden;

  auto mat = [&](const std::string& name, std::size_t rows, std::size_t cols) {
    const auto& rec = c.get(name);
    if (rec.dims.size() != 2 || rec.dims[0] != rows || rec.dims[1] != cols) {
      throw BadShapeError("record '" + name + "' has unexpected shape");
    }
    Matrix t(rows, cols);
    t.data = c.get_real(name);
    return t;
  };
  auto vec = [&](const std::string& name, std::size_t n) {
    const auto& rec = c.get(name);
    if (rec.dims.size() != 1 || rec.dims[0] != n) {
      throw BadShapeError("record '" + name + "' has unexpected shape");
    }
    return c.get_real(name);
  };

  m.tok_embed = mat("tok_embed", m.config.vocab_size, d);
  m.pos_embed = mat("pos_embed", m.config.seq_len, d);
  const auto& ids = c.metadata.at("expert_ids");
  if (ids.size() != m.config.n_layers) {
    throw BadShapeError("expert_ids layer count mismatch");
  }
  m.layers.resize(m.config.n_layers);
  for (std::size_t l = 0; l < m.config.n_layers; ++l) {
    auto& layer = m.layers[l];
    const std::string p = "L" + std::to_string(l) + ".";
    layer.wq = mat(p + "wq", d, d);
    layer.wk = mat(p + "wk", d, d);
    layer.wv = mat(p + "wv", d, d);
    layer.wo = mat(p + "wo", d, d);
    layer.ln1 = {vec(p + "ln1.gamma", d), vec(p + "ln1.beta", d)};
    layer.ln2 = {vec(p + "ln2.gamma", d), vec(p + "ln2.beta", d)};
    layer.expert_ids = ids[l].get<std::vector<std::size_t>>();
    if (layer.expert_ids.empty() || layer.expert_ids.size() < m.config.top_k) {
      throw BadShapeError("layer " + std::to_string(l) +
                          ": retained expert count below top_k");
    }
    layer.router.w_gate = mat(p + "w_gate", d, layer.expert_ids.size());
    layer.experts.resize(layer.expert_ids.size());
    for (std::size_t e = 0; e < layer.expert_ids.size(); ++e) {
      const std::string ep = p + "E" + std::to_string(layer.expert_ids[e]) + ".";
      layer.experts[e].w_up = mat(ep + "w_up", d, dh);
      layer.experts[e].w_down = mat(ep + "w_down", dh, d);
    }
  }
  m.ln_final = {vec("ln_final.gamma", d), vec("ln_final.beta", d)};
  return m;
}

inline std::string save_model(const MoEModel& m, const std::string& path,
                              bool fp64 = false) {
  return save_container(model_to_container(m, fp64), path);
}

inline MoEModel load_model(const std::string& path) {
  return model_from_container(load_container(path));
}

// In-memory identity of a model: full-precision hash over config + tensors
// in canonical order. Independent of checkpoint storage dtype.
inline std::string model_digest(const MoEModel& m) {
  Fnv64 h;
  h.update_str(config_to_json(m.config).dump());
  auto hm = [&](const Matrix& t) {
    h.update_u64(t.rows);
    h.update_u64(t.cols);
    for (double x : t.data) h.update_double(x);
  };
  auto hv = [&](const Vector& v) {
    h.update_u64(v.size());
    for (double x : v) h.update_double(x);
  };
  hm(m.tok_embed);
  hm(m.pos_embed);
  for (const auto& layer : m.layers) {
    hm(layer.wq);
    hm(layer.wk);
    hm(layer.wv);
    hm(layer.wo);
    hv(layer.ln1.gamma);
    hv(layer.ln1.beta);
    hv(layer.ln2.gamma);
    hv(layer.ln2.beta);
    hm(layer.router.w_gate);
    for (std::size_t e = 0; e < layer.experts.size(); ++e) {
      h.update_u64(layer.expert_ids[e]);
      hm(layer.experts[e].w_up);
      hm(layer.experts[e].w_down);
    }
  }
  hv(m.ln_final.gamma);
  hv(m.ln_final.beta);
  return h.hex();
}

// ---- calibration stats sidecar ----

inline Container stats_to_container(const CalibrationStats& s) {
  Container c;
  c.metadata["kind"] = "calibration_stats";
  c.metadata["token_total"] = s.token_total;
  c.metadata["has_gradients"] = s.has_gradients;
  c.metadata["reservoir_cap"] = s.reservoir_cap;
  c.metadata["sampling_seed"] = s.sampling_seed;
  c.metadata["model_digest"] = s.model_digest;
  c.metadata["calset_digest"] = s.calset_digest;
  c.metadata["n_layers"] = s.layers.size();
  nlohmann::json seen = nlohmann::json::array();
  nlohmann::json n_experts = nlohmann::json::array();
  nlohmann::json has_dump = nlohmann::json::array();
  for (const auto& ls : s.layers) {
    seen.push_back(ls.reservoir_seen);
    n_experts.push_back(ls.usage.size());
    has_dump.push_back(!ls.dump.empty());
  }
  c.metadata["reservoir_seen"] = seen;
  c.metadata["n_experts"] = n_experts;
  c.metadata["has_dump"] = has_dump;

  for (std::size_t l = 0; l < s.layers.size(); ++l) {
    const auto& ls = s.layers[l];
    const std::string p = "L" + std::to_string(l) + ".";
    const std::size_t n = ls.usage.size();
    c.add_i64(p + "usage", {n}, ls.usage.data());
    c.add_i64(p + "collab", {n, n}, ls.collaboration.data.data());
    for (std::size_t e = 0; e < n; ++e) {
      const std::string ep = p + "E" + std::to_string(e) + ".";
      std::vector<std::int64_t> ids(ls.routed_ids[e].begin(), ls.routed_ids[e].end());
      c.add_i64(ep + "ids", {ids.size()}, ids.data());
      const std::size_t d = ls.act_sum[e].size();
      c.add_f64(ep + "act_sum", {d}, ls.act_sum[e].data());
      c.add_f64(ep + "act_sumsq", {d}, ls.act_sumsq[e].data());
      std::vector<double> flatres;
      for (const auto& v : ls.reservoir[e])
        flatres.insert(flatres.end(), v.begin(), v.end());
      c.add_f64(ep + "reservoir", {ls.reservoir[e].size(), d}, flatres.data());
      if (!ls.dump.empty()) {
        std::vector<double> flatdump;
        for (const auto& v : ls.dump[e])
          flatdump.insert(flatdump.end(), v.begin(), v.end());
        c.add_f64(ep + "dump", {ls.dump[e].size(), d}, flatdump.data());
      }
      if (s.has_gradients) {
        c.add_f64(ep + "grad_up", {ls.grad_up_sum[e].rows, ls.grad_up_sum[e].cols},
                  ls.grad_up_sum[e].data.data());
        c.add_f64(ep + "grad_down", {ls.grad_down_sum[e].rows, ls.grad_down_sum[e].cols},
                  ls.grad_down_sum[e].data.data());
      }
    }
  }
  return c;
}

inline CalibrationStats stats_from_container(const Container& c) {
  if (c.metadata.value("kind", std::string()) != "calibration_stats") {
    throw BadShapeError("container is not a calibration stats sidecar");
  }
  CalibrationStats s;
  s.token_total = c.metadata.at("token_total").get<std::int64_t>();
  s.has_gradients = c.metadata.at("has_gradients").get<bool>();
  s.reservoir_cap = c.metadata.at("reservoir_cap").get<std::size_t>();
  s.sampling_seed = c.metadata.at("sampling_seed").get<std::uint64_t>();
  s.model_digest = c.metadata.at("model_digest").get<std::string>();
  s.calset_digest = c.metadata.at("calset_digest").get<std::string>();
  const std::size_t n_layers = c.metadata.at("n_layers").get<std::size_t>();
  s.layers.resize(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    auto& ls = s.layers[l];
    const std::string p = "L" + std::to_string(l) + ".";
    const std::size_t n = c.metadata.at("n_experts")[l].get<std::size_t>();
    const bool has_dump = c.metadata.at("has_dump")[l].get<bool>();
    ls.usage = c.get_i64(p + "usage");
    ls.collaboration = CountMatrix(n, n);
    ls.collaboration.data = c.get_i64(p + "collab");
    ls.reservoir_seen =
        c.metadata.at("reservoir_seen")[l].get<std::vector<std::int64_t>>();
    ls.routed_ids.resize(n);
    ls.reservoir.resize(n);
    ls.act_sum.resize(n);
    ls.act_sumsq.resize(n);
    if (has_dump) ls.dump.resize(n);
    ls.grad_up_sum.resize(n);
    ls.grad_down_sum.resize(n);
    for (std::size_t e = 0; e < n; ++e) {
      const std::string ep = p + "E" + std::to_string(e) + ".";
      for (auto id : c.get_i64(ep + "ids"))
        ls.routed_ids[e].insert(static_cast<unsigned>(id));
      ls.act_sum[e] = c.get_real(ep + "act_sum");
      ls.act_sumsq[e] = c.get_real(ep + "act_sumsq");
      const auto& rrec = c.get(ep + "reservoir");
      const std::size_t cnt = rrec.dims[0], d = rrec.dims[1];
      const auto flat = c.get_real(ep + "reservoir");
      ls.reservoir[e].resize(cnt);
      for (std::size_t i = 0; i < cnt; ++i)
        ls.reservoir[e][i].assign(flat.begin() + static_cast<std::ptrdiff_t>(i * d),
                                  flat.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
      if (has_dump) {
        const auto& drec = c.get(ep + "dump");
        const auto dflat = c.get_real(ep + "dump");
        ls.dump[e].resize(drec.dims[0]);
        for (std::size_t i = 0; i < drec.dims[0]; ++i)
          ls.dump[e][i].assign(dflat.begin() + static_cast<std::ptrdiff_t>(i * d),
                               dflat.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
      }
      if (s.has_gradients) {
        const auto& gu = c.get(ep + "grad_up");
        ls.grad_up_sum[e] = Matrix(gu.dims[0], gu.dims[1]);
        ls.grad_up_sum[e].data = c.get_real(ep + "grad_up");
        const auto& gd = c.get(ep + "grad_down");
        ls.grad_down_sum[e] = Matrix(gd.dims[0], gd.dims[1]);
        ls.grad_down_sum[e].data = c.get_real(ep + "grad_down");
      }
    }
  }
  return s;
}

inline std::string save_stats(const CalibrationStats& s, const std::string& path) {
  return save_container(stats_to_container(s), path);
}

inline CalibrationStats load_stats(const std::string& path) {
  return stats_from_container(load_container(path));
}

}  // namespace moelab
