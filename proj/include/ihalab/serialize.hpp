#pragma once

// Parameter container: a flat little-endian file of named float64 tensors.
//
//   bytes 0..7    magic "IHAPARAM"
//   bytes 8..15   u64 LE  manifest length M
//   next M bytes  JSON manifest, an ordered object {name: [shape...]}
//   remainder     tensor payloads as f64 LE, concatenated in manifest order

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "interleaved.hpp"
#include "tensor.hpp"

namespace ihalab {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline constexpr char kMagic[8] = {'I', 'H', 'A', 'P', 'A', 'R', 'A', 'M'};

}  // namespace detail

inline std::string encode_tensors(const NamedTensors& tensors) {
  nlohmann::ordered_json manifest = nlohmann::ordered_json::object();
  for (const auto& [name, t] : tensors) {
    if (manifest.contains(name)) throw std::invalid_argument("duplicate tensor name '" + name + "'");
    manifest[name] = t.shape();
  }
  const std::string m = manifest.dump();
  std::string out(detail::kMagic, 8);
  detail::put_u64_le(out, m.size());
  out += m;
  for (const auto& [name, t] : tensors)
    for (double v : t.data()) detail::put_u64_le(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline NamedTensors decode_tensors(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), detail::kMagic, 8) != 0)
    throw std::runtime_error("not a parameter container (bad magic)");
  const std::uint64_t mlen = detail::get_u64_le(p + 8);
  if (16 + mlen > bytes.size()) throw std::runtime_error("truncated parameter manifest");
  const auto manifest = nlohmann::ordered_json::parse(bytes.substr(16, mlen));
  std::size_t off = 16 + mlen;
  NamedTensors out;
  for (const auto& [name, shape_json] : manifest.items()) {
    Shape shape = shape_json.get<Shape>();
    const std::size_t n = shape_numel(shape);
    if (off + 8 * n > bytes.size()) throw std::runtime_error("truncated payload for '" + name + "'");
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<double>(detail::get_u64_le(p + off + 8 * i));
    off += 8 * n;
    out.emplace_back(name, Tensor(std::move(shape), std::move(data)));
  }
  if (off != bytes.size()) throw std::runtime_error("trailing bytes after parameter payload");
  return out;
}

inline void save_tensors(const std::string& path, const NamedTensors& tensors) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  const std::string bytes = encode_tensors(tensors);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline NamedTensors load_tensors(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_tensors(bytes);
}

inline const Tensor& find_tensor(const NamedTensors& ts, const std::string& name) {
  for (const auto& [n, t] : ts)
    if (n == name) return t;
  throw std::runtime_error("missing tensor '" + name + "'");
}

inline NamedTensors to_named(const IhaParams& p) {
  NamedTensors out;
  for (std::size_t h = 0; h < p.heads(); ++h) {
    out.emplace_back("W_Q." + std::to_string(h), p.base.wq[h]);
    out.emplace_back("W_K." + std::to_string(h), p.base.wk[h]);
    out.emplace_back("W_V." + std::to_string(h), p.base.wv[h]);
  }
  if (p.base.wo) out.emplace_back("W_O", *p.base.wo);
  out.emplace_back("alpha_q", p.alpha_q);
  out.emplace_back("alpha_k", p.alpha_k);
  out.emplace_back("alpha_v", p.alpha_v);
  out.emplace_back("collapse", p.collapse);
  return out;
}

inline IhaParams iha_params_from_named(const NamedTensors& ts) {
  IhaParams p;
  for (std::size_t h = 0;; ++h) {
    const std::string suffix = "." + std::to_string(h);
    bool found = false;
    for (const auto& [n, t] : ts)
      if (n == "W_Q" + suffix) found = true;
    if (!found) break;
    p.base.wq.push_back(find_tensor(ts, "W_Q" + suffix));
    p.base.wk.push_back(find_tensor(ts, "W_K" + suffix));
    p.base.wv.push_back(find_tensor(ts, "W_V" + suffix));
  }
  for (const auto& [n, t] : ts)
    if (n == "W_O") p.base.wo = t;
  p.alpha_q = find_tensor(ts, "alpha_q");
  p.alpha_k = find_tensor(ts, "alpha_k");
  p.alpha_v = find_tensor(ts, "alpha_v");
  p.collapse = find_tensor(ts, "collapse");
  p.validate();
  return p;
}

}  // namespace ihalab
