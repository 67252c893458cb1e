#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "umc/tensor.hpp"

namespace umc {

// Binary tensor container (.umt):
//   magic "UMCT" | u32 version | u8 dtype (0=f32, 1=f64) | u8 ndim |
//   u64 dims[ndim] | little-endian payload
// A JSON sidecar "<path>.json" records shape, dtype and the config hash.

namespace detail {

template <typename T>
constexpr std::uint8_t dtype_tag();
template <>
constexpr std::uint8_t dtype_tag<float>() { return 0; }
template <>
constexpr std::uint8_t dtype_tag<double>() { return 1; }

inline const char* dtype_name(std::uint8_t tag) { return tag == 0 ? "f32" : "f64"; }

}  // namespace detail

template <typename T>
inline void save_tensor(const std::string& path, const Tensor<T>& t,
                        const std::string& config_hash = "") {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_tensor: cannot open " + path);
  f.write("UMCT", 4);
  std::uint32_t version = 1;
  f.write(reinterpret_cast<const char*>(&version), 4);
  std::uint8_t dtype = detail::dtype_tag<T>();
  std::uint8_t ndim = static_cast<std::uint8_t>(t.ndim());
  f.write(reinterpret_cast<const char*>(&dtype), 1);
  f.write(reinterpret_cast<const char*>(&ndim), 1);
  for (std::size_t d : t.shape()) {
    std::uint64_t v = d;
    f.write(reinterpret_cast<const char*>(&v), 8);
  }
  f.write(reinterpret_cast<const char*>(t.data()),
          static_cast<std::streamsize>(t.size() * sizeof(T)));
  if (!f) throw std::runtime_error("save_tensor: write failed for " + path);

  nlohmann::json side;
  side["shape"] = t.shape();
  side["dtype"] = detail::dtype_name(dtype);
  side["config_hash"] = config_hash;
  std::ofstream js(path + ".json");
  js << side.dump(2) << "\n";
}

// Multi-tensor container (.umk): magic "UMCK" | u32 version | u64 count |
// per entry: u32 name_len | name | u8 dtype | u8 ndim | u64 dims[] | payload.
template <typename T>
inline void save_named_tensors(const std::string& path,
                               const std::vector<std::pair<std::string, Tensor<T>>>& entries) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_named_tensors: cannot open " + path);
  f.write("UMCK", 4);
  std::uint32_t version = 1;
  f.write(reinterpret_cast<const char*>(&version), 4);
  std::uint64_t count = entries.size();
  f.write(reinterpret_cast<const char*>(&count), 8);
  for (const auto& [name, t] : entries) {
    std::uint32_t len = static_cast<std::uint32_t>(name.size());
    f.write(reinterpret_cast<const char*>(&len), 4);
    f.write(name.data(), len);
    std::uint8_t dtype = detail::dtype_tag<T>();
    std::uint8_t ndim = static_cast<std::uint8_t>(t.ndim());
    f.write(reinterpret_cast<const char*>(&dtype), 1);
    f.write(reinterpret_cast<const char*>(&ndim), 1);
    for (std::size_t d : t.shape()) {
      std::uint64_t v = d;
      f.write(reinterpret_cast<const char*>(&v), 8);
    }
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(T)));
  }
  if (!f) throw std::runtime_error("save_named_tensors: write failed for " + path);
}

template <typename T>
inline std::vector<std::pair<std::string, Tensor<T>>> load_named_tensors(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_named_tensors: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "UMCK", 4) != 0)
    throw std::runtime_error("load_named_tensors: bad magic in " + path);
  std::uint32_t version = 0;
  f.read(reinterpret_cast<char*>(&version), 4);
  std::uint64_t count = 0;
  f.read(reinterpret_cast<char*>(&count), 8);
  std::vector<std::pair<std::string, Tensor<T>>> out;
  out.reserve(count);
  for (std::uint64_t e = 0; e < count; ++e) {
    std::uint32_t len = 0;
    f.read(reinterpret_cast<char*>(&len), 4);
    std::string name(len, '\0');
    f.read(name.data(), len);
    std::uint8_t dtype = 0, ndim = 0;
    f.read(reinterpret_cast<char*>(&dtype), 1);
    f.read(reinterpret_cast<char*>(&ndim), 1);
    std::vector<std::size_t> shape(ndim);
    for (auto& d : shape) {
      std::uint64_t v = 0;
      f.read(reinterpret_cast<char*>(&v), 8);
      d = static_cast<std::size_t>(v);
    }
    if (dtype != detail::dtype_tag<T>())
      throw std::runtime_error("load_named_tensors: dtype mismatch for '" + name + "' in " + path);
    Tensor<T> t(shape);
    f.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
    if (!f) throw std::runtime_error("load_named_tensors: truncated file " + path);
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

template <typename T>
inline Tensor<T> load_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_tensor: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "UMCT", 4) != 0)
    throw std::runtime_error("load_tensor: bad magic in " + path);
  std::uint32_t version = 0;
  f.read(reinterpret_cast<char*>(&version), 4);
  if (version != 1) throw std::runtime_error("load_tensor: unsupported version in " + path);
  std::uint8_t dtype = 0, ndim = 0;
  f.read(reinterpret_cast<char*>(&dtype), 1);
  f.read(reinterpret_cast<char*>(&ndim), 1);
  std::vector<std::size_t> shape(ndim);
  for (auto& d : shape) {
    std::uint64_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 8);
    d = static_cast<std::size_t>(v);
  }
  Tensor<T> t(shape);
  if (dtype == detail::dtype_tag<T>()) {
    f.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
  } else if (dtype == 0) {  // f32 on disk, widening load
    std::vector<float> tmp(t.size());
    f.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(tmp.size() * 4));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(tmp[i]);
  } else {  // f64 on disk
    std::vector<double> tmp(t.size());
    f.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(tmp.size() * 8));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(tmp[i]);
  }
  if (!f) throw std::runtime_error("load_tensor: truncated file " + path);
  return t;
}

}  // namespace umc
