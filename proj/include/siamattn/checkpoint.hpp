#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>

#include "siamattn/config.hpp"

namespace siamattn {

// Binary checkpoint, little-endian:
//   "SIAMATTN" | u32 version | u64 n + n bytes resolved config JSON | i32 epoch
//   | u32 count, count x param | u32 count, count x optimizer slot
// param: u32 len + name | u8 group | u32 rank | rank x i32 dims | f64 values
// optimizer slot: u32 len + name | u32 rank | dims | f64 values
struct Checkpoint {
  Json config;
  int epoch = -1;
  struct Entry {
    std::string name;
    ParamGroup group = ParamGroup::kHead;
    Tensor<double> value;
  };
  std::vector<Entry> params;
  std::vector<Entry> optimizer;
};

namespace detail {

constexpr char kCheckpointMagic[8] = {'S', 'I', 'A', 'M', 'A', 'T', 'T', 'N'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename V>
void put(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V take(std::istream& in, const std::string& path) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  SIAMATTN_CHECK(in.gcount() == static_cast<std::streamsize>(sizeof(V)), ErrorCode::kIo, "truncated checkpoint " + path);
  return v;
}

inline void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string take_string(std::istream& in, const std::string& path, std::size_t limit = 1u << 26) {
  const auto n = take<std::uint32_t>(in, path);
  SIAMATTN_CHECK(n <= limit, ErrorCode::kIo, "corrupt checkpoint " + path);
  std::string s(n, '\0');
  in.read(s.data(), n);
  SIAMATTN_CHECK(in.gcount() == static_cast<std::streamsize>(n), ErrorCode::kIo, "truncated checkpoint " + path);
  return s;
}

template <typename T>
void put_tensor(std::ostream& out, const Tensor<T>& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (int d : t.shape()) put<std::int32_t>(out, d);
  for (std::size_t i = 0; i < t.size(); ++i) put<double>(out, static_cast<double>(t[i]));
}

inline Tensor<double> take_tensor(std::istream& in, const std::string& path) {
  const auto rank = take<std::uint32_t>(in, path);
  SIAMATTN_CHECK(rank <= 8, ErrorCode::kIo, "corrupt checkpoint " + path);
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(take<std::int32_t>(in, path));
  SIAMATTN_CHECK(shape_numel(shape) < (1ull << 32), ErrorCode::kIo, "corrupt checkpoint " + path);
  Tensor<double> t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = take<double>(in, path);
  return t;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const RunConfig& cfg, const ParameterStore<T>& store, int epoch,
                     const Sgd<T>* opt = nullptr) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  SIAMATTN_CHECK(out.good(), ErrorCode::kIo, "cannot write checkpoint " + path);
  out.write(detail::kCheckpointMagic, 8);
  detail::put<std::uint32_t>(out, detail::kCheckpointVersion);
  const std::string text = config_to_json(cfg).dump();
  detail::put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  detail::put<std::int32_t>(out, epoch);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(store.all().size()));
  for (const auto& p : store.all()) {
    detail::put_string(out, p.name);
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(p.group));
    detail::put_tensor(out, p.var.value());
  }
  if (opt) {
    std::vector<std::string> names;
    for (const auto& [name, _] : opt->state()) names.push_back(name);
    std::sort(names.begin(), names.end());
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(names.size()));
    for (const auto& name : names) {
      detail::put_string(out, name);
      detail::put_tensor(out, opt->state().at(name));
    }
  } else {
    detail::put<std::uint32_t>(out, 0);
  }
  SIAMATTN_CHECK(out.good(), ErrorCode::kIo, "failed writing checkpoint " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  SIAMATTN_CHECK(std::filesystem::exists(path), ErrorCode::kCheckpointMissing, "checkpoint not found: " + path);
  std::ifstream in(path, std::ios::binary);
  SIAMATTN_CHECK(in.good(), ErrorCode::kIo, "cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, 8);
  SIAMATTN_CHECK(in.gcount() == 8 && std::memcmp(magic, detail::kCheckpointMagic, 8) == 0, ErrorCode::kIo,
                 path + " is not a checkpoint");
  const auto version = detail::take<std::uint32_t>(in, path);
  SIAMATTN_CHECK(version == detail::kCheckpointVersion, ErrorCode::kIo,
                 "unsupported checkpoint version " + std::to_string(version));
  const auto n = detail::take<std::uint64_t>(in, path);
  SIAMATTN_CHECK(n < (1ull << 26), ErrorCode::kIo, "corrupt checkpoint " + path);
  std::string text(n, '\0');
  in.read(text.data(), static_cast<std::streamsize>(n));
  Checkpoint ck;
  try {
    ck.config = Json::parse(text);
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorCode::kIo, "corrupt config block in checkpoint " + path);
  }
  ck.epoch = detail::take<std::int32_t>(in, path);
  const auto count = detail::take<std::uint32_t>(in, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    Checkpoint::Entry e;
    e.name = detail::take_string(in, path);
    e.group = static_cast<ParamGroup>(detail::take<std::uint8_t>(in, path));
    e.value = detail::take_tensor(in, path);
    ck.params.push_back(std::move(e));
  }
  const auto slots = detail::take<std::uint32_t>(in, path);
  for (std::uint32_t i = 0; i < slots; ++i) {
    Checkpoint::Entry e;
    e.name = detail::take_string(in, path);
    e.value = detail::take_tensor(in, path);
    ck.optimizer.push_back(std::move(e));
  }
  return ck;
}

// Copies checkpoint values into `store`. Architecture differences between the
// checkpoint's config and `cfg` are reported by key.
template <typename T>
void load_checkpoint_into(const Checkpoint& ck, const RunConfig& cfg, ParameterStore<T>& store, Sgd<T>* opt = nullptr) {
  const auto diff = architecture_differences(ck.config, config_to_json(cfg));
  if (!diff.empty()) {
    std::string keys;
    for (const auto& d : diff) keys += (keys.empty() ? "" : ", ") + d;
    throw Error(ErrorCode::kCheckpointMismatch, "checkpoint/config mismatch in keys: " + keys);
  }
  std::unordered_map<std::string, const Checkpoint::Entry*> by_name;
  for (const auto& e : ck.params) by_name[e.name] = &e;
  SIAMATTN_CHECK(by_name.size() == store.all().size(), ErrorCode::kCheckpointMismatch,
                 "checkpoint has " + std::to_string(by_name.size()) + " parameters, model has " +
                     std::to_string(store.all().size()));
  for (const auto& p : store.all()) {
    auto it = by_name.find(p.name);
    SIAMATTN_CHECK(it != by_name.end(), ErrorCode::kCheckpointMismatch, "checkpoint lacks parameter " + p.name);
    SIAMATTN_CHECK(it->second->value.shape() == p.var.shape(), ErrorCode::kCheckpointMismatch,
                   "shape mismatch for parameter " + p.name);
    Var<T> v = p.var;
    v.mutable_value() = it->second->value.template cast<T>();
  }
  if (opt) {
    opt->state().clear();
    for (const auto& e : ck.optimizer) opt->state()[e.name] = e.value.template cast<T>();
  }
}

}  // namespace siamattn
