#pragma once

// Binary checkpoint:
//   "RMNPCKPT" | u32 version | u64 length | hyperparameter JSON
//   u64 tensor count | per tensor: u32 name length, name, u64 rows, u64 cols,
//   rows * cols little-endian f64 in row-major order.
// Tensors follow ModelParams::visit order, then the normalization statistics.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rmnp/pipeline.hpp"

namespace rmnp::pipeline {

inline constexpr char kCheckpointMagic[8] = {'R', 'M', 'N', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace detail {

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const std::string& what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw LoadError("checkpoint truncated while reading " + what);
  }
  return v;
}

inline void put_tensor(std::ostream& os, const std::string& name, const Matrix& m) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint64_t>(os, static_cast<std::uint64_t>(m.rows()));
  put<std::uint64_t>(os, static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      put<double>(os, m(r, c));
    }
  }
}

struct NamedTensor {
  std::string name;
  Matrix value;
};

inline NamedTensor get_tensor(std::istream& is) {
  NamedTensor t;
  const auto len = get<std::uint32_t>(is, "tensor name length");
  if (len > 4096) {
    throw LoadError("checkpoint tensor name too long");
  }
  t.name.resize(len);
  if (!is.read(t.name.data(), len)) {
    throw LoadError("checkpoint truncated in tensor name");
  }
  const auto rows = get<std::uint64_t>(is, t.name + " rows");
  const auto cols = get<std::uint64_t>(is, t.name + " cols");
  if (rows > (1u << 26) || cols > (1u << 26) || rows * cols > (1ull << 28)) {
    throw LoadError("checkpoint tensor " + t.name + " has an implausible shape");
  }
  t.value.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index r = 0; r < t.value.rows(); ++r) {
    for (Eigen::Index c = 0; c < t.value.cols(); ++c) {
      t.value(r, c) = get<double>(is, t.name + " values");
    }
  }
  return t;
}

}  // namespace detail

inline nlohmann::ordered_json config_to_json(const ModelConfig& cfg) {
  const Hyperparams& hp = cfg.hp;
  nlohmann::ordered_json j;
  j["epochs"] = hp.epochs;
  j["batch_size"] = hp.batch_size;
  j["learning_rate"] = hp.learning_rate;
  j["weight_decay"] = hp.weight_decay;
  j["hidden"] = hp.hidden;
  j["n_z_samples"] = hp.n_z_samples;
  j["n_context"] = hp.n_context;
  j["lambda1"] = hp.lambda1;
  j["lambda2"] = hp.lambda2;
  j["tau"] = hp.tau;
  j["graph_layers"] = hp.graph_layers;
  j["relation_dim"] = hp.relation_dim;
  j["seed"] = hp.seed;
  j["sample_logits"] = hp.sample_logits;
  j["ablations"] = cfg.ablations.names();
  j["fusion_mode"] = std::string(fusion::to_string(cfg.ablations.mode()));
  j["d_text"] = cfg.d_text;
  j["relations"] = cfg.relation_names;
  return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig cfg;
    Hyperparams& hp = cfg.hp;
    hp.epochs = j.at("epochs").get<int>();
    hp.batch_size = j.at("batch_size").get<Eigen::Index>();
    hp.learning_rate = j.at("learning_rate").get<double>();
    hp.weight_decay = j.at("weight_decay").get<double>();
    hp.hidden = j.at("hidden").get<Eigen::Index>();
    hp.n_z_samples = j.at("n_z_samples").get<int>();
    hp.n_context = j.at("n_context").get<Eigen::Index>();
    hp.lambda1 = j.at("lambda1").get<double>();
    hp.lambda2 = j.at("lambda2").get<double>();
    hp.tau = j.at("tau").get<double>();
    hp.graph_layers = j.at("graph_layers").get<std::size_t>();
    hp.relation_dim = j.at("relation_dim").get<Eigen::Index>();
    hp.seed = j.at("seed").get<std::uint64_t>();
    hp.sample_logits = j.at("sample_logits").get<bool>();
    for (const auto& a : j.at("ablations")) {
      cfg.ablations.set(a.get<std::string>());
    }
    cfg.d_text = j.at("d_text").get<Eigen::Index>();
    cfg.relation_names = j.at("relations").get<std::vector<std::string>>();
    hp.validate();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("checkpoint hyperparameters: ") + e.what());
  } catch (const ContractError& e) {
    throw LoadError(std::string("checkpoint hyperparameters: ") + e.what());
  }
}

inline void save_checkpoint(RmnpModel& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw LoadError("cannot write checkpoint " + path.string());
  }
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  const std::string cfg = config_to_json(model.config).dump();
  detail::put<std::uint64_t>(os, cfg.size());
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

  std::vector<detail::NamedTensor> tensors;
  model.params.visit([&](const std::string& name, Matrix& m) { tensors.push_back({name, m}); });
  if (model.norm) {
    tensors.push_back({"norm.mean", model.norm->mean.transpose()});
    tensors.push_back({"norm.std", model.norm->std.transpose()});
  }
  detail::put<std::uint64_t>(os, tensors.size());
  for (const auto& t : tensors) {
    detail::put_tensor(os, t.name, t.value);
  }
  if (!os) {
    throw LoadError("failed writing checkpoint " + path.string());
  }
}

inline RmnpModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw LoadError("cannot open checkpoint " + path.string());
  }
  char magic[sizeof(kCheckpointMagic)];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw LoadError(path.string() + ": not a checkpoint (bad magic)");
  }
  const auto version = detail::get<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) {
    throw LoadError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto cfg_len = detail::get<std::uint64_t>(is, "config length");
  if (cfg_len > (1u << 20)) {
    throw LoadError(path.string() + ": implausible config block");
  }
  std::string cfg_text(cfg_len, '\0');
  if (!is.read(cfg_text.data(), static_cast<std::streamsize>(cfg_len))) {
    throw LoadError(path.string() + ": truncated config block");
  }
  nlohmann::json j = nlohmann::json::parse(cfg_text, nullptr, false);
  if (j.is_discarded()) {
    throw LoadError(path.string() + ": config block is not valid JSON");
  }
  ModelConfig cfg = config_from_json(j);
  Rng dummy(0);
  RmnpModel model = init_model(cfg, dummy);

  const auto count = detail::get<std::uint64_t>(is, "tensor count");
  std::vector<detail::NamedTensor> tensors;
  for (std::uint64_t k = 0; k < count; ++k) {
    tensors.push_back(detail::get_tensor(is));
  }
  std::size_t k = 0;
  model.params.visit([&](const std::string& name, Matrix& m) {
    if (k >= tensors.size() || tensors[k].name != name) {
      throw LoadError(path.string() + ": expected tensor " + name);
    }
    if (tensors[k].value.rows() != m.rows() || tensors[k].value.cols() != m.cols()) {
      throw LoadError(path.string() + ": tensor " + name + " has the wrong shape");
    }
    m = tensors[k].value;
    ++k;
  });
  if (k < tensors.size()) {
    if (k + 2 != tensors.size() || tensors[k].name != "norm.mean" || tensors[k + 1].name != "norm.std" ||
        tensors[k].value.size() != data::kNumNumeric || tensors[k + 1].value.size() != data::kNumNumeric) {
      throw LoadError(path.string() + ": unexpected trailing tensors");
    }
    model.norm = data::NormStats{tensors[k].value.row(0).transpose(), tensors[k + 1].value.row(0).transpose()};
  }
  return model;
}

}  // namespace rmnp::pipeline
