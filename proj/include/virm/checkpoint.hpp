#pragma once

#include <string>
#include <utility>
#include <vector>

#include "virm/config.hpp"
#include "virm/csv.hpp"
#include "virm/trainer.hpp"

namespace virm {

namespace detail {

inline json tensor_to_json(const std::string& name, const Tensor& t) {
  json j;
  j["name"] = name;
  j["shape"] = std::vector<std::size_t>(t.shape().begin(), t.shape().end());
  j["data"] = std::vector<double>(t.data().begin(), t.data().end());
  return j;
}

inline Tensor tensor_from_json(const json& j, const std::string& expect_name) {
  const std::string name = j.at("name").get<std::string>();
  if (name != expect_name) {
    throw FormatError("checkpoint: expected tensor '" + expect_name + "', found '" + name + "'");
  }
  const auto shape = j.at("shape").get<std::vector<std::size_t>>();
  auto data = j.at("data").get<std::vector<double>>();
  return Tensor(shape, std::move(data));
}

template <typename Named>
json named_tensors_to_json(Named&& named) {
  json arr = json::array();
  for (auto& [name, ptr] : named) arr.push_back(tensor_to_json(name, *ptr));
  return arr;
}

template <typename Named>
void named_tensors_from_json(const json& arr, Named&& named) {
  if (!arr.is_array() || arr.size() != named.size()) {
    throw FormatError("checkpoint: tensor list size mismatch");
  }
  std::size_t i = 0;
  for (auto& [name, ptr] : named) {
    *ptr = tensor_from_json(arr.at(i), name);
    ++i;
  }
}

}  // namespace detail

/// Serializes the full trainer state (config echo, parameters, optimizer
/// moments, RNG position, step count, loss trace) into a versioned JSON
/// document. Doubles use shortest round-trip encoding, so save -> load -> save
/// is byte-identical and resumed runs match uninterrupted ones bit for bit.
inline std::string checkpoint_to_json(Trainer& trainer) {
  json j;
  j["format"] = "virm-checkpoint";
  j["version"] = 1;
  j["step"] = trainer.step_count();
  j["config"] = virm_config_to_json(trainer.config());
  j["rng"] = trainer.rng().state();
  auto model_named = trainer.model().named_params();
  auto sda_named = trainer.sda().named_params();
  j["model"] = detail::named_tensors_to_json(model_named);
  j["sda"] = detail::named_tensors_to_json(sda_named);
  json adam;
  adam["t"] = trainer.adam().t;
  json m = json::array(), v = json::array();
  for (const Tensor& t : trainer.adam().m) m.push_back(detail::tensor_to_json("m", t));
  for (const Tensor& t : trainer.adam().v) v.push_back(detail::tensor_to_json("v", t));
  adam["m"] = std::move(m);
  adam["v"] = std::move(v);
  j["adam"] = std::move(adam);
  json trace = json::array();
  for (const auto& [step, loss] : trainer.trace()) trace.push_back({step, loss});
  j["trace"] = std::move(trace);
  return j.dump(2) + "\n";
}

inline void save_checkpoint(Trainer& trainer, const std::string& path) {
  write_text_file(path, checkpoint_to_json(trainer));
}

/// Restores a trainer from a checkpoint document; the caller supplies the
/// training environments (data is not embedded in checkpoints).
inline Trainer load_checkpoint(const std::string& text, std::vector<EnvDataset> envs) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    std::string msg = e.what();
    for (auto& c : msg)
      if (c == '\n') c = ' ';
    throw FormatError("checkpoint: " + msg);
  }
  if (!j.is_object() || j.value("format", "") != std::string("virm-checkpoint")) {
    throw FormatError("checkpoint: missing or wrong format marker");
  }
  if (j.value("version", 0) != 1) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(j.value("version", 0)));
  }
  VirmConfig cfg = virm_config_from_json(j.at("config"));
  Trainer trainer(cfg, std::move(envs));
  auto model_named = trainer.model().named_params();
  auto sda_named = trainer.sda().named_params();
  detail::named_tensors_from_json(j.at("model"), model_named);
  detail::named_tensors_from_json(j.at("sda"), sda_named);
  AdamState& adam = trainer.adam();
  adam.t = j.at("adam").at("t").get<std::size_t>();
  const json& m = j.at("adam").at("m");
  const json& v = j.at("adam").at("v");
  if (m.size() != adam.m.size() || v.size() != adam.v.size()) {
    throw FormatError("checkpoint: optimizer state size mismatch");
  }
  for (std::size_t i = 0; i < adam.m.size(); ++i) {
    adam.m[i] = detail::tensor_from_json(m.at(i), "m");
    adam.v[i] = detail::tensor_from_json(v.at(i), "v");
  }
  trainer.rng().set_state(j.at("rng").get<std::string>());
  trainer.set_step_count(j.at("step").get<std::size_t>());
  trainer.trace().clear();
  for (const auto& entry : j.at("trace")) {
    trainer.trace().emplace_back(entry.at(0).get<std::size_t>(), entry.at(1).get<double>());
  }
  return trainer;
}

inline Trainer load_checkpoint_file(const std::string& path, std::vector<EnvDataset> envs) {
  const auto lines = read_lines(path);
  std::string text;
  for (const auto& l : lines) {
    text += l;
    text += '\n';
  }
  return load_checkpoint(text, std::move(envs));
}

}  // namespace virm
