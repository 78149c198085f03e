#pragma once

// Binary checkpoints: "NVCK", u32 version, u64 header length, JSON header
// (model config, schedule, parameter table, optional extras), then every
// parameter (and optional AdamW moment) as little-endian float64.

#include "novelgs/denoiser.hpp"
#include "novelgs/diffusion.hpp"
#include "novelgs/training.hpp"

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace novelgs {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json to_json(const DiffusionSchedule& s) {
  return {{"kind", s.kind}, {"step_count", s.step_count}, {"beta_start", s.beta_start}, {"beta_end", s.beta_end}};
}

inline DiffusionSchedule schedule_from_json(const nlohmann::json& j) {
  const auto kind = j.value("kind", std::string("squaredcos_cap_v2"));
  if (kind != "squaredcos_cap_v2") throw std::runtime_error("unsupported schedule kind " + kind);
  auto s = make_schedule(j.at("step_count").get<int>());
  s.beta_start = j.value("beta_start", s.beta_start);
  s.beta_end = j.value("beta_end", s.beta_end);
  return s;
}

struct Checkpoint {
  std::unique_ptr<Denoiser> model;
  DiffusionSchedule schedule;
  std::optional<AdamW> optimizer;
  nlohmann::json extra = nlohmann::json::object();  // training config, step counters
};

inline void save_checkpoint(const std::filesystem::path& path, const Denoiser& model, const DiffusionSchedule& schedule,
                            const AdamW* optimizer = nullptr, const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json header;
  header["model"] = to_json(model.config());
  header["schedule"] = to_json(schedule);
  header["extra"] = extra;
  nlohmann::json table = nlohmann::json::array();
  std::vector<std::span<const Real>> blobs;
  for (const auto& [name, var] : model.parameters().entries()) {
    table.push_back({{"name", name}, {"shape", {var.rows(), var.cols()}}});
    blobs.push_back(var.value());
  }
  header["parameters"] = table;
  if (optimizer) {
    nlohmann::json moments = nlohmann::json::array();
    for (const auto& [name, var] : model.parameters().entries()) {
      auto it = optimizer->state().find(name);
      if (it == optimizer->state().end()) continue;
      moments.push_back(name);
      blobs.push_back(it->second.m);
      blobs.push_back(it->second.v);
    }
    const auto& c = optimizer->config();
    header["optimizer"] = {{"step", optimizer->step_count()},
                           {"beta1", c.beta1},
                           {"beta2", c.beta2},
                           {"epsilon", c.epsilon},
                           {"weight_decay", c.weight_decay},
                           {"moments", moments}};
  }
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t length = text.size();
  out.write("NVCK", 4);
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&length), sizeof length);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto b : blobs)
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size() * sizeof(Real)));
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t length = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&length), sizeof length);
  if (!in || std::memcmp(magic, "NVCK", 4) != 0) throw std::runtime_error(path.string() + " is not a checkpoint");
  if (version != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw std::runtime_error("truncated checkpoint header");
  const auto header = nlohmann::json::parse(text);

  auto read_into = [&](std::span<Real> dst) {
    in.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(dst.size() * sizeof(Real)));
    if (!in) throw std::runtime_error("truncated checkpoint payload");
  };

  Checkpoint ck;
  ck.model = std::make_unique<Denoiser>(denoiser_config_from_json(header.at("model")));
  ck.schedule = schedule_from_json(header.at("schedule"));
  ck.extra = header.value("extra", nlohmann::json::object());
  auto& entries = ck.model->parameters().entries();
  const auto& table = header.at("parameters");
  if (table.size() != entries.size()) throw std::runtime_error("checkpoint parameter count differs from the model");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = table[i];
    auto& [name, var] = entries[i];
    if (e.at("name").get<std::string>() != name || e.at("shape").at(0).get<std::size_t>() != var.rows() ||
        e.at("shape").at(1).get<std::size_t>() != var.cols())
      throw std::runtime_error("checkpoint parameter " + e.at("name").get<std::string>() + " does not match the model");
    read_into(var.mutable_value());
  }
  if (header.contains("optimizer")) {
    const auto& o = header.at("optimizer");
    AdamW opt(AdamWConfig{o.at("beta1").get<Real>(), o.at("beta2").get<Real>(), o.at("epsilon").get<Real>(),
                          o.at("weight_decay").get<Real>()});
    opt.set_step_count(o.at("step").get<long long>());
    for (const auto& name_json : o.at("moments")) {
      const auto name = name_json.get<std::string>();
      const std::size_t n = ck.model->parameters().find(name).size();
      auto& st = opt.state()[name];
      st.m.resize(n);
      st.v.resize(n);
      read_into(st.m);
      read_into(st.v);
    }
    ck.optimizer = std::move(opt);
  }
  return ck;
}

}  // namespace novelgs
