#pragma once

#include <iosfwd>
#include <map>
#include <string>

#include <json.hpp>

#include "vasa/config.hpp"
#include "vasa/tensor.hpp"

namespace vasa {

void save_tensor(std::ostream& out, const Tensor& t);
Tensor load_tensor(std::istream& in);
void save_tensor_file(const std::string& path, const Tensor& t);
Tensor load_tensor_file(const std::string& path);

// A checkpoint is a directory: one binary file per named tensor plus a
// manifest.json carrying the config echo, bookkeeping counters and the
// name -> file -> shape table.
struct Checkpoint {
  KvConfig config;
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;

  void save(const std::string& dir) const;
  static Checkpoint load(const std::string& dir);

  const Tensor& tensor(const std::string& name) const {
    auto it = tensors.find(name);
    require(it != tensors.end(), "checkpoint missing tensor: " + name);
    return it->second;
  }
};

}  // namespace vasa
