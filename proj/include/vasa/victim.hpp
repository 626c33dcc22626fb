#pragma once

#include <string>
#include <vector>

#include "vasa/datasets.hpp"
#include "vasa/nn.hpp"
#include "vasa/serialize.hpp"

namespace vasa {

struct VictimConfig {
  int64_t classes = 10;
  int64_t res = 32;
  int64_t conv1 = 8;       // width of the first conv block
  int64_t conv2 = 16;      // width of the second conv block
  int64_t fc_width = 64;
  int64_t epochs = 12;
  int64_t batch = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  uint64_t seed = 17;

  void validate() const;
  KvConfig to_kv() const;
  static VictimConfig from_kv(const KvConfig& kv);
  static VictimConfig paper_preset();  // 32/64 conv, 200-wide fc, 50 epochs
};

// Conv-ReLU x2 + MaxPool, twice, then two ReLU fc layers and a linear
// class head. Resolution must be divisible by 4.
class VictimNet {
 public:
  explicit VictimNet(const VictimConfig& cfg);

  const VictimConfig& config() const { return cfg_; }

  Graph::Id logits_g(Graph& g, Graph::Id x, bool frozen);  // [N,1,H,W] -> [N,classes]
  Tensor logits(const Tensor& x);                          // eager, chunked
  std::vector<int64_t> predict(const Tensor& x);           // argmax per row
  double accuracy(const LabeledImageSet& set);

  std::vector<Param*> params();

  void save(Checkpoint& ck);
  static VictimNet load(const Checkpoint& ck);

 private:
  VictimConfig cfg_;
  Conv2d c1a_, c1b_, c2a_, c2b_;
  Linear f1_, f2_, head_;
};

struct VictimTrainLog {
  std::vector<double> epoch_loss;  // mean cross-entropy per epoch
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  bool warning_low_accuracy = false;  // test accuracy below 0.9
};

// Softmax cross-entropy with SGD momentum and L2 weight decay; epoch order
// reshuffled per epoch from the config seed.
VictimTrainLog train_victim(VictimNet& net, const LabeledImageSet& train,
                            const LabeledImageSet& test);

}  // namespace vasa
