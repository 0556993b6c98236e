#pragma once

#include <functional>
#include <string>
#include <vector>

namespace iif {

// Flat named parameter blocks; every optimizable quantity in the pipeline is
// registered here so NaN diagnostics and checkpoints can name it.
struct ParamBlock {
  std::string name;
  std::vector<double>* params = nullptr;
  std::vector<double>* grads = nullptr;
  double lr_scale = 1.0;
  std::function<void(std::vector<double>&)> projection;  // optional, applied after the step
};

class ParamRegistry {
 public:
  void add(ParamBlock block);
  void zero_grads();
  std::vector<ParamBlock>& blocks() { return blocks_; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }

 private:
  std::vector<ParamBlock> blocks_;
};

class AdamOptimizer {
 public:
  explicit AdamOptimizer(ParamRegistry& registry, double beta1 = 0.9, double beta2 = 0.999,
                         double eps = 1e-8);
  // Bias-corrected update. Throws on a NaN gradient, naming the block.
  void step(double lr);
  int step_count() const { return step_; }

 private:
  ParamRegistry* registry_;
  double beta1_, beta2_, eps_;
  int step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

class SgdOptimizer {
 public:
  explicit SgdOptimizer(ParamRegistry& registry) : registry_(&registry) {}
  void step(double lr);
  int step_count() const { return step_; }

 private:
  ParamRegistry* registry_;
  int step_ = 0;
};

}  // namespace iif
