#include "iif/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace iif {

void ParamRegistry::add(ParamBlock block) {
  if (!block.params || !block.grads) throw std::runtime_error("optim: null block buffers");
  block.grads->assign(block.params->size(), 0.0);
  blocks_.push_back(std::move(block));
}

void ParamRegistry::zero_grads() {
  for (auto& b : blocks_)
    for (double& g : *b.grads) g = 0.0;
}

namespace {

void check_finite(const ParamBlock& block) {
  for (const double g : *block.grads)
    if (!std::isfinite(g))
      throw std::runtime_error("optim: non-finite gradient in block '" + block.name + "'");
}

}  // namespace

AdamOptimizer::AdamOptimizer(ParamRegistry& registry, double beta1, double beta2, double eps)
    : registry_(&registry), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& b : registry.blocks()) {
    m_.emplace_back(b.params->size(), 0.0);
    v_.emplace_back(b.params->size(), 0.0);
  }
}

void AdamOptimizer::step(double lr) {
  ++step_;
  const double c1 = 1.0 - std::pow(beta1_, step_);
  const double c2 = 1.0 - std::pow(beta2_, step_);
  auto& blocks = registry_->blocks();
  for (size_t bi = 0; bi < blocks.size(); ++bi) {
    ParamBlock& b = blocks[bi];
    check_finite(b);
    if (m_[bi].size() != b.params->size()) {  // block resized (e.g. after pruning)
      m_[bi].assign(b.params->size(), 0.0);
      v_[bi].assign(b.params->size(), 0.0);
    }
    const double block_lr = lr * b.lr_scale;
    for (size_t i = 0; i < b.params->size(); ++i) {
      const double g = (*b.grads)[i];
      m_[bi][i] = beta1_ * m_[bi][i] + (1.0 - beta1_) * g;
      v_[bi][i] = beta2_ * v_[bi][i] + (1.0 - beta2_) * g * g;
      const double mh = m_[bi][i] / c1;
      const double vh = v_[bi][i] / c2;
      (*b.params)[i] -= block_lr * mh / (std::sqrt(vh) + eps_);
    }
    if (b.projection) b.projection(*b.params);
  }
}

void SgdOptimizer::step(double lr) {
  ++step_;
  for (auto& b : registry_->blocks()) {
    check_finite(b);
    const double block_lr = lr * b.lr_scale;
    for (size_t i = 0; i < b.params->size(); ++i)
      (*b.params)[i] -= block_lr * (*b.grads)[i];
    if (b.projection) b.projection(*b.params);
  }
}

}  // namespace iif
