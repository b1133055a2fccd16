#pragma once

#include "avo/chain.hpp"
#include "avo/energy.hpp"

namespace avo::test {

/// T=1 chain whose forward and backward transitions are both N(z, s^2 I):
/// the gates are shut, the scale is constant and the pair is symmetric, so
/// log q_t - log r_t vanishes on every trace.
inline HierarchicalChain near_identity_chain(double s = 1e-3, std::size_t d = 2) {
  ChainConfig c;
  c.T = 1;
  c.hidden = 4;
  c.latent_dim = d;
  Rng rng(0);
  HierarchicalChain ch = HierarchicalChain::create(c, rng);
  for (GatedNet* n : {&ch.layers()[0].forward, &ch.layers()[0].backward}) {
    for (double& w : n->gate.w) w = 0.0;
    for (double& b : n->gate.b) b = -40.0;
    for (double& w : n->scale.w) w = 0.0;
    for (double& b : n->scale.b) b = inverse_softplus(s);
  }
  return ch;
}

}  // namespace avo::test
