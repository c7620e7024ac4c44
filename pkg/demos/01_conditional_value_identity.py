"""
Posterior mixing versus prior conditioning on a finite GAN
==========================================================

On finite spaces every expectation is a sum, so the value of a conditional
GAN can be computed exactly.  Mixing the discriminator over the true
posterior p(z | y) gives the same value as conditioning on z drawn from the
prior; any other posterior does not.
"""

import numpy as np

from diverse_imitation import theory

rng = np.random.default_rng(0)
inst = theory.random_instance(rng, nz=3, ny=5)
print("p(z) =", np.round(inst.pz, 3))

q = theory.true_posterior(inst)
print("v_mixed with the Bayes posterior :", theory.v_mixed(inst, q))
print("v_conditional                    :", theory.v_conditional(inst))

# a random posterior breaks the equality
wrong = theory.random_simplex(rng, q.shape)
print("v_mixed with a random posterior  :", theory.v_mixed(inst, wrong))

# with the optimal discriminator the value is 2 E_z JSD - log 4
opt = inst.with_d(theory.optimal_discriminator(inst))
print("\nvalue at the optimal discriminator:", theory.v_conditional(opt))
print("2 E_z JSD - log 4                 :", theory.c_of_g(inst))

# and it bottoms out at -log 4 once the generator matches the data
matched = theory.DiscreteGanInstance(inst.pz, inst.py_given_z, inst.py_given_z.copy(), inst.d)
print("C(G = p) =", theory.c_of_g(matched), " -log 4 =", -np.log(4))

rows = theory.verify(100, seed=0)
print("\nworst residual over 100 random instances: %.2e"
      % max(max(r["theorem_residual"], r["jsd_residual"]) for r in rows))
