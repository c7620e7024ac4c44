"""
A small tour of the tape-based autodiff
=======================================

Gradients, a finite-difference check, and a Hessian-vector product obtained
by differentiating a gradient a second time.
"""

import numpy as np

from diverse_imitation import autodiff as ad
from diverse_imitation import nets
from diverse_imitation.autodiff import ParamVector, Var

x = Var(np.array([0.5, -1.0, 2.0]))
y = ad.sum(ad.mul(ad.tanh(x), x))
g, = ad.grad(y, [x])
print("d/dx sum(tanh(x) x) =", g)
print("by hand             =", np.tanh(x.value) + x.value * (1 - np.tanh(x.value) ** 2))

# an MLP and a gradient check against central differences
rng = np.random.default_rng(0)
spec = nets.MlpSpec(4, 2, (8, 8))
params = nets.init_mlp(spec, rng)
X = rng.normal(size=(16, 4))
loss = lambda p: ad.mean(ad.mul(nets.mlp_forward(p, spec, X), nets.mlp_forward(p, spec, X)))
print("\nmlp loss, gradient check relative error: %.1e" % ad.check_gradient(loss, params))

# double backward: Hessian-vector product of f(w) = sum(w^4) / 4
w = Var(rng.normal(size=5))
v = rng.normal(size=5)
gw, = ad.grad(ad.mul(0.25, ad.sum(ad.mul(ad.mul(w, w), ad.mul(w, w)))), [w], create_graph=True)
hv, = ad.grad(ad.sum(ad.mul(gw, v)), [w])
print("\nHv         =", np.round(hv, 6))
print("3 w^2 * v  =", np.round(3 * w.value ** 2 * v, 6))
