"""Trust-region policy updates for diagonal-Gaussian policies.

The policy is supplied as ``dist_fn(params, batch) -> (mean, log_std)``,
both (N, A), where ``params`` maps names to tensors.  Everything here works
on flat :class:`ParamVector` layouts so the natural-gradient solve is plain
linear algebra.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import nets
from .autodiff import NumericalError, ParamVector
from .nets import MlpSpec
from .optim import Adam

log = logging.getLogger(__name__)


@dataclass
class RolloutBatch:
    """Flattened steps of equal-or-ragged episodes.

    ``obs``/``next_obs`` (N, D), ``z`` (N, L), ``actions`` (N, A), ``mu_ref``
    (N, A) a frozen mean offset, ``logp_old`` and ``rewards`` (N,).
    ``lengths`` gives episode sizes in order; they must sum to N.
    """

    obs: np.ndarray
    next_obs: np.ndarray
    z: np.ndarray
    actions: np.ndarray
    mu_ref: np.ndarray
    logp_old: np.ndarray
    rewards: np.ndarray
    lengths: tuple
    values: np.ndarray | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(n <= 0 for n in self.lengths):
            raise ValueError("RolloutBatch: episode of length 0")
        if sum(self.lengths) != len(self.obs):
            raise ValueError(f"RolloutBatch: lengths sum to {sum(self.lengths)}, have {len(self.obs)} steps")

    @property
    def size(self) -> int:
        return len(self.obs)


# ------------------------------------------------------------------ critic

def critic_inputs(obs, z):
    return np.concatenate([obs, z], axis=1)


def critic_values(params: ParamVector, spec: MlpSpec, obs, z) -> np.ndarray:
    return np.asarray(nets.mlp_forward(params.arrays(), spec, critic_inputs(obs, z)))[:, 0]


def gae(rewards, values, next_values, lengths, gamma: float, lam: float):
    """Generalised advantages per episode; returns (advantages, value targets)."""
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ValueError(f"gae: gamma={gamma}, lam={lam} must lie in [0, 1]")
    rewards = np.asarray(rewards, dtype=np.float64)
    delta = rewards + gamma * np.asarray(next_values) - np.asarray(values)
    adv = np.empty_like(delta)
    start = 0
    for n in lengths:
        if n <= 0:
            raise ValueError("gae: episode of length 0")
        acc = 0.0
        for t in range(start + n - 1, start - 1, -1):
            acc = delta[t] + gamma * lam * acc
            adv[t] = acc
        start += n
    return adv, adv + values


def compute_advantages(batch: RolloutBatch, critic: ParamVector, critic_spec: MlpSpec,
                       gamma: float = 0.995, lam: float = 0.97, normalize: bool = True) -> RolloutBatch:
    """Fill values, GAE advantages and value targets.

    The last step of every episode bootstraps from V(next_obs): episodes end
    at the horizon, not in a terminal state.
    """
    v = critic_values(critic, critic_spec, batch.obs, batch.z)
    v_next = critic_values(critic, critic_spec, batch.next_obs, batch.z)
    adv, ret = gae(batch.rewards, v, v_next, batch.lengths, gamma, lam)
    if normalize and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    if not np.all(np.isfinite(adv)):
        raise NumericalError("compute_advantages: non-finite advantages")
    return replace(batch, values=v, advantages=adv, returns=ret)


def critic_loss(params: dict, spec: MlpSpec, inputs, targets):
    pred = ad.reshape(nets.mlp_forward(params, spec, inputs), (len(targets),))
    return ad.mean(ad.square(ad.sub(pred, targets)))


def critic_update(critic: ParamVector, spec: MlpSpec, batch: RolloutBatch, rng: np.random.Generator,
                  epochs: int = 5, lr: float = 1e-3, minibatch: int = 64,
                  optimizer: Adam | None = None) -> ParamVector:
    """MSE regression of V(x, z) onto the batch's value targets."""
    if batch.returns is None:
        raise ValueError("critic_update: batch has no value targets")
    opt = optimizer or Adam(critic.size, lr=lr)
    inputs = critic_inputs(batch.obs, batch.z)
    targets = batch.returns
    n = len(targets)
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, minibatch):
            idx = order[s:s + minibatch]
            _, g = ad.value_and_grad(lambda p: critic_loss(p, spec, inputs[idx], targets[idx]), critic)
            critic = critic.with_data(opt.step(critic.data, g.data))
    return critic


# --------------------------------------------------------------- objective

def diag_gaussian_kl(mean0, log_std0, mean1, log_std1):
    """KL(N0 || N1) per row for diagonal Gaussians, summed over the last axis."""
    var0 = ad.exp(ad.mul(2.0, log_std0))
    var1 = ad.exp(ad.mul(2.0, log_std1))
    diff = ad.sub(mean0, mean1)
    per = ad.add(ad.sub(log_std1, log_std0),
                 ad.sub(ad.div(ad.add(var0, ad.square(diff)), ad.mul(2.0, var1)), 0.5))
    return ad.sum(per, axis=-1)


def _old_dist(dist_fn, theta_old: ParamVector, batch):
    m, s = dist_fn(theta_old.arrays(), batch)
    return np.asarray(ad.value_of(m)), np.asarray(ad.value_of(s))


def surrogate_and_kl(dist_fn: Callable, theta: dict, batch: RolloutBatch, old: tuple):
    """(mean ratio-weighted advantage, mean KL(old || new)) as tensors."""
    mean, log_std = dist_fn(theta, batch)
    logp = ad.gaussian_log_prob(batch.actions, mean, log_std, axis=1)
    ratio = ad.exp(ad.sub(logp, batch.logp_old))
    surr = ad.mean(ad.mul(ratio, batch.advantages))
    kl = ad.mean(diag_gaussian_kl(old[0], old[1], mean, log_std))
    return surr, kl


def _kl_only(dist_fn, theta, batch, old):
    mean, log_std = dist_fn(theta, batch)
    return ad.mean(diag_gaussian_kl(old[0], old[1], mean, log_std))


def fisher_vector_product(dist_fn: Callable, theta: ParamVector, batch: RolloutBatch,
                          v: np.ndarray, damping: float = 0.1, old: tuple | None = None) -> np.ndarray:
    """Hessian of the mean KL at ``theta`` times ``v``, plus ``damping * v``.

    By default the old distribution is ``theta``'s own, so the KL Hessian is the
    Fisher matrix.  Computed by differentiating (grad KL . v) a second time.
    """
    v = np.asarray(v, dtype=np.float64)
    old = _old_dist(dist_fn, theta, batch) if old is None else old
    leaves = theta.leaves()
    kl = _kl_only(dist_fn, leaves, batch, old)
    names = theta.names
    gs = ad.grad(kl, [leaves[k] for k in names], create_graph=True)
    vs = theta.with_data(v).arrays()
    dot = None
    for k, g in zip(names, gs):
        if isinstance(g, ad.Var):
            term = ad.sum(ad.mul(g, vs[k]))
            dot = term if dot is None else ad.add(dot, term)
    if dot is None:
        return damping * v
    hv = ad.grad(dot, [leaves[k] for k in names])
    return theta.flatten_grads(dict(zip(names, hv))).data + damping * v


def conjugate_gradient(apply_A: Callable, b, iters: int = 10, tol: float = 1e-10,
                       residuals: list | None = None) -> np.ndarray:
    """Solve A x = b for symmetric positive definite A given only products."""
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    if residuals is not None:
        residuals.append(np.sqrt(rr))
    for _ in range(iters):
        if np.sqrt(rr) < tol:
            break
        Ap = apply_A(p)
        pAp = float(p @ Ap)
        if not np.isfinite(pAp) or pAp <= 0:
            raise NumericalError(f"conjugate_gradient: curvature p'Ap = {pAp}")
        alpha = rr / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rr_new = float(r @ r)
        if not np.isfinite(rr_new):
            raise NumericalError("conjugate_gradient: non-finite residual")
        if residuals is not None:
            residuals.append(np.sqrt(rr_new))
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


@dataclass
class TrpoDiagnostics:
    surrogate_before: float
    surrogate_after: float
    kl: float
    backtracks: int
    accepted: bool
    grad_norm: float


def trpo_step(dist_fn: Callable, theta: ParamVector, batch: RolloutBatch, max_kl: float = 0.01,
              damping: float = 0.1, cg_iters: int = 10, max_backtracks: int = 10,
              accept_ratio: float = 1.5):
    """One natural-gradient step with a KL-bounded backtracking line search.

    Returns (theta', TrpoDiagnostics); theta is returned unchanged when no
    candidate both improves the surrogate and keeps mean KL within
    ``accept_ratio * max_kl``.
    """
    if max_kl <= 0:
        raise ValueError("trpo_step: max_kl must be positive")
    old = _old_dist(dist_fn, theta, batch)

    def evaluate(th: ParamVector):
        s, k = surrogate_and_kl(dist_fn, th.arrays(), batch, old)
        return float(ad.value_of(s)), float(ad.value_of(k))

    surr0, g = ad.value_and_grad(lambda p: surrogate_and_kl(dist_fn, p, batch, old)[0], theta)
    gn = float(np.linalg.norm(g.data))
    rejected = TrpoDiagnostics(surr0, surr0, 0.0, 0, False, gn)
    if gn == 0.0 or not np.isfinite(gn):
        return theta, rejected
    fvp = lambda v: fisher_vector_product(dist_fn, theta, batch, v, damping, old)
    d = conjugate_gradient(fvp, g.data, cg_iters)
    shs = float(d @ fvp(d))
    if not np.isfinite(shs) or shs <= 0:
        return theta, rejected
    step = np.sqrt(2.0 * max_kl / shs) * d
    for k in range(max_backtracks):
        cand = theta.with_data(theta.data + (0.5 ** k) * step)
        s, kl = evaluate(cand)
        if np.isfinite(s) and np.isfinite(kl) and s > surr0 and kl <= accept_ratio * max_kl:
            return cand, TrpoDiagnostics(surr0, s, kl, k, True, gn)
    rejected.backtracks = max_backtracks
    return theta, rejected
