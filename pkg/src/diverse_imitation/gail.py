"""Embedding-conditioned adversarial imitation.

The discriminator scores (x, a, z); its clipped log-odds ``-log(1 - D)``
become per-step rewards for a Gaussian policy whose mean is the frozen VAE
action decoder plus a learned offset.  With ``latent_dim = 0`` and no action
decoder the same loop is plain adversarial imitation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import metrics as M
from . import nets, trpo
from .autodiff import NumericalError, ParamVector
from .envs import Trajectory, batch_env
from .nets import MlpSpec
from .optim import Adam
from .vae import VaeParams, VaeSpecs, action_mean, posterior

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GailSpecs:
    obs_dim: int
    action_dim: int
    latent_dim: int
    policy_sizes: tuple = (64, 32)
    disc_sizes: tuple = (32, 32)
    critic_sizes: tuple = (64, 32)
    init_log_std: float = -1.0
    log_std_min: float = -5.0
    log_std_max: float = 2.0

    @property
    def policy(self) -> MlpSpec:
        return MlpSpec(self.obs_dim + self.latent_dim, 2 * self.action_dim, tuple(self.policy_sizes))

    @property
    def discriminator(self) -> MlpSpec:
        return MlpSpec(self.obs_dim + self.action_dim + self.latent_dim, 1, tuple(self.disc_sizes))

    @property
    def critic(self) -> MlpSpec:
        return MlpSpec(self.obs_dim + self.latent_dim, 1, tuple(self.critic_sizes))


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, rows: np.ndarray, floor: float = 1e-6) -> "Standardizer":
        return cls(rows.mean(axis=0), np.maximum(rows.std(axis=0), floor))

    def __call__(self, rows):
        return (rows - self.mean) / self.std


# ------------------------------------------------------------------ policy

@dataclass
class ResidualPolicy:
    """N(mu_theta(x, z) + mu_alpha(x, z), sigma_theta(x, z)^2) with alpha frozen."""

    specs: GailSpecs
    theta: ParamVector
    alpha: ParamVector | None = None
    vae_specs: VaeSpecs | None = None

    def mu_ref(self, obs, z) -> np.ndarray:
        obs = np.atleast_2d(obs)
        if self.alpha is None:
            return np.zeros((len(obs), self.specs.action_dim))
        return np.asarray(action_mean(self.alpha.arrays(), self.vae_specs, obs, np.atleast_2d(z)))

    def with_theta(self, theta: ParamVector) -> "ResidualPolicy":
        return ResidualPolicy(self.specs, theta, self.alpha, self.vae_specs)


def _log_std_bias(specs: GailSpecs) -> float:
    u = (specs.init_log_std - specs.log_std_min) / (specs.log_std_max - specs.log_std_min)
    if not 0.0 < u < 1.0:
        raise ValueError("GailSpecs: init_log_std outside the log-std bounds")
    return float(np.log(u / (1.0 - u)))


def init_policy_params(specs: GailSpecs, rng: np.random.Generator) -> ParamVector:
    """Zero final layer, so the offset is 0 and sigma = exp(init_log_std) everywhere."""
    p = nets.init_mlp(specs.policy, rng, zero_last=True)
    arrs = p.arrays()
    last = f"b{len(specs.policy_sizes)}"
    arrs[last] = arrs[last].copy()
    arrs[last][specs.action_dim:] = _log_std_bias(specs)
    return ParamVector.from_arrays(arrs)


def policy_dist(theta: dict, specs: GailSpecs, obs, z, mu_ref):
    """(mean, log_std), each (N, A)."""
    A = specs.action_dim
    out = nets.mlp_forward(theta, specs.policy, ad.concat([obs, z], axis=1))
    mean = ad.add(out[:, :A], mu_ref)
    squash = ad.sigmoid(out[:, A:])
    log_std = ad.add(specs.log_std_min, ad.mul(specs.log_std_max - specs.log_std_min, squash))
    return mean, log_std


def batch_dist_fn(specs: GailSpecs):
    """Adapter for :mod:`trpo`: the policy over a RolloutBatch."""
    return lambda theta, b: policy_dist(theta, specs, b.obs, b.z, b.mu_ref)


def conditional_policy_sample(policy: ResidualPolicy, obs, z, rng: np.random.Generator,
                              deterministic: bool = False):
    """Draw actions for a batch (or a single row) of (obs, z); returns (action, log_prob)."""
    single = np.ndim(obs) == 1
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    z = np.asarray(z, dtype=np.float64).reshape(len(obs), policy.specs.latent_dim)
    mu_ref = policy.mu_ref(obs, z)
    mean, log_std = (np.asarray(v) for v in policy_dist(policy.theta.arrays(), policy.specs, obs, z, mu_ref))
    a = mean if deterministic else mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    lp = np.asarray(ad.gaussian_log_prob(a, mean, log_std, axis=1))
    return (a[0], float(lp[0])) if single else (a, lp)


# ----------------------------------------------------------- discriminator

def init_discriminator(specs: GailSpecs, rng: np.random.Generator) -> ParamVector:
    return nets.init_mlp(specs.discriminator, rng)


def discriminator_logits(psi: dict, specs: GailSpecs, x, a, z, norm: Standardizer | None = None):
    xa = np.concatenate([np.atleast_2d(x), np.atleast_2d(a)], axis=1)
    if norm is not None:
        xa = norm(xa)
    inp = np.concatenate([xa, np.atleast_2d(z).reshape(len(xa), specs.latent_dim)], axis=1)
    return ad.reshape(nets.mlp_forward(psi, specs.discriminator, inp), (len(xa),))


def discriminator_prob(psi: ParamVector, specs: GailSpecs, x, a, z, norm=None) -> np.ndarray:
    return ad.sigmoid(np.asarray(discriminator_logits(psi.arrays(), specs, x, a, z, norm)))


@dataclass
class DiscBatch:
    """Stacked (x, a, z) rows with weight 1 / (n T_j) for trajectory j."""

    x: np.ndarray
    a: np.ndarray
    z: np.ndarray
    w: np.ndarray

    @classmethod
    def from_groups(cls, groups: Sequence[tuple]) -> "DiscBatch":
        if not groups:
            raise ValueError("discriminator batch is empty")
        xs, as_, zs, ws = [], [], [], []
        for x, a, z in groups:
            x, a = np.atleast_2d(x), np.atleast_2d(a)
            T = len(a)
            if T == 0 or len(x) != T:
                raise ValueError(f"discriminator batch: {len(x)} states for {T} actions")
            xs.append(x)
            as_.append(a)
            zs.append(np.tile(np.reshape(z, (1, -1)), (T, 1)))
            ws.append(np.full(T, 1.0 / (T * len(groups))))
        return cls(np.concatenate(xs), np.concatenate(as_), np.concatenate(zs), np.concatenate(ws))


def discriminator_loss(psi: dict, specs: GailSpecs, expert, policy, norm=None):
    """-(mean_j mean_t log D(expert) + mean_j mean_t log(1 - D(policy)))."""
    e = expert if isinstance(expert, DiscBatch) else DiscBatch.from_groups(expert)
    p = policy if isinstance(policy, DiscBatch) else DiscBatch.from_groups(policy)
    le = discriminator_logits(psi, specs, e.x, e.a, e.z, norm)
    lp = discriminator_logits(psi, specs, p.x, p.a, p.z, norm)
    real = ad.sum(ad.mul(e.w, ad.log_sigmoid(le)))
    fake = ad.sum(ad.mul(p.w, ad.log_sigmoid(ad.neg(lp))))
    return ad.neg(ad.add(real, fake))


def reward(psi: ParamVector, specs: GailSpecs, x, a, z, clip_max: float = 10.0, norm=None) -> np.ndarray:
    """min(-log(1 - D), clip_max) per row; -log(1 - sigmoid(l)) = softplus(l)."""
    if clip_max <= 0:
        raise ValueError("reward: clip_max must be positive")
    logits = np.asarray(discriminator_logits(psi.arrays(), specs, x, a, z, norm))
    return np.minimum(ad.softplus(logits), clip_max)


# ------------------------------------------------------------------ rollouts

def policy_rollout(policy: ResidualPolicy, env, X0, Z, T: int, rng: np.random.Generator,
                   deterministic: bool = False) -> dict:
    """Batched closed-loop rollout recording what TRPO and the discriminator need.

    ``actions`` are the raw Gaussian draws (their log-densities are in
    ``logp``); ``executed`` are the clamped actions actually applied.
    """
    x = np.atleast_2d(np.asarray(X0, dtype=np.float64))
    B = len(x)
    Z = np.asarray(Z, dtype=np.float64).reshape(B, policy.specs.latent_dim)
    states, obs, acts, execd, mu_refs, logps = [x], [], [], [], [], []
    th = policy.theta.arrays()
    for t in range(T):
        o = env.observe(x)
        mu_ref = policy.mu_ref(o, Z)
        mean, log_std = (np.asarray(v) for v in policy_dist(th, policy.specs, o, Z, mu_ref))
        a = mean if deterministic else mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"policy rollout: non-finite action at step {t}")
        logps.append(np.asarray(ad.gaussian_log_prob(a, mean, log_std, axis=1)))
        ae = env.clamp(a)
        x = env.step(x, ae)
        obs.append(o)
        acts.append(a)
        execd.append(ae)
        mu_refs.append(mu_ref)
        states.append(x)
    st = lambda xs: np.stack(xs, axis=1)
    return {"states": st(states), "obs": st(obs), "actions": st(acts), "executed": st(execd),
            "mu_ref": st(mu_refs), "logp": np.stack(logps, axis=1), "z": Z}


def rollout_trajectories(ro: dict, demos: Sequence[Trajectory]) -> list[Trajectory]:
    return [Trajectory(ro["states"][j], ro["executed"][j], dict(d.meta)) for j, d in enumerate(demos)]


def imitate_with_policy(policy: ResidualPolicy, env, demos: Sequence[Trajectory], Z,
                        rng: np.random.Generator, deterministic: bool = True) -> list[Trajectory]:
    """Roll out the policy once per demonstration, from its initial state."""
    X0 = np.stack([d.states[0] for d in demos])
    ro = policy_rollout(policy, batch_env(env, demos), X0, Z, demos[0].T, rng, deterministic)
    return rollout_trajectories(ro, demos)


def task_error(env, demos, imitations) -> tuple[str, float]:
    if env.kind == "walker":
        return "mean_speed_diff", float(np.mean([M.speed_diff(d, i) for d, i in zip(demos, imitations)]))
    return "mean_endpoint_err", float(np.mean([M.endpoint_error(d, i) for d, i in zip(demos, imitations)]))


# ------------------------------------------------------------------ training

@dataclass
class GailConfig:
    iterations: int = 300
    n: int = 8
    disc_steps: int = 10
    disc_lr: float = 1e-4
    clip_max: float = 10.0
    max_kl: float = 0.01
    gamma: float = 0.995
    lam: float = 0.97
    damping: float = 0.1
    cg_iters: int = 10
    critic_epochs: int = 5
    critic_lr: float = 1e-3
    standardize: bool = True
    normalize_advantages: bool = True


@dataclass
class GailResult:
    policy: ResidualPolicy
    psi: ParamVector
    critic: ParamVector
    metrics: list = field(default_factory=list)
    trpo_log: list = field(default_factory=list)
    z_log: list = field(default_factory=list)
    norm: Standardizer | None = None


def _fit_norm(demos, env, specs: GailSpecs, enabled: bool) -> Standardizer:
    width = specs.obs_dim + specs.action_dim
    if not enabled:
        return Standardizer.identity(width)
    rows = np.concatenate([np.concatenate([env.observe(d.states[:-1]), d.actions], axis=1) for d in demos])
    return Standardizer.fit(rows)


def _train_loop(demos: Sequence[Trajectory], env, specs: GailSpecs, config: GailConfig,
                rng: np.random.Generator, policy: ResidualPolicy, z_source) -> GailResult:
    if not demos:
        raise ValueError("gail: no demonstrations")
    T = demos[0].T
    if any(d.T != T for d in demos):
        raise ValueError("gail: demonstrations must share a length")
    psi = init_discriminator(specs, rng)
    critic = nets.init_mlp(specs.critic, rng)
    disc_opt = Adam(psi.size, lr=config.disc_lr)
    critic_opt = Adam(critic.size, lr=config.critic_lr)
    norm = _fit_norm(demos, env, specs, config.standardize)
    dist_fn = batch_dist_fn(specs)
    n = min(config.n, len(demos))
    res = GailResult(policy, psi, critic, norm=norm)
    for it in range(config.iterations):
        try:
            idx = np.sort(rng.choice(len(demos), size=n, replace=False))
            batch_demos = [demos[i] for i in idx]
            Z = z_source(idx, rng)
            res.z_log.append((it, idx.tolist(), Z.copy()))
            X0 = np.stack([d.states[0] for d in batch_demos])
            ro = policy_rollout(policy, batch_env(env, batch_demos), X0, Z, T, rng)
            flat = lambda k: ro[k].reshape(n * T, -1)
            zrows = np.repeat(Z, T, axis=0)
            r = reward(psi, specs, flat("obs"), flat("executed"), zrows, config.clip_max, norm)
            next_obs = env.observe(ro["states"][:, 1:]).reshape(n * T, -1)
            batch = trpo.RolloutBatch(flat("obs"), next_obs, zrows, flat("actions"), flat("mu_ref"),
                                      ro["logp"].reshape(-1), r, (T,) * n)
            batch = trpo.compute_advantages(batch, critic, specs.critic, config.gamma, config.lam,
                                            config.normalize_advantages)
            theta, diag = trpo.trpo_step(dist_fn, policy.theta, batch, config.max_kl, config.damping,
                                         config.cg_iters)
            policy = policy.with_theta(theta)
            critic = trpo.critic_update(critic, specs.critic, batch, rng, config.critic_epochs,
                                        optimizer=critic_opt)
            expert = DiscBatch.from_groups([(env.observe(d.states[:-1]), d.actions, Z[j])
                                            for j, d in enumerate(batch_demos)])
            fake = DiscBatch.from_groups([(ro["obs"][j], ro["executed"][j], Z[j]) for j in range(n)])
            disc_losses = []
            for _ in range(config.disc_steps):
                dl, g = ad.value_and_grad(lambda p: discriminator_loss(p, specs, expert, fake, norm), psi)
                psi = psi.with_data(disc_opt.step(psi.data, g.data))
                disc_losses.append(dl)
        except (NumericalError, ValueError) as err:
            raise NumericalError(f"gail iteration {it}: {err}") from err
        name, err_val = task_error(env, batch_demos, rollout_trajectories(ro, batch_demos))
        res.metrics.append({"iteration": it, "mean_reward": float(np.mean(r)),
                            "disc_loss": float(disc_losses[0]) if disc_losses else float("nan"),
                            "policy_kl_step": diag.kl if diag.accepted else 0.0, name: err_val})
        res.trpo_log.append(diag)
        log.debug("gail it %d reward %.4f %s %.4f", it, res.metrics[-1]["mean_reward"], name, err_val)
    res.policy, res.psi, res.critic = policy, psi, critic
    return res


def posterior_sampler(mean: np.ndarray, log_std: np.ndarray):
    """z_j = mean_j + std_j eps, freshly drawn at every call."""
    std = np.exp(log_std)
    return lambda idx, rng: mean[idx] + std[idx] * rng.standard_normal(mean[idx].shape)


def diverse_gail_train(vae_params: VaeParams, vae_specs: VaeSpecs, demos: Sequence[Trajectory], env,
                       specs: GailSpecs, config: GailConfig, rng: np.random.Generator) -> GailResult:
    """Adversarial fine-tuning of the VAE policy, conditioned on demonstration embeddings."""
    if specs.latent_dim != vae_specs.latent_dim:
        raise ValueError("diverse_gail_train: latent widths differ between stages")
    mean, log_std = posterior(vae_params, vae_specs, demos, env.observe)
    policy = ResidualPolicy(specs, init_policy_params(specs, rng), vae_params.action_decoder, vae_specs)
    return _train_loop(demos, env, specs, config, rng, policy, posterior_sampler(mean, log_std))


def unconditional_gail_train(demos: Sequence[Trajectory], env, specs: GailSpecs, config: GailConfig,
                             rng: np.random.Generator) -> GailResult:
    """The same loop with no embedding and no frozen action decoder."""
    if specs.latent_dim != 0:
        raise ValueError("unconditional_gail_train: specs must have latent_dim 0")
    policy = ResidualPolicy(specs, init_policy_params(specs, rng))
    return _train_loop(demos, env, specs, config, rng, policy, lambda idx, rng: np.zeros((len(idx), 0)))
