"""Trajectory VAE: behavioural cloning with a demonstration embedding.

The encoder maps an observed state sequence to q(z | x_1:T).  Given one
reparameterised sample of z, the action decoder models a_t ~ N(mu(x_t, z),
diag(sigma)) and the state decoder models x_{t+1} | x_t, z with the
component-autoregressive mixture network.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nets
from .autodiff import NumericalError, ParamVector
from .envs import Trajectory, batch_rollout
from .nets import EncoderSpec, MlpSpec, StateDecoderSpec
from .optim import Adam

log = logging.getLogger(__name__)

PARTS = ("encoder", "action_decoder", "state_decoder")


@dataclass(frozen=True)
class VaeSpecs:
    obs_dim: int
    action_dim: int
    latent_dim: int = 8
    encoder_width: int = 64
    action_sizes: tuple = (64, 64)
    channels: int = 16
    wavenet_layers: int = 4
    mixture_components: int = 5

    @property
    def encoder(self) -> EncoderSpec:
        return EncoderSpec(self.obs_dim, self.encoder_width, self.latent_dim)

    @property
    def action_decoder(self) -> MlpSpec:
        return MlpSpec(self.obs_dim + self.latent_dim, self.action_dim, tuple(self.action_sizes))

    @property
    def state_decoder(self) -> StateDecoderSpec:
        return StateDecoderSpec(self.obs_dim, self.latent_dim, self.channels, self.wavenet_layers,
                                self.mixture_components)


@dataclass
class VaeParams:
    encoder: ParamVector
    action_decoder: ParamVector
    state_decoder: ParamVector

    def flatten(self) -> ParamVector:
        return ParamVector.concat({k: getattr(self, k) for k in PARTS})

    @classmethod
    def from_flat(cls, flat: ParamVector) -> "VaeParams":
        return cls(**flat.split(PARTS))


@dataclass
class Embedding:
    mean: np.ndarray
    log_std: np.ndarray
    sample: np.ndarray
    eps: np.ndarray


def init_vae(specs: VaeSpecs, rng: np.random.Generator) -> VaeParams:
    enc = nets.init_encoder(specs.encoder, rng)
    act = nets.init_mlp(specs.action_decoder, rng)
    act = ParamVector.from_arrays({**act.arrays(), "log_std": np.zeros(specs.action_dim)})
    dec = nets.init_state_decoder(specs.state_decoder, rng)
    return VaeParams(enc, act, dec)


def kl_standard_normal(mean, log_std):
    """KL(N(mean, exp(log_std)^2) || N(0, I)); sums over the last axis."""
    per = ad.mul(0.5, ad.sub(ad.sub(ad.add(ad.mul(mean, mean), ad.exp(ad.mul(2.0, log_std))), 1.0),
                             ad.mul(2.0, log_std)))
    return ad.sum(per, axis=-1)


def _split(flat: dict):
    groups = {k: {} for k in PARTS}
    for name, v in flat.items():
        head, tail = name.split("/", 1)
        groups[head][tail] = v
    return groups


def _stack(trajs: Sequence[Trajectory], observe):
    T = trajs[0].T
    if any(t.T != T for t in trajs):
        raise ValueError("vae: trajectories in one batch must share a length")
    obs = np.stack([observe(t.states) for t in trajs])
    acts = np.stack([t.actions for t in trajs])
    return obs, acts


def action_mean(params, specs: VaeSpecs, obs, z):
    """Action-decoder mean for a batch of (obs, z) rows."""
    return nets.mlp_forward(params, specs.action_decoder, ad.concat([obs, z], axis=1))


def vae_loss_terms(params: dict, specs: VaeSpecs, obs, acts, eps):
    """Per-trajectory (action NLL, state NLL, KL) for a batch.

    ``params`` maps 'encoder/...', 'action_decoder/...', 'state_decoder/...' to
    tensors; ``obs`` is (B, T+1, obs_dim), ``acts`` (B, T, action_dim), ``eps``
    (B, latent).
    """
    g = _split(params)
    B, T1, D = obs.shape
    T = T1 - 1
    L, A = specs.latent_dim, specs.action_dim
    mean, log_std = nets.birnn_encode_batch(g["encoder"], specs.encoder, obs)
    z = ad.add(mean, ad.mul(ad.exp(log_std), eps))
    zt = ad.reshape(ad.expand(ad.reshape(z, (B, 1, L)), (B, T, L)), (B * T, L))
    x_prev = obs[:, :-1].reshape(B * T, D)
    x_next = obs[:, 1:].reshape(B * T, D)
    mu = action_mean(g["action_decoder"], specs, x_prev, zt)
    a_ls = ad.expand(ad.reshape(g["action_decoder"]["log_std"], (1, A)), (B * T, A))
    act_lp = ad.gaussian_log_prob(acts.reshape(B * T, A), mu, a_ls, axis=1)
    st_lp = nets.state_decoder_log_prob(g["state_decoder"], specs.state_decoder, zt, x_prev, x_next)
    act_nll = ad.neg(ad.sum(ad.reshape(act_lp, (B, T)), axis=1))
    st_nll = ad.neg(ad.sum(ad.reshape(st_lp, (B, T)), axis=1))
    kl = kl_standard_normal(mean, log_std)
    return act_nll, st_nll, kl


def batch_loss(params: dict, specs: VaeSpecs, obs, acts, eps):
    act_nll, st_nll, kl = vae_loss_terms(params, specs, obs, acts, eps)
    for name, term in (("action reconstruction", act_nll), ("state reconstruction", st_nll),
                       ("KL", kl)):
        if not np.all(np.isfinite(ad.value_of(term))):
            raise NumericalError(f"vae_loss: non-finite {name} term")
    return ad.mean(ad.add(ad.add(act_nll, st_nll), kl))


def vae_loss(params: VaeParams, specs: VaeSpecs, traj: Trajectory, rng: np.random.Generator,
             observe, eps=None) -> float:
    """Single-sample estimate of the loss for one trajectory."""
    if traj.T < 1:
        raise ValueError("vae_loss: empty trajectory")
    obs, acts = _stack([traj], observe)
    if eps is None:
        eps = rng.standard_normal((1, specs.latent_dim))
    return float(batch_loss(params.flatten().arrays(), specs, obs, acts,
                            np.reshape(eps, (1, specs.latent_dim))))


@dataclass
class VaeTrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-3
    clip: float = 10.0


@dataclass
class VaeTrainResult:
    params: VaeParams
    loss_log: list = field(default_factory=list)


def train_vae(dataset: Sequence[Trajectory], specs: VaeSpecs, config: VaeTrainConfig,
              rng: np.random.Generator, observe, params: VaeParams | None = None) -> VaeTrainResult:
    """Minibatch Adam on the VAE loss; ``loss_log`` holds each epoch's mean batch loss."""
    if not dataset:
        raise ValueError("train_vae: empty dataset")
    params = init_vae(specs, rng) if params is None else params
    flat = params.flatten()
    opt = Adam(flat.size, lr=config.lr, clip=config.clip)
    obs_all, acts_all = _stack(dataset, observe)
    n = len(dataset)
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            eps = rng.standard_normal((len(idx), specs.latent_dim))
            obs, acts = obs_all[idx], acts_all[idx]
            try:
                val, g = ad.value_and_grad(lambda p: batch_loss(p, specs, obs, acts, eps), flat)
            except NumericalError as err:
                raise NumericalError(f"train_vae: epoch {epoch}: {err}") from err
            if not np.isfinite(val) or not np.all(np.isfinite(g.data)):
                raise NumericalError(f"train_vae: loss diverged at epoch {epoch}")
            flat = flat.with_data(opt.step(flat.data, g.data))
            epoch_losses.append(val)
        losses.append(float(np.mean(epoch_losses)))
        log.debug("vae epoch %d loss %.4f", epoch, losses[-1])
    return VaeTrainResult(VaeParams.from_flat(flat), losses)


def posterior(params: VaeParams, specs: VaeSpecs, trajs: Sequence[Trajectory], observe):
    """Posterior (mean, log_std), each (N, latent), for equal-length trajectories."""
    obs, _ = _stack(trajs, observe)
    m, s = nets.birnn_encode_batch(params.encoder.arrays(), specs.encoder, obs)
    return np.asarray(m), np.asarray(s)


def encode(params: VaeParams, specs: VaeSpecs, traj: Trajectory, rng: np.random.Generator,
           observe) -> Embedding:
    m, s = posterior(params, specs, [traj], observe)
    eps = rng.standard_normal(specs.latent_dim)
    return Embedding(m[0], s[0], m[0] + np.exp(s[0]) * eps, eps)


def _policy(params: VaeParams, specs: VaeSpecs, env, z_of_t, deterministic):
    a = params.action_decoder.arrays()
    std = np.exp(a["log_std"])

    def act(x, rng, t):
        obs = env.observe(x)
        mu = action_mean(a, specs, obs, z_of_t(t))
        if not deterministic:
            mu = mu + std * rng.standard_normal(mu.shape)
        return mu
    return act


def imitate_batch(params: VaeParams, specs: VaeSpecs, env, Z, X0, T: int,
                  rng: np.random.Generator, deterministic: bool = True):
    """Closed-loop VAE-policy rollouts for B embeddings; returns (states, actions)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    return batch_rollout(env, _policy(params, specs, env, lambda t: Z, deterministic), T, rng,
                         np.atleast_2d(X0))


def imitate(params: VaeParams, specs: VaeSpecs, env, z, x0, T: int, rng: np.random.Generator,
            deterministic: bool = True, meta=None) -> Trajectory:
    """Roll out the action decoder conditioned on ``z`` in the true environment."""
    S, A = imitate_batch(params, specs, env, np.reshape(z, (1, -1)), x0, T, rng, deterministic)
    return Trajectory(S[0], A[0], dict(meta or {}))


def interpolate_embeddings(z1, z2, alphas: Sequence[float]) -> list[np.ndarray]:
    z1, z2 = np.asarray(z1, dtype=np.float64), np.asarray(z2, dtype=np.float64)
    out = []
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"interpolate_embeddings: alpha {a} outside [0, 1]")
        out.append((1.0 - a) * z1 + a * z2)
    return out


def blend_schedule(switch_t: int, window: int, T: int) -> np.ndarray:
    """Weight on the second embedding at each step: 0 before ``switch_t``, a
    linear ramp over ``window`` steps, then 1."""
    if switch_t < 0 or window < 0 or switch_t + window > T:
        raise ValueError(f"blend: switch_t={switch_t}, window={window} do not fit T={T}")
    t = np.arange(T)
    return np.clip((t - switch_t + 1) / (window + 1), 0.0, 1.0)


def blend_rollout(params: VaeParams, specs: VaeSpecs, env, z1, z2, switch_t: int, window: int,
                  T: int, rng: np.random.Generator, x0, deterministic: bool = True,
                  meta=None) -> Trajectory:
    """Condition on z1, then move linearly to z2 over ``window`` steps from ``switch_t``."""
    w = blend_schedule(switch_t, window, T)
    z1, z2 = np.asarray(z1, dtype=np.float64), np.asarray(z2, dtype=np.float64)
    zt = lambda t: ((1.0 - w[t]) * z1 + w[t] * z2)[None]
    S, A = batch_rollout(env, _policy(params, specs, env, zt, deterministic), T, rng,
                         np.atleast_2d(x0))
    return Trajectory(S[0], A[0], dict(meta or {}))
