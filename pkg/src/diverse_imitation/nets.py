"""Network bodies: MLPs, a bidirectional LSTM encoder, and a WaveNet-style
state decoder that is autoregressive over the components of the state vector
and emits a Gaussian mixture per component.

Parameters live in :class:`ParamVector` objects; forward functions take any
mapping from parameter name to array or :class:`Var`, so the same code serves
plain evaluation and differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector, ShapeError, Var

Params = Mapping[str, object]


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    layer_sizes: tuple[int, ...] = ()
    activation: str = "tanh"

    def __post_init__(self):
        if any(w < 1 for w in self.layer_sizes) or self.output_dim < 1 or self.input_dim < 0:
            raise ValueError(f"MlpSpec: invalid widths {self}")
        if self.activation != "tanh":
            raise ValueError("MlpSpec: only tanh hidden activations are supported")

    @property
    def dims(self) -> list[int]:
        return [self.input_dim, *self.layer_sizes, self.output_dim]


@dataclass(frozen=True)
class EncoderSpec:
    state_dim: int
    recurrent_width: int
    latent_dim: int

    def __post_init__(self):
        if self.recurrent_width < 1 or self.latent_dim < 1 or self.state_dim < 1:
            raise ValueError(f"EncoderSpec: invalid sizes {self}")


@dataclass(frozen=True)
class StateDecoderSpec:
    state_dim: int
    latent_dim: int
    channels: int = 16
    num_layers: int = 4
    mixture_components: int = 5

    def __post_init__(self):
        if self.mixture_components < 1 or self.channels < 1 or self.num_layers < 0:
            raise ValueError(f"StateDecoderSpec: invalid sizes {self}")

    def dilation(self, layer: int) -> int:
        return 2 ** layer


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def _dense(x, W, b):
    """x @ W + b for a batch matrix x."""
    y = ad.matmul(x, W)
    n, k = np.shape(ad.value_of(y))
    return ad.add(y, ad.expand(ad.reshape(b, (1, k)), (n, k)))


# --------------------------------------------------------------------- MLP

def init_mlp(spec: MlpSpec, rng: np.random.Generator, zero_last: bool = False) -> ParamVector:
    arrays = {}
    dims = spec.dims
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        arrays[f"W{i}"] = np.zeros((a, b)) if (last and zero_last) else _uniform(rng, a, (a, b))
        arrays[f"b{i}"] = np.zeros(b)
    return ParamVector.from_arrays(arrays)


def mlp_forward(params: Params, spec: MlpSpec, x):
    """tanh hidden layers, linear output.  ``x`` is (batch, input_dim) or (input_dim,)."""
    xv = ad.value_of(x)
    single = np.ndim(xv) == 1
    if single:
        x = ad.reshape(x, (1, np.shape(xv)[0]))
        xv = ad.value_of(x)
    if np.shape(xv)[-1] != spec.input_dim:
        raise ShapeError(f"mlp_forward: input dim {np.shape(xv)[-1]} != {spec.input_dim}")
    h = x
    n_layers = len(spec.dims) - 1
    for i in range(n_layers):
        h = _dense(h, params[f"W{i}"], params[f"b{i}"])
        if i < n_layers - 1:
            h = ad.tanh(h)
    if single:
        h = ad.reshape(h, (spec.output_dim,))
    return h


# -------------------------------------------------------------------- LSTM

def lstm_sequence(x, W, b):
    """Run LSTM layers over ``x`` of shape (T, B, I) from zero state.

    ``W`` is (I + H, 4H) acting on concat(input, h_prev); gate order is
    input, forget, candidate, output.  Returns hidden states (T, B, H).
    Independent layers can be stacked along a new leading axis, i.e. x
    (S, T, B, I), W (S, I + H, 4H), b (S, 4H), and run in one pass.
    Backpropagation through time is hand-written; second derivatives are not
    available through this primitive.
    """
    xv, Wv, bv = ad.value_of(x), ad.value_of(W), ad.value_of(b)
    stacked = np.ndim(xv) == 4
    if not stacked:
        if np.ndim(xv) != 3:
            raise ShapeError(f"lstm_sequence: input must be (T, B, I), got {np.shape(xv)}")
        xv, Wv, bv = xv[None], np.asarray(Wv)[None], np.asarray(bv)[None]
    S, T, B, I = xv.shape
    H = Wv.shape[-1] // 4
    if Wv.shape != (S, I + H, 4 * H) or bv.shape != (S, 4 * H):
        raise ShapeError(f"lstm_sequence: weights {Wv.shape}/{bv.shape} do not fit input dim {I}")
    Wx, Wh = Wv[:, :I], Wv[:, I:]
    pre_x = np.matmul(xv.reshape(S, T * B, I), Wx).reshape(S, T, B, 4 * H) + bv[:, None, None, :]
    hs = np.zeros((T + 1, S, B, H))
    cs = np.zeros((T + 1, S, B, H))
    gates = np.empty((T, S, B, 4 * H))
    tcs = np.empty((T, S, B, H))
    # sigmoid(u) = (1 + tanh(u / 2)) / 2, so one tanh call serves all four gates
    scale = np.full(4 * H, 0.5)
    scale[2 * H:3 * H] = 1.0
    for t in range(T):
        gt = gates[t]
        np.matmul(hs[t], Wh, out=gt)
        gt += pre_x[:, t]
        gt *= scale
        np.tanh(gt, out=gt)
        gt[..., :2 * H] += 1.0
        gt[..., :2 * H] *= 0.5
        gt[..., 3 * H:] += 1.0
        gt[..., 3 * H:] *= 0.5
        c = cs[t + 1]
        np.multiply(gt[..., H:2 * H], cs[t], out=c)
        c += gt[..., :H] * gt[..., 2 * H:3 * H]
        np.tanh(c, out=tcs[t])
        np.multiply(gt[..., 3 * H:], tcs[t], out=hs[t + 1])
    out = np.moveaxis(hs[1:], 0, 1)
    out = out.copy() if stacked else out[0].copy()
    if not ad._any_var(x, W, b):
        return out

    def vjp(gy, x_, W_, b_, out_):
        if isinstance(gy, Var):
            raise NotImplementedError("lstm_sequence does not support create_graph")
        gy = np.moveaxis(gy if stacked else gy[None], 1, 0)  # (T, S, B, H)
        WhT = np.swapaxes(Wh, 1, 2)
        dgates = np.empty((T, S, B, 4 * H))
        dh_next = np.zeros((S, B, H))
        dc_next = np.zeros((S, B, H))
        for t in range(T - 1, -1, -1):
            gt, dgt = gates[t], dgates[t]
            i, f, g, o = gt[..., :H], gt[..., H:2 * H], gt[..., 2 * H:3 * H], gt[..., 3 * H:]
            dh = gy[t] + dh_next
            dgt[..., 3 * H:] = dh * tcs[t] * o * (1.0 - o)
            dc = dh * o * (1.0 - tcs[t] * tcs[t]) + dc_next
            dgt[..., :H] = dc * g * i * (1.0 - i)
            dgt[..., 2 * H:3 * H] = dc * i * (1.0 - g * g)
            dgt[..., H:2 * H] = dc * cs[t] * f * (1.0 - f)
            dh_next = np.matmul(dgt, WhT)
            dc_next = dc * f
        flat = np.moveaxis(dgates, 0, 1).reshape(S, T * B, 4 * H)
        dWx = np.matmul(np.swapaxes(xv.reshape(S, T * B, I), 1, 2), flat)
        hprev = np.moveaxis(hs[:-1], 0, 1).reshape(S, T * B, H)
        dWh = np.matmul(np.swapaxes(hprev, 1, 2), flat)
        dx = np.matmul(flat, np.swapaxes(Wx, 1, 2)).reshape(S, T, B, I)
        dW = np.concatenate([dWx, dWh], axis=1)
        db = flat.sum(axis=1)
        if not stacked:
            return dx[0], dW[0], db[0]
        return dx, dW, db

    return ad.primitive("lstm_sequence", out, (x, W, b), vjp)


def init_encoder(spec: EncoderSpec, rng: np.random.Generator) -> ParamVector:
    H, L = spec.recurrent_width, spec.latent_dim
    arrays = {}
    for direction in ("fwd", "bwd"):
        for layer in range(2):
            inp = spec.state_dim if layer == 0 else H
            W = _uniform(rng, inp + H, (inp + H, 4 * H))
            b = np.zeros(4 * H)
            b[H:2 * H] = 1.0
            arrays[f"{direction}{layer}_W"] = W
            arrays[f"{direction}{layer}_b"] = b
    arrays["head_W"] = _uniform(rng, 2 * H, (2 * H, 2 * L))
    arrays["head_b"] = np.zeros(2 * L)
    return ParamVector.from_arrays(arrays)


def birnn_encode_batch(params: Params, spec: EncoderSpec, states):
    """Encode a batch of equal-length sequences (B, T, state_dim).

    A two-layer LSTM runs forward in time and an independent two-layer LSTM
    runs backward; the second-layer outputs of both are concatenated per step,
    averaged over time, and mapped linearly to (mean, log_std).
    """
    sv = ad.value_of(states)
    if np.ndim(sv) != 3 or sv.shape[1] == 0:
        raise ShapeError(f"birnn_encode: need a non-empty (B, T, D) batch, got {np.shape(sv)}")
    B, T, D = sv.shape
    if D != spec.state_dim:
        raise ShapeError(f"birnn_encode: state dim {D} != {spec.state_dim}")
    x = ad.permute(states, (1, 0, 2))  # time-major (T, B, D)
    rev = ad.index(x, (slice(None, None, -1),))
    h = ad.concat([ad.reshape(x, (1, T, B, D)), ad.reshape(rev, (1, T, B, D))], axis=0)
    for layer in range(2):
        W = ad.concat([_lead(params[f"fwd{layer}_W"]), _lead(params[f"bwd{layer}_W"])], axis=0)
        b = ad.concat([_lead(params[f"fwd{layer}_b"]), _lead(params[f"bwd{layer}_b"])], axis=0)
        h = lstm_sequence(h, W, b)  # (2, T, B, H)
    hf = ad.index(h, (0,))
    hb = ad.index(h, (1, slice(None, None, -1)))
    both = ad.concat([hf, hb], axis=2)  # (T, B, 2H)
    avg = ad.mean(both, axis=0)  # (B, 2H)
    out = _dense(avg, params["head_W"], params["head_b"])
    L = spec.latent_dim
    return ad.index(out, (slice(None), slice(0, L))), ad.index(out, (slice(None), slice(L, 2 * L)))


def _lead(p):
    return ad.reshape(p, (1,) + np.shape(ad.value_of(p)))


def birnn_encode(params: Params, spec: EncoderSpec, states):
    """Encode one sequence (T, state_dim) -> (z_mean, z_log_std)."""
    sv = ad.value_of(states)
    if np.ndim(sv) != 2 or sv.shape[0] == 0:
        raise ShapeError("birnn_encode: empty or malformed sequence")
    m, s = birnn_encode_batch(params, spec, ad.reshape(states, (1,) + sv.shape))
    L = spec.latent_dim
    return ad.reshape(m, (L,)), ad.reshape(s, (L,))


# ----------------------------------------------------------- mixtures

def mog_log_prob(weights_logits, means, log_stds, value):
    """Log-density of a K-component Gaussian mixture along the last axis.

    ``value`` has the leading shape of the parameters (a scalar when they are
    1-D of length K).
    """
    lv = ad.value_of(weights_logits)
    K = np.shape(lv)[-1]
    if K < 1:
        raise ShapeError("mog_log_prob: need at least one component")
    lead = np.shape(lv)[:-1]
    v = ad.expand(ad.reshape(value, lead + (1,)), lead + (K,))
    log_w = ad.sub(weights_logits, ad.expand(ad.logsumexp(weights_logits, axis=-1, keepdims=True),
                                             lead + (K,)))
    comp = ad.gaussian_log_prob(v, means, log_stds, axis=())
    return ad.logsumexp(ad.add(log_w, comp), axis=-1)


# ------------------------------------------------------- state decoder

def init_state_decoder(spec: StateDecoderSpec, rng: np.random.Generator) -> ParamVector:
    C, K = spec.channels, spec.mixture_components
    cond = spec.latent_dim + spec.state_dim
    arrays = {"in_W": _uniform(rng, 1, (1, C)), "in_b": np.zeros(C)}
    for layer in range(spec.num_layers):
        arrays[f"l{layer}_cur_W"] = _uniform(rng, 2 * C, (C, 2 * C))
        arrays[f"l{layer}_prev_W"] = _uniform(rng, 2 * C, (C, 2 * C))
        arrays[f"l{layer}_cond_W"] = _uniform(rng, cond, (cond, 2 * C))
        arrays[f"l{layer}_b"] = np.zeros(2 * C)
        arrays[f"l{layer}_res_W"] = _uniform(rng, C, (C, C))
        arrays[f"l{layer}_res_b"] = np.zeros(C)
        arrays[f"l{layer}_skip_W"] = _uniform(rng, C, (C, C))
        arrays[f"l{layer}_skip_b"] = np.zeros(C)
    arrays["out_cond_W"] = _uniform(rng, cond, (cond, C))
    arrays["out_W"] = _uniform(rng, C, (C, 3 * K))
    arrays["out_b"] = np.zeros(3 * K)
    return ParamVector.from_arrays(arrays)


def _shift(h, N, D, C, by):
    """Delay a (N*D, C) component sequence by ``by`` positions, zero-filled."""
    if by >= D:
        return None
    h3 = ad.reshape(h, (N, D, C))
    kept = ad.index(h3, (slice(None), slice(0, D - by)))
    padded = ad.concat([np.zeros((N, by, C)), kept], axis=1)
    return ad.reshape(padded, (N * D, C))


def _per_component(cond_proj, N, D, width):
    return ad.reshape(ad.expand(ad.reshape(cond_proj, (N, 1, width)), (N, D, width)),
                      (N * D, width))


def state_decoder_mixture(params: Params, spec: StateDecoderSpec, z, x_prev, x_next):
    """Mixture parameters for every component given teacher-forced ``x_next``.

    Inputs are batches: z (N, latent), x_prev (N, D), x_next (N, D).  Returns
    (logits, means, log_stds), each (N, D, K).  Position d sees only
    x_next[:, :d].
    """
    D, C, K = spec.state_dim, spec.channels, spec.mixture_components
    xv = ad.value_of(x_next)
    if np.ndim(xv) != 2 or xv.shape[1] != D or np.shape(ad.value_of(x_prev)) != xv.shape \
            or np.shape(ad.value_of(z)) != (xv.shape[0], spec.latent_dim):
        raise ShapeError(f"state decoder: got z {np.shape(ad.value_of(z))}, x_prev "
                         f"{np.shape(ad.value_of(x_prev))}, x_next {np.shape(xv)} for {spec}")
    N = xv.shape[0]
    cond = ad.concat([z, x_prev], axis=1)
    if D > 1:
        shifted = ad.concat([np.zeros((N, 1)), ad.index(x_next, (slice(None), slice(0, D - 1)))],
                            axis=1)
    else:
        shifted = np.zeros((N, 1))
    h = _dense(ad.reshape(shifted, (N * D, 1)), params["in_W"], params["in_b"])
    skip = None
    for layer in range(spec.num_layers):
        a = ad.matmul(h, params[f"l{layer}_cur_W"])
        prev = _shift(h, N, D, C, spec.dilation(layer))
        if prev is not None:
            a = ad.add(a, ad.matmul(prev, params[f"l{layer}_prev_W"]))
        cproj = _dense(cond, params[f"l{layer}_cond_W"], params[f"l{layer}_b"])
        a = ad.add(a, _per_component(cproj, N, D, 2 * C))
        gated = ad.mul(ad.tanh(ad.index(a, (slice(None), slice(0, C)))),
                       ad.sigmoid(ad.index(a, (slice(None), slice(C, 2 * C)))))
        s = _dense(gated, params[f"l{layer}_skip_W"], params[f"l{layer}_skip_b"])
        skip = s if skip is None else ad.add(skip, s)
        h = ad.add(h, _dense(gated, params[f"l{layer}_res_W"], params[f"l{layer}_res_b"]))
    top = h if skip is None else skip
    top = ad.add(top, _per_component(ad.matmul(cond, params["out_cond_W"]), N, D, C))
    out = _dense(ad.tanh(top), params["out_W"], params["out_b"])
    out = ad.reshape(out, (N, D, 3 * K))
    return (ad.index(out, (Ellipsis, slice(0, K))),
            ad.index(out, (Ellipsis, slice(K, 2 * K))),
            ad.index(out, (Ellipsis, slice(2 * K, 3 * K))))


def state_decoder_component_log_probs(params: Params, spec: StateDecoderSpec, z, x_prev, x_next):
    """Per-component conditional log-densities, shape (N, D)."""
    logits, means, log_stds = state_decoder_mixture(params, spec, z, x_prev, x_next)
    return mog_log_prob(logits, means, log_stds, x_next)


def state_decoder_log_prob(params: Params, spec: StateDecoderSpec, z, x_prev, x_next):
    """log p(x_next | x_prev, z) summed over components.

    With 1-D inputs returns a scalar; with batches returns one value per row.
    """
    single = np.ndim(ad.value_of(x_next)) == 1
    if single:
        z = ad.reshape(z, (1, spec.latent_dim))
        x_prev = ad.reshape(x_prev, (1, spec.state_dim))
        x_next = ad.reshape(x_next, (1, spec.state_dim))
    for name in params:
        if not np.all(np.isfinite(ad.value_of(params[name]))):
            raise ad.NumericalError(f"state decoder: non-finite parameter '{name}'")
    lp = ad.sum(state_decoder_component_log_probs(params, spec, z, x_prev, x_next), axis=1)
    return ad.reshape(lp, ()) if single else lp


def state_decoder_sample(params: Params, spec: StateDecoderSpec, z, x_prev,
                         rng: np.random.Generator) -> np.ndarray:
    """Draw x_next component by component from the decoder's conditionals."""
    single = np.ndim(ad.value_of(x_prev)) == 1
    z = np.atleast_2d(ad.value_of(z))
    x_prev = np.atleast_2d(ad.value_of(x_prev))
    plain = {k: ad.value_of(v) for k, v in params.items()}
    N, D = x_prev.shape
    x = np.zeros((N, D))
    for d in range(D):
        logits, means, log_stds = state_decoder_mixture(plain, spec, z, x_prev, x)
        lg = logits[:, d, :]
        w = np.exp(lg - lg.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        u = rng.uniform(size=N)
        k = np.minimum((w.cumsum(axis=1) < u[:, None]).sum(axis=1), spec.mixture_components - 1)
        rows = np.arange(N)
        eps = rng.standard_normal(N)
        x[:, d] = means[rows, d, k] + np.exp(log_stds[rows, d, k]) * eps
    return x[0] if single else x
