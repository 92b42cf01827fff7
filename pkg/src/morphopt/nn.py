"""Policy/value networks with hand-written reverse-mode gradients.

One flat float64 parameter vector holds the action-mean MLP, a
state-independent log-sigma vector, and the value MLP, so gradient steps
and meta-learning updates are plain vector arithmetic. The only losses
differentiated are compositions of affine layers, tanh, Gaussian
log-probability, the clipped surrogate, and mean-square error, so the
backward pass is written directly instead of through an autodiff graph.

Checkpoints are a magic string, a JSON manifest, and a little-endian
float32 parameter blob (parameters are float64 in memory).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

LOG_SIGMA_MIN = -4.0
LOG_SIGMA_MAX = 1.0
LOG_SIGMA_INIT = -0.7
OUTPUT_GAIN = 0.01

CHECKPOINT_MAGIC = b"MORPHOPT1\n"
CHECKPOINT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


class CheckpointError(RuntimeError):
    """Malformed or incompatible checkpoint file."""


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths from input to output; tanh between hidden layers."""

    widths: tuple[int, ...]

    def __post_init__(self):
        if len(self.widths) < 3:
            raise ValueError("need at least one hidden layer")
        if any(w <= 0 for w in self.widths):
            raise ValueError("layer widths must be positive")


class ParamLayout:
    """Slice map from the flat parameter vector to network tensors."""

    def __init__(self, obs_dim: int, act_dim: int, hidden: tuple[int, ...] = (128, 128)):
        self.obs_dim = int(obs_dim)
        self.act_dim = int(act_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.mean_spec = MlpSpec((self.obs_dim, *self.hidden, self.act_dim))
        self.value_spec = MlpSpec((self.obs_dim, *self.hidden, 1))

        offset = 0
        self.mean_slices, offset = self._mlp_slices(self.mean_spec, offset)
        self.log_sigma_slice = slice(offset, offset + self.act_dim)
        offset += self.act_dim
        self.value_slices, offset = self._mlp_slices(self.value_spec, offset)
        self.size = offset

    @staticmethod
    def _mlp_slices(spec: MlpSpec, offset: int):
        slices = []
        for n_in, n_out in zip(spec.widths[:-1], spec.widths[1:]):
            w = slice(offset, offset + n_in * n_out)
            offset += n_in * n_out
            b = slice(offset, offset + n_out)
            offset += n_out
            slices.append((w, b, n_in, n_out))
        return slices, offset

    def describe(self) -> dict:
        return {"obs_dim": self.obs_dim, "act_dim": self.act_dim, "hidden": list(self.hidden)}

    @staticmethod
    def from_description(desc: dict) -> "ParamLayout":
        return ParamLayout(desc["obs_dim"], desc["act_dim"], tuple(desc["hidden"]))

    def unpack(self, params: np.ndarray, slices):
        out = []
        for w, b, n_in, n_out in slices:
            out.append((params[w].reshape(n_in, n_out), params[b]))
        return out

    def log_sigma(self, params: np.ndarray) -> np.ndarray:
        return params[self.log_sigma_slice]

    def clamp_log_sigma(self, params: np.ndarray) -> np.ndarray:
        params[self.log_sigma_slice] = np.clip(params[self.log_sigma_slice], LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        return params


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return np.ascontiguousarray(q[:n_in, :n_out])


def init_params(layout: ParamLayout, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal-like init; output layers scaled down, log-sigma at -0.7."""
    params = np.zeros(layout.size)
    for slices in (layout.mean_slices, layout.value_slices):
        last = len(slices) - 1
        for i, (w, b, n_in, n_out) in enumerate(slices):
            gain = OUTPUT_GAIN if i == last else 1.0
            params[w] = (gain * _orthogonal(rng, n_in, n_out)).ravel()
            params[b] = 0.0
    params[layout.log_sigma_slice] = LOG_SIGMA_INIT
    return params


def _mlp_forward(layers, x):
    h = x
    acts = [h]
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i != last:
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def _mlp_backward(layers, acts, d_out):
    """Accumulate layer gradients; returns list[(dW, db)] matching layers."""
    grads = [None] * len(layers)
    d = d_out
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        h_in = acts[i]
        grads[i] = (h_in.T @ d, d.sum(axis=0))
        if i > 0:
            d = (d @ w.T) * (1.0 - acts[i] ** 2)
    return grads


def forward(layout: ParamLayout, params: np.ndarray, obs: np.ndarray):
    """Action mean, log-sigma vector, and value estimates for a batch."""
    obs = np.asarray(obs, dtype=np.float64)
    squeeze = obs.ndim == 1
    if squeeze:
        obs = obs[None, :]
    if obs.shape[1] != layout.obs_dim:
        raise ValueError(f"expected observations of width {layout.obs_dim}, got {obs.shape[1]}")
    mean, _ = _mlp_forward(layout.unpack(params, layout.mean_slices), obs)
    value, _ = _mlp_forward(layout.unpack(params, layout.value_slices), obs)
    log_sigma = layout.log_sigma(params).copy()
    if squeeze:
        return mean[0], log_sigma, float(value[0, 0])
    return mean, log_sigma, value[:, 0]


def gaussian_log_prob(mean: np.ndarray, log_sigma: np.ndarray, actions: np.ndarray) -> np.ndarray:
    diff = actions - mean
    inv_var = np.exp(-2.0 * log_sigma)
    return -(log_sigma + HALF_LOG_2PI + 0.5 * diff**2 * inv_var).sum(axis=-1)


def gaussian_entropy(log_sigma: np.ndarray) -> float:
    return float((log_sigma + 0.5 * (1.0 + np.log(2.0 * np.pi))).sum())


def sample_actions(mean: np.ndarray, log_sigma: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return mean + np.exp(log_sigma) * rng.standard_normal(mean.shape)


@dataclass(frozen=True)
class LossCoeffs:
    """Weights of the composite objective: surrogate + value - entropy."""

    clip: float = 0.2
    value_weight: float = 0.5
    entropy_weight: float = 0.0


def policy_loss(layout: ParamLayout, params: np.ndarray, batch: dict, coeffs: LossCoeffs) -> float:
    """Forward-only clipped-surrogate objective; the oracle for grad checks."""
    mean, _ = _mlp_forward(layout.unpack(params, layout.mean_slices), batch["obs"])
    value, _ = _mlp_forward(layout.unpack(params, layout.value_slices), batch["obs"])
    log_sigma = layout.log_sigma(params)

    logp = gaussian_log_prob(mean, log_sigma, batch["actions"])
    ratio = np.exp(logp - batch["old_logp"])
    adv = batch["advantages"]
    surr = np.minimum(ratio * adv, np.clip(ratio, 1.0 - coeffs.clip, 1.0 + coeffs.clip) * adv)
    value_err = value[:, 0] - batch["returns"]
    return float(
        -surr.mean()
        + coeffs.value_weight * (value_err**2).mean()
        - coeffs.entropy_weight * gaussian_entropy(log_sigma)
    )


def policy_loss_grad(layout: ParamLayout, params: np.ndarray, batch: dict, coeffs: LossCoeffs):
    """Loss, flat gradient, and update statistics for one batch."""
    obs = batch["obs"]
    actions = batch["actions"]
    adv = batch["advantages"]
    B = obs.shape[0]

    mean_layers = layout.unpack(params, layout.mean_slices)
    value_layers = layout.unpack(params, layout.value_slices)
    log_sigma = layout.log_sigma(params)

    mean, mean_acts = _mlp_forward(mean_layers, obs)
    value, value_acts = _mlp_forward(value_layers, obs)

    diff = actions - mean
    inv_var = np.exp(-2.0 * log_sigma)
    logp = -(log_sigma + HALF_LOG_2PI + 0.5 * diff**2 * inv_var).sum(axis=1)
    ratio = np.exp(logp - batch["old_logp"])

    surr1 = ratio * adv
    clipped_ratio = np.clip(ratio, 1.0 - coeffs.clip, 1.0 + coeffs.clip)
    surr2 = clipped_ratio * adv
    surr = np.minimum(surr1, surr2)

    value_err = value[:, 0] - batch["returns"]
    loss = (
        -surr.mean()
        + coeffs.value_weight * (value_err**2).mean()
        - coeffs.entropy_weight * gaussian_entropy(log_sigma)
    )

    # d(-mean surr)/d ratio: flows only where the unclipped branch attains
    # the min; inside the clip band both branches coincide.
    d_ratio = np.where(surr1 <= surr2, -adv / B, 0.0)
    d_logp = d_ratio * ratio
    d_mean = d_logp[:, None] * (diff * inv_var)
    d_log_sigma_vec = (d_logp[:, None] * (diff**2 * inv_var - 1.0)).sum(axis=0)
    d_log_sigma_vec -= coeffs.entropy_weight
    d_value = (2.0 * coeffs.value_weight / B) * value_err

    grad = np.zeros(layout.size)
    for (g_w, g_b), (w_sl, b_sl, _, _) in zip(
        _mlp_backward(mean_layers, mean_acts, d_mean), layout.mean_slices
    ):
        grad[w_sl] = g_w.ravel()
        grad[b_sl] = g_b
    for (g_w, g_b), (w_sl, b_sl, _, _) in zip(
        _mlp_backward(value_layers, value_acts, d_value[:, None]), layout.value_slices
    ):
        grad[w_sl] = g_w.ravel()
        grad[b_sl] = g_b
    grad[layout.log_sigma_slice] = d_log_sigma_vec

    stats = {
        "loss": float(loss),
        "policy_loss": float(-surr.mean()),
        "value_loss": float((value_err**2).mean()),
        "entropy": gaussian_entropy(log_sigma),
        "mean_ratio": float(ratio.mean()),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > coeffs.clip)),
    }
    return float(loss), grad, stats


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def zeros(size: int) -> "AdamState":
        return AdamState(m=np.zeros(size), v=np.zeros(size), t=0)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray, stepsize: float):
    """Bias-corrected Adam update; returns new params and mutated state."""
    state.t += 1
    state.m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grad
    state.v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grad**2
    m_hat = state.m / (1.0 - ADAM_BETA1**state.t)
    v_hat = state.v / (1.0 - ADAM_BETA2**state.t)
    return params - stepsize * m_hat / (np.sqrt(v_hat) + ADAM_EPS), state


def save_checkpoint(path, layout: ParamLayout, params: np.ndarray, extra: dict | None = None):
    """Magic + JSON manifest + float32 little-endian parameter blob."""
    manifest = {
        "version": CHECKPOINT_VERSION,
        "layout": layout.describe(),
        "param_count": int(layout.size),
        "extra": extra or {},
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    blob = np.asarray(params, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(header).to_bytes(4, "little"))
        f.write(header)
        f.write(blob)


def load_checkpoint(path):
    """Returns (layout, float64 params, manifest)."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("bad magic; not a policy checkpoint")
    off = len(CHECKPOINT_MAGIC)
    if len(raw) < off + 4:
        raise CheckpointError("truncated header")
    header_len = int.from_bytes(raw[off : off + 4], "little")
    off += 4
    try:
        manifest = json.loads(raw[off : off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable manifest: {e}") from e
    off += header_len
    layout = ParamLayout.from_description(manifest["layout"])
    blob = raw[off:]
    expected = manifest["param_count"] * 4
    if len(blob) != expected:
        raise CheckpointError(f"parameter blob is {len(blob)} bytes, expected {expected}")
    params = np.frombuffer(blob, dtype="<f4").astype(np.float64)
    if params.shape[0] != layout.size:
        raise CheckpointError("parameter count does not match layout")
    return layout, params, manifest
