"""Diffusion over flattened transform sets: schedule, forward process, noise estimator, losses.

A transform set of M teeth is flattened to an ``M*16`` state after subtracting the
identity from every matrix, so "no movement" sits at the origin of the diffusion.
States may be plain arrays or :class:`~talign.autodiff.Tensor` values; the forward
process is written so that gradients flow through the state when it is a tensor.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, InvalidArgumentError, ShapeError
from .prn import IDENTITY_FLAT, init_layers


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    gammas: np.ndarray

    @property
    def steps(self):
        return len(self.betas)

    def gamma(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.steps):
            raise InvalidArgumentError(f"timestep must lie in [1, {self.steps}], got {t}")
        return self.gammas[t - 1]


def build_schedule(steps=1000, beta_min=1e-4, beta_max=0.02):
    """Linear betas; ``gammas[t-1]`` is the cumulative product of ``1 - beta`` up to step t."""
    if steps < 1 or not 0.0 < beta_min <= beta_max < 1.0:
        raise InvalidArgumentError(
            f"need steps >= 1 and 0 < beta_min <= beta_max < 1, got {steps}, {beta_min}, {beta_max}"
        )
    betas = np.linspace(beta_min, beta_max, steps)
    return NoiseSchedule(betas=betas, gammas=np.cumprod(1.0 - betas))


def normalize_transforms(transforms, scale=1.0):
    """``(..., M, 4, 4)`` -> ``(..., M*16)`` state: flatten, subtract identity, divide by ``scale``."""
    transforms = np.asarray(transforms, dtype=np.float64)
    flat = transforms.reshape(transforms.shape[:-2] + (16,)) - IDENTITY_FLAT
    return (flat / scale).reshape(transforms.shape[:-3] + (-1,))


def denormalize_transforms(state, scale=1.0):
    state = np.asarray(state, dtype=np.float64)
    flat = state.reshape(state.shape[:-1] + (-1, 16)) * scale + IDENTITY_FLAT
    return flat.reshape(flat.shape[:-1] + (4, 4))


def forward_diffuse(m0, t, noise, sched):
    """``sqrt(gamma_t) * m0 + sqrt(1 - gamma_t) * noise``; ``t`` may be per-row ``(B,)``."""
    g = sched.gamma(t)
    if np.ndim(g):
        g = np.asarray(g).reshape(-1, *([1] * (np.ndim(noise) - 1)))
    dtype = m0.dtype if hasattr(m0, "dtype") else np.float64
    a = np.asarray(np.sqrt(g), dtype=dtype)
    b = np.asarray(np.sqrt(1.0 - g), dtype=dtype)
    return m0 * a + b * np.asarray(noise, dtype=dtype)


def time_embedding(t, dim=64, dtype=np.float64):
    """Sinusoidal embedding ``[sin(t w_k), cos(t w_k)]`` with ``w_k = 10000^(-k/(dim/2))``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).astype(dtype)


@dataclass
class EstimatorConfig:
    n_teeth: int = 32
    hidden: list = field(default_factory=lambda: [512, 512])
    time_dim: int = 64
    seed: int = 1

    @property
    def state_dim(self):
        return self.n_teeth * 16


def _estimator_shapes(cfg):
    shapes, fan_in = [], cfg.state_dim + cfg.time_dim
    for i, width in enumerate(list(cfg.hidden) + [cfg.state_dim]):
        shapes.append((f"est.{i}", fan_in, width))
        fan_in = width
    return shapes


class NoiseEstimator:
    """MLP predicting the injected noise from ``[state | time embedding]``."""

    def __init__(self, cfg, params):
        self.cfg = cfg
        self.params = params

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype):
        return NoiseEstimator(self.cfg, {n: ad.parameter(p.data.astype(dtype), n) for n, p in self.params.items()})

    def copy(self):
        return self.astype(self.dtype)

    def frozen(self):
        """View sharing parameter storage but invisible to backpropagation."""
        return NoiseEstimator(self.cfg, {n: ad.Tensor(p.data) for n, p in self.params.items()})

    def __call__(self, mt, t):
        mt = ad.as_tensor(mt, self.dtype)
        if mt.shape[-1] != self.cfg.state_dim:
            raise ShapeError(f"estimator expects states of width {self.cfg.state_dim}, got {mt.shape}")
        single = mt.ndim == 1
        if single:
            mt = mt.reshape(1, -1)
        t = np.broadcast_to(np.asarray(t), (mt.shape[0],))
        x = ad.concat(mt, ad.Tensor(time_embedding(t, self.cfg.time_dim, self.dtype)), axis=-1)
        n = len(self.cfg.hidden) + 1
        for i in range(n):
            x = ad.linear(x, self.params[f"est.{i}.w"], self.params[f"est.{i}.b"])
            if i < n - 1:
                x = ad.relu(x)
        return x.reshape(-1) if single else x


def init_estimator(cfg=None, dtype=np.float32):
    cfg = cfg or EstimatorConfig()
    return NoiseEstimator(cfg, init_layers(_estimator_shapes(cfg), cfg.seed, dtype))


def estimate_noise(estimator, mt, t):
    return estimator(mt, t)


def _frozen(estimator):
    return estimator.frozen() if hasattr(estimator, "frozen") else estimator


def sample_timesteps(rng, sched, n):
    return rng.integers(1, sched.steps + 1, size=n)


def diffusion_loss(estimator, m_gt, sched, rng=None, t=None, noise=None):
    """Mean squared error between injected and estimated noise over every entry.

    ``m_gt`` is ``(B, D)`` (or ``(D,)``); one timestep and one noise draw per row
    unless ``t``/``noise`` are given.
    """
    m_gt = np.asarray(m_gt)
    rows = 1 if m_gt.ndim == 1 else m_gt.shape[0]
    if t is None:
        t = sample_timesteps(rng, sched, rows)
    if noise is None:
        noise = rng.standard_normal(m_gt.shape)
    t = np.asarray(t).reshape(-1) if m_gt.ndim > 1 else np.asarray(t).reshape(())
    mt = forward_diffuse(m_gt, t, noise, sched)
    est = ad.as_tensor(estimator(mt, t))
    return ad.mean(ad.square(est - noise))


def contrastive_loss(estimator, m_gt, m_pre, sched, rng=None, t=None, noise=None):
    """Mean absolute gap between the noise estimates of the two diffused states.

    Both states share the timestep and noise.  The ground-truth branch is a constant
    target and the estimator's parameters are held fixed, so gradients reach only
    whatever produced ``m_pre``.
    """
    m_gt = np.asarray(m_gt)
    if tuple(m_gt.shape) != tuple(m_pre.shape):
        raise ShapeError(f"contrastive loss needs matching shapes, got {m_gt.shape} and {m_pre.shape}")
    rows = 1 if m_gt.ndim == 1 else m_gt.shape[0]
    if t is None:
        t = sample_timesteps(rng, sched, rows)
    if noise is None:
        noise = rng.standard_normal(m_gt.shape)
    t = np.asarray(t).reshape(-1) if m_gt.ndim > 1 else np.asarray(t).reshape(())
    est = _frozen(estimator)
    target = ad.as_tensor(est(forward_diffuse(m_gt, t, noise, sched), t)).detach()
    pred = ad.as_tensor(est(forward_diffuse(m_pre, t, noise, sched), t))
    return ad.mean(ad.tabs(pred - target))


def reverse_sample(estimator, sched, rng, shape):
    """Ancestral DDPM sampling from pure noise (diagnostic only)."""
    est = _frozen(estimator)
    x = rng.standard_normal(shape)
    rows = shape[0] if len(shape) > 1 else None
    for t in range(sched.steps, 0, -1):
        beta, gamma = sched.betas[t - 1], sched.gammas[t - 1]
        eps = np.asarray(est(x, t if rows is None else np.full(rows, t)).data, dtype=np.float64)
        x = (x - beta / np.sqrt(1.0 - gamma) * eps) / np.sqrt(1.0 - beta)
        if t > 1:
            x = x + np.sqrt(beta) * rng.standard_normal(shape)
    return x


def schedule_header(sched):
    return {"steps": sched.steps, "beta_min": float(sched.betas[0]), "beta_max": float(sched.betas[-1])}


def save_estimator(path, estimator, sched, step=0):
    header = {
        "kind": "dtmd",
        "n_teeth": estimator.cfg.n_teeth,
        "hidden": list(estimator.cfg.hidden),
        "time_dim": estimator.cfg.time_dim,
        "seed": estimator.cfg.seed,
        "schedule": schedule_header(sched),
        "step": int(step),
    }
    ad.save_checkpoint(path, [(n, p.data) for n, p in estimator.named_parameters()], header)


def load_estimator(path, dtype=np.float32):
    header, arrays = ad.load_checkpoint(path)
    if header.get("kind") != "dtmd":
        raise CheckpointError(f"{path}: expected a DTMD checkpoint, found kind={header.get('kind')!r}")
    try:
        cfg = EstimatorConfig(header["n_teeth"], header["hidden"], header["time_dim"], header.get("seed", 1))
    except KeyError as exc:
        raise CheckpointError(f"{path}: header does not describe an estimator ({exc})") from exc
    expected = {f"{name}.{s}": shape for name, fi, fo in _estimator_shapes(cfg) for s, shape in (("w", (fi, fo)), ("b", (fo,)))}
    if {n: a.shape for n, a in arrays.items()} != expected:
        raise CheckpointError(f"{path}: parameter shapes do not match the declared estimator config")
    sched = build_schedule(**header["schedule"])
    params = {n: ad.parameter(arrays[n].astype(dtype), n) for n in expected}
    return NoiseEstimator(cfg, params), sched, header
