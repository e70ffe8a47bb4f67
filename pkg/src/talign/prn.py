"""Point cloud regression network: two PointNet-style encoders and an MLP decoder.

The global encoder sees every point of the dentition, the local encoder each tooth
on its own; per tooth, ``[global | local_i]`` is decoded to 16 numbers that are read
row-major as a 4x4 transform.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError

IDENTITY_FLAT = np.eye(4).reshape(16)

# row-major flat indices of R^T and D inside a 16-vector, so that p @ R^T + D == R p + D
_RT_INDEX = np.array([0, 4, 8, 1, 5, 9, 2, 6, 10])
_D_INDEX = np.array([3, 7, 11])


@dataclass
class PRNConfig:
    encoder_channels: list = field(default_factory=lambda: [64, 128, 1024])
    decoder_channels: list = field(default_factory=lambda: [512, 256, 16])
    seed: int = 0

    def __post_init__(self):
        if self.decoder_channels[-1] != 16:
            raise ValueError(f"decoder must end in 16 channels (a 4x4 matrix), got {self.decoder_channels}")


def _layer_shapes(cfg):
    shapes = []
    for enc in ("enc_g", "enc_l"):
        fan_in = 3
        for i, width in enumerate(cfg.encoder_channels):
            shapes.append((f"{enc}.{i}", fan_in, width))
            fan_in = width
    fan_in = 2 * cfg.encoder_channels[-1]
    for i, width in enumerate(cfg.decoder_channels):
        shapes.append((f"dec.{i}", fan_in, width))
        fan_in = width
    return shapes


def init_layers(shapes, seed, dtype):
    """Weights uniform in +-sqrt(1/fan_in), zero biases, drawn layer by layer."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, fan_in, fan_out in shapes:
        bound = np.sqrt(1.0 / fan_in)
        params[f"{name}.w"] = ad.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype), f"{name}.w")
        params[f"{name}.b"] = ad.parameter(np.zeros(fan_out, dtype=dtype), f"{name}.b")
    return params


def parameter_count(cfg):
    return sum(fan_in * fan_out + fan_out for _, fan_in, fan_out in _layer_shapes(cfg))


class PRNModel:
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
        return PRNModel(self.cfg, {n: ad.parameter(p.data.astype(dtype), n) for n, p in self.params.items()})

    def copy(self):
        return self.astype(self.dtype)

    def _mlp(self, prefix, x, n_layers, final_relu):
        for i in range(n_layers):
            x = ad.linear(x, self.params[f"{prefix}.{i}.w"], self.params[f"{prefix}.{i}.b"])
            if final_relu or i < n_layers - 1:
                x = ad.relu(x)
        return x

    def encode_global_t(self, points):
        """``(B, M, P, 3)`` -> ``(B, C)``: shared MLP over all M*P points, then max."""
        b, m, p, _ = points.shape
        x = ad.as_tensor(points).reshape(b, m * p, 3)
        x = self._mlp("enc_g", x, len(self.cfg.encoder_channels), final_relu=True)
        return ad.max_over_axis(x, axis=1)

    def encode_local_t(self, points):
        """``(B, M, P, 3)`` -> ``(B, M, C)``: shared MLP per point, max within each tooth."""
        x = self._mlp("enc_l", ad.as_tensor(points), len(self.cfg.encoder_channels), final_relu=True)
        return ad.max_over_axis(x, axis=2)

    def raw_t(self, points):
        """Decoder output ``(B, M, 16)`` before any masking or last-row fix."""
        points = ad.as_tensor(np.asarray(points, dtype=self.dtype))
        b, m = points.shape[:2]
        g = self.encode_global_t(points)
        loc = self.encode_local_t(points)
        g = ad.broadcast_to(g.reshape(b, 1, g.shape[-1]), (b, m, g.shape[-1]))
        feat = ad.concat(g, loc, axis=-1)
        return self._mlp("dec", feat, len(self.cfg.decoder_channels), final_relu=False)


def init_prn(cfg=None, dtype=np.float32):
    cfg = cfg or PRNConfig()
    return PRNModel(cfg, init_layers(_layer_shapes(cfg), cfg.seed, dtype))


def mask_raw(raw, validity):
    """Replace invalid-tooth rows of ``raw`` ``(B, M, 16)`` by the flattened identity."""
    valid = np.asarray(validity, dtype=raw.dtype)[..., None]
    return raw * valid + (1.0 - valid) * IDENTITY_FLAT.astype(raw.dtype)


def transform_points(flat, points):
    """Apply flat transforms ``(B, M, 16)`` to points ``(B, M, P, 3)``; the fourth row is ignored."""
    b, m = flat.shape[:2]
    rot_t = ad.take(flat, _RT_INDEX, axis=-1).reshape(b, m, 3, 3)
    disp = ad.take(flat, _D_INDEX, axis=-1).reshape(b, m, 1, 3)
    pts = ad.as_tensor(np.asarray(points, dtype=flat.dtype))
    return ad.matmul(pts, rot_t) + disp


def flat_to_matrices(flat):
    """Flat 16-vectors to 4x4 matrices with the last row forced to ``[0, 0, 0, 1]``."""
    mats = np.array(flat, dtype=np.float64).reshape(flat.shape[:-1] + (4, 4))
    mats[..., 3, :] = (0.0, 0.0, 0.0, 1.0)
    return mats


def _batch(dentitions):
    if not isinstance(dentitions, (list, tuple)):
        dentitions = [dentitions]
    points = np.stack([d.points for d in dentitions])
    validity = np.stack([d.validity for d in dentitions])
    return points, validity


def encode_global(model, dentition):
    points, _ = _batch(dentition)
    return model.encode_global_t(points.astype(model.dtype)).data[0]


def encode_local(model, dentition):
    points, _ = _batch(dentition)
    return model.encode_local_t(points.astype(model.dtype)).data[0]


def regress(model, dentitions):
    """Predicted ``(M, 4, 4)`` transforms (or ``(B, M, 4, 4)`` for a list of dentitions)."""
    single = not isinstance(dentitions, (list, tuple))
    points, validity = _batch(dentitions)
    raw = model.raw_t(points)
    mats = flat_to_matrices(mask_raw(raw, validity).data)
    return mats[0] if single else mats


def regress_raw(model, dentition):
    """The decoder's untouched 16 values per tooth, ``(M, 16)``."""
    points, _ = _batch(dentition)
    return model.raw_t(points).data[0]


def save_prn(path, model, step=0):
    header = {
        "kind": "prn",
        "encoder_channels": list(model.cfg.encoder_channels),
        "decoder_channels": list(model.cfg.decoder_channels),
        "seed": model.cfg.seed,
        "step": int(step),
    }
    ad.save_checkpoint(path, [(n, p.data) for n, p in model.named_parameters()], header)


def load_prn(path, dtype=np.float32):
    header, arrays = ad.load_checkpoint(path)
    if header.get("kind") != "prn":
        raise CheckpointError(f"{path}: expected a PRN checkpoint, found kind={header.get('kind')!r}")
    try:
        cfg = PRNConfig(header["encoder_channels"], header["decoder_channels"], header.get("seed", 0))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: header does not describe a PRN ({exc})") from exc
    expected = {f"{name}.{s}": shape for name, fi, fo in _layer_shapes(cfg) for s, shape in (("w", (fi, fo)), ("b", (fo,)))}
    got = {n: a.shape for n, a in arrays.items()}
    if got != expected:
        raise CheckpointError(f"{path}: parameter shapes do not match the declared PRN config")
    params = {n: ad.parameter(arrays[n].astype(dtype), n) for n in expected}
    return PRNModel(cfg, params), header
