"""Geometry losses, the weighted training objective, and the TRE/AAE metrics."""

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .errors import InsufficientDataError, InvalidArgumentError


@dataclass(frozen=True)
class LossWeights:
    centroid: float = 0.1
    denoise: float = 0.01
    diffusion: float = 0.1

    def __post_init__(self):
        if min(self.centroid, self.denoise, self.diffusion) < 0:
            raise InvalidArgumentError(f"loss weights must be non-negative, got {self}")


def _valid_mask(validity, dtype):
    validity = np.asarray(validity, dtype=bool)
    counts = validity.sum(axis=-1)
    if np.any(counts == 0):
        raise InvalidArgumentError("no valid teeth: loss is undefined")
    return validity.astype(dtype), counts


def reconstruction_loss_t(pred_points, target_points, validity):
    """Mean over valid points of the per-point L1 distance; averaged over the batch.

    ``pred_points`` is a ``(B, M, P, 3)`` tensor, ``target_points`` a constant array.
    """
    pred_points = ad.as_tensor(pred_points)
    mask, counts = _valid_mask(validity, pred_points.dtype)
    n_points = pred_points.shape[2]
    diff = ad.tabs(pred_points - np.asarray(target_points, dtype=pred_points.dtype))
    per_sample = (diff * mask[:, :, None, None]).sum(axis=(1, 2, 3))
    return (per_sample * (1.0 / (counts * n_points)).astype(pred_points.dtype)).mean()


def centroid_loss_t(pred_points, target_points, validity):
    """Mean over valid teeth of the L1 distance between centroids; averaged over the batch."""
    pred_points = ad.as_tensor(pred_points)
    mask, counts = _valid_mask(validity, pred_points.dtype)
    pred_c = pred_points.mean(axis=2)
    target_c = np.asarray(target_points, dtype=pred_points.dtype).mean(axis=2)
    per_sample = (ad.tabs(pred_c - target_c) * mask[:, :, None]).sum(axis=(1, 2))
    return (per_sample * (1.0 / counts).astype(pred_points.dtype)).mean()


def _clouds(pred, target, dentition):
    pts = dentition.points
    return geo.apply_transform(pred, pts)[None], geo.apply_transform(target, pts)[None], dentition.validity[None]


def reconstruction_loss(pred, target, dentition):
    """L_rec for one sample given predicted and target ``(M, 4, 4)`` transforms."""
    p, t, v = _clouds(pred, target, dentition)
    return float(reconstruction_loss_t(ad.Tensor(p), t, v).data)


def centroid_loss(pred, target, dentition):
    p, t, v = _clouds(pred, target, dentition)
    return float(centroid_loss_t(ad.Tensor(p), t, v).data)


COMPONENTS = ("rec", "center", "denoi", "diffusion")


def total_loss(components, weights, stage):
    """Weighted objective; stage 2 drops the diffusion term (its estimator is frozen)."""
    if stage not in (1, 2):
        raise InvalidArgumentError(f"stage must be 1 or 2, got {stage}")
    if not isinstance(components, dict):
        components = dict(zip(COMPONENTS, components))
    total = components["rec"] + weights.centroid * components["center"] + weights.denoise * components["denoi"]
    if stage == 1:
        total = total + weights.diffusion * components["diffusion"]
    return total


def tre(pred_points, target_points, validity):
    """Mean Euclidean distance between positionally corresponding valid points."""
    pred_points = np.asarray(pred_points, dtype=np.float64)
    target_points = np.asarray(target_points, dtype=np.float64)
    validity = np.asarray(validity, dtype=bool)
    if not validity.any():
        raise InvalidArgumentError("no valid teeth: TRE is undefined")
    d = np.linalg.norm(pred_points[validity] - target_points[validity], axis=-1)
    return float(d.mean())


def aae(pred_points, target_points, validity):
    """Mean distance of predicted tooth centroids to the arch curve fitted on target centroids."""
    validity = np.asarray(validity, dtype=bool)
    if validity.sum() < geo.ARCH_DEGREE + 1:
        raise InsufficientDataError(f"AAE needs at least {geo.ARCH_DEGREE + 1} valid teeth, got {validity.sum()}")
    curve = geo.fit_arch_curve(geo.centroid(np.asarray(target_points, dtype=np.float64)), validity)
    pred_c = geo.centroid(np.asarray(pred_points, dtype=np.float64))[validity]
    return float(np.mean([geo.point_to_curve_distance(c, curve) for c in pred_c]))


@dataclass
class MetricsReport:
    ids: list = field(default_factory=list)
    tre: list = field(default_factory=list)
    aae: list = field(default_factory=list)

    def add(self, sample_id, tre_value, aae_value):
        self.ids.append(sample_id)
        self.tre.append(float(tre_value))
        self.aae.append(float(aae_value))

    def __len__(self):
        return len(self.ids)

    # std is the population std over samples
    @property
    def tre_mean(self):
        return float(np.mean(self.tre))

    @property
    def tre_std(self):
        return float(np.std(self.tre))

    @property
    def aae_mean(self):
        return float(np.mean(self.aae))

    @property
    def aae_std(self):
        return float(np.std(self.aae))

    def summary(self):
        return {"tre_mean": self.tre_mean, "tre_std": self.tre_std, "aae_mean": self.aae_mean, "aae_std": self.aae_std}

    def to_json(self):
        rows = [{"id": i, "tre": t, "aae": a} for i, t, a in zip(self.ids, self.tre, self.aae)]
        return json.dumps({**self.summary(), "samples": rows}, indent=2)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "tre", "aae"])
        for row in zip(self.ids, self.tre, self.aae):
            w.writerow([row[0], repr(row[1]), repr(row[2])])
        return buf.getvalue()
