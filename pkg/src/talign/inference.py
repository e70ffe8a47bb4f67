"""PRN-only inference and scoring. Nothing here touches the diffusion module."""

import numpy as np

from . import geometry as geo
from .losses import MetricsReport, aae, tre
from .prn import regress


def predict(model, samples, batch_size=4):
    """Predicted ``(M, 4, 4)`` transform sets, one per sample."""
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        out.extend(regress(model, [s.input for s in chunk]))
    return out


def evaluate(model, samples, batch_size=4):
    """TRE/AAE of the model's alignment against each sample's target alignment."""
    report = MetricsReport()
    for s, pred in zip(samples, predict(model, samples, batch_size)):
        score(report, s, pred)
    return report


def score(report, sample, pred):
    pts = sample.input.points
    pred_pts = geo.apply_transform(pred, pts)
    target_pts = geo.apply_transform(sample.target, pts)
    report.add(sample.id, tre(pred_pts, target_pts, sample.validity), aae(pred_pts, target_pts, sample.validity))
    return report


def evaluate_transforms(samples, transforms):
    """Score externally supplied transform sets (e.g. the targets themselves)."""
    report = MetricsReport()
    for s, t in zip(samples, transforms):
        score(report, s, np.asarray(t))
    return report
