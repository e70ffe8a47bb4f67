"""Staged joint training of the regression network and the noise estimator.

Stage 1 updates both models: the regressor from the geometry losses plus the
contrastive denoising term, the estimator from the diffusion loss.  Stage 2 keeps
the estimator fixed and only refines the regressor.
"""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dtmd
from . import geometry as geo
from . import prn as prn_mod
from .dataset import AugmentConfig, augment_multi_rotation, augment_single_translation
from .errors import NumericError
from .inference import evaluate
from .losses import LossWeights, centroid_loss_t, reconstruction_loss_t, total_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs_stage1: int = 200
    epochs_stage2: int = 200
    batch_size: int = 4
    lr_prn: float = 0.01
    lr_dtmd: float = 0.005
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    augment_prob: float = 0.5
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    val_every: int = 10
    schedule_steps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    encoder_channels: list = field(default_factory=lambda: [64, 128, 1024])
    decoder_channels: list = field(default_factory=lambda: [512, 256, 16])
    estimator_hidden: list = field(default_factory=lambda: [512, 512])
    time_dim: int = 64

    def __post_init__(self):
        if self.epochs_stage1 < 1 or self.epochs_stage2 < 1 or self.batch_size < 1:
            raise ValueError("epochs must be positive and batch_size >= 1")


@dataclass
class Batch:
    points: np.ndarray  # (B, M, P, 3)
    validity: np.ndarray  # (B, M)
    target_points: np.ndarray  # (B, M, P, 3)
    m_gt: np.ndarray  # (B, M*16)


def make_batch(samples, dtype=np.float32):
    points = np.stack([s.input.points for s in samples])
    targets = np.stack([s.target for s in samples])
    return Batch(
        points=points.astype(dtype),
        validity=np.stack([s.validity for s in samples]),
        target_points=geo.apply_transform(targets, points).astype(dtype),
        m_gt=dtmd.normalize_transforms(targets).astype(dtype),
    )


@dataclass
class DiffusionDraw:
    """One timestep and one noise state per sample, shared by both diffusion terms."""

    t: np.ndarray
    noise: np.ndarray

    @classmethod
    def sample(cls, rng, sched, batch):
        rows = batch.m_gt.shape[0]
        t = dtmd.sample_timesteps(rng, sched, rows)
        return cls(t, rng.standard_normal(batch.m_gt.shape).astype(batch.m_gt.dtype))


def objective(model, estimator, batch, draw, weights, sched, stage=1, frozen_estimator=None):
    """Total loss tensor and its four components.

    ``frozen_estimator`` is the estimator seen by the contrastive term; it defaults to a
    gradient-free view of ``estimator``.  In stage 2 the diffusion term is still
    evaluated (for the trace) but through a frozen view and left out of the total.
    """
    raw = model.raw_t(batch.points)
    flat = prn_mod.mask_raw(raw, batch.validity)
    pred_points = prn_mod.transform_points(flat, batch.points)
    l_rec = reconstruction_loss_t(pred_points, batch.target_points, batch.validity)
    l_center = centroid_loss_t(pred_points, batch.target_points, batch.validity)
    b, m = flat.shape[:2]
    m_pre = (flat - prn_mod.IDENTITY_FLAT.astype(flat.dtype)).reshape(b, m * 16)
    denoiser = frozen_estimator if frozen_estimator is not None else estimator
    l_denoi = dtmd.contrastive_loss(denoiser, batch.m_gt, m_pre, sched, t=draw.t, noise=draw.noise)
    diff_est = estimator if stage == 1 else estimator.frozen()
    l_diff = dtmd.diffusion_loss(diff_est, batch.m_gt, sched, t=draw.t, noise=draw.noise)
    comps = {"rec": l_rec, "center": l_center, "denoi": l_denoi, "diffusion": l_diff}
    return total_loss(comps, weights, stage), comps


def _step(model, estimator, batch, cfg, sched, rng, opt_prn, opt_dtmd, stage):
    draw = DiffusionDraw.sample(rng, sched, batch)
    ad.zero_grad(model.parameters())
    if stage == 1:
        ad.zero_grad(estimator.parameters())
    total, comps = objective(model, estimator, batch, draw, cfg.weights, sched, stage=stage)
    values = {k: float(v.data) for k, v in comps.items()}
    if not all(np.isfinite(list(values.values()))) or not np.isfinite(total.data):
        raise NumericError(f"non-finite loss in stage {stage}: {values}")
    ad.backward(total)
    params = model.parameters()
    ad.adam_update([p.data for p in params], [p.grad for p in params], opt_prn, cfg.lr_prn)
    if stage == 1:
        est_params = estimator.parameters()
        ad.adam_update([p.data for p in est_params], [p.grad for p in est_params], opt_dtmd, cfg.lr_dtmd)
    return values


def train_step_stage1(model, estimator, batch, cfg, sched, rng, opt_prn, opt_dtmd):
    """Joint step: regressor and estimator each take one Adam step. Returns component values."""
    return _step(model, estimator, batch, cfg, sched, rng, opt_prn, opt_dtmd, stage=1)


def train_step_stage2(model, frozen_estimator, batch, cfg, sched, rng, opt_prn):
    """Regressor-only step against a fixed estimator."""
    return _step(model, frozen_estimator, batch, cfg, sched, rng, opt_prn, None, stage=2)


@dataclass
class TrainArtifacts:
    prn: prn_mod.PRNModel
    estimator: dtmd.NoiseEstimator
    schedule: dtmd.NoiseSchedule
    trace: list  # dicts, one per epoch
    val_history: list  # dicts {epoch, tre_mean, tre_std, aae_mean, aae_std}
    prn_step: int = 0
    dtmd_step: int = 0
    stage1_estimator: dtmd.NoiseEstimator = None
    paths: dict = field(default_factory=dict)


TRACE_COLUMNS = ("epoch", "stage", "l_rec", "l_center", "l_denoi", "l_diffusion", "val_tre", "val_aae")


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow(["" if row.get(c) is None else repr(row[c]) if isinstance(row[c], float) else row[c] for c in TRACE_COLUMNS])


def _augment(sample, cfg, rng):
    if rng.random() >= cfg.augment_prob:
        return sample
    sample = augment_multi_rotation(sample, cfg.augment, rng)
    return augment_single_translation(sample, cfg.augment, rng)


def _snapshot(models):
    return [[p.data.copy() for p in m.parameters()] for m in models]


def _restore(models, snap):
    for m, arrays in zip(models, snap):
        for p, a in zip(m.parameters(), arrays):
            p.data[...] = a


def init_models(cfg, n_teeth=32):
    model = prn_mod.init_prn(prn_mod.PRNConfig(list(cfg.encoder_channels), list(cfg.decoder_channels), seed=cfg.seed))
    est_cfg = dtmd.EstimatorConfig(n_teeth, list(cfg.estimator_hidden), cfg.time_dim, seed=cfg.seed + 1)
    return model, dtmd.init_estimator(est_cfg)


def train_staged(train_set, val_set, cfg=None, out_dir=None, model=None, estimator=None):
    """Run both stages; write checkpoints and traces to ``out_dir`` when given."""
    cfg = cfg or TrainConfig()
    if not train_set or not val_set:
        raise ValueError("training and validation splits must be non-empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if model is None or estimator is None:
        model, estimator = init_models(cfg, train_set[0].input.n_teeth)
    sched = dtmd.build_schedule(cfg.schedule_steps, cfg.beta_min, cfg.beta_max)
    shuffle_rng, aug_rng, diff_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3))
    opt_prn, opt_dtmd = ad.AdamState(), ad.AdamState()
    arts = TrainArtifacts(model, estimator, sched, [], [])
    total_epochs = cfg.epochs_stage1 + cfg.epochs_stage2

    for epoch in range(1, total_epochs + 1):
        stage = 1 if epoch <= cfg.epochs_stage1 else 2
        snap = _snapshot([model, estimator])
        sums = dict.fromkeys(("rec", "center", "denoi", "diffusion"), 0.0)
        order = shuffle_rng.permutation(len(train_set))
        n_batches = 0
        try:
            for start in range(0, len(order), cfg.batch_size):
                chunk = [_augment(train_set[i], cfg, aug_rng) for i in order[start : start + cfg.batch_size]]
                batch = make_batch(chunk, model.dtype)
                if stage == 1:
                    vals = train_step_stage1(model, estimator, batch, cfg, sched, diff_rng, opt_prn, opt_dtmd)
                else:
                    vals = train_step_stage2(model, estimator, batch, cfg, sched, diff_rng, opt_prn)
                for k in sums:
                    sums[k] += vals[k]
                n_batches += 1
        except NumericError as exc:
            _restore([model, estimator], snap)
            log.error("epoch %d aborted, parameters reset to the start of the epoch: %s", epoch, exc)
            if out is not None:
                _write_checkpoints(out, arts, opt_prn, opt_dtmd)
            raise NumericError(f"epoch {epoch}: {exc}") from exc

        row = {"epoch": epoch, "stage": stage}
        row.update({f"l_{k}": v / n_batches for k, v in sums.items()})
        if epoch % cfg.val_every == 0 or epoch == total_epochs:
            report = evaluate(model, val_set, cfg.batch_size)
            row["val_tre"], row["val_aae"] = report.tre_mean, report.aae_mean
            arts.val_history.append({"epoch": epoch, **report.summary()})
        arts.trace.append(row)
        log.info("epoch %d stage %d rec %.4f center %.4f denoi %.4f diff %.4f", epoch, stage,
                 row["l_rec"], row["l_center"], row["l_denoi"], row["l_diffusion"])

        if epoch == cfg.epochs_stage1:
            arts.stage1_estimator = estimator.copy()
            if out is not None:
                path = out / "dtmd_stage1.ckpt"
                dtmd.save_estimator(path, estimator, sched, step=opt_dtmd.step)
                arts.paths["dtmd_stage1"] = path

    arts.prn_step, arts.dtmd_step = opt_prn.step, opt_dtmd.step
    if out is not None:
        _write_checkpoints(out, arts, opt_prn, opt_dtmd)
        write_trace_csv(out / "trace.csv", arts.trace)
        (out / "val_metrics.json").write_text(json.dumps(arts.val_history, indent=2) + "\n")
        (out / "train_config.json").write_text(json.dumps(asdict(cfg), indent=2, default=_json_default) + "\n")
        arts.paths.update(trace=out / "trace.csv", val_metrics=out / "val_metrics.json")
    return arts


def _write_checkpoints(out, arts, opt_prn, opt_dtmd):
    prn_mod.save_prn(out / "prn.ckpt", arts.prn, step=opt_prn.step)
    dtmd.save_estimator(out / "dtmd.ckpt", arts.estimator, arts.schedule, step=opt_dtmd.step)
    arts.paths.update(prn=out / "prn.ckpt", dtmd=out / "dtmd.ckpt")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")
