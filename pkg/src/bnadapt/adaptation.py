"""Source-free adaptation driven by batch-norm statistics.

Per step, on an unlabeled target batch:

1. forward in ``AdaptTarget`` mode with the decayed momentum ``eta_t``, which
   blends each layer's target batch statistics with the frozen source ones;
2. per channel, measure how far the standardized target mean sits from the
   source one and turn those distances into transferability weights (closer
   channels weigh more, the weights average to one);
3. minimize the weighted L1 drift of gamma/beta away from their source values
   plus ``lambda_t`` times the mean per-pixel prediction entropy, with
   ``lambda_t`` falling linearly over the run.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import AdaptTarget, BatchNorm2d, emd_momentum
from .rng import stream
from .segnet import ToyUNet, sgd_step
from .tensor import Tensor

logger = logging.getLogger(__name__)

LOG_EPS = 1e-12


@dataclass
class AdaptSchedule:
    eta0: float = 0.9
    tau: float = 1.0
    lambda_start: float = 10.0
    lambda_end: float = 0.0
    total: int = 100
    t: int = 0

    def __post_init__(self):
        if not 0.0 <= self.eta0 <= 1.0:
            raise ValueError(f"eta0 must lie in [0, 1], got {self.eta0}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.total < 0:
            raise ValueError("total iterations must be non-negative")
        if not 0 <= self.t <= self.total:
            raise ValueError(f"iteration {self.t} outside [0, {self.total}]")

    def eta_at(self, t: int) -> float:
        return emd_momentum(t, self.eta0, self.tau)


def lambda_at(schedule: AdaptSchedule, t: int) -> float:
    if not 0 <= t <= schedule.total:
        raise ValueError(f"iteration {t} outside [0, {schedule.total}]")
    if schedule.total == 0:
        return schedule.lambda_start
    return schedule.lambda_start + (schedule.lambda_end - schedule.lambda_start) * t / schedule.total


@dataclass(frozen=True)
class AdaptFlags:
    adaptive_channels: bool = True
    use_se: bool = True
    freeze_non_bn: bool = False


# -- transferability --------------------------------------------------------


def channel_distance(source_mean, source_var, batch_mean, batch_var, eps: float = 1e-5) -> np.ndarray:
    """|mu_s / sqrt(var_s + eps) - mu_t / sqrt(var_t + eps)| per channel."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    sm, sv = np.asarray(source_mean, np.float64), np.asarray(source_var, np.float64)
    bm, bv = np.asarray(batch_mean, np.float64), np.asarray(batch_var, np.float64)
    if np.any(sv < 0) or np.any(bv < 0):
        raise ValueError("variances must be non-negative")
    return np.abs(sm / np.sqrt(sv + eps) - bm / np.sqrt(bv + eps))


def layer_distance(bn: BatchNorm2d) -> np.ndarray:
    """Distance between a layer's source snapshot and its last batch statistics."""
    if not bn.frozen:
        raise RuntimeError("layer has no source snapshot")
    if bn.last_batch_mean is None:
        raise RuntimeError("layer has not seen a batch yet")
    return channel_distance(bn.source_mean, bn.source_var, bn.last_batch_mean, bn.last_batch_var, bn.eps)


@dataclass
class TransferabilityWeights:
    distances: list[np.ndarray]
    weights: list[np.ndarray]

    @property
    def n_channels(self) -> int:
        return sum(len(w) for w in self.weights)

    def flat_weights(self) -> np.ndarray:
        return np.concatenate(self.weights)

    def flat_distances(self) -> np.ndarray:
        return np.concatenate(self.distances)


def transferability_weights(distances) -> TransferabilityWeights:
    """alpha = N * (1 + d)^-1 / sum (1 + d)^-1 over all N channels of all layers."""
    per_layer = [np.asarray(d, np.float64).reshape(-1) for d in distances]
    if sum(len(d) for d in per_layer) == 0:
        raise ValueError("need at least one channel")
    flat = np.concatenate(per_layer)
    if np.any(flat < 0) or not np.all(np.isfinite(flat)):
        raise ValueError("distances must be finite and non-negative")
    inv = 1.0 / (1.0 + flat)
    alpha = len(flat) * inv / inv.sum()
    splits = np.cumsum([len(d) for d in per_layer])[:-1]
    return TransferabilityWeights(per_layer, np.split(alpha, splits))


def uniform_weights(layers: list[BatchNorm2d], distances=None) -> TransferabilityWeights:
    ones = [np.ones(bn.channels) for bn in layers]
    dist = distances if distances is not None else [np.zeros(bn.channels) for bn in layers]
    return TransferabilityWeights(list(dist), ones)


# -- losses -----------------------------------------------------------------


def hbs_loss(layers: list[BatchNorm2d], alpha: TransferabilityWeights) -> Tensor:
    """sum over channels of (1 + alpha) * (|gamma_s - gamma| + |beta_s - beta|)."""
    if len(alpha.weights) != len(layers) or any(len(w) != bn.channels for w, bn in zip(alpha.weights, layers)):
        raise ValueError(
            f"weights cover {[len(w) for w in alpha.weights]} channels but layers have {[bn.channels for bn in layers]}"
        )
    total = None
    for bn, a in zip(layers, alpha.weights):
        if not bn.frozen:
            raise RuntimeError("hbs_loss needs frozen source snapshots")
        w = Tensor((1.0 + a).astype(bn.gamma.dtype))
        drift = T.add(T.absolute(T.sub(bn.gamma, bn.source_gamma)), T.absolute(T.sub(bn.beta, bn.source_beta)))
        term = T.sum_all(T.mul(drift, w))
        total = term if total is None else T.add(total, term)
    return total


def se_loss(probs: Tensor) -> Tensor:
    """Mean per-pixel Shannon entropy of a softmax output (last axis = classes)."""
    probs = T.as_tensor(probs)
    p = probs.data
    if p.ndim < 1 or p.shape[-1] < 1:
        raise ValueError("probabilities need a class axis")
    if np.any(p < 0) or np.any(p > 1) or np.max(np.abs(p.sum(axis=-1) - 1.0)) > 1e-6:
        raise ValueError("input is not a per-pixel probability distribution")
    npix = p.size // p.shape[-1]
    plogp = T.mul(probs, T.log(T.add(probs, LOG_EPS)))
    return T.scale(T.sum_all(plogp), -1.0 / npix)


# -- loop -------------------------------------------------------------------


@dataclass
class StepReport:
    t: int
    eta_t: float
    lambda_t: float
    loss_total: float
    loss_hbs: float
    loss_se: float
    mean_d: float
    max_d: float
    mean_alpha: float
    min_alpha: float
    max_alpha: float
    gamma_delta: float
    beta_delta: float
    class_fractions: list[float] = field(default_factory=list)
    layer_mean_d: list[float] = field(default_factory=list)

    @property
    def weighted_se(self) -> float:
        return self.lambda_t * self.loss_se


LOG_COLUMNS = [
    "t", "eta_t", "lambda_t", "loss_total", "loss_hbs", "loss_se", "mean_d", "max_d",
    "lambda_se", "mean_alpha", "min_alpha", "max_alpha", "gamma_delta", "beta_delta",
]


def format_log(reports: list[StepReport], num_classes: int = 4) -> str:
    buf = io.StringIO()
    buf.write(",".join(LOG_COLUMNS + [f"frac_class{k}" for k in range(num_classes)]) + "\n")
    for r in reports:
        vals = [r.eta_t, r.lambda_t, r.loss_total, r.loss_hbs, r.loss_se, r.mean_d, r.max_d, r.weighted_se,
                r.mean_alpha, r.min_alpha, r.max_alpha, r.gamma_delta, r.beta_delta, *r.class_fractions]
        buf.write(str(r.t) + "," + ",".join(repr(float(v)) for v in vals) + "\n")
    return buf.getvalue()


def parse_log(text: str) -> list[dict[str, float]]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split(",")
    return [dict(zip(header, map(float, ln.split(",")))) for ln in lines[1:]]


def snapshot_drift(layers: list[BatchNorm2d]) -> tuple[float, float]:
    """Total |gamma - gamma_s| and |beta - beta_s| over all channels."""
    g = sum(float(np.abs(bn.gamma.data.astype(np.float64) - bn.source_gamma).sum()) for bn in layers)
    b = sum(float(np.abs(bn.beta.data.astype(np.float64) - bn.source_beta).sum()) for bn in layers)
    return g, b


def adapt_step(model: ToyUNet, batch: np.ndarray, schedule: AdaptSchedule, flags: AdaptFlags, lr: float) -> StepReport:
    """One adaptation update; advances ``schedule.t``."""
    if schedule.t >= schedule.total:
        raise RuntimeError(f"schedule exhausted at t={schedule.t}")
    if not model.frozen:
        raise RuntimeError("model has no frozen source snapshot")
    if len(batch) < 2:
        raise ValueError("adaptation batch needs at least 2 images")
    t = schedule.t
    eta_t = schedule.eta_at(t)
    lam = lambda_at(schedule, t) if flags.use_se else 0.0
    layers = model.bn_layers()

    probs = model.forward(batch, AdaptTarget(eta_t))
    dists = [layer_distance(bn) for bn in layers]
    alpha = transferability_weights(dists) if flags.adaptive_channels else uniform_weights(layers, dists)

    l_hbs = hbs_loss(layers, alpha)
    l_se = se_loss(probs)
    total = T.add(l_hbs, T.scale(l_se, lam)) if lam != 0.0 else l_hbs

    params = model.bn_params() if flags.freeze_non_bn else model.params()
    T.zero_grad(model.params())
    T.backward(total)
    sgd_step(params, lr)
    T.zero_grad(model.params())
    schedule.t += 1
    model.adapt_iters += 1

    flat_d = alpha.flat_distances()
    flat_a = alpha.flat_weights()
    pred = probs.data.argmax(axis=-1)
    k = probs.shape[-1]
    g_delta, b_delta = snapshot_drift(layers)
    return StepReport(
        t=t,
        eta_t=eta_t,
        lambda_t=lam,
        loss_total=float(total.data),
        loss_hbs=float(l_hbs.data),
        loss_se=float(l_se.data),
        mean_d=float(flat_d.mean()),
        max_d=float(flat_d.max()),
        mean_alpha=float(flat_a.mean()),
        min_alpha=float(flat_a.min()),
        max_alpha=float(flat_a.max()),
        gamma_delta=g_delta,
        beta_delta=b_delta,
        class_fractions=[float(x) for x in np.bincount(pred.ravel(), minlength=k) / pred.size],
        layer_mean_d=[float(d.mean()) for d in dists],
    )


def batch_order(n: int, batch_size: int, steps: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Indices for ``steps`` batches, reshuffling whenever a pass runs out."""
    if n < batch_size:
        raise ValueError(f"dataset has {n} images, fewer than batch size {batch_size}")
    out: list[np.ndarray] = []
    perm, pos = rng.permutation(n), 0
    while len(out) < steps:
        if pos + batch_size > n:
            perm, pos = rng.permutation(n), 0
        out.append(perm[pos : pos + batch_size])
        pos += batch_size
    return out


def adapt_run(
    model: ToyUNet,
    images: np.ndarray,
    schedule: AdaptSchedule,
    flags: AdaptFlags = AdaptFlags(),
    lr: float = 1e-3,
    batch_size: int = 16,
    seed: int = 0,
) -> list[StepReport]:
    """Run the remaining ``schedule.total - schedule.t`` steps on ``images``."""
    if len(images) == 0:
        raise ValueError("target dataset is empty")
    if not model.frozen:
        raise RuntimeError("model has no frozen source snapshot")
    steps = schedule.total - schedule.t
    rng = stream(seed, "shuffle/target")
    reports = []
    for idx in batch_order(len(images), min(batch_size, len(images)), steps, rng):
        rep = adapt_step(model, images[idx], schedule, flags, lr)
        reports.append(rep)
        if rep.t % 10 == 0:
            logger.info("t=%d eta=%.3g lambda=%.3g hbs=%.5f se=%.5f", rep.t, rep.eta_t, rep.lambda_t, rep.loss_hbs, rep.loss_se)
    model.phase = "adapted"
    if not all(math.isfinite(r.loss_total) for r in reports):
        raise FloatingPointError("adaptation produced a non-finite loss")
    return reports
