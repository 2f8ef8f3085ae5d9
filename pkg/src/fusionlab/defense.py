"""Defender-side checks: mask/pattern trigger reversal with MAD outlier scoring, and feature proximity."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attack import AttackModule, apply_trigger
from .autodiff import Adam, ContractError, Parameter, Tape, Tensor
from .vit import MicroViT

log = logging.getLogger(__name__)

MAD_SCALE = 1.4826
MAD_FLOOR = 1e-9
FLAG_THRESHOLD = 2.0


@dataclass
class DeployedModel:
    """What the defender can inspect: the backbone and the plugged-in module, never the trigger."""

    backbone: MicroViT
    attack: AttackModule | None = None

    @classmethod
    def from_state(cls, state) -> "DeployedModel":
        return cls(state.backbone, state.attack)

    def __call__(self, images) -> Tensor:
        return self.backbone(images, self.attack)

    def predict(self, images) -> np.ndarray:
        return self.backbone.predict(images, self.attack)

    def features(self, images, batch: int = 256) -> np.ndarray:
        out = []
        with ad.no_record():
            for i in range(0, len(images), batch):
                out.append(self.backbone.features(images[i:i + batch], self.attack).data)
        return np.concatenate(out)

    @property
    def classes(self) -> int:
        return self.backbone.config.classes


@dataclass
class ReversedTrigger:
    mask: np.ndarray  # (H, W)
    pattern: np.ndarray  # (H, W, C)
    target: int
    final_loss: float = float("nan")

    @property
    def l1(self) -> float:
        return float(self.mask.sum())

    def stamp(self, images) -> np.ndarray:
        return blend(np.asarray(images, dtype=np.float32), self.mask, self.pattern)


@dataclass
class AnomalyReport:
    l1: np.ndarray
    indices: np.ndarray
    flagged: list[int] = field(default_factory=list)
    median: float = 0.0
    mad: float = 0.0


@dataclass
class ProximityReport:
    target: int
    per_class_fraction: dict[int, float]
    per_class_mean_ratio: dict[int, float]
    fraction_closer_to_target: float
    skipped: list[int] = field(default_factory=list)


def blend(images, mask, pattern):
    """(1 - m) * x + m * pattern with the mask broadcast over channels."""
    if isinstance(images, Tensor) or isinstance(mask, Tensor):
        m = mask.reshape(*mask.shape, 1)
        return images * (1.0 - m) + m * pattern
    m = np.asarray(mask)[..., None]
    return ((1.0 - m) * images + m * pattern).astype(np.float32)


def reverse_trigger(model: DeployedModel, target: int, images, steps: int = 200, l1_weight: float = 0.01,
                    lr: float = 0.1, batch: int = 32, seed: int = 0) -> ReversedTrigger:
    """Search for the smallest blended mask that sends ``images`` to ``target``.

    Mask and pattern are sigmoids of free logits, so both stay in [0, 1].
    Only the deployed model's forward/backward is used.
    """
    if steps < 1:
        raise ContractError("steps must be >= 1")
    if not 0 <= target < model.classes:
        raise ContractError(f"target {target} outside [0, {model.classes})")
    images = np.asarray(images, dtype=np.float32)
    h, w, c = images.shape[1:]
    rng = np.random.default_rng([seed, 41, target])
    mask_logit = Parameter(rng.normal(-2.0, 0.1, (h, w)), name="nc.mask")
    pattern_logit = Parameter(rng.normal(0.0, 0.1, (h, w, c)), name="nc.pattern")
    opt = Adam([mask_logit, pattern_logit], lr)
    labels = np.full(min(batch, len(images)), target)
    loss_val = float("nan")
    for step in range(steps):
        idx = rng.choice(len(images), size=len(labels), replace=False)
        opt.zero_grad()
        with Tape() as tape:
            mask = ad.sigmoid(mask_logit)
            pattern = ad.sigmoid(pattern_logit)
            x = blend(Tensor._wrap(images[idx]), mask, pattern)
            loss = ad.cross_entropy(model(x), labels) + l1_weight * mask.sum()
        tape.backward(loss)
        opt.step()
        loss_val = float(loss.data)
    with ad.no_record():
        mask = ad.sigmoid(mask_logit).data.copy()
        pattern = ad.sigmoid(pattern_logit).data.copy()
    log.debug("reversal class %d: loss %.4f l1 %.2f", target, loss_val, mask.sum())
    return ReversedTrigger(mask, pattern, target, loss_val)


def anomaly_index(l1_norms) -> AnomalyReport:
    """|l1 - median| / (1.4826 * MAD + 1e-9); classes above 2 are flagged."""
    l1 = np.asarray(l1_norms, dtype=np.float64)
    if l1.size < 3:
        raise ContractError("anomaly index needs at least 3 classes")
    med = float(np.median(l1))
    mad = float(np.median(np.abs(l1 - med)))
    idx = np.abs(l1 - med) / (MAD_SCALE * mad + MAD_FLOOR)
    flagged = [int(i) for i in np.flatnonzero(idx > FLAG_THRESHOLD)]
    return AnomalyReport(l1, idx, flagged, med, mad)


def recovered_asr(model: DeployedModel, trig: ReversedTrigger, images, labels) -> float:
    keep = np.asarray(labels) != trig.target
    if not keep.any():
        return float("nan")
    return float((model.predict(trig.stamp(np.asarray(images)[keep])) == trig.target).mean())


@dataclass
class CleanseResult:
    triggers: list[ReversedTrigger]
    anomaly: AnomalyReport
    recovered_asr: list[float]

    def rows(self):
        for t, a, asr in zip(self.triggers, self.anomaly.indices, self.recovered_asr):
            yield t.target, t.l1, float(a), int(t.target in self.anomaly.flagged), asr


def neural_cleanse(model: DeployedModel, probe_images, eval_images, eval_labels, steps: int = 200,
                   l1_weight: float = 0.01, seed: int = 0, classes=None) -> CleanseResult:
    """Reverse a trigger for every class, score the mask norms, and measure each reversal's ASR."""
    classes = range(model.classes) if classes is None else classes
    trigs = [reverse_trigger(model, c, probe_images, steps, l1_weight, seed=seed) for c in classes]
    report = anomaly_index([t.l1 for t in trigs])
    asrs = [recovered_asr(model, t, eval_images, eval_labels) for t in trigs]
    return CleanseResult(trigs, report, asrs)


def feature_proximity(model: DeployedModel, delta, target: int, images, labels) -> ProximityReport:
    """Distance ratio of poisoned features to the target centroid versus their own-class centroid.

    Centroids come from clean features. A ratio below 1 means the poisoned
    sample sits closer to the target class than to its own.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    clean = model.features(images)
    poisoned = model.features(apply_trigger(images, np.asarray(delta, dtype=np.float32)))
    centroids, skipped = {}, []
    for c in np.unique(labels):
        sel = labels == c
        if sel.sum() < 2:
            log.warning("class %d has fewer than 2 samples; skipped", c)
            skipped.append(int(c))
            continue
        centroids[int(c)] = clean[sel].mean(axis=0)
    if target not in centroids:
        raise ContractError(f"target class {target} has no usable centroid")
    fractions, means, hits, total = {}, {}, 0, 0
    for c, centre in centroids.items():
        sel = labels == c
        d_target = np.linalg.norm(poisoned[sel] - centroids[target], axis=1)
        d_own = np.linalg.norm(poisoned[sel] - centre, axis=1)
        ratio = d_target / np.maximum(d_own, 1e-12)
        fractions[c] = float((ratio < 1).mean())
        means[c] = float(ratio.mean())
        if c != target:
            hits += int((ratio < 1).sum())
            total += int(sel.sum())
    return ProximityReport(target, fractions, means, hits / max(total, 1), skipped)
