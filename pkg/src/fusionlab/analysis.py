"""Measurements on trained attack modules: metrics, sparsity, dissection, pruning, latency."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attack import apply_trigger
from .autodiff import Adam, ContractError, Tape
from .state import ModelState

NEAR_ZERO = 1e-6
DEFAULT_RATIOS = tuple(round(0.1 * i, 1) for i in range(10))


class UndefinedASRError(ValueError):
    """Every evaluation sample already belongs to the target class."""


@dataclass
class MetricsReport:
    acc: float
    asr: float | None
    n_clean_eval: int
    n_attack_eval: int

    def as_row(self) -> dict:
        return {"acc": self.acc, "asr": self.asr}


@dataclass
class SparsityReport:
    total: int
    near_zero_fraction: float
    active: int
    histogram: tuple[np.ndarray, np.ndarray]
    threshold: float = NEAR_ZERO

    @property
    def active_fraction(self) -> float:
        return self.active / self.total


@dataclass
class DissectionReport:
    full: MetricsReport
    core: MetricsReport
    periphery: MetricsReport
    core_fraction: float
    periphery_fraction: float

    def rows(self) -> list[tuple[str, float, float, float]]:
        return [
            ("full", self.full.acc, self.full.asr, 1.0),
            ("core", self.core.acc, self.core.asr, self.core_fraction),
            ("periphery", self.periphery.acc, self.periphery.asr, self.periphery_fraction),
        ]


@dataclass
class PruneCurve:
    backend: str
    rows: list[tuple[float, float, float]] = field(default_factory=list)

    def asr_at(self, ratio: float) -> float:
        for r, _, asr in self.rows:
            if abs(r - ratio) < 1e-9:
                return asr
        raise KeyError(ratio)


def evaluate(state: ModelState, x, y, delta=None, target: int | None = None,
             attacked: bool = True) -> MetricsReport:
    """Clean accuracy and, if a trigger is given, attack success rate.

    ASR counts trigger-stamped samples classified as ``target`` among samples
    whose true label differs from ``target``.
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y)
    if len(y) == 0:
        raise ContractError("evaluate on an empty test set")
    attack = state.attack if attacked else None
    acc = float((state.backbone.predict(x, attack) == y).mean())
    if delta is None or target is None:
        return MetricsReport(acc, None, len(y), 0)
    keep = y != target
    if not keep.any():
        raise UndefinedASRError(f"all samples have label {target}; ASR is undefined")
    delta = delta.data if hasattr(delta, "data") else delta
    xp = apply_trigger(x[keep], np.asarray(delta, dtype=np.float32))
    asr = float((state.backbone.predict(xp, attack) == target).mean())
    return MetricsReport(acc, asr, len(y), int(keep.sum()))


def evaluate_state(state: ModelState, x, y, attacked: bool = True) -> MetricsReport:
    trig = state.trigger.delta.data if state.trigger is not None else None
    return evaluate(state, x, y, trig, state.target_class, attacked)


def weight_sparsity_stats(phi: np.ndarray, tau: float = NEAR_ZERO, bins: int = 40) -> SparsityReport:
    w = np.abs(np.asarray(phi, dtype=np.float64).reshape(-1))
    if w.size == 0:
        raise ContractError("empty parameter vector")
    near = int((w < tau).sum())
    logs = np.log10(np.maximum(w, 1e-30))
    hist = np.histogram(logs, bins=bins, range=(-12.0, 1.0))
    return SparsityReport(int(w.size), near / w.size, int(w.size - near), hist, tau)


def partition_core_periphery(phi: np.ndarray, tau: float = NEAR_ZERO,
                             core_quantile: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Split active weights (|w| >= tau) into the top ``core_quantile`` by magnitude and the rest.

    Ties are broken by ascending flat index. The core size is
    ``ceil(core_quantile * n_active)``.
    """
    w = np.abs(np.asarray(phi, dtype=np.float64).reshape(-1))
    active = np.flatnonzero(w >= tau)
    if active.size == 0:
        raise ContractError("no active weights to partition")
    n_core = int(np.ceil(core_quantile * active.size - 1e-9))
    # stable sort on -|w| keeps ascending index order among equal magnitudes
    order = active[np.argsort(-w[active], kind="stable")]
    core = np.sort(order[:n_core])
    periphery = np.sort(order[n_core:])
    return core, periphery


def masked_copy(state: ModelState, keep: np.ndarray) -> ModelState:
    """Copy of ``state`` with every attack parameter outside ``keep`` set to zero."""
    out = state.copy()
    flat = out.attack.flat()
    mask = np.zeros(flat.size, dtype=bool)
    mask[keep] = True
    out.attack.set_flat(np.where(mask, flat, 0.0))
    return out


def dissect(state: ModelState, x, y, tau: float = NEAR_ZERO, core_quantile: float = 0.05) -> DissectionReport:
    """Evaluate the full module, its core only, and its periphery only (near-zeros dropped)."""
    phi = state.attack.flat()
    core, periphery = partition_core_periphery(phi, tau, core_quantile)
    full = evaluate_state(state, x, y)
    core_m = evaluate_state(masked_copy(state, core), x, y)
    peri_m = evaluate_state(masked_copy(state, periphery), x, y)
    return DissectionReport(full, core_m, peri_m, core.size / phi.size, periphery.size / phi.size)


def dissect_one(state: ModelState, keep: str, x, y, tau: float = NEAR_ZERO,
                core_quantile: float = 0.05) -> MetricsReport:
    if keep == "full":
        return evaluate_state(state, x, y)
    core, periphery = partition_core_periphery(state.attack.flat(), tau, core_quantile)
    idx = {"core": core, "periphery": periphery}[keep]
    return evaluate_state(masked_copy(state, idx), x, y)


def perturbative_finetune_test(state: ModelState, train_x, test_x, test_y, epochs: int = 1,
                               seed: int = 0, lr: float = 2e-3,
                               batch: int = 16) -> tuple[MetricsReport, MetricsReport, ModelState]:
    """Fine-tune only the attack module on (trigger-stamped image, random label) pairs.

    Labels are drawn once, uniformly over all classes. Returns metrics before,
    metrics after, and the fine-tuned copy.
    """
    before = evaluate_state(state, test_x, test_y)
    work = state.copy()
    k = work.vit_config.classes
    rng = np.random.default_rng([seed, 23])
    labels = rng.integers(0, k, size=len(train_x))
    poisoned = apply_trigger(np.asarray(train_x, np.float32), work.trigger.delta.data)
    opt = Adam(work.attack.parameters(), lr)
    for _ in range(epochs):
        order = rng.permutation(len(train_x))
        for i in range(0, len(order), batch):
            idx = order[i:i + batch]
            opt.zero_grad()
            with Tape() as tape:
                loss = ad.cross_entropy(work.backbone(poisoned[idx], work.attack), labels[idx])
            tape.backward(loss)
            opt.step()
    after = evaluate_state(work, test_x, test_y)
    return before, after, work


def prune(state: ModelState, ratio: float) -> ModelState:
    """Copy with the ``floor(ratio * |phi|)`` smallest-magnitude attack weights zeroed.

    Ties are broken by ascending flat index.
    """
    out = state.copy()
    flat = out.attack.flat()
    n = int(np.floor(ratio * flat.size + 1e-9))
    if n > 0:
        order = np.argsort(np.abs(flat), kind="stable")
        flat = flat.copy()
        flat[order[:n]] = 0.0
        out.attack.set_flat(flat)
    return out


def prune_sweep(state: ModelState, x, y, ratios=DEFAULT_RATIOS) -> PruneCurve:
    ratios = list(ratios)
    if any(b <= a for a, b in zip(ratios, ratios[1:])):
        raise ValueError("ratios must be strictly increasing")
    curve = PruneCurve(state.attack.kind)
    for r in ratios:
        m = evaluate_state(prune(state, r), x, y)
        curve.rows.append((float(r), m.acc, m.asr))
    return curve


def count_parameters(state: ModelState, scope: str) -> int:
    if scope == "backbone":
        return state.backbone.count_parameters()
    if scope in ("attack", "attack-module"):
        return state.attack.count_parameters() if state.attack is not None else 0
    raise ValueError(f"unknown scope {scope!r}")


@dataclass
class LatencyReport:
    median_with: float
    median_without: float
    repeats: int

    @property
    def overhead(self) -> float:
        return (self.median_with - self.median_without) / self.median_without


def measure_latency(state: ModelState, batch, repeats: int = 20, hooks: bool = True) -> LatencyReport:
    """Median per-image forward time with and without the attack module."""
    if repeats < 10:
        raise ContractError("need at least 10 repeats")
    batch = np.asarray(batch, dtype=np.float32)
    attack = state.attack if hooks else None

    def timed(att):
        times = []
        with ad.no_record():
            state.backbone.forward(batch, att)  # warm-up
            for _ in range(repeats):
                t0 = time.perf_counter()
                state.backbone.forward(batch, att)
                times.append((time.perf_counter() - t0) / len(batch))
        return float(np.median(times))

    # interleave so both paths see the same machine state
    without = timed(None)
    with_ = timed(attack) if attack is not None else without
    return LatencyReport(with_, without, repeats)
