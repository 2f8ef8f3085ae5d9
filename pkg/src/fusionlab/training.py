"""Clean backbone pretraining and joint trigger / attack-module optimisation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attack import BACKENDS, AttackModule, Trigger, apply_trigger, build_attack
from .autodiff import Adam, ContractError, Tape, Tensor
from .data import SyntheticDataset
from .state import ModelState
from .vit import MicroViT

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch: int = 16
    lr_phi: float = 2e-3
    lr_delta: float = 1e-2
    epsilon: float = 4 / 255
    target_class: int = 0
    kind: str = "dynamic"
    seed: int = 0
    layers: tuple[int, ...] = (1, 2, 3, 4, 5)
    n_prompts: int = 8
    rank: int = 8
    weight_decay: float = 0.0
    l1_shrink: float = 0.0

    def validate(self, classes: int) -> None:
        if not 0 <= self.target_class < classes:
            raise ValueError(f"target class {self.target_class} outside [0, {classes})")
        if min(self.lr_phi, self.lr_delta, self.epsilon) <= 0:
            raise ValueError("learning rates and epsilon must be positive")
        if self.kind not in BACKENDS:
            raise ValueError(f"unknown backend {self.kind!r}")
        if self.batch < 1 or self.epochs < 0:
            raise ValueError("batch must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = list(self.layers)
        return d


@dataclass
class LossReport:
    rows: list[tuple[int, int, float, float, float]] = field(default_factory=list)
    max_trigger_linf: float = 0.0

    def log(self, step: int, epoch: int, l_clean: float, l_attack: float) -> None:
        self.rows.append((step, epoch, l_clean, l_attack, l_clean + l_attack))

    def epoch_means(self) -> list[tuple[int, float, float, float]]:
        out = []
        epochs = sorted({r[1] for r in self.rows})
        for e in epochs:
            sel = np.array([r[2:] for r in self.rows if r[1] == e])
            out.append((e, *map(float, sel.mean(0))))
        return out


def _batches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch):
        yield order[i:i + batch]


def clean_loss(backbone: MicroViT, attack: AttackModule | None, x, y) -> Tensor:
    """Mean cross-entropy of the (possibly attacked) model on clean inputs."""
    if len(y) == 0:
        raise ContractError("clean_loss on an empty batch")
    return ad.cross_entropy(backbone(x, attack), y)


def attack_loss(backbone: MicroViT, attack: AttackModule | None, x, delta, target: int) -> Tensor:
    """Mean cross-entropy towards ``target`` on trigger-stamped inputs."""
    n = len(x)
    if n == 0:
        raise ContractError("attack_loss on an empty batch")
    xp = apply_trigger(x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, np.float32)), delta)
    return ad.cross_entropy(backbone(xp, attack), np.full(n, target))


def total_loss(l_clean, l_attack):
    return l_clean + l_attack


def smoothed_cross_entropy(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
    """Cross-entropy against one-hot targets mixed with the uniform distribution."""
    if smoothing == 0.0:
        return ad.cross_entropy(logits, labels)
    k = logits.shape[-1]
    target = np.full(logits.shape, smoothing / k, dtype=np.float32)
    target[np.arange(len(labels)), labels] += 1.0 - smoothing
    per = (ad.log_softmax(logits) * Tensor._wrap(target)).sum(axis=-1)
    return -per.mean()


def train_clean_baseline(backbone: MicroViT, dataset: SyntheticDataset, epochs: int = 20,
                         lr: float = 3e-3, batch: int = 64, seed: int = 0,
                         weight_decay: float = 0.05, warmup: int = 50,
                         label_smoothing: float = 0.3) -> tuple[MicroViT, float]:
    """Train every backbone parameter on the clean pretraining split, then freeze.

    Linear warmup then cosine decay. Returns the frozen backbone and its test accuracy.
    """
    backbone.unfreeze()
    opt = Adam(backbone.parameters(), lr, weight_decay=weight_decay)
    rng = np.random.default_rng([seed, 7])
    x, y = dataset.pretrain_x, dataset.pretrain_y
    total_steps = epochs * int(np.ceil(len(x) / batch))
    step = 0
    for epoch in range(epochs):
        for idx in _batches(len(x), batch, rng):
            opt.lr = lr * min(1.0, (step + 1) / warmup) * 0.5 * (1 + np.cos(np.pi * step / total_steps))
            opt.zero_grad()
            with Tape() as tape:
                loss = smoothed_cross_entropy(backbone(x[idx]), y[idx], label_smoothing)
            tape.backward(loss)
            opt.step()
            step += 1
        log.debug("pretrain epoch %d loss %.4f", epoch, float(loss.data))
    backbone.freeze()
    acc = float((backbone.predict(dataset.test_x) == dataset.test_y).mean())
    return backbone, acc


def soft_threshold(params, amount: float) -> None:
    """Proximal step for an L1 penalty: shrink every weight toward zero by ``amount``."""
    for p in params:
        p.data = (np.sign(p.data) * np.maximum(np.abs(p.data) - amount, 0.0)).astype(p.dtype)


def new_attack_state(backbone: MicroViT, cfg: TrainConfig, **attack_kw) -> ModelState:
    vc = backbone.config
    cfg.validate(vc.classes)
    attack = build_attack(cfg.kind, vc, layers=cfg.layers, n_prompts=cfg.n_prompts,
                          rank=cfg.rank, seed=cfg.seed, **attack_kw)
    trigger = Trigger((vc.image, vc.image, vc.channels), cfg.epsilon, seed=cfg.seed + 1)
    return ModelState(backbone, attack, trigger, cfg.target_class, cfg.seed, {"train": cfg.to_dict()})


def train_joint(state: ModelState, dataset: SyntheticDataset, cfg: TrainConfig,
                on_step: Callable[[int, ModelState], None] | None = None) -> tuple[ModelState, LossReport]:
    """Alternate one adaptive step on the attack module with one signed step on the trigger.

    Step A minimises L_clean + L_attack over the attack parameters with the
    trigger held fixed; step B minimises L_attack over the trigger with the
    attack parameters held fixed, then projects back into the epsilon ball.
    The backbone is never touched.
    """
    backbone, attack, trigger = state.backbone, state.attack, state.trigger
    if not backbone.frozen:
        raise ContractError("train_joint requires a frozen backbone")
    cfg.validate(backbone.config.classes)
    phi = attack.parameters()
    opt = Adam(phi, cfg.lr_phi, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 11])
    x_all, y_all = dataset.train_x, dataset.train_y
    report = LossReport()
    delta = trigger.delta
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _batches(len(x_all), cfg.batch, rng):
            x, y = x_all[idx], y_all[idx]
            # step A: attack parameters, trigger fixed
            opt.zero_grad()
            fixed = Tensor._wrap(delta.data)
            with Tape() as tape:
                lc = clean_loss(backbone, attack, x, y)
                la = attack_loss(backbone, attack, x, fixed, cfg.target_class)
                lt = total_loss(lc, la)
            tape.backward(lt)
            opt.step()
            if cfg.l1_shrink:
                soft_threshold(phi, cfg.lr_phi * cfg.l1_shrink)
            report.log(step, epoch, float(lc.data), float(la.data))
            # step B: trigger, attack parameters fixed
            for p in phi:
                p.freeze()
            delta.grad = None
            with Tape() as tape:
                la_b = attack_loss(backbone, attack, x, delta, cfg.target_class)
            tape.backward(la_b)
            for p in phi:
                p.unfreeze()
            delta.data = (delta.data - cfg.lr_delta * np.sign(delta.grad)).astype(np.float32)
            trigger.project()
            delta.grad = None
            linf = trigger.linf()
            if linf > trigger.eps:
                raise ContractError(f"trigger left the epsilon ball: {linf} > {trigger.eps}")
            report.max_trigger_linf = max(report.max_trigger_linf, linf)
            if on_step is not None:
                on_step(step, state)
            step += 1
        log.debug("epoch %d clean %.4f attack %.4f", epoch, *report.epoch_means()[-1][1:3])
    return state, report
