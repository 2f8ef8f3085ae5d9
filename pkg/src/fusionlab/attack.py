"""Attack backends and the learnable trigger.

Three backends share one small interface used by :class:`~fusionlab.vit.MicroViT`:

* ``injection_layers`` and ``prompts(layer, seq)`` for prompt-style modules,
* ``adapter_delta(layer, which, h)`` for weight-space adapters.

``DynamicVPG`` is the input-conditioned prompt generator; ``StaticPrompts``
and ``LowRankAdapter`` are the input-agnostic baselines.
"""

from __future__ import annotations

import copy

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Parameter, ShapeError, Tensor
from .vit import TokenSequence, ViTConfig

BACKENDS = ("dynamic", "static", "lowrank")


class AttackModule:
    kind = "none"
    injection_layers: tuple[int, ...] = ()

    def __init__(self):
        self.params: dict[str, Parameter] = {}

    def _add(self, name: str, value) -> Parameter:
        p = Parameter(value, name=name)
        self.params[name] = p
        return p

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def prompts(self, layer: int, seq: TokenSequence) -> Tensor | None:
        return None

    def adapter_delta(self, layer: int, which: str, h: Tensor) -> Tensor | None:
        return None

    def count_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def flat(self) -> np.ndarray:
        """All parameters concatenated in insertion order."""
        return np.concatenate([p.data.reshape(-1) for p in self.params.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec)
        if vec.size != self.count_parameters():
            raise ShapeError(f"flat vector has {vec.size} entries, module has {self.count_parameters()}")
        i = 0
        for p in self.params.values():
            n = p.data.size
            p.data = vec[i:i + n].reshape(p.shape).astype(p.dtype)
            i += n

    def flat_names(self) -> list[tuple[str, int, int]]:
        """(name, start, stop) of every parameter inside :meth:`flat`."""
        out, i = [], 0
        for name, p in self.params.items():
            out.append((name, i, i + p.data.size))
            i += p.data.size
        return out

    def clone(self) -> "AttackModule":
        return copy.deepcopy(self)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in state:
                raise KeyError(f"missing attack tensor {k!r}")
            if state[k].shape != p.shape:
                raise ShapeError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    def describe(self) -> dict:
        return {"kind": self.kind}


def inject_prompts(seq: TokenSequence, prompts: Tensor) -> TokenSequence:
    """Drop any previously appended prompts and append ``prompts`` (B, N, d)."""
    d = seq.tokens.shape[-1]
    if prompts.ndim != 3 or prompts.shape[-1] != d:
        raise ShapeError(f"prompt block {prompts.shape} does not match token width {d}")
    if prompts.shape[0] != seq.tokens.shape[0]:
        raise ShapeError(f"prompt batch {prompts.shape[0]} != sequence batch {seq.tokens.shape[0]}")
    tokens = ad.concat([seq.base, prompts], axis=1)
    return TokenSequence(tokens, seq.base_count, prompts.shape[1])


def generate_prompts(seq: TokenSequence, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
                     n_prompts: int) -> Tensor:
    """Mean-pool the base tokens, standardize across the width, then affine -> GELU -> affine.

    The standardization has no parameters. Returns prompts of shape (B, N, d).
    """
    d = seq.tokens.shape[-1]
    if w1.shape[0] != d or w2.shape[1] != n_prompts * d:
        raise ShapeError(
            f"generator shapes {w1.shape}/{w2.shape} incompatible with width {d} and N={n_prompts}")
    pooled = standardize(seq.base.mean(axis=1))
    hidden = ad.gelu(pooled @ w1 + b1)
    out = hidden @ w2 + b2
    return out.reshape(out.shape[0], n_prompts, d)


def standardize(v: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero mean, unit variance along the last axis."""
    d = v.shape[-1]
    return ad.layernorm(v, Tensor(np.ones(d, np.float32)), Tensor(np.zeros(d, np.float32)), eps)


class DynamicVPG(AttackModule):
    """Input-conditioned prompt generator shared by all injection layers."""

    kind = "dynamic"

    def __init__(self, config: ViTConfig, layers=(1, 2, 3, 4, 5), n_prompts: int = 8,
                 hidden: int | None = None, seed: int = 0, init_scale: float = 1.0,
                 hidden_bias: float = 0.0):
        super().__init__()
        d = config.dim
        self.injection_layers = tuple(sorted(layers))
        self.n_prompts = n_prompts
        self.hidden = hidden or 2 * d
        rng = np.random.default_rng(seed)
        self._add("vpg.w1", rng.normal(0, init_scale / np.sqrt(d), (d, self.hidden)))
        self._add("vpg.b1", np.full(self.hidden, hidden_bias))
        self._add("vpg.w2", np.zeros((self.hidden, n_prompts * d)))
        self._add("vpg.b2", np.zeros(n_prompts * d))

    def prompts(self, layer: int, seq: TokenSequence) -> Tensor:
        p = self.params
        return generate_prompts(seq, p["vpg.w1"], p["vpg.b1"], p["vpg.w2"], p["vpg.b2"], self.n_prompts)

    def describe(self) -> dict:
        return {"kind": self.kind, "layers": list(self.injection_layers),
                "n_prompts": self.n_prompts, "hidden": self.hidden}


class StaticPrompts(AttackModule):
    """One learnable N x d block per injection layer, identical for every input."""

    kind = "static"

    def __init__(self, config: ViTConfig, layers=(1, 2, 3, 4, 5), n_prompts: int = 8, seed: int = 0):
        super().__init__()
        self.injection_layers = tuple(sorted(layers))
        self.n_prompts = n_prompts
        rng = np.random.default_rng(seed)
        for l in self.injection_layers:
            self._add(f"prompt.{l}", rng.normal(0, 0.02, (n_prompts, config.dim)))

    def prompts(self, layer: int, seq: TokenSequence) -> Tensor:
        return static_prompts_block(seq, self.params[f"prompt.{layer}"])

    def describe(self) -> dict:
        return {"kind": self.kind, "layers": list(self.injection_layers), "n_prompts": self.n_prompts}


def static_prompts_block(seq: TokenSequence, block: Tensor) -> Tensor:
    b = seq.tokens.shape[0]
    if block.ndim != 2 or block.shape[1] != seq.tokens.shape[-1]:
        raise ShapeError(f"static block {block.shape} does not match width {seq.tokens.shape[-1]}")
    return ad.broadcast_to(block.reshape(1, *block.shape), (b, *block.shape))


def static_prompts_forward(seq: TokenSequence, block: Tensor) -> TokenSequence:
    return inject_prompts(seq, static_prompts_block(seq, block))


class LowRankAdapter(AttackModule):
    """Rank-r factors on the query and value projections of every layer."""

    kind = "lowrank"

    def __init__(self, config: ViTConfig, rank: int = 8, targets=("q", "v"), seed: int = 0):
        super().__init__()
        self.rank = rank
        self.targets = tuple(targets)
        rng = np.random.default_rng(seed)
        d = config.dim
        for l in range(1, config.depth + 1):
            for t in self.targets:
                self._add(f"lora.{l}.{t}.a", rng.normal(0, 1 / np.sqrt(d), (d, rank)))
                self._add(f"lora.{l}.{t}.b", np.zeros((rank, d)))

    def adapter_delta(self, layer: int, which: str, h: Tensor) -> Tensor | None:
        if which not in self.targets:
            return None
        return adapter_path(h, self.params[f"lora.{layer}.{which}.a"], self.params[f"lora.{layer}.{which}.b"])

    def describe(self) -> dict:
        return {"kind": self.kind, "rank": self.rank, "targets": list(self.targets)}


def adapter_path(x: Tensor, a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0] or a.shape[0] != x.shape[-1]:
        raise ShapeError(f"adapter factors {a.shape} x {b.shape} inconsistent with input width {x.shape[-1]}")
    return (x @ a) @ b


def adapter_forward(x: Tensor, w: Tensor, bias: Tensor | None, a: Tensor, b: Tensor) -> Tensor:
    """Base projection plus its low-rank delta on the same input."""
    base = x @ w
    if bias is not None:
        base = base + bias
    return base + adapter_path(x, a, b)


def build_attack(kind: str, config: ViTConfig, layers=(1, 2, 3, 4, 5), n_prompts: int = 8,
                 rank: int = 8, seed: int = 0, **kw) -> AttackModule:
    if kind == "dynamic":
        return DynamicVPG(config, layers=layers, n_prompts=n_prompts, seed=seed, **kw)
    if kind == "static":
        return StaticPrompts(config, layers=layers, n_prompts=n_prompts, seed=seed)
    if kind == "lowrank":
        return LowRankAdapter(config, rank=rank, seed=seed)
    raise ValueError(f"unknown attack backend {kind!r}; expected one of {BACKENDS}")


# ---------------------------------------------------------------------------
# trigger


class Trigger:
    """Additive image perturbation kept inside an l-infinity ball of radius ``eps``."""

    def __init__(self, shape, eps: float = 4 / 255, seed: int = 0, value=None):
        if eps <= 0:
            raise ContractError("trigger radius must be positive")
        self.eps = float(eps)
        if value is None:
            rng = np.random.default_rng(seed)
            value = rng.uniform(-eps / 2, eps / 2, shape)
        self.delta = Parameter(value, name="trigger")

    @property
    def shape(self):
        return self.delta.shape

    def project(self) -> None:
        self.delta.data = project_trigger(self.delta.data, self.eps)

    def linf(self) -> float:
        return float(np.abs(self.delta.data).max())

    def clone(self) -> "Trigger":
        return Trigger(self.shape, self.eps, value=self.delta.data.copy())


def apply_trigger(x, delta) -> Tensor | np.ndarray:
    """clamp(x + delta, 0, 1). Differentiable when given Tensors."""
    if isinstance(x, Tensor) or isinstance(delta, Tensor):
        xt = x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float32))
        dt = delta if isinstance(delta, Tensor) else Tensor._wrap(np.asarray(delta, dtype=np.float32))
        if xt.shape[-dt.ndim:] != dt.shape:
            raise ShapeError(f"trigger {dt.shape} does not match image {xt.shape}")
        return ad.clamp(xt + dt, 0.0, 1.0)
    x = np.asarray(x)
    delta = np.asarray(delta)
    if x.shape[-delta.ndim:] != delta.shape:
        raise ShapeError(f"trigger {delta.shape} does not match image {x.shape}")
    return np.clip(x + delta, 0.0, 1.0).astype(np.float32)


def float32_radius(eps: float) -> np.float32:
    """Largest float32 not above ``eps``, so projected float32 values never exceed it."""
    r = np.float32(eps)
    if float(r) > eps:
        r = np.nextafter(r, np.float32(0))
    return r


def project_trigger(delta: np.ndarray, eps: float) -> np.ndarray:
    if eps <= 0:
        raise ContractError("projection radius must be positive")
    r = float32_radius(eps)
    return np.clip(delta, -r, r).astype(delta.dtype, copy=False)
