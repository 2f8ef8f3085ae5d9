"""A small pre-norm vision transformer with hooks for attack modules.

The attack module (see :mod:`fusionlab.attack`) plugs in at two places:
prompt tokens generated from the input of layer ``l`` are appended after
layer ``l`` runs, and low-rank deltas are added to the query/value
projections inside every layer.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Parameter, ShapeError, Tensor


@dataclass(frozen=True)
class ViTConfig:
    depth: int = 6
    dim: int = 64
    heads: int = 4
    patch: int = 8
    image: int = 32
    channels: int = 1
    classes: int = 10
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.image % self.patch:
            raise ValueError(f"image side {self.image} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.classes < 2:
            raise ValueError("need at least two classes")

    @property
    def n_patches(self) -> int:
        return (self.image // self.patch) ** 2

    @property
    def base_tokens(self) -> int:
        return 1 + self.n_patches

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenSequence:
    """Tokens of shape (B, S, d). Index 0 is the class token; prompts sit at the end."""

    tokens: Tensor
    base_count: int
    prompt_count: int = 0

    def __post_init__(self):
        if self.tokens.shape[1] != self.base_count + self.prompt_count:
            raise ShapeError(
                f"sequence length {self.tokens.shape[1]} != {self.base_count} base + "
                f"{self.prompt_count} prompt tokens")

    @property
    def base(self) -> Tensor:
        if self.prompt_count == 0:
            return self.tokens
        return self.tokens[:, : self.base_count]


def patchify(images: Tensor, patch: int) -> Tensor:
    """(B, H, W, C) -> (B, n_patches, patch*patch*C), patches in row-major order."""
    b, h, w, c = images.shape
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch * c)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x @ w + b


class MicroViT:
    """Frozen-backbone classifier. Parameters live in ``self.params`` by name."""

    def __init__(self, config: ViTConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(seed)
        c = config
        d, hid = c.dim, c.dim * c.mlp_ratio

        def lin(name, fan_in, fan_out, scale=1.0):
            self._add(f"{name}.w", rng.normal(0, scale / np.sqrt(fan_in), (fan_in, fan_out)))
            self._add(f"{name}.b", np.zeros(fan_out))

        lin("patch", c.patch_dim, d)
        self._add("cls", rng.normal(0, 0.02, d))
        self._add("pos", rng.normal(0, 0.02, (c.base_tokens, d)))
        for l in range(1, c.depth + 1):
            p = f"blocks.{l}"
            self._add(f"{p}.ln1.g", np.ones(d))
            self._add(f"{p}.ln1.b", np.zeros(d))
            for proj in ("q", "k", "v"):
                lin(f"{p}.attn.{proj}", d, d)
            lin(f"{p}.attn.o", d, d, scale=1.0 / np.sqrt(2 * c.depth))
            self._add(f"{p}.ln2.g", np.ones(d))
            self._add(f"{p}.ln2.b", np.zeros(d))
            lin(f"{p}.mlp.fc1", d, hid)
            lin(f"{p}.mlp.fc2", hid, d, scale=1.0 / np.sqrt(2 * c.depth))
        self._add("norm.g", np.ones(d))
        self._add("norm.b", np.zeros(d))
        lin("head", d, c.classes)
        self.last_attention: dict[int, np.ndarray] = {}
        self.record_attention = False

    def _add(self, name: str, value) -> None:
        self.params[name] = Parameter(value, name=name)

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    # -- parameter management -------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def freeze(self) -> None:
        for p in self.params.values():
            p.freeze()

    def unfreeze(self) -> None:
        for p in self.params.values():
            p.unfreeze()

    @property
    def frozen(self) -> bool:
        return not any(p.trainable for p in self.params.values())

    def checksum(self) -> str:
        """SHA-256 over every backbone tensor (name, shape, bytes)."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name].data)
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"state is missing backbone tensors: {sorted(missing)[:5]}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {state[k].shape} != model shape {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    def count_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    # -- forward pieces -------------------------------------------------------

    def patch_embed(self, images) -> TokenSequence:
        c = self.config
        x = images if isinstance(images, Tensor) else Tensor._wrap(np.asarray(images, dtype=np.float32))
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        if x.shape[1:] != (c.image, c.image, c.channels):
            raise ShapeError(
                f"expected images of shape (B, {c.image}, {c.image}, {c.channels}), got {x.shape}")
        b = x.shape[0]
        patches = patchify(x, c.patch)
        tok = _linear(patches, self["patch.w"], self["patch.b"])
        cls = ad.broadcast_to(self["cls"].reshape(1, 1, c.dim), (b, 1, c.dim))
        tok = ad.concat([cls, tok], axis=1) + self["pos"]
        return TokenSequence(tok, base_count=c.base_tokens)

    def encoder_layer(self, seq: TokenSequence, layer: int, attack=None) -> TokenSequence:
        c = self.config
        if not 1 <= layer <= c.depth:
            raise ContractError(f"layer index {layer} outside 1..{c.depth}")
        p = f"blocks.{layer}"
        x = seq.tokens
        b, s, d = x.shape
        nh, dh = c.heads, d // c.heads

        h = ad.layernorm(x, self[f"{p}.ln1.g"], self[f"{p}.ln1.b"])
        q = _linear(h, self[f"{p}.attn.q.w"], self[f"{p}.attn.q.b"])
        k = _linear(h, self[f"{p}.attn.k.w"], self[f"{p}.attn.k.b"])
        v = _linear(h, self[f"{p}.attn.v.w"], self[f"{p}.attn.v.b"])
        if attack is not None:
            dq = attack.adapter_delta(layer, "q", h)
            dv = attack.adapter_delta(layer, "v", h)
            if dq is not None:
                q = q + dq
            if dv is not None:
                v = v + dv
        q = q.reshape(b, s, nh, dh).transpose(0, 2, 1, 3)
        k = k.reshape(b, s, nh, dh).transpose(0, 2, 3, 1)
        v = v.reshape(b, s, nh, dh).transpose(0, 2, 1, 3)
        att = ad.softmax((q @ k) * (1.0 / np.sqrt(dh)), axis=-1)
        if self.record_attention:
            self.last_attention[layer] = att.data.copy()
        o = (att @ v).transpose(0, 2, 1, 3).reshape(b, s, d)
        x = x + _linear(o, self[f"{p}.attn.o.w"], self[f"{p}.attn.o.b"])

        h = ad.layernorm(x, self[f"{p}.ln2.g"], self[f"{p}.ln2.b"])
        m = ad.gelu(_linear(h, self[f"{p}.mlp.fc1.w"], self[f"{p}.mlp.fc1.b"]))
        x = x + _linear(m, self[f"{p}.mlp.fc2.w"], self[f"{p}.mlp.fc2.b"])
        return TokenSequence(x, seq.base_count, seq.prompt_count)

    def encode(self, images, attack=None) -> TokenSequence:
        """Run all layers; prompts from the attack module are injected after their layer."""
        from .attack import inject_prompts

        seq = self.patch_embed(images)
        layers = set(attack.injection_layers) if attack is not None else set()
        bad = [l for l in layers if not 1 <= l <= self.config.depth]
        if bad:
            raise ContractError(f"injection layers {bad} outside 1..{self.config.depth}")
        for l in range(1, self.config.depth + 1):
            prompts = attack.prompts(l, seq) if l in layers else None
            seq = self.encoder_layer(seq, l, attack)
            if prompts is not None:
                seq = inject_prompts(seq, prompts)
        return seq

    def features(self, images, attack=None) -> Tensor:
        """Final normalised class-token representation, shape (B, d)."""
        seq = self.encode(images, attack)
        cls = seq.tokens[:, 0]
        return ad.layernorm(cls, self["norm.g"], self["norm.b"])

    def forward(self, images, attack=None) -> Tensor:
        """Logits (B, K): the head applied to the class token of the last layer."""
        return _linear(self.features(images, attack), self["head.w"], self["head.b"])

    __call__ = forward

    def predict(self, images, attack=None, batch: int = 256) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        out = []
        with ad.no_record():
            for i in range(0, len(images), batch):
                out.append(self.forward(images[i:i + batch], attack).data.argmax(axis=-1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def logits(self, images, attack=None, batch: int = 256) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        out = []
        with ad.no_record():
            for i in range(0, len(images), batch):
                out.append(self.forward(images[i:i + batch], attack).data)
        return np.concatenate(out)
