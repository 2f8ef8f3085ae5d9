"""Bundles the backbone, attack module and trigger of one experiment."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .attack import AttackModule, Trigger, build_attack
from .vit import MicroViT, ViTConfig


@dataclass
class ModelState:
    backbone: MicroViT
    attack: AttackModule | None = None
    trigger: Trigger | None = None
    target_class: int | None = None
    seed: int = 0
    config: dict = field(default_factory=dict)

    @property
    def vit_config(self) -> ViTConfig:
        return self.backbone.config

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"theta/{k}": v for k, v in self.backbone.state_dict().items()}
        if self.attack is not None:
            out.update({f"phi/{k}": v for k, v in self.attack.state_dict().items()})
        if self.trigger is not None:
            out["delta"] = self.trigger.delta.data.copy()
        return out

    def digest(self) -> str:
        """Hash of every tensor; used to check that analyses act on copies."""
        h = hashlib.sha256()
        for name, arr in sorted(self.tensors().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def echo(self) -> dict:
        """Everything needed to rebuild the object skeleton from a checkpoint."""
        return {
            "vit": self.vit_config.to_dict(),
            "attack": self.attack.describe() if self.attack is not None else None,
            "epsilon": self.trigger.eps if self.trigger is not None else None,
            "target_class": self.target_class,
            "run": self.config,
        }

    @classmethod
    def from_echo(cls, echo: dict, tensors: dict[str, np.ndarray], seed: int) -> "ModelState":
        cfg = ViTConfig(**echo["vit"])
        backbone = MicroViT(cfg)
        backbone.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("theta/")})
        backbone.freeze()
        attack = None
        desc = echo.get("attack")
        if desc:
            kw = {}
            if desc["kind"] in ("dynamic", "static"):
                kw = {"layers": tuple(desc["layers"]), "n_prompts": desc["n_prompts"]}
            if desc["kind"] == "dynamic":
                kw["hidden"] = desc.get("hidden")
            if desc["kind"] == "lowrank":
                kw = {"rank": desc["rank"]}
            attack = build_attack(desc["kind"], cfg, **kw)
            attack.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("phi/")})
        trigger = None
        if "delta" in tensors:
            trigger = Trigger(tensors["delta"].shape, echo["epsilon"], value=tensors["delta"])
        return cls(backbone, attack, trigger, echo.get("target_class"), seed, echo.get("run") or {})
