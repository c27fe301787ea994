"""Run configuration, canonical hashing and labelled sub-seeds."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

from .dynamics import DynamicsConfig
from .manifold import ManifoldConfig
from .pipeline.cleaning import TruncationConfig
from .pipeline.synth import GeneratorSpec, heavy_tailed_spec


class ConfigInvalid(ValueError):
    pass


EVAL_DEFAULTS: dict[str, Any] = {
    "oos_fraction": 0.2,
    "pca_k": 3,
    "stress_horizon": 30,
    "stress_paths": 200,
    "stress_starts": 3,
    "measure": "P",
    "ablation": ["VAE", "CVAE", "CVAEsT", "CVAEsT+LS"],
}

ABLATION_VARIANTS: dict[str, dict[str, Any]] = {
    "VAE": {"conditioning": False, "likelihood": "gaussian", "levelscript": False},
    "VAEsT": {"conditioning": False, "likelihood": "student_t", "levelscript": False},
    "CVAE": {"conditioning": True, "likelihood": "gaussian", "levelscript": False},
    "CVAE+LS": {"conditioning": True, "likelihood": "gaussian", "levelscript": True},
    "CVAEsT": {"conditioning": True, "likelihood": "student_t", "levelscript": False},
    "CVAEsT+LS": {"conditioning": True, "likelihood": "student_t", "levelscript": True},
}

_TOP_KEYS = {"generator", "truncation", "manifold", "dynamics", "evaluation", "out", "seed"}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sub_seed(seed: int, label: str) -> int:
    """Stable u64 stream seed for a named component."""
    return int.from_bytes(hashlib.sha256(f"{seed}:{label}".encode()).digest()[:8], "little")


def _generator(d) -> GeneratorSpec:
    if d is None:
        return heavy_tailed_spec()
    d = dict(d)
    preset = d.pop("preset", None)
    if preset is not None:
        if preset != "heavy_tailed":
            raise ConfigInvalid(f"unknown generator preset {preset!r}")
        extra = set(d) - {"n_days"}
        if extra:
            raise ConfigInvalid(f"unknown keys for preset generator: {sorted(extra)}")
        return heavy_tailed_spec(**d)
    return GeneratorSpec.from_dict(d)


@dataclass
class RunConfig:
    raw: dict
    seed: int
    generator: GeneratorSpec
    truncation: TruncationConfig
    manifold: ManifoldConfig
    dynamics: DynamicsConfig
    evaluation: dict = field(default_factory=dict)
    out: str | None = None

    @classmethod
    def from_dict(cls, d: dict, seed_override: int | None = None) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigInvalid("config must be a JSON object")
        unknown = set(d) - _TOP_KEYS
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
        seed = int(seed_override if seed_override is not None else d.get("seed", 0))
        if not 0 <= seed < 2**64:
            raise ConfigInvalid("seed must be an unsigned 64-bit integer")
        ev = dict(EVAL_DEFAULTS)
        bad = set(d.get("evaluation", {})) - set(EVAL_DEFAULTS)
        if bad:
            raise ConfigInvalid(f"unknown evaluation keys: {sorted(bad)}")
        ev.update(d.get("evaluation", {}))
        for name in ev["ablation"]:
            if name not in ABLATION_VARIANTS:
                raise ConfigInvalid(f"unknown ablation variant {name!r}")
        try:
            man = dict(d.get("manifold", {}))
            dyn = dict(d.get("dynamics", {}))
            for sect in (man, dyn):
                if "seed" in sect:
                    raise ConfigInvalid("component seeds derive from the global seed; remove 'seed' from sections")
            man["seed"] = sub_seed(seed, "manifold") % 2**32
            dyn["seed"] = sub_seed(seed, "dynamics") % 2**32
            cfg = cls(
                raw=dict(d),
                seed=seed,
                generator=_generator(d.get("generator")),
                truncation=TruncationConfig(**d.get("truncation", {})),
                manifold=ManifoldConfig.from_dict(man),
                dynamics=DynamicsConfig.from_dict(dyn),
                evaluation=ev,
                out=d.get("out"),
            )
        except ConfigInvalid:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(str(exc)) from None
        return cfg

    @classmethod
    def load(cls, path, seed_override: int | None = None) -> "RunConfig":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigInvalid(f"invalid JSON: {exc}") from None
        return cls.from_dict(d, seed_override)

    def effective(self) -> dict:
        """Config document with defaults resolved and the effective seed; the hashed form."""
        return {
            "seed": self.seed,
            "generator": self.generator.to_dict(),
            "truncation": {"window": self.truncation.window, "rho0": self.truncation.rho0, "pi0": self.truncation.pi0},
            "manifold": self.manifold.to_dict(),
            "dynamics": self.dynamics.to_dict(),
            "evaluation": self.evaluation,
        }

    @property
    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.effective()).encode()).hexdigest()

    def variant(self, name: str) -> ManifoldConfig:
        d = self.manifold.to_dict()
        d.update(ABLATION_VARIANTS[name])
        d["seed"] = sub_seed(self.seed, f"manifold:{name}") % 2**32
        return ManifoldConfig.from_dict(d)
