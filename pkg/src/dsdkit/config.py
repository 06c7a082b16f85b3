"""Flat ``section.key=value`` run configuration.

Blank lines and ``#`` comments are ignored. Every key has a default; unknown
keys are rejected so typos fail before any computation starts.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .features import BackboneConfig
from .losses import LossConfig
from .pipeline import StageConfig


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(",") if p.strip())


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    "seed": (int, 0),
    "paths.train_manifest": (str, ""),
    "paths.train_embeddings": (str, ""),
    "paths.out_dir": (str, ""),
    "train.stages": (_ints, (1, 2, 3)),
    "train.lr": (float, 1e-5),
    "train.batch_size": (int, 64),
    "stage1.epochs": (int, 30),
    "stage2.epochs": (int, 30),
    "model.hidden": (_ints, (256, 128)),
    "loss.asoftmax_margin": (int, 2),
    "loss.contrastive_margin": (float, 1.0),
    "loss.center_rate": (float, 0.5),
    "loss.weight_asoftmax": (float, 1.0),
    "loss.weight_contrastive": (float, 0.5),
    "loss.weight_center": (float, 0.1),
    "loss.pair_cap_factor": (int, 4),
    "stage3.covariance": (str, "full"),
    "stage3.reg_scale": (float, 1e-6),
    "stage3.distance_percentile": (float, 95.0),
    "inference.decision_mode": (str, "probability_boundary"),
    "inference.boundary": (float, 0.5),
    "inference.log_threshold": (float, 0.0),
    "inference.aggregation": (str, "mean"),
    "embedding.source": (str, "ingested"),
    "backbone.n_fft": (int, 512),
    "backbone.hop": (int, 160),
    "backbone.n_mels": (int, 64),
    "backbone.fmin": (float, 20.0),
    "backbone.fmax": (float, 7600.0),
    "backbone.seg_seconds": (float, 4.0),
}


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {k: default for k, (_, default) in SCHEMA.items()}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = SCHEMA[key][0](val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return values


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: parse_config_text(""))
    source: str = "<defaults>"

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls(parse_config_text(path.read_text(encoding="utf-8"), str(path)), str(path))

    def override(self, **kv) -> "RunConfig":
        vals = dict(self.values)
        for k, v in kv.items():
            if v is None:
                continue
            if k not in SCHEMA:
                raise ConfigError(f"unknown key {k!r}")
            vals[k] = v
        return RunConfig(vals, self.source)

    def __getitem__(self, key: str):
        return self.values[key]

    def canonical_text(self) -> str:
        return "".join(f"{k}={_fmt(self.values[k])}\n" for k in sorted(self.values))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def loss_config(self) -> LossConfig:
        v = self.values
        return LossConfig(
            asoftmax_margin=v["loss.asoftmax_margin"],
            contrastive_margin=v["loss.contrastive_margin"],
            center_rate=v["loss.center_rate"],
            weight_asoftmax=v["loss.weight_asoftmax"],
            weight_contrastive=v["loss.weight_contrastive"],
            weight_center=v["loss.weight_center"],
            pair_cap_factor=v["loss.pair_cap_factor"],
        )

    def stage_config(self) -> StageConfig:
        v = self.values
        return StageConfig(
            stage1_epochs=v["stage1.epochs"],
            stage2_epochs=v["stage2.epochs"],
            lr=v["train.lr"],
            batch_size=v["train.batch_size"],
            seed=self.seed,
            hidden=tuple(v["model.hidden"]),
            loss=self.loss_config(),
            covariance=v["stage3.covariance"],
            reg_scale=v["stage3.reg_scale"],
            distance_percentile=v["stage3.distance_percentile"],
            decision_mode=v["inference.decision_mode"],
            boundary=v["inference.boundary"],
            log_threshold=v["inference.log_threshold"],
            aggregation=v["inference.aggregation"],
            embedding_source=v["embedding.source"],
        )

    def backbone_config(self) -> BackboneConfig:
        v = self.values
        return BackboneConfig(
            n_fft=v["backbone.n_fft"],
            hop=v["backbone.hop"],
            n_mels=v["backbone.n_mels"],
            fmin=v["backbone.fmin"],
            fmax=v["backbone.fmax"],
            seg_seconds=v["backbone.seg_seconds"],
        )

    def validate_for_training(self) -> None:
        """Build every typed config and check referenced inputs exist."""
        self.stage_config()
        self.backbone_config()
        stages = tuple(self.values["train.stages"])
        if stages not in ((1,), (1, 2), (1, 2, 3)):
            raise ConfigError(f"train.stages must be 1, 1,2 or 1,2,3; got {stages}")
        manifest = self.values["paths.train_manifest"]
        if not manifest:
            raise ConfigError("paths.train_manifest is required")
        if not Path(manifest).is_file():
            raise ConfigError(f"paths.train_manifest does not exist: {manifest}")
        if self.values["embedding.source"] == "ingested":
            emb = self.values["paths.train_embeddings"]
            if not emb or not Path(emb).is_file():
                raise ConfigError(f"paths.train_embeddings missing or not found: {emb!r}")
