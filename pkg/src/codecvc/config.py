"""Run configuration: one YAML document mirroring every configurable type.

Top-level keys: ``seed``, ``vocab``, ``corpus``, ``backbone``, ``text``,
``train``, ``guidance``, ``data``. Missing sections take their defaults;
unknown keys are rejected. ``seed`` overrides the per-section seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .corpus import CorpusConfig
from .inference import GuidanceConfig
from .model import BackboneConfig
from .text_encoder import TextEncoderConfig
from .training import TrainConfig
from .vocab import TokenVocabulary


@dataclass
class DataConfig:
    train_corpus: str | None = None  # record file; None = generate from ``corpus``
    finetune_corpus: str | None = None

    def to_dict(self) -> dict:
        return {"train_corpus": self.train_corpus, "finetune_corpus": self.finetune_corpus}


@dataclass
class RunConfig:
    seed: int = 0
    vocab: TokenVocabulary = field(default_factory=lambda: TokenVocabulary(500, 64, 12))
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, corpus=replace(self.corpus, seed=seed),
                       train=replace(self.train, seed=seed), guidance=replace(self.guidance, seed=seed))

    def to_dict(self) -> dict:
        return {"seed": self.seed, "vocab": self.vocab.to_dict(), "corpus": self.corpus.to_dict(),
                "backbone": self.backbone.to_dict(), "text": self.text.to_dict(),
                "train": self.train.to_dict(), "guidance": self.guidance.to_dict(), "data": self.data.to_dict()}

    def dump(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)


def _check_keys(cls, d: dict, section: str, extra: tuple[str, ...] = ()) -> dict:
    unknown = set(d) - {f.name for f in fields(cls)} - set(extra)
    if unknown:
        raise ValueError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return d


def _build(cls, d: dict | None, section: str):
    return cls(**_check_keys(cls, dict(d or {}), section))


def config_from_dict(d: dict) -> RunConfig:
    d = dict(d or {})
    allowed = {"seed", "vocab", "corpus", "backbone", "text", "train", "guidance", "data"}
    unknown = set(d) - allowed
    if unknown:
        raise ValueError(f"unknown top-level config keys: {sorted(unknown)}")
    vocab_d = {"st_size": 500, "at_size": 64, "num_codebooks": 12,
               **_check_keys(TokenVocabulary, dict(d.get("vocab") or {}), "vocab")}
    train_d = _check_keys(TrainConfig, dict(d.get("train") or {}), "train")
    backbone_d = _check_keys(BackboneConfig, dict(d.get("backbone") or {}), "backbone", ("max_seq",))
    cfg = RunConfig(
        seed=int(d.get("seed", 0)),
        vocab=TokenVocabulary.from_dict(vocab_d),
        corpus=_build(CorpusConfig, d.get("corpus"), "corpus"),
        backbone=BackboneConfig.from_dict(backbone_d),
        text=_build(TextEncoderConfig, d.get("text"), "text"),
        train=TrainConfig.from_dict(train_d),
        guidance=_build(GuidanceConfig, d.get("guidance"), "guidance"),
        data=_build(DataConfig, d.get("data"), "data"),
    )
    return cfg.with_seed(cfg.seed)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return config_from_dict(yaml.safe_load(fh) or {})
