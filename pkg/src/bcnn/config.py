"""Plain-text ``key=value`` run configuration shared by the command-line tools."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

from .backbone import BackboneConfig
from .data_io import parse_key_values
from .errors import ConfigError
from .invert import InversionConfig
from .train import ModelConfig, TrainConfig


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def _split(raw: str) -> list:
    return [s.strip() for s in raw.split(",") if s.strip()]


@dataclass
class RunConfig:
    seed: int = 0
    num_classes: int = 0                  # 0: infer from the training manifest
    # model
    encoder: str = "bilinear"
    tap: str = "t3"
    k: Optional[int] = None               # None: 64, or 256 for netbovw
    gamma: float = 0.0                    # codebook scale; 0 derives it from k-means
    rank: int = 0
    tied: bool = False
    scales: tuple = (1.0,)
    merge_scales: bool = True
    channels: tuple = (16, 32, 64, 64)
    pools: tuple = (True, True, True, False)
    # training
    lr: float = 0.001
    lr_head: float = 10.0
    momentum: float = 0.9
    epochs_head: int = 1000            # L-BFGS iterations cap (sgd solver: epochs)
    epochs_finetune: int = 10
    batch_size: int = 32
    head_solver: str = "lbfgs"
    head_l2: float = 1e-6
    c_svm: float = 1.0
    svm_loss: str = "sum"
    flip_augment: bool = True
    patience: int = 5
    frozen: tuple = ()
    # inversion classifiers stored alongside the model
    invert_layers: tuple = ("t1", "t2", "t3", "t4")
    invert_iters: int = 200

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        kv = parse_key_values(text)
        cfg = cls()
        known = {f.name: f for f in fields(cls)}
        for key, raw in kv.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            cur = getattr(cfg, key)
            try:
                if key == "k":
                    val = None if raw.lower() in ("", "auto") else int(raw)
                elif key == "pools":
                    val = tuple(_parse_bool(s) for s in _split(raw))
                elif key == "channels":
                    val = tuple(int(s) for s in _split(raw))
                elif key == "scales":
                    val = tuple(float(s) for s in _split(raw))
                elif key in ("frozen", "invert_layers"):
                    val = tuple(_split(raw))
                elif isinstance(cur, bool):
                    val = _parse_bool(raw)
                elif isinstance(cur, int):
                    val = int(raw)
                elif isinstance(cur, float):
                    val = float(raw)
                else:
                    val = raw.strip()
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
            setattr(cfg, key, val)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(str(int(x)) if isinstance(x, bool) else str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    # conversions
    def backbone(self) -> BackboneConfig:
        names = tuple(f"t{i + 1}" for i in range(len(self.channels)))
        return BackboneConfig(channels=self.channels, pools=self.pools, taps=names)

    def model(self, num_classes: Optional[int] = None) -> ModelConfig:
        cfg = ModelConfig(num_classes=num_classes or self.num_classes, encoder=self.encoder,
                          tap=self.tap, k=self.k, rank=self.rank, tied=self.tied,
                          scales=self.scales, merge_scales=self.merge_scales,
                          backbone=self.backbone(), gamma=self.gamma)
        cfg.validate()
        return cfg

    def train(self) -> TrainConfig:
        cfg = TrainConfig(lr=self.lr, lr_head=self.lr_head, momentum=self.momentum,
                          epochs_head=self.epochs_head, epochs_finetune=self.epochs_finetune,
                          batch_size=self.batch_size, head_solver=self.head_solver,
                          head_l2=self.head_l2, c_svm=self.c_svm, svm_loss=self.svm_loss,
                          flip_augment=self.flip_augment, patience=self.patience,
                          frozen=self.frozen, seed=self.seed)
        cfg.validate()
        return cfg

    def inversion(self, gamma: float = 1e-8, beta: float = 2.0, max_iters: Optional[int] = None,
                  size: int = 64) -> InversionConfig:
        cfg = InversionConfig(gamma=gamma, beta=beta, layers=self.invert_layers,
                              max_iters=self.invert_iters if max_iters is None else max_iters,
                              height=size, width=size, seed=self.seed)
        cfg.validate()
        return cfg

    def validate(self, num_classes: Optional[int] = None) -> None:
        """Check every section; raises ConfigError before any work starts."""
        n = num_classes or self.num_classes
        if self.num_classes < 0:
            raise ConfigError("num_classes must be >= 0")
        self.model(max(n, 1))
        self.train()
        bb = self.backbone()
        for t in self.invert_layers:
            if t not in bb.stage_names:
                raise ConfigError(f"invert layer {t!r} not in backbone stages {bb.stage_names}")
        if self.invert_iters < 0:
            raise ConfigError("invert_iters must be >= 0")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if any(s <= 0 for s in self.scales):
            raise ConfigError("scales must be positive")
