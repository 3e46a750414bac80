"""Run configuration: plain ``key = value`` text files and named profiles.

Keys (all optional; defaults come from the selected ``profile``):

paths
    train_scans, train_labels, val_scans, val_labels  directories (or single files)
    class_map       path, or ``builtin:synthetic`` / ``builtin:semantickitti``
    stats           modality statistics sidecar
    frequencies     class frequency file (``train_id frequency`` lines)
    out_dir         checkpoints and logs
projection
    H, W, fov_up, fov_down
network
    modalities (comma list), input_mode (fused|stacked), fusion (preset name),
    encoder_channels, decoder_channels, mrf_kernels (comma lists),
    dense_layers, rcb_recurrence
loss
    lam, lovasz_classes (present|all)
post-process
    knn_S, knn_K, knn_sigma, knn_gauss_bw, knn_vote_kept
training
    epochs, batch_size, lr, seed, augment, subsample, stop_at_miou,
    val_every, threads
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .losses import LossConfig
from .network import DESK_DECODER, DESK_ENCODER, FULL_DECODER, FULL_ENCODER, NetworkConfig, preset_config
from .postprocess import KnnConfig
from .projection import ProjectionConfig


@dataclass
class RunConfig:
    profile: str = "desk"
    train_scans: str = ""
    train_labels: str = ""
    val_scans: str = ""
    val_labels: str = ""
    class_map: str = "builtin:synthetic"
    stats: str = ""
    frequencies: str = ""
    out_dir: str = "runs/default"

    H: int = 64
    W: int = 256
    fov_up: float = 3.0
    fov_down: float = 25.0

    modalities: tuple[str, ...] = ("coord", "depth", "intensity")
    input_mode: str = "fused"
    fusion: str = "early"
    encoder_channels: list[int] = field(default_factory=lambda: list(DESK_ENCODER))
    decoder_channels: list[int] = field(default_factory=lambda: list(DESK_DECODER))
    mrf_kernels: list[int] = field(default_factory=lambda: [1, 3, 5, 7])
    dense_layers: int = 3
    rcb_recurrence: int = 2

    lam: float = 1.0
    lovasz_classes: str = "present"

    knn_S: int = 5
    knn_K: int = 5
    knn_sigma: float = 1.0
    knn_gauss_bw: float = 1.0
    knn_vote_kept: bool = False

    epochs: int = 300
    batch_size: int = 2
    lr: float = 0.001
    seed: int = 0
    augment: bool = True
    subsample: int = 1
    stop_at_miou: float = 0.0
    val_every: int = 1
    threads: int = 1

    def projection(self) -> ProjectionConfig:
        return ProjectionConfig(self.H, self.W, self.fov_up, self.fov_down)

    def network(self, num_classes: int) -> NetworkConfig:
        cfg = preset_config(
            self.fusion,
            modalities=tuple(self.modalities),
            input_mode=self.input_mode,
            encoder_channels=list(self.encoder_channels),
            decoder_channels=list(self.decoder_channels),
            mrf_kernels=list(self.mrf_kernels),
            dense_layers=self.dense_layers,
            rcb_recurrence=self.rcb_recurrence,
            num_classes=num_classes,
        )
        return cfg

    def loss(self) -> LossConfig:
        return LossConfig(self.lam, self.lovasz_classes)

    def knn(self) -> KnnConfig:
        return KnnConfig(self.knn_S, self.knn_K, self.knn_sigma, self.knn_gauss_bw, self.knn_vote_kept)

    def validate(self, check_paths: bool = True, outputs=()) -> None:
        """Raise ConfigError on bad values or missing input paths (keys in ``outputs`` are not inputs)."""
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if check_paths:
            for key in ("train_scans", "train_labels", "val_scans", "val_labels", "stats", "frequencies"):
                if key in outputs:
                    continue
                val = getattr(self, key)
                if val and not Path(val).exists():
                    raise ConfigError(f"{key}: path {val} does not exist")
            if not self.class_map.startswith("builtin:") and not Path(self.class_map).exists():
                raise ConfigError(f"class_map: path {self.class_map} does not exist")


PROFILES = {
    "desk": {},
    "full": {
        "W": 2048,
        "encoder_channels": list(FULL_ENCODER),
        "decoder_channels": list(FULL_DECODER),
        "epochs": 200,
        "batch_size": 16,
        "class_map": "builtin:semantickitti",
    },
}


def _coerce(name: str, value: str, current):
    typ = {f.name: f.type for f in dataclasses.fields(RunConfig)}[name]
    try:
        if typ == "bool":
            low = value.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(value)
            return low in ("1", "true", "yes", "on")
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        if typ.startswith("list"):
            return [int(v) for v in value.replace(",", " ").split()]
        if typ.startswith("tuple"):
            return tuple(v.strip() for v in value.split(",") if v.strip())
        return value.strip()
    except ValueError:
        raise ConfigError(f"bad value for {name}: {value!r}") from None


def make_config(profile: str = "desk", **overrides) -> RunConfig:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = RunConfig(profile=profile, **PROFILES[profile])
    return apply_overrides(cfg, overrides)


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    names = {f.name for f in dataclasses.fields(RunConfig)}
    for key, val in overrides.items():
        if key not in names:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(val, str):
            val = _coerce(key, val, getattr(cfg, key))
        setattr(cfg, key, val)
    return cfg


def parse_config(text: str, base_dir=None) -> RunConfig:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        pairs[k] = v
    cfg = make_config(pairs.pop("profile", "desk"))
    cfg = apply_overrides(cfg, pairs)
    if base_dir is not None:
        for key in ("train_scans", "train_labels", "val_scans", "val_labels", "stats",
                    "frequencies", "out_dir", "class_map"):
            val = getattr(cfg, key)
            if val and not val.startswith("builtin:") and not Path(val).is_absolute():
                setattr(cfg, key, str(Path(base_dir) / val))
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
