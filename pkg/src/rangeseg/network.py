"""Modality-fusion encoder/decoder for range-image segmentation.

Each modality image (coordinates, depth, intensity) gets its own
multi-receptive-field residual dense block (MRF-RDB) branch. Branch features
are concatenated and reduced by a 1x1 convolution at the stage selected per
modality: before the encoder (early), before the decoder (mid) or before the
classifier (deep). The encoder stacks MRF-RDBs with width-only max-pooling, the
decoder stacks recurrent convolution blocks (RCB) that add upsampled features
to projected encoder skips.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import BatchNormState, Parameter, Tensor

MODALITY_CHANNELS = {"coord": 3, "depth": 1, "intensity": 1}
MODALITIES = ("coord", "depth", "intensity")
STAGES = ("early", "mid", "deep")

FULL_ENCODER = [32, 64, 128, 256, 512]
FULL_DECODER = [256, 128, 64, 32]
DESK_ENCODER = [8, 16, 32, 64, 128]
DESK_DECODER = [64, 32, 16, 8]


@dataclass
class NetworkConfig:
    modalities: tuple[str, ...] = MODALITIES
    input_mode: str = "fused"
    fusion_stage: dict[str, str] = field(default_factory=lambda: {m: "early" for m in MODALITIES})
    encoder_channels: list[int] = field(default_factory=lambda: list(FULL_ENCODER))
    decoder_channels: list[int] = field(default_factory=lambda: list(FULL_DECODER))
    mrf_kernels: list[int] = field(default_factory=lambda: [1, 3, 5, 7])
    dense_layers: int = 3
    rcb_recurrence: int = 2
    num_classes: int = 20
    leaky_slope: float = 0.1

    def stage(self, modality: str) -> str:
        if self.input_mode == "stacked":
            return "early"
        return self.fusion_stage.get(modality, "early")

    def validate(self) -> None:
        if not self.modalities:
            raise ConfigError("at least one modality is required")
        for m in self.modalities:
            if m not in MODALITY_CHANNELS:
                raise ConfigError(f"unknown modality {m!r}")
            if self.stage(m) not in STAGES:
                raise ConfigError(f"unknown fusion stage {self.stage(m)!r} for {m}")
        if self.input_mode not in ("fused", "stacked"):
            raise ConfigError(f"unknown input mode {self.input_mode!r}")
        if not self.encoder_channels or not self.decoder_channels:
            raise ConfigError("encoder and decoder channel lists must be non-empty")
        if len(self.decoder_channels) != len(self.encoder_channels) - 1:
            raise ConfigError("decoder needs exactly one block per encoder block "
                              f"({len(self.encoder_channels) - 1}), got {len(self.decoder_channels)}")
        for c in self.encoder_channels:
            if c % len(self.mrf_kernels) or c % 2:
                raise ConfigError(f"encoder width {c} must split evenly over "
                                  f"{len(self.mrf_kernels)} kernels and be even")
        if not any(self.stage(m) == "early" for m in self.modalities):
            raise ConfigError("at least one modality must be fused at the early stage")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")

    @property
    def downsamples(self) -> int:
        return len(self.encoder_channels) - 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> NetworkConfig:
        d = dict(d)
        d["modalities"] = tuple(d["modalities"])
        return cls(**d)


FUSION_PRESETS = {
    "early": {},
    "mid1": {"intensity": "mid"},
    "mid2": {"depth": "mid"},
    "mid3": {"coord": "mid"},
    "deep1": {"intensity": "deep"},
    "deep2": {"depth": "deep"},
    "deep3": {"coord": "deep"},
}


def preset_config(name: str, **overrides) -> NetworkConfig:
    """Config for one of the seven named fusion positions."""
    if name not in FUSION_PRESETS:
        raise ConfigError(f"unknown fusion preset {name!r}; choose from {sorted(FUSION_PRESETS)}")
    stages = {m: "early" for m in MODALITIES}
    stages.update(FUSION_PRESETS[name])
    cfg = NetworkConfig(fusion_stage=stages, **overrides)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# layers


class Module:
    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def named_buffers(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, BatchNormState):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_buffers(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")
                    elif isinstance(item, BatchNormState):
                        yield f"{name}.{i}", item
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{k}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]


def _kaiming(rng: np.random.Generator, shape, slope: float, dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    std = np.sqrt(2.0 / ((1 + slope ** 2) * fan_in))
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv(Module):
    def __init__(self, rng, cin: int, cout: int, k: int, bias: bool = True,
                 slope: float = 0.1, dtype=np.float32):
        self.weight = Parameter(_kaiming(rng, (cout, cin, k, k), slope, dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, c: int, dtype=np.float32):
        self.gamma = Parameter(np.ones(c, dtype=dtype))
        self.beta = Parameter(np.zeros(c, dtype=dtype))
        self.running = BatchNormState(c, dtype)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta, self.running, mode)


class ConvBNAct(Module):
    def __init__(self, rng, cin, cout, k, slope=0.1, dtype=np.float32):
        self.conv = Conv(rng, cin, cout, k, bias=False, slope=slope, dtype=dtype)
        self.bn = BatchNorm(cout, dtype)
        self.slope = slope

    def __call__(self, x, mode):
        return T.leaky_relu(self.bn(self.conv(x), mode), self.slope)


class MrfRdb(Module):
    """Parallel multi-kernel front end, dense 3x3 stage, 1x1 local fusion, residual add."""

    def __init__(self, rng, cin, cout, kernels=(1, 3, 5, 7), dense_layers=3,
                 slope=0.1, dtype=np.float32):
        part = cout // len(kernels)
        self.front = [ConvBNAct(rng, cin, part, k, slope, dtype) for k in kernels]
        growth = cout // 2
        self.dense = [ConvBNAct(rng, cout + i * growth, growth, 3, slope, dtype)
                      for i in range(dense_layers)]
        self.fuse = Conv(rng, cout + dense_layers * growth, cout, 1, slope=slope, dtype=dtype)
        self.cout = cout

    def __call__(self, x, mode):
        head = T.concat([b(x, mode) for b in self.front])
        feats = [head]
        for layer in self.dense:
            inp = feats[0] if len(feats) == 1 else T.concat(feats)
            feats.append(layer(inp, mode))
        return T.merge(self.fuse(T.concat(feats)), head, "add")


class Rcb(Module):
    """Upsample + skip merge by addition, then a shared 3x3 conv applied recurrently."""

    def __init__(self, rng, cin, cskip, cout, recurrence=2, slope=0.1, dtype=np.float32):
        self.up_proj = Conv(rng, cin, cout, 1, slope=slope, dtype=dtype)
        self.skip_proj = Conv(rng, cskip, cout, 1, slope=slope, dtype=dtype)
        self.rec = Conv(rng, cout, cout, 3, bias=False, slope=slope, dtype=dtype)
        self.bns = [BatchNorm(cout, dtype) for _ in range(recurrence)]
        self.slope = slope
        self.cout = cout

    def __call__(self, x, skip, mode):
        # a 1x1 conv commutes with nearest-neighbour duplication; project first
        up = T.resample(self.up_proj(x), "up")
        s = self.skip_proj(skip)
        if up.shape != s.shape:
            raise ShapeError(f"RCB: upsampled {up.shape} vs skip {s.shape}")
        a = T.merge(up, s, "add")
        h = T.leaky_relu(self.bns[0](self.rec(a), mode), self.slope)
        for bn in self.bns[1:]:
            h = T.leaky_relu(bn(self.rec(T.merge(a, h, "add")), mode), self.slope)
        return h


class Encoder(Module):
    def __init__(self, rng, channels, kernels, dense_layers, slope, dtype):
        self.blocks = [MrfRdb(rng, channels[i - 1], channels[i], kernels, dense_layers, slope, dtype)
                       for i in range(1, len(channels))]

    def __call__(self, x, mode, record=None, tag="enc"):
        skips = []
        for i, block in enumerate(self.blocks, 1):
            x = block(x, mode)
            if record is not None:
                record[f"{tag}{i}"] = x
            skips.append(x)
            x = T.resample(x, "down")
        return x, skips


class Network(Module):
    def __init__(self, cfg: NetworkConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        enc, dec = cfg.encoder_channels, cfg.decoder_channels
        kw = dict(kernels=cfg.mrf_kernels, dense_layers=cfg.dense_layers,
                  slope=cfg.leaky_slope, dtype=dtype)
        s = cfg.leaky_slope

        if cfg.input_mode == "stacked":
            self.early = ["stacked"]
            cin = sum(MODALITY_CHANNELS[m] for m in cfg.modalities)
            self.branches = {"stacked": MrfRdb(rng, cin, enc[0], **kw)}
        else:
            self.early = [m for m in cfg.modalities if cfg.stage(m) == "early"]
            self.branches = {m: MrfRdb(rng, MODALITY_CHANNELS[m], enc[0], **kw) for m in self.early}
        self.early_reduce = (ConvBNAct(rng, len(self.early) * enc[0], enc[0], 1, s, dtype)
                             if len(self.early) > 1 else None)
        self.encoder = Encoder(rng, enc, **kw)
        self.bridge = MrfRdb(rng, enc[-1], enc[-1], **kw)

        self.mid = [m for m in cfg.modalities if cfg.input_mode == "fused" and cfg.stage(m) == "mid"]
        self.mid_branches = {m: MrfRdb(rng, MODALITY_CHANNELS[m], enc[0], **kw) for m in self.mid}
        self.mid_encoders = {m: Encoder(rng, enc, **kw) for m in self.mid}
        self.mid_reduce = (ConvBNAct(rng, (1 + len(self.mid)) * enc[-1], enc[-1], 1, s, dtype)
                           if self.mid else None)

        self.decoder = []
        cin = enc[-1]
        for j, cout in enumerate(dec):
            cskip = enc[len(enc) - 1 - j]
            self.decoder.append(Rcb(rng, cin, cskip, cout, cfg.rcb_recurrence, s, dtype))
            cin = cout

        self.deep = [m for m in cfg.modalities if cfg.input_mode == "fused" and cfg.stage(m) == "deep"]
        self.deep_branches = {m: MrfRdb(rng, MODALITY_CHANNELS[m], enc[0], **kw) for m in self.deep}
        self.deep_reduce = (ConvBNAct(rng, dec[-1] + len(self.deep) * enc[0], dec[-1], 1, s, dtype)
                            if self.deep else None)

        self.classifier = Conv(rng, dec[-1], cfg.num_classes, 3, slope=s, dtype=dtype)

    def block_names(self) -> list[str]:
        names = [f"branch.{m}" for m in self.early]
        names += ["fused"] + [f"enc{i}" for i in range(1, len(self.encoder.blocks) + 1)] + ["bridge"]
        for m in self.mid:
            names += [f"branch.{m}"] + [f"{m}.enc{i}" for i in range(1, len(self.encoder.blocks) + 1)]
        if self.mid:
            names.append("mid_fused")
        names += [f"dec{j}" for j in range(1, len(self.decoder) + 1)]
        names += [f"branch.{m}" for m in self.deep]
        if self.deep:
            names.append("deep_fused")
        names.append("logits")
        return names

    def __call__(self, inputs: dict[str, np.ndarray], mode: str = "train",
                 record: dict | None = None) -> Tensor:
        """Per-pixel class logits (N, num_classes, H, W) from modality images.

        Inputs are (N, C, H, W) arrays, or Tensors when input gradients are wanted.
        """
        def inp(name):
            if name == "stacked":
                parts = [inputs[m] for m in self.cfg.modalities]
                if any(isinstance(p, Tensor) for p in parts):
                    arr = T.concat([p if isinstance(p, Tensor) else Tensor(p) for p in parts])
                else:
                    arr = np.concatenate(parts, axis=1)
            else:
                arr = inputs[name]
            if not isinstance(arr, Tensor):
                arr = Tensor(np.asarray(arr, dtype=self.dtype))
            if arr.ndim != 4:
                raise ShapeError(f"input {name} must be (N, C, H, W), got {arr.shape}")
            if arr.shape[3] % (2 ** self.cfg.downsamples):
                raise ShapeError(f"input width {arr.shape[3]} not divisible by "
                                 f"{2 ** self.cfg.downsamples}")
            return arr

        def rec(name, t):
            if record is not None:
                record[name] = t
            return t

        feats = [rec(f"branch.{m}", self.branches[m](inp(m), mode)) for m in self.early]
        x = feats[0] if self.early_reduce is None else self.early_reduce(T.concat(feats), mode)
        rec("fused", x)
        x, skips = self.encoder(x, mode, record)
        x = rec("bridge", self.bridge(x, mode))

        if self.mid:
            parts = [x]
            for m in self.mid:
                y = rec(f"branch.{m}", self.mid_branches[m](inp(m), mode))
                y, _ = self.mid_encoders[m](y, mode, record, tag=f"{m}.enc")
                parts.append(y)
            x = rec("mid_fused", self.mid_reduce(T.concat(parts), mode))

        for j, block in enumerate(self.decoder):
            x = rec(f"dec{j + 1}", block(x, skips[len(skips) - 1 - j], mode))

        if self.deep:
            parts = [x] + [rec(f"branch.{m}", self.deep_branches[m](inp(m), mode)) for m in self.deep]
            x = rec("deep_fused", self.deep_reduce(T.concat(parts), mode))

        return rec("logits", self.classifier(x))


def build_network(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> Network:
    return Network(cfg, seed, dtype)


def parameter_count(net: Module) -> int:
    return int(sum(p.size for p in net.parameters()))


def forward(net: Network, inputs, mode: str = "eval") -> Tensor:
    """Run the network; eval mode records no autodiff lineage."""
    if not isinstance(inputs, dict):
        from .projection import stack_inputs
        inputs = stack_inputs(inputs)
    if mode == "eval":
        with T.no_grad():
            return net(inputs, "eval")
    return net(inputs, mode)


def dump_activations(net: Network, inputs, block_names, path=None, mode: str = "eval") -> dict:
    """Collect named block outputs; optionally write them to an ``.npz`` archive."""
    known = set(net.block_names())
    unknown = [b for b in block_names if b not in known]
    if unknown:
        raise KeyError(f"unknown block name(s): {unknown}; known: {sorted(known)}")
    if not isinstance(inputs, dict):
        from .projection import stack_inputs
        inputs = stack_inputs(inputs)
    record: dict[str, Tensor] = {}
    with T.no_grad():
        net(inputs, mode, record)
    out = {b: record[b].data for b in block_names}
    if path is not None:
        np.savez(path, **out)
    return out
