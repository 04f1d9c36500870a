"""Shared encoder f, projector g, predictor q and classifier h.

The same four components process ECG and PPG; the modality of an input is
metadata only.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import (
    BatchNorm1d,
    Conv1d,
    Linear,
    MaxPool1d,
    Module,
    Tensor,
    get_default_dtype,
    no_grad,
    ops,
)
from .numerics.core import NonFiniteError, ShapeError

PRESETS = {
    "resnet34_1d": {"stage_blocks": (3, 4, 6, 3), "stage_channels": (64, 128, 256, 512)},
    "resnet10_1d": {"stage_blocks": (1, 1, 1, 1), "stage_channels": (32, 64, 128, 256)},
}

COMPONENTS_FULL = ("encoder", "projector", "predictor", "classifier")
COMPONENTS_INFERENCE = ("encoder", "classifier")


@dataclass(frozen=True)
class EncoderConfig:
    depth_preset: str = "resnet34_1d"
    input_length: int = 2400
    input_channels: int = 1
    stage_blocks: tuple[int, ...] | None = None
    stage_channels: tuple[int, ...] | None = None
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_pool_kernel: int = 3
    stem_pool_stride: int = 2

    def __post_init__(self):
        if self.depth_preset not in PRESETS:
            raise ValueError(f"unknown preset {self.depth_preset!r}; choose from {sorted(PRESETS)}")
        preset = PRESETS[self.depth_preset]
        if self.stage_blocks is None:
            object.__setattr__(self, "stage_blocks", tuple(preset["stage_blocks"]))
        if self.stage_channels is None:
            object.__setattr__(self, "stage_channels", tuple(preset["stage_channels"]))
        object.__setattr__(self, "stage_blocks", tuple(self.stage_blocks))
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        if self.input_length < 64:
            raise ValueError(f"input_length must be >= 64, got {self.input_length}")
        if len(self.stage_blocks) != len(self.stage_channels) or not self.stage_blocks:
            raise ValueError("stage_blocks and stage_channels must be non-empty and equally long")

    @property
    def feature_dim(self) -> int:
        return self.stage_channels[-1]


@dataclass(frozen=True)
class HeadConfig:
    feature_dim: int = 512
    projector_hidden_dim: int = 512
    projection_dim: int = 128
    num_classes: int = 2

    @classmethod
    def for_encoder(cls, enc: EncoderConfig, **kw) -> "HeadConfig":
        kw.setdefault("projector_hidden_dim", enc.feature_dim)
        return cls(feature_dim=enc.feature_dim, **kw)


def config_digest(enc: EncoderConfig, heads: HeadConfig) -> str:
    blob = json.dumps({"encoder": asdict(enc), "heads": asdict(heads)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


# the encoder runs channel-major internally; see ops._conv1d
_LAYOUT = "cnl"


class BasicBlock(Module):
    def __init__(self, cin, cout, stride, rng):
        super().__init__()
        self.conv1 = Conv1d(cin, cout, 3, stride, 1, rng, layout=_LAYOUT)
        self.bn1 = BatchNorm1d(cout, layout=_LAYOUT)
        self.conv2 = Conv1d(cout, cout, 3, 1, 1, rng, layout=_LAYOUT)
        self.bn2 = BatchNorm1d(cout, layout=_LAYOUT)
        if stride != 1 or cin != cout:
            self.down_conv = Conv1d(cin, cout, 1, stride, 0, rng, layout=_LAYOUT)
            self.down_bn = BatchNorm1d(cout, layout=_LAYOUT)
        else:
            self.down_conv = self.down_bn = None

    def forward(self, x: Tensor) -> Tensor:
        out = ops.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        shortcut = x if self.down_conv is None else self.down_bn(self.down_conv(x))
        return ops.relu(ops.add(out, shortcut))


class Stage(Module):
    def __init__(self, cin, cout, n_blocks, stride, rng):
        super().__init__()
        self.block = [BasicBlock(cin if i == 0 else cout, cout, stride if i == 0 else 1, rng)
                      for i in range(n_blocks)]

    def forward(self, x: Tensor) -> Tensor:
        for b in self.block:
            x = b(x)
        return x


class ResNet1d(Module):
    """1-D residual encoder: stem conv + max-pool, residual stages, global average pool."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c0 = cfg.stage_channels[0]
        self.stem_conv = Conv1d(cfg.input_channels, c0, cfg.stem_kernel, cfg.stem_stride,
                                cfg.stem_kernel // 2, rng, layout=_LAYOUT)
        self.stem_bn = BatchNorm1d(c0, layout=_LAYOUT)
        self.stem_pool = MaxPool1d(cfg.stem_pool_kernel, cfg.stem_pool_stride, cfg.stem_pool_kernel // 2,
                                   layout=_LAYOUT)
        cin = c0
        self.n_stages = len(cfg.stage_blocks)
        for i, (n, c) in enumerate(zip(cfg.stage_blocks, cfg.stage_channels)):
            setattr(self, f"stage{i + 1}", Stage(cin, c, n, 1 if i == 0 else 2, rng))
            cin = c

    def stages(self, x: Tensor) -> list[Tensor]:
        """Outputs of every residual stage followed by the pooled feature vector.

        ``x`` is ``[batch, channels, length]``; stage outputs are channel-major
        ``[channels, batch, length]``, the pooled vector is ``[batch, channels]``.
        """
        if x.requires_grad:
            raise ValueError("encoder input must not require a gradient")
        h = Tensor(np.ascontiguousarray(x.data.transpose(1, 0, 2)))
        h = self.stem_pool(ops.relu(self.stem_bn(self.stem_conv(h))))
        outs = []
        for i in range(self.n_stages):
            h = getattr(self, f"stage{i + 1}")(h)
            outs.append(h)
        outs.append(ops.global_avgpool1d(h, layout=_LAYOUT))
        return outs

    def forward(self, x: Tensor) -> Tensor:
        return self.stages(x)[-1]


class Projector(Module):
    """One hidden layer: linear, batch norm, ReLU, linear."""

    def __init__(self, cfg: HeadConfig, rng):
        super().__init__()
        self.fc1 = Linear(cfg.feature_dim, cfg.projector_hidden_dim, rng)
        self.bn = BatchNorm1d(cfg.projector_hidden_dim)
        self.fc2 = Linear(cfg.projector_hidden_dim, cfg.projection_dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.relu(self.bn(self.fc1(x))))


@dataclass
class ForwardBundle:
    feature: Tensor
    projection: Tensor | None
    prediction: Tensor | None
    logits: Tensor

    def numpy(self) -> dict[str, np.ndarray | None]:
        return {k: (None if v is None else v.data) for k, v in vars(self).items()}


def prepare_input(signals) -> Tensor:
    """Per-segment z-scoring to ``[batch, 1, length]``; flat segments become zeros."""
    x = np.asarray(signals, dtype=get_default_dtype())
    if x.ndim == 1:
        x = x[None]
    if x.ndim == 3:
        x = x[:, 0]
    mu = x.mean(axis=1, keepdims=True)
    sd = x.std(axis=1, keepdims=True)
    scale = np.where(sd > 1e-8, sd, 1.0).astype(x.dtype)
    return Tensor(((x - mu) / scale)[:, None, :])


class SiamAFModel(Module):
    """Holder of the four shared components.

    Inference-only models (``components == ("encoder", "classifier")``) have
    ``projector = predictor = None``.
    """

    def __init__(self, enc: EncoderConfig, heads: HeadConfig, encoder, projector, predictor, classifier):
        super().__init__()
        self.enc_cfg, self.head_cfg = enc, heads
        self.encoder = encoder
        self.projector = projector
        self.predictor = predictor
        self.classifier = classifier
        for name in COMPONENTS_FULL:
            comp = getattr(self, name)
            if comp is not None:
                comp.assign_names(name)

    @property
    def components(self) -> tuple[str, ...]:
        return tuple(n for n in COMPONENTS_FULL if getattr(self, n) is not None)

    @property
    def mode(self) -> str:
        return "training" if self.training else "inference"

    @property
    def digest(self) -> str:
        return config_digest(self.enc_cfg, self.head_cfg)

    def parameters_of(self, *names: str):
        return [p for n in names if getattr(self, n) is not None for p in getattr(self, n).parameters()]

    def inference_copy(self) -> "SiamAFModel":
        """A model sharing f and h only; g and q are dropped."""
        m = SiamAFModel(self.enc_cfg, self.head_cfg, self.encoder, None, None, self.classifier)
        return m.train(self.training)

    def _check_input(self, x: Tensor):
        if x.shape[-1] != self.enc_cfg.input_length:
            raise ShapeError(f"segment length {x.shape[-1]} != input_length {self.enc_cfg.input_length}")

    def forward(self, x: Tensor, with_heads: bool = True) -> ForwardBundle:
        self._check_input(x)
        feature = self.encoder(x)
        logits = self.classifier(feature)
        z = qz = None
        if with_heads and self.projector is not None:
            z = self.projector(feature)
            qz = self.predictor(z)
        return ForwardBundle(feature, z, qz, logits)


def build_model(enc: EncoderConfig | None = None, heads: HeadConfig | None = None, seed: int = 0,
                components=COMPONENTS_FULL) -> SiamAFModel:
    enc = EncoderConfig() if enc is None else enc
    heads = HeadConfig.for_encoder(enc) if heads is None else heads
    if heads.feature_dim != enc.feature_dim:
        raise ValueError(f"head feature_dim {heads.feature_dim} != encoder output {enc.feature_dim}")
    # separate streams so adding/removing heads never changes encoder init
    seeds = np.random.SeedSequence(seed).spawn(4)
    rngs = [np.random.default_rng(s) for s in seeds]
    encoder = ResNet1d(enc, rngs[0])
    projector = Projector(heads, rngs[1]) if "projector" in components else None
    predictor = Linear(heads.projection_dim, heads.projection_dim, rngs[2]) if "predictor" in components else None
    classifier = Linear(heads.feature_dim, heads.num_classes, rngs[3])
    return SiamAFModel(enc, heads, encoder, projector, predictor, classifier)


def _segment_array(segment) -> np.ndarray:
    return np.asarray(getattr(segment, "samples", segment))


def forward_pass(model: SiamAFModel, segment, modality_tag: str | None = None) -> ForwardBundle:
    """Forward one segment (or a ``[batch, length]`` array) through f, g, q and h.

    ``modality_tag`` is accepted for bookkeeping and ignored by the network.
    """
    x = prepare_input(_segment_array(segment))
    bundle = model(x)
    for name, t in vars(bundle).items():
        if t is not None and not np.isfinite(t.data).all():
            raise NonFiniteError(f"non-finite {name}")
    return bundle


def stage_activations(model: SiamAFModel, segment) -> list[np.ndarray]:
    """Activations after each residual stage plus the final pooled feature (inference mode)."""
    if model.training:
        raise RuntimeError("stage_activations requires inference mode; call model.eval()")
    x = prepare_input(_segment_array(segment))
    model._check_input(x)
    with no_grad():
        outs = model.encoder.stages(x)
    return [t.data.transpose(1, 0, 2) for t in outs[:-1]] + [outs[-1].data]


def embed(model: SiamAFModel, signals: np.ndarray, batch_size: int = 256, **kw) -> dict[str, np.ndarray]:
    """Batched inference returning stacked feature/projection/prediction/logits arrays."""
    parts: dict[str, list] = {}
    with no_grad():
        for i in range(0, len(signals), batch_size):
            b = forward_pass(model, signals[i : i + batch_size])
            for k, v in b.numpy().items():
                if v is not None:
                    parts.setdefault(k, []).append(v)
    return {k: np.concatenate(v) for k, v in parts.items()}


def count_parameters(model: Module) -> int:
    return int(sum(p.data.size for p in model.parameters()))
