"""Transformer stream, CNN streams, concatenation-fusion classifiers and the soft-voting ensemble."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError, StateError
from .layers import (ASPP, BatchNorm, Conv2d, Dense, DepthwiseConv2d, Module, PatchEmbed, RegularizerSpec,
                     SEBlock, TransformerBlock, global_average_pool)
from .tensor import Tensor

FLAVORS = ("plain", "residual", "dense_connected", "depthwise_separable")
FLAVOR_ALIASES = {"dense": "dense_connected", "sep": "depthwise_separable", "separable": "depthwise_separable"}


def canonical_flavor(name: str) -> str:
    name = FLAVOR_ALIASES.get(name, name)
    if name not in FLAVORS:
        raise ConfigurationError(f"unknown backbone flavor {name!r}; choose from {FLAVORS + tuple(FLAVOR_ALIASES)}")
    return name


@dataclass
class ModelConfig:
    """Architecture hyperparameters of one fusion model.

    ``n_vit`` and ``cnn_flavors`` only differ from their defaults for the
    multi-extractor models of the ablation study.
    """

    num_classes: int = 8
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    embed_dim: int = 32
    depth: int = 2
    heads: int = 4
    width_factor: float = 0.25
    head_widths: tuple[int, int, int] = (512, 256, 121)
    flavor: str = "plain"
    cnn_flavors: tuple[str, ...] = ()
    n_vit: int = 1
    cnn_channels: int = 16
    stages: int = 2
    growth: int = 8
    dense_layers: int = 2
    aspp_branch_channels: int = 8
    aspp_channels: int = 16
    se_reduction: int = 4
    seed: int = 0

    def __post_init__(self):
        self.flavor = canonical_flavor(self.flavor)
        self.cnn_flavors = tuple(canonical_flavor(f) for f in self.cnn_flavors) or (self.flavor,)
        self.head_widths = tuple(int(w) for w in self.head_widths)
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.width_factor <= 0:
            raise ConfigurationError(f"width_factor must be > 0, got {self.width_factor}")
        if self.n_vit < 0 or (self.n_vit == 0 and not self.cnn_flavors):
            raise ConfigurationError("a fusion model needs at least one extractor")

    @property
    def mlp_widths(self) -> tuple[int, ...]:
        return tuple(max(1, int(round(w * self.width_factor))) for w in self.head_widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_widths"] = list(self.head_widths)
        d["cnn_flavors"] = list(self.cnn_flavors)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("head_widths", "cnn_flavors"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# ---------------------------------------------------------------------------
# CNN backbones
# ---------------------------------------------------------------------------


class Backbone(Module):
    out_channels: int
    stages: int

    def check_input(self, x: Tensor) -> None:
        H, W = x.shape[-2:]
        step = 2 ** self.stages
        if H < 16 or W < 16 or H % step or W % step:
            raise DimensionError(
                f"backbone with {self.stages} stride-2 stages needs spatial >= 16 and divisible by {step}, got {H}×{W}"
            )


class PlainBackbone(Backbone):
    """Stacked conv-relu pairs; the first conv of each stage has stride 2."""

    def __init__(self, in_ch: int, channels: int, stages: int, rng: np.random.Generator):
        self.stages = stages
        self.convs = []
        c = in_ch
        for _ in range(stages):
            self.convs.append(Conv2d(c, channels, 3, stride=2, padding=1, rng=rng))
            self.convs.append(Conv2d(channels, channels, 3, padding=1, rng=rng))
            c = channels
        self.out_channels = channels

    def forward(self, x: Tensor) -> Tensor:
        self.check_input(x)
        for conv in self.convs:
            x = T.relu(conv(x))
        return x


class ResidualBackbone(Backbone):
    """Pre-activation residual stages.

    Each stage computes ``shortcut(x) + conv2(relu(conv1(relu(x))))`` where
    ``conv1`` has stride 2 and the shortcut is parameter-free: 2×2 average
    pooling followed by zero channel padding.
    """

    def __init__(self, in_ch: int, channels: int, stages: int, rng: np.random.Generator):
        if channels < in_ch:
            raise ConfigurationError(f"residual backbone needs channels >= input channels ({channels} < {in_ch})")
        self.stages = stages
        self.conv1, self.conv2 = [], []
        c = in_ch
        for _ in range(stages):
            self.conv1.append(Conv2d(c, channels, 3, stride=2, padding=1, rng=rng))
            self.conv2.append(Conv2d(channels, channels, 3, padding=1, rng=rng))
            c = channels
        self.out_channels = channels

    def forward(self, x: Tensor) -> Tensor:
        self.check_input(x)
        for c1, c2 in zip(self.conv1, self.conv2):
            skip = T.pad_channels(T.avg_pool2(x), self.out_channels)
            x = skip + c2(T.relu(c1(T.relu(x))))
        return x


class DenseBackbone(Backbone):
    """Strided stem stages followed by one densely connected block.

    Every dense layer sees the concatenation of all earlier feature maps and
    adds ``growth`` channels, so the output has ``base + growth * layers``.
    """

    def __init__(self, in_ch: int, base: int, stages: int, growth: int, layers: int, rng: np.random.Generator):
        self.stages = stages
        self.stem = []
        c = in_ch
        for _ in range(stages):
            self.stem.append(Conv2d(c, base, 3, stride=2, padding=1, rng=rng))
            c = base
        self.dense = [Conv2d(base + i * growth, growth, 3, padding=1, rng=rng) for i in range(layers)]
        self.out_channels = base + growth * layers

    def forward(self, x: Tensor) -> Tensor:
        self.check_input(x)
        for conv in self.stem:
            x = T.relu(conv(x))
        for conv in self.dense:
            x = T.concat([x, T.relu(conv(x))], axis=1)
        return x


class SeparableBackbone(Backbone):
    """Depthwise + pointwise convolution pairs, two per stage."""

    def __init__(self, in_ch: int, channels: int, stages: int, rng: np.random.Generator):
        self.stages = stages
        self.depthwise = []
        self.pointwise = []
        c = in_ch
        for _ in range(stages):
            self.depthwise.append(DepthwiseConv2d(c, 3, stride=2, padding=1, rng=rng))
            self.pointwise.append(Conv2d(c, channels, 1, rng=rng))
            self.depthwise.append(DepthwiseConv2d(channels, 3, stride=1, padding=1, rng=rng))
            self.pointwise.append(Conv2d(channels, channels, 1, rng=rng))
            c = channels
        self.out_channels = channels

    def forward(self, x: Tensor) -> Tensor:
        self.check_input(x)
        for dw, pw in zip(self.depthwise, self.pointwise):
            x = T.relu(pw(dw(x)))
        return x


def build_backbone(flavor: str, cfg: ModelConfig, rng: np.random.Generator) -> Backbone:
    flavor = canonical_flavor(flavor)
    if flavor == "plain":
        return PlainBackbone(cfg.channels, cfg.cnn_channels, cfg.stages, rng)
    if flavor == "residual":
        return ResidualBackbone(cfg.channels, cfg.cnn_channels, cfg.stages, rng)
    if flavor == "dense_connected":
        return DenseBackbone(cfg.channels, cfg.cnn_channels, cfg.stages, cfg.growth, cfg.dense_layers, rng)
    return SeparableBackbone(cfg.channels, cfg.cnn_channels, cfg.stages, rng)


def backbone_forward(backbone: Backbone, x: Tensor) -> Tensor:
    """Run a backbone on ``C×H×W`` or ``B×C×H×W`` input."""
    if x.ndim == 3:
        out = backbone(x.reshape((1,) + x.shape))
        return out.reshape(out.shape[1:])
    return backbone(x)


# ---------------------------------------------------------------------------
# streams
# ---------------------------------------------------------------------------


def _mlp(in_width: int, widths: Sequence[int], rng: np.random.Generator) -> list[Dense]:
    layers = []
    for i, w in enumerate(widths):
        layers.append(Dense(in_width, w, "relu", regularizer=RegularizerSpec() if i == 0 else None, rng=rng))
        in_width = w
    return layers


class TransformerStream(Module):
    """Patch embedding, transformer blocks, token mean-pool, batch norm and a three-layer MLP."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.patch_embed = PatchEmbed(cfg.image_size, cfg.patch_size, cfg.channels, cfg.embed_dim, rng=rng)
        self.blocks = [TransformerBlock(cfg.embed_dim, cfg.heads, rng=rng) for _ in range(cfg.depth)]
        self.bn = BatchNorm(cfg.embed_dim)
        self.mlp = _mlp(cfg.embed_dim, cfg.mlp_widths, rng)

    @property
    def out_width(self) -> int:
        return self.mlp[-1].W.shape[1]

    def extractor_parameters(self) -> list[Tensor]:
        params = self.patch_embed.parameters()
        for block in self.blocks:
            params += block.parameters()
        return params

    def forward(self, x: Tensor, taps: dict | None = None) -> Tensor:
        tokens = self.patch_embed(x)
        for block in self.blocks:
            tokens = block(tokens)
        h = self.bn(tokens.mean(axis=1))
        for layer in self.mlp:
            h = layer(h)
        return h


class CNNStream(Module):
    """backbone -> ASPP -> SE -> GAP -> BN -> MLP."""

    SPATIAL_LAYERS = ("backbone", "aspp", "se")

    def __init__(self, flavor: str, cfg: ModelConfig, rng: np.random.Generator):
        self.flavor = canonical_flavor(flavor)
        self.backbone = build_backbone(self.flavor, cfg, rng)
        self.aspp = ASPP(self.backbone.out_channels, cfg.aspp_branch_channels, cfg.aspp_channels, rng=rng)
        self.se = SEBlock(cfg.aspp_channels, cfg.se_reduction, rng=rng)
        self.bn = BatchNorm(cfg.aspp_channels)
        self.mlp = _mlp(cfg.aspp_channels, cfg.mlp_widths, rng)

    @property
    def out_width(self) -> int:
        return self.mlp[-1].W.shape[1]

    def extractor_parameters(self) -> list[Tensor]:
        return self.backbone.parameters()

    def forward(self, x: Tensor, taps: dict | None = None) -> Tensor:
        f = self.backbone(x)
        a = self.aspp(f)
        r = self.se(a)
        if taps is not None:
            taps.update(backbone=f, aspp=a, se=r)
        h = self.bn(global_average_pool(r))
        for layer in self.mlp:
            h = layer(h)
        return h


class FusionModel(Module):
    """Transformer and CNN stream outputs concatenated into one softmax head.

    Args:
        cfg: architecture; ``cfg.seed`` fixes the initial weights.
    """

    def __init__(self, cfg: ModelConfig):
        self.config = cfg
        seeds = np.random.SeedSequence([cfg.seed, 0x5EED]).spawn(cfg.n_vit + len(cfg.cnn_flavors) + 1)
        self.tstreams = [TransformerStream(cfg, np.random.default_rng(s)) for s in seeds[:cfg.n_vit]]
        self.cstreams = [CNNStream(f, cfg, np.random.default_rng(s))
                         for f, s in zip(cfg.cnn_flavors, seeds[cfg.n_vit:-1])]
        width = sum(s.out_width for s in self.tstreams) + sum(s.out_width for s in self.cstreams)
        self.head = Dense(width, cfg.num_classes, "none", rng=np.random.default_rng(seeds[-1]))
        self.trained = False

    @property
    def tstream(self) -> TransformerStream:
        return self.tstreams[0]

    @property
    def cstream(self) -> CNNStream:
        return self.cstreams[0]

    @property
    def backbone_flavor(self) -> str:
        return self.config.flavor

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def streams(self) -> list[Module]:
        return [*self.tstreams, *self.cstreams]

    def regularized_layers(self) -> list[Dense]:
        return [m for m in self.modules() if isinstance(m, Dense) and m.regularizer is not None]

    def extractor_parameters(self) -> list[Tensor]:
        return [p for s in self.streams() for p in s.extractor_parameters()]

    def freeze_extractors(self, frozen: bool = True) -> None:
        for p in self.extractor_parameters():
            p.requires_grad = not frozen
            p.grad = None

    def forward(self, img: Tensor, taps: dict | None = None) -> Tensor:
        """Class logits, ``B×K`` (or ``K`` for a single ``C×H×W`` image). Arrays are wrapped as tensors."""
        if not isinstance(img, Tensor):
            img = Tensor(img)
        single = img.ndim == 3
        x = img.reshape((1,) + img.shape) if single else img
        feats = []
        for i, s in enumerate(self.streams()):
            stream_taps = {} if taps is not None else None
            feats.append(s(x, stream_taps))
            if taps is not None and stream_taps:
                taps.update({f"cnn{i - len(self.tstreams)}.{k}": v for k, v in stream_taps.items()})
        logits = self.head(T.concat(feats, axis=1))
        return logits.reshape(logits.shape[1:]) if single else logits

    def predict_proba(self, img: Tensor) -> Tensor:
        return T.softmax(self.forward(img))


def fusion_forward(model: FusionModel, img: Tensor) -> Tensor:
    """Class probabilities of one fusion model."""
    return model.predict_proba(img)


# ---------------------------------------------------------------------------
# soft voting
# ---------------------------------------------------------------------------


def soft_vote(probs: Sequence, expected: int | None = 4, atol: float = 1e-4) -> tuple:
    """Sum member class distributions and take the argmax.

    ``probs`` is a sequence of ``K`` vectors (or ``N×K`` arrays for a batch).
    The sum is returned unnormalized. Ties resolve to the lowest class index.

    Returns:
        ``(label, combined)``; for batched input ``label`` is an int array.

    Raises:
        ContractError: wrong member count, or a member that is not a distribution.
    """
    arrays = [np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64) for p in probs]
    if expected is not None and len(arrays) != expected:
        raise ContractError(f"soft voting expects {expected} member distributions, got {len(arrays)}")
    if not arrays:
        raise ContractError("soft voting needs at least one member")
    for i, a in enumerate(arrays):
        if a.shape != arrays[0].shape:
            raise ContractError(f"member {i} has shape {a.shape}, expected {arrays[0].shape}")
        if np.any(a < 0) or np.any(np.abs(a.sum(axis=-1) - 1) > atol):
            raise ContractError(f"member {i} is not a probability distribution")
    combined = np.sum(arrays, axis=0)
    label = np.argmax(combined, axis=-1)
    return (int(label) if combined.ndim == 1 else label), combined


@dataclass
class Ensemble:
    """Four fusion models with distinct backbone flavors.

    A ``None`` entry marks a member slot that has not been loaded yet.
    """

    members: list = field(default_factory=list)
    expected: int = 4

    def __post_init__(self):
        if len(self.members) != self.expected:
            raise ContractError(f"ensemble needs exactly {self.expected} members, got {len(self.members)}")
        loaded = [m for m in self.members if m is not None]
        flavors = [tuple(m.config.cnn_flavors) for m in loaded]
        if len(set(flavors)) != len(flavors):
            raise ContractError(f"ensemble member flavors must be pairwise distinct, got {flavors}")
        if len({m.num_classes for m in loaded}) > 1:
            raise ContractError("ensemble members disagree on num_classes")
        if len({id(p) for m in loaded for p in m.parameters()}) != sum(len(m.parameters()) for m in loaded):
            raise ContractError("ensemble members must not share parameters")

    def _check_loaded(self):
        missing = [i for i, m in enumerate(self.members) if m is None]
        if missing:
            raise StateError(f"ensemble members {missing} are not loaded")

    def member_probabilities(self, img: Tensor, concurrent: bool = False) -> list[np.ndarray]:
        self._check_loaded()
        for m in self.members:
            m.eval()

        def run(m):
            with T.no_grad():
                return fusion_forward(m, img).data

        if concurrent:
            with ThreadPoolExecutor(max_workers=len(self.members)) as pool:
                return list(pool.map(run, self.members))
        return [run(m) for m in self.members]

    def predict(self, img: Tensor, concurrent: bool = False):
        """Returns ``(label, combined, per_member)``."""
        per_member = self.member_probabilities(img, concurrent)
        label, combined = soft_vote(per_member, expected=self.expected)
        return label, combined, per_member


def ensemble_predict(ens: Ensemble, img: Tensor, concurrent: bool = False):
    return ens.predict(img, concurrent)
