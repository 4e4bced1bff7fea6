"""Neural-network building blocks on top of :mod:`fusionvote.tensor`.

Layers accept either a single sample (``C×H×W`` images, ``T×D`` tokens) or
a leading batch axis. Parameters are float32 until :meth:`Module.astype`
converts them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError, InvariantViolation, StateError
from .tensor import Tensor, parameter


def _he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _glorot_normal(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)


class Module:
    """Minimal parameter container, modelled on the usual ``nn.Module`` idiom."""

    training: bool = True
    _buffer_names: tuple[str, ...] = ()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.is_param:
                yield prefix + name, val
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, "Module", str]]:
        for attr in self._buffer_names:
            yield prefix + attr, self, attr
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        for name, mod, attr in self.named_buffers():
            state[name] = getattr(mod, attr)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = {name: (mod, attr) for name, mod, attr in self.named_buffers()}
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise DimensionError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)
        for name, (mod, attr) in buffers.items():
            cur = getattr(mod, attr)
            setattr(mod, attr, np.asarray(state[name]).astype(cur.dtype, copy=True))

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, mod, attr in self.named_buffers():
            setattr(mod, attr, getattr(mod, attr).astype(dtype))
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self, trainable_only: bool = False) -> int:
        params = self.trainable_parameters() if trainable_only else self.parameters()
        return int(sum(p.size for p in params))


@dataclass(frozen=True)
class RegularizerSpec:
    """Penalty coefficients attached to a dense layer."""

    l2_kernel: float = 0.016
    l2_activity: float = 0.006
    l1_bias: float = 0.006

    def __post_init__(self):
        if min(self.l2_kernel, self.l2_activity, self.l1_bias) < 0:
            raise ConfigurationError(f"regularizer coefficients must be >= 0: {self}")


class Dense(Module):
    """Fully connected layer ``activation(x @ W + b)``.

    When a :class:`RegularizerSpec` is attached the post-activation output
    of the most recent forward pass is kept in ``last_activity`` for the
    activity penalty.
    """

    def __init__(self, in_features: int, out_features: int, activation: str = "none",
                 regularizer: RegularizerSpec | None = None, rng: np.random.Generator | None = None):
        if in_features < 1 or out_features < 1:
            raise ConfigurationError(f"dense widths must be >= 1, got {in_features}->{out_features}")
        if activation not in ("relu", "none"):
            raise ConfigurationError(f"dense activation must be 'relu' or 'none', got {activation!r}")
        rng = rng or np.random.default_rng(0)
        init = _he_normal if activation == "relu" else (lambda r, s, fi: _glorot_normal(r, s, fi, out_features))
        self.W = parameter(init(rng, (in_features, out_features), in_features))
        self.b = parameter(np.zeros(out_features))
        self.activation = activation
        self.regularizer = regularizer
        self.last_activity: Tensor | None = None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.W.shape[0]:
            raise DimensionError(f"dense layer expects {self.W.shape[0]} input features, got shape {x.shape}")
        y = T.activation(x @ self.W + self.b, self.activation)
        if self.regularizer is not None:
            self.last_activity = y
        return y

    def penalty(self) -> Tensor | None:
        """Weighted L2-kernel + L2-activity + L1-bias penalty, or None if unregularized."""
        spec = self.regularizer
        if spec is None:
            return None
        total = (self.W * self.W).sum() * spec.l2_kernel + T.absolute(self.b).sum() * spec.l1_bias
        if spec.l2_activity > 0:
            a = self.last_activity
            if a is None:
                raise StateError("activity penalty requested before any forward pass")
            a2 = a.reshape(-1, a.shape[-1])
            total = total + (a2 * a2).sum(axis=1).mean() * spec.l2_activity
        return total


class BatchNorm(Module):
    """Batch normalization over the channel axis (axis 1, or the last axis of 2-D input)."""

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.99, epsilon: float = 0.001):
        if not 0 <= momentum < 1:
            raise ConfigurationError(f"momentum must be in [0, 1), got {momentum}")
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.epsilon = epsilon

    def forward(self, x: Tensor) -> Tensor:
        axes = (0,) if x.ndim == 2 else (0,) + tuple(range(2, x.ndim))
        bshape = (1, -1) + (1,) * (x.ndim - 2)
        gamma = self.gamma.reshape(bshape)
        beta = self.beta.reshape(bshape)
        if self.training:
            if x.shape[0] < 2:
                raise ContractError(f"batch norm in training mode needs batch >= 2, got {x.shape[0]}")
            mu = x.mean(axis=axes, keepdims=True)
            xc = x - mu
            var = (xc * xc).mean(axis=axes, keepdims=True)
            m = self.momentum
            self.running_mean = (m * self.running_mean + (1 - m) * mu.data.reshape(-1)).astype(self.running_mean.dtype)
            self.running_var = (m * self.running_var + (1 - m) * var.data.reshape(-1)).astype(self.running_var.dtype)
            return xc * (var + self.epsilon) ** -0.5 * gamma + beta
        scale = (1.0 / np.sqrt(self.running_var + self.epsilon)).astype(x.dtype).reshape(bshape)
        shift = self.running_mean.astype(x.dtype).reshape(bshape)
        return (x - shift) * scale * gamma + beta


class LayerNorm(Module):
    def __init__(self, dim: int, epsilon: float = 1e-5):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self.epsilon = epsilon

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc * (var + self.epsilon) ** -0.5 * self.gain + self.bias


def global_average_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes: ``C×H×W -> C`` or ``B×C×H×W -> B×C``."""
    if x.ndim not in (3, 4):
        raise DimensionError(f"global_average_pool expects (B,)C,H,W, got {x.shape}")
    return x.mean(axis=(-2, -1))


def _batched(x: Tensor, ndim: int) -> tuple[Tensor, bool]:
    if x.ndim == ndim - 1:
        return x.reshape((1,) + x.shape), True
    return x, False


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1, dilation: int = 1,
                 padding: int = 0, bias: bool = True, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.weight = parameter(_he_normal(rng, (out_ch, in_ch, k, k), in_ch * k * k))
        self.bias = parameter(np.zeros(out_ch)) if bias else None
        self.stride, self.dilation, self.padding = stride, dilation, padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.dilation, self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, k: int = 3, stride: int = 1, padding: int = 1,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.weight = parameter(_he_normal(rng, (channels, 1, k, k), k * k))
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return T.depthwise_conv2d(x, self.weight, self.stride, 1, self.padding)


class SEBlock(Module):
    """Squeeze-and-excitation channel attention.

    The gate is ``sigmoid(relu(GAP(F) @ W1) @ W2)`` and each channel of ``F``
    is multiplied by its gate value.
    """

    def __init__(self, channels: int, reduction: int = 4, rng: np.random.Generator | None = None):
        if reduction < 1 or channels % reduction:
            raise ConfigurationError(f"SE reduction {reduction} must be >= 1 and divide channels {channels}")
        rng = rng or np.random.default_rng(0)
        hidden = channels // reduction
        self.W1 = parameter(_he_normal(rng, (channels, hidden), channels))
        self.W2 = parameter(_glorot_normal(rng, (hidden, channels), hidden, channels))
        self.reduction = reduction

    @property
    def channels(self) -> int:
        return self.W1.shape[0]

    def gate(self, F: Tensor) -> Tensor:
        x, single = _batched(F, 4)
        if x.shape[1] != self.channels:
            raise DimensionError(f"SE block built for {self.channels} channels, got input {F.shape}")
        e = T.sigmoid(T.relu(global_average_pool(x) @ self.W1) @ self.W2)
        return e.reshape(e.shape[1:]) if single else e

    def forward(self, F: Tensor) -> Tensor:
        x, single = _batched(F, 4)
        e = self.gate(x)
        out = x * e.reshape(e.shape + (1, 1))
        return out.reshape(out.shape[1:]) if single else out


class ASPP(Module):
    """Four parallel dilated 3×3 convolutions, concatenated and projected by a 1×1 conv."""

    def __init__(self, in_ch: int, branch_ch: int, out_ch: int, rates: Sequence[int] = (2, 3, 5, 7),
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.rates = tuple(rates)
        self.branches = [Conv2d(in_ch, branch_ch, 3, dilation=r, padding=r, rng=rng) for r in self.rates]
        self.project = Conv2d(branch_ch * len(self.rates), out_ch, 1, rng=rng)

    def branch_outputs(self, x: Tensor) -> list[Tensor]:
        outs = [T.relu(branch(x)) for branch in self.branches]
        shapes = {o.shape[-2:] for o in outs}
        if len(shapes) != 1 or outs[0].shape[-2:] != x.shape[-2:]:
            raise InvariantViolation(f"ASPP branch spatial shapes diverged: {[o.shape for o in outs]}")
        return outs

    def forward(self, x: Tensor) -> Tensor:
        outs = self.branch_outputs(x)
        return T.relu(self.project(T.concat(outs, axis=-3)))


def _valid_sizes(n: int, p: int) -> str:
    lo = (n // p) * p
    options = [s for s in (lo, lo + p) if s > 0]
    return " or ".join(str(s) for s in options)


def patchify(x: Tensor, p: int) -> Tensor:
    """``B×C×H×W -> B×T×(C·p·p)`` with tokens in row-major patch order."""
    B, C, H, W = x.shape
    if H % p or W % p:
        raise DimensionError(
            f"image {H}×{W} not divisible by patch size {p}; try height {_valid_sizes(H, p)}, width {_valid_sizes(W, p)}"
        )
    gh, gw = H // p, W // p
    x = x.reshape(B, C, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, gh * gw, C * p * p)


class PatchEmbed(Module):
    """Split an image into ``p×p`` patches and project each to a ``dim``-vector plus a positional code."""

    def __init__(self, image_size: int, patch_size: int, channels: int, dim: int,
                 rng: np.random.Generator | None = None):
        if image_size % patch_size:
            raise DimensionError(
                f"image size {image_size} not divisible by patch size {patch_size}; "
                f"try {_valid_sizes(image_size, patch_size)}"
            )
        rng = rng or np.random.default_rng(0)
        self.patch_size = patch_size
        self.num_tokens = (image_size // patch_size) ** 2
        fan_in = patch_size * patch_size * channels
        self.projection = parameter(_glorot_normal(rng, (fan_in, dim), fan_in, dim))
        self.positional = parameter(rng.normal(0.0, 0.02, size=(self.num_tokens, dim)))

    def forward(self, img: Tensor) -> Tensor:
        x, single = _batched(img, 4)
        patches = patchify(x, self.patch_size)
        if patches.shape[1] != self.num_tokens:
            raise DimensionError(f"expected {self.num_tokens} patches, image {img.shape} gives {patches.shape[1]}")
        tokens = patches @ self.projection + self.positional
        return tokens.reshape(tokens.shape[1:]) if single else tokens


class Attention(Module):
    """Multi-head scaled dot-product self-attention without biases."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator | None = None):
        if heads < 1 or dim % heads:
            raise ConfigurationError(f"embedding dim {dim} not divisible by {heads} heads")
        rng = rng or np.random.default_rng(0)
        self.heads = heads
        self.W_q, self.W_k, self.W_v, self.W_o = (
            parameter(_glorot_normal(rng, (dim, dim), dim, dim)) for _ in range(4)
        )

    def _split(self, x: Tensor) -> Tensor:
        B, Tn, D = x.shape
        return x.reshape(B, Tn, self.heads, D // self.heads).transpose(0, 2, 1, 3)

    def weights(self, tokens: Tensor) -> Tensor:
        """Attention matrices, ``B×heads×T×T`` (or ``heads×T×T`` unbatched)."""
        x, single = _batched(tokens, 3)
        q, k = self._split(x @ self.W_q), self._split(x @ self.W_k)
        scale = 1.0 / np.sqrt(x.shape[-1] // self.heads)
        a = T.softmax(q @ T.swapaxes(k, -1, -2) * scale)
        return a.reshape(a.shape[1:]) if single else a

    def forward(self, tokens: Tensor) -> Tensor:
        x, single = _batched(tokens, 3)
        B, Tn, D = x.shape
        attn = self.weights(x)
        ctx = (attn @ self._split(x @ self.W_v)).transpose(0, 2, 1, 3).reshape(B, Tn, D)
        out = ctx @ self.W_o
        return out.reshape(out.shape[1:]) if single else out


class TransformerBlock(Module):
    """Pre-norm block: ``x + attn(LN(x))`` followed by ``+ MLP(LN(x))`` with a 4×dim relu MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng=rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Dense(dim, dim * mlp_ratio, "relu", rng=rng)
        self.fc2 = Dense(dim * mlp_ratio, dim, "none", rng=rng)

    def forward(self, tokens: Tensor) -> Tensor:
        x = tokens + self.attn(self.norm1(tokens))
        return x + self.fc2(self.fc1(self.norm2(x)))
