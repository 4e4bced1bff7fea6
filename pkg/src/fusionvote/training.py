"""Loss, regularization, Adam, the per-model training loop and checkpoint files."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import AugmentConfig, LabeledDataset, PreprocessConfig, augment, preprocess
from .errors import (CheckpointConfigMismatchError, CheckpointMagicError, CheckpointTensorCountError,
                     CheckpointTruncatedError, CheckpointVersionError, ConfigurationError, ContractError,
                     DimensionError)
from .model import FusionModel, ModelConfig
from .tensor import Tensor

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


def one_hot(labels: Sequence[int], num_classes: int, dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=dtype)
    out[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)] = 1
    return out


def cross_entropy_loss(probs: Tensor, targets) -> Tensor:
    """Mean over the batch of ``-sum(target * log(max(prob, 1e-12)))``.

    Raises:
        ContractError: if ``targets`` is not one-hot.
    """
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if t.shape != probs.shape:
        raise DimensionError(f"targets shape {t.shape} != probs shape {probs.shape}")
    if not (np.all((t == 0) | (t == 1)) and np.all(t.sum(axis=-1) == 1)):
        raise ContractError("targets must be one-hot rows")
    logp = T.log(T.clamp_min(probs, PROB_FLOOR))
    per_sample = (logp * t.astype(probs.dtype)).sum(axis=-1)
    return per_sample.mean() * -1.0


def regularization_penalty(model) -> Tensor:
    """Sum of the penalties of every regularized dense layer in ``model``."""
    total = None
    for layer in model.regularized_layers():
        p = layer.penalty()
        if p is not None:
            total = p if total is None else total + p
    if total is None:
        return T.Tensor(0.0)
    return total


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Sequence[tuple[str, Tensor]], grads: Sequence[np.ndarray | None],
              lr: float) -> None:
    """One bias-corrected Adam update, in place. Parameters whose grad is None are skipped."""
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params but {len(grads)} grads")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for (name, p), g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"grad for {name} has shape {g.shape}, param has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


class Adam:
    """Adam over a model's named parameters."""

    def __init__(self, named_params: Sequence[tuple[str, Tensor]], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be > 0, got {lr}")
        self.params = list(named_params)
        self.lr = lr
        self.state = AdamState(beta1, beta2, eps)

    def step(self) -> None:
        trainable = [(n, p) for n, p in self.params if p.requires_grad]
        adam_step(self.state, trainable, [p.grad for _, p in trainable], self.lr)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0
    freeze_extractors: bool = False
    warmup_epochs: int = 0
    width_factor: float = 0.25
    augment: bool = True
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be >= 2 for batch norm, got {self.batch_size}")
        if self.warmup_epochs < 0:
            raise ConfigurationError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_loss: float | None


@dataclass
class TrainResult:
    model: FusionModel
    history: list[EpochRecord]
    optimizer: Adam
    rng: np.random.Generator

    def history_csv(self) -> str:
        return history_to_csv(self.history)


def history_to_csv(history: Sequence[EpochRecord]) -> str:
    lines = ["epoch,train_loss,test_loss"]
    for r in history:
        test = "" if r.test_loss is None else f"{r.test_loss:.8f}"
        lines.append(f"{r.epoch},{r.train_loss:.8f},{test}")
    return "\n".join(lines) + "\n"


def to_model_input(images: np.ndarray) -> Tensor:
    """``N×H×W×C`` float images -> ``N×C×H×W`` tensor."""
    return T.Tensor(np.ascontiguousarray(np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2)))


def _batches(perm: np.ndarray, batch_size: int) -> list[np.ndarray]:
    chunks = [perm[i:i + batch_size] for i in range(0, len(perm), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def evaluate_loss(model: FusionModel, images: np.ndarray, labels: Sequence[int], batch_size: int = 64) -> float:
    """Cross-entropy plus regularization, inference mode, averaged over samples."""
    model.eval()
    total = 0.0
    targets = one_hot(labels, model.num_classes)
    with T.no_grad():
        for i in range(0, len(labels), batch_size):
            x = to_model_input(images[i:i + batch_size])
            probs = T.softmax(model(x))
            loss = cross_entropy_loss(probs, targets[i:i + batch_size]) + regularization_penalty(model)
            total += float(loss.data) * len(x.data)
    return total / len(labels)


def predict_proba_batched(model: FusionModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(T.softmax(model(to_model_input(images[i:i + batch_size]))).data)
    return np.concatenate(out) if out else np.zeros((0, model.num_classes), dtype=np.float32)


def prepare_split(data: LabeledDataset, split: str, pre: PreprocessConfig) -> tuple[np.ndarray, list[int]]:
    images, labels = data.split(split)
    if not images:
        return np.zeros((0, pre.image_size, pre.image_size, 3), dtype=np.float32), []
    return np.stack([preprocess(img, pre) for img in images]), labels


def _run_epoch(model: FusionModel, opt: Adam, images: np.ndarray, targets: np.ndarray, cfg: TrainConfig,
               aug: AugmentConfig, rng: np.random.Generator) -> float:
    model.train()
    total = 0.0
    for idx in _batches(rng.permutation(len(images)), cfg.batch_size):
        batch = images[idx]
        if cfg.augment:
            batch = np.stack([augment(img, aug, rng) for img in batch])
        probs = T.softmax(model(to_model_input(batch)))
        loss = cross_entropy_loss(probs, targets[idx]) + regularization_penalty(model)
        opt.zero_grad()
        loss.backward()
        opt.step()
        total += float(loss.data) * len(idx)
    return total / len(images)


def train_fusion_model(model: FusionModel, data: LabeledDataset, cfg: TrainConfig,
                       pre: PreprocessConfig | None = None, aug: AugmentConfig | None = None) -> TrainResult:
    """Train with Adam on cross-entropy plus regularization; returns per-epoch train/test losses.

    Everything random (shuffling, augmentation) comes from one generator
    seeded by ``(cfg.seed, model.config.seed)``.
    """
    pre = pre or PreprocessConfig(image_size=model.config.image_size)
    aug = aug or AugmentConfig()
    if len(data) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    train_x, train_y = prepare_split(data, "train", pre)
    if len(train_y) < cfg.batch_size:
        raise ConfigurationError(f"need at least batch_size={cfg.batch_size} training items, have {len(train_y)}")
    if data.num_classes != model.num_classes:
        raise ConfigurationError(f"dataset has {data.num_classes} classes, model has {model.num_classes}")
    test_x, test_y = prepare_split(data, "test", pre)
    train_t = one_hot(train_y, model.num_classes)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, model.config.seed, 0x7A41]))
    opt = Adam(list(model.named_parameters()), lr=cfg.lr)

    if cfg.freeze_extractors:
        for _ in range(cfg.warmup_epochs):
            _run_epoch(model, opt, train_x, train_t, cfg, aug, rng)
        model.freeze_extractors()

    history = []
    for epoch in range(1, cfg.epochs + 1):
        train_loss = _run_epoch(model, opt, train_x, train_t, cfg, aug, rng)
        test_loss = evaluate_loss(model, test_x, test_y, cfg.eval_batch_size) if test_y else None
        history.append(EpochRecord(epoch, train_loss, test_loss))
        log.info("epoch %d train_loss %.4f test_loss %s", epoch, train_loss, test_loss)
    model.eval()
    model.trained = True
    return TrainResult(model, history, opt, rng)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"FVCK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    version: int
    model_config: dict
    train_config: dict
    tensors: dict[str, np.ndarray]
    adam_t: int = 0
    rng_state: dict | None = None
    epoch: int = 0
    extra: dict = field(default_factory=dict)

    def model_tensors(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("adam.")}

    def build_model(self) -> FusionModel:
        model = FusionModel(ModelConfig.from_dict(self.model_config))
        restore_model(model, self)
        return model

    def adam_state(self) -> AdamState:
        state = AdamState(t=self.adam_t)
        for k, v in self.tensors.items():
            if k.startswith("adam.m:"):
                state.m[k[len("adam.m:"):]] = v.copy()
            elif k.startswith("adam.v:"):
                state.v[k[len("adam.v:"):]] = v.copy()
        return state

    def rng(self) -> np.random.Generator | None:
        if self.rng_state is None:
            return None
        bitgen = np.random.PCG64()
        bitgen.state = self.rng_state
        return np.random.Generator(bitgen)


def _rng_state_json(rng: np.random.Generator | None):
    if rng is None:
        return None
    return rng.bit_generator.state


def save_checkpoint(path, model: FusionModel, optimizer: Adam | None = None, rng: np.random.Generator | None = None,
                    epoch: int = 0, train_config: TrainConfig | None = None, extra: dict | None = None) -> None:
    """Write ``path`` atomically (temp file + rename)."""
    tensors = dict(model.state_dict())
    adam_t = 0
    if optimizer is not None:
        adam_t = optimizer.state.t
        for name in sorted(optimizer.state.m):
            tensors[f"adam.m:{name}"] = optimizer.state.m[name]
            tensors[f"adam.v:{name}"] = optimizer.state.v[name]
    header = dict(
        model_config=model.config.to_dict(),
        train_config=asdict(train_config) if train_config is not None else {},
        adam_t=adam_t,
        rng_state=_rng_state_json(rng),
        epoch=epoch,
        tensor_count=len(tensors),
        extra=extra or {},
    )
    hbytes = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(hbytes)), hbytes]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise ContractError(f"checkpoint tensors must be float32; {name} is {arr.dtype}")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(self.data)} (needed {n} more from {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> Checkpoint:
    """Parse a checkpoint file.

    Raises:
        CheckpointMagicError, CheckpointVersionError, CheckpointTruncatedError,
        CheckpointTensorCountError: for the corresponding defects.
    """
    r = _Reader(Path(path).read_bytes())
    if r.data[:4] != MAGIC:
        raise CheckpointMagicError(f"not a checkpoint: magic {r.data[:4]!r} != {MAGIC!r}")
    r.pos = 4
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (this build reads {FORMAT_VERSION})")
    header = json.loads(r.take(r.u32()).decode())
    tensors = {}
    while r.pos < len(r.data):
        if len(tensors) >= header["tensor_count"]:
            raise CheckpointTensorCountError(f"more tensor records than the {header['tensor_count']} declared")
        name = r.take(r.u32()).decode()
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        n = math.prod(shape)
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
    if len(tensors) != header["tensor_count"]:
        raise CheckpointTensorCountError(f"found {len(tensors)} tensors, header declares {header['tensor_count']}")
    return Checkpoint(version, header["model_config"], header["train_config"], tensors, header["adam_t"],
                      header["rng_state"], header["epoch"], header.get("extra", {}))


def restore_model(model: FusionModel, ckpt: Checkpoint) -> FusionModel:
    """Load checkpoint weights into ``model``; configs must match."""
    if ckpt.model_config != model.config.to_dict():
        diff = sorted(k for k in set(ckpt.model_config) | set(model.config.to_dict())
                      if ckpt.model_config.get(k) != model.config.to_dict().get(k))
        raise CheckpointConfigMismatchError(f"checkpoint model config differs in {diff}")
    try:
        model.load_state_dict(ckpt.model_tensors())
    except DimensionError as exc:
        raise CheckpointTensorCountError(str(exc)) from exc
    model.trained = True
    model.eval()
    return model


checkpoint_save = save_checkpoint
checkpoint_load = load_checkpoint
