"""Experiment drivers: member training, ensemble evaluation, the synthetic benchmark and ablation sweeps."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import AugmentConfig, LabeledDataset, PreprocessConfig, generate_synthetic_dataset
from .errors import ConfigurationError
from .metrics import (ConfusionMatrix, MetricsReport, RocCurve, classification_metrics, confusion_matrix,
                      loss_svg, roc_auc_micro, roc_svg)
from .model import FLAVORS, FusionModel, ModelConfig, soft_vote
from .training import TrainConfig, TrainResult, predict_proba_batched, prepare_split, train_fusion_model

log = logging.getLogger(__name__)


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


@dataclass
class Evaluation:
    probs: np.ndarray
    labels: list[int]
    cm: ConfusionMatrix
    report: MetricsReport
    roc: RocCurve

    @property
    def accuracy(self) -> float:
        return self.report.accuracy


def evaluate_probs(probs: np.ndarray, labels: Sequence[int], num_classes: int) -> Evaluation:
    preds = np.argmax(probs, axis=1)
    cm = confusion_matrix(preds, labels, num_classes)
    return Evaluation(probs, list(labels), cm, classification_metrics(cm), roc_auc_micro(probs, labels))


def write_evaluation(ev: Evaluation, out_dir, class_names: Sequence[str] | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "metrics.csv": ev.report.to_csv(),
        "confusion.csv": ev.cm.to_csv(class_names),
        "roc.csv": ev.roc.to_csv(),
        "roc.svg": roc_svg(ev.roc),
    }
    for name, text in files.items():
        (out / name).write_text(text)
    return [out / n for n in files]


def train_member(data: LabeledDataset, base: ModelConfig, flavor: str, index: int, cfg: TrainConfig,
                 pre: PreprocessConfig | None = None, aug: AugmentConfig | None = None) -> TrainResult:
    mcfg = replace(base, flavor=flavor, cnn_flavors=(), seed=derive_seed(base.seed, index))
    return train_fusion_model(FusionModel(mcfg), data, cfg, pre, aug)


def ensemble_probs(models: Sequence[FusionModel], images: np.ndarray, expected: int | None = 4):
    """Per-member probabilities and the soft-voted (label, combined) for a batch of images."""
    per_member = [predict_proba_batched(m, images) for m in models]
    labels, combined = soft_vote(per_member, expected=expected)
    return per_member, np.asarray(labels), combined


def members_csv(names: Sequence[str], flavors: Sequence[str], evals: Sequence[Evaluation],
                ens: Evaluation) -> str:
    lines = ["member,flavor,accuracy,mcc"]
    for n, f, e in zip(names, flavors, evals):
        lines.append(f"{n},{f},{e.report.accuracy:.6f},{e.report.mcc:.6f}")
    lines.append(f"ensemble,soft_vote,{ens.report.accuracy:.6f},{ens.report.mcc:.6f}")
    return "\n".join(lines) + "\n"


@dataclass
class BenchmarkResult:
    dataset: LabeledDataset
    members: list[TrainResult]
    member_evals: list[Evaluation]
    ensemble_eval: Evaluation
    files: list[Path] = field(default_factory=list)

    @property
    def member_accuracies(self) -> list[float]:
        return [e.accuracy for e in self.member_evals]


def run_benchmark(seed: int = 0, out_dir=None, num_classes: int = 8, per_class: int = 50, size: int = 32,
                  epochs: int = 20, base: ModelConfig | None = None, train_cfg: TrainConfig | None = None,
                  data: LabeledDataset | None = None) -> BenchmarkResult:
    """Synthesize data, train one fusion model per backbone flavor, evaluate members and the soft vote."""
    data = data or generate_synthetic_dataset(num_classes, per_class, size, seed)
    base = base or ModelConfig(num_classes=data.num_classes, image_size=size, seed=seed)
    train_cfg = train_cfg or TrainConfig(epochs=epochs, seed=seed)
    pre = PreprocessConfig(image_size=base.image_size)
    members = [train_member(data, base, f, i, train_cfg, pre) for i, f in enumerate(FLAVORS)]
    test_x, test_y = prepare_split(data, "test", pre)
    per_member, _, combined = ensemble_probs([r.model for r in members], test_x)
    member_evals = [evaluate_probs(p, test_y, data.num_classes) for p in per_member]
    ens_eval = evaluate_probs(combined, test_y, data.num_classes)
    result = BenchmarkResult(data, members, member_evals, ens_eval)
    if out_dir is not None:
        out = Path(out_dir)
        result.files = write_evaluation(ens_eval, out, data.class_names)
        (out / "members.csv").write_text(members_csv(list(FLAVORS), list(FLAVORS), member_evals, ens_eval))
        for f, r in zip(FLAVORS, members):
            (out / f"loss_{f}.csv").write_text(r.history_csv())
        (out / "loss.svg").write_text(loss_svg({f: [(h.epoch, h.train_loss) for h in r.history]
                                                for f, r in zip(FLAVORS, members)}, "train loss"))
        result.files += [out / "members.csv", out / "loss.svg"] + [out / f"loss_{f}.csv" for f in FLAVORS]
    return result


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

DEFAULT_ABLATION = "1x1,1x2,1x3,2x2,2x3,vote2,vote4"
_SPEC = re.compile(r"^(?:(\d+)x(\d+)|vote(\d+))$")


@dataclass(frozen=True)
class AblationEntry:
    name: str
    n_vit: int
    n_cnn: int
    vote: bool


def parse_members(spec: str) -> list[AblationEntry]:
    """Parse e.g. ``"1x3,2x4,vote4"``.

    ``VxC`` is one fusion model with V transformer streams and C CNN streams
    (flavors cycle through the four backbones); ``voteN`` soft-votes N
    single-stream fusion models with the first N flavors.
    """
    entries = []
    for tok in (t.strip() for t in spec.split(",")):
        m = _SPEC.match(tok)
        if not m:
            raise ConfigurationError(f"bad member spec {tok!r}; expected VxC or voteN")
        if m.group(3):
            n = int(m.group(3))
            if not 1 <= n <= len(FLAVORS):
                raise ConfigurationError(f"vote{n}: need 1..{len(FLAVORS)} members with distinct flavors")
            entries.append(AblationEntry(tok, n, n, True))
        else:
            v, c = int(m.group(1)), int(m.group(2))
            if v < 1 or c < 1:
                raise ConfigurationError(f"{tok}: need at least one transformer and one CNN stream")
            entries.append(AblationEntry(tok, v, c, False))
    if not entries:
        raise ConfigurationError("empty member spec")
    return entries


@dataclass
class AblationRow:
    entry: AblationEntry
    accuracy: float
    models_trained: int
    epochs_total: int


def run_ablation(data: LabeledDataset, base: ModelConfig, cfg: TrainConfig, spec: str = DEFAULT_ABLATION,
                 pre: PreprocessConfig | None = None, aug: AugmentConfig | None = None) -> list[AblationRow]:
    """Accuracy versus extractor count. Single-flavor members are trained once and shared across rows.

    ``1x1`` is the same model as the first member of every ``voteN`` row.
    """
    pre = pre or PreprocessConfig(image_size=base.image_size)
    test_x, test_y = prepare_split(data, "test", pre)
    singles: dict[int, FusionModel] = {}

    def single(i: int) -> FusionModel:
        if i not in singles:
            singles[i] = train_member(data, base, FLAVORS[i], i, cfg, pre, aug).model
        return singles[i]

    rows = []
    for e in parse_members(spec):
        if e.vote:
            models = [single(i) for i in range(e.n_cnn)]
            _, preds, _ = ensemble_probs(models, test_x, expected=e.n_cnn)
            n_models = e.n_cnn
        elif e.n_vit == 1 and e.n_cnn == 1:
            preds = predict_proba_batched(single(0), test_x).argmax(axis=1)
            n_models = 1
        else:
            flavors = tuple(FLAVORS[i % len(FLAVORS)] for i in range(e.n_cnn))
            mcfg = replace(base, flavor=flavors[0], cnn_flavors=flavors, n_vit=e.n_vit,
                           seed=derive_seed(base.seed, 1000 + 10 * e.n_vit + e.n_cnn))
            model = train_fusion_model(FusionModel(mcfg), data, cfg, pre, aug).model
            preds = predict_proba_batched(model, test_x).argmax(axis=1)
            n_models = 1
        acc = float(np.mean(np.asarray(preds) == np.asarray(test_y))) if test_y else 0.0
        log.info("ablation %s accuracy %.4f", e.name, acc)
        rows.append(AblationRow(e, acc, n_models, n_models * cfg.epochs))
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    lines = ["config,kind,n_vit,n_cnn,models,epochs_total,accuracy"]
    for r in rows:
        kind = "fusion+soft_vote" if r.entry.vote else "fusion"
        lines.append(f"{r.entry.name},{kind},{r.entry.n_vit},{r.entry.n_cnn},{r.models_trained},"
                     f"{r.epochs_total},{r.accuracy:.6f}")
    return "\n".join(lines) + "\n"
