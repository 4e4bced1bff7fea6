"""Acceptance suite. Each test carries a ``criterion`` mark and the run ends
with one PASS/FAIL line per criterion in the terminal summary."""

import time
import zlib

import numpy as np
import pytest

from conftest import tiny_config
from test_tensor import GRAD_CASES, _make, t64
from fusionvote import tensor as T
from fusionvote.cli import main
from fusionvote.data import GammaParams, gamma_transform, load_ppm, write_ppm
from fusionvote.experiments import run_benchmark
from fusionvote.gradcheck import check_gradients
from fusionvote.layers import (ASPP, Attention, BatchNorm, Dense, PatchEmbed, RegularizerSpec, SEBlock,
                               TransformerBlock, global_average_pool)
from fusionvote.metrics import ConfusionMatrix, classification_metrics, multiclass_mcc, roc_auc_micro
from fusionvote.model import FLAVORS, FusionModel, soft_vote
from fusionvote.tensor import Tensor
from fusionvote.training import cross_entropy_loss, load_checkpoint, one_hot, regularization_penalty, save_checkpoint

TOL = 1e-3


def _randomize_offsets(module, rng):
    # zero biases put relu inputs exactly on the kink, where no derivative exists
    for name, p in module.named_parameters():
        if name.endswith(("bias", ".b", "beta")) or np.all(p.data == 0):
            p.data[...] = rng.normal(0, 0.1, p.shape)


def _layer_cases(rng):
    img = lambda: Tensor(rng.normal(size=(2, 4, 8, 8)), requires_grad=True, dtype=np.float64)  # noqa: E731
    seq = lambda: Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True, dtype=np.float64)  # noqa: E731
    return {
        "se": (SEBlock(4, 2, rng=rng), img()),
        "aspp": (ASPP(4, 2, 3, rng=rng), img()),
        "batchnorm": (BatchNorm(4), img()),
        "patch_embed": (PatchEmbed(8, 4, 4, 3, rng=rng), img()),
        "attention": (Attention(4, 2, rng=rng), seq()),
        "transformer_block": (TransformerBlock(4, 2, rng=rng), seq()),
        "dense_l1l2": (Dense(4, 3, "relu", RegularizerSpec(), rng=rng),
                       Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)),
    }


@pytest.mark.criterion("gradient suite")
def test_gradient_suite():
    start = time.perf_counter()
    errors = {}
    for name, (fn, specs) in sorted(GRAD_CASES.items()):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        inputs = [_make(s, rng) for s in specs]
        weights = t64(rng.normal(size=fn(*inputs).shape), grad=False)
        errors[name] = check_gradients(lambda: (fn(*inputs) * weights).sum(), inputs, h=1e-3)

    rng = np.random.default_rng(7)
    for name, (layer, x) in _layer_cases(rng).items():
        layer.astype(np.float64)
        _randomize_offsets(layer, rng)
        w = Tensor(rng.normal(size=layer(x).shape), dtype=np.float64)

        def f(layer=layer, x=x, w=w):
            out = (layer(x) * w).sum()
            return out + layer.penalty() if isinstance(layer, Dense) else out

        errors[name] = check_gradients(f, [x, *layer.parameters()], h=1e-3, max_entries=16, kink_aware=True)

    # deep compositions have large third derivatives, so the O(h^2) truncation
    # term of central differences is kept small with a finer step
    for flavor in FLAVORS:
        rng = np.random.default_rng(1)
        m = FusionModel(tiny_config(flavor=flavor, seed=1)).astype(np.float64)
        _randomize_offsets(m, rng)
        x = Tensor(rng.random((2, 3, 16, 16)), dtype=np.float64)
        y = one_hot([0, 2], 3, np.float64)
        errors[f"fusion[{flavor}]"] = check_gradients(
            lambda: cross_entropy_loss(T.softmax(m(x)), y) + regularization_penalty(m),
            m.parameters(), h=1e-4, max_entries=6, kink_aware=True, rng=np.random.default_rng(0))

    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    print(f"\ngradient suite: {len(errors)} checks, worst {worst} {errors[worst]:.2e}, {elapsed:.1f}s")
    assert errors[worst] < TOL, f"{worst}: relative error {errors[worst]:.2e}"
    assert elapsed < 60


@pytest.mark.criterion("equation oracles")
def test_equation_oracles():
    rng = np.random.default_rng(11)
    # gamma correction
    assert gamma_transform(np.array([0.5]), GammaParams(1.0, 1.1))[0] == pytest.approx(0.46651, abs=1e-5)
    # global average pooling against a double loop
    F = rng.normal(size=(2, 5, 6, 7)).astype(np.float32)
    gap = global_average_pool(Tensor(F)).data
    for b in range(2):
        for c in range(5):
            acc = 0.0
            for i in range(6):
                for j in range(7):
                    acc += float(F[b, c, i, j])
            assert abs(gap[b, c] - acc / 42) <= 1e-6
    # zero-weight SE halves its input
    se = SEBlock(8, 4)
    for p in se.parameters():
        p.data[...] = 0
    F = rng.normal(size=(8, 5, 5)).astype(np.float32)
    assert np.max(np.abs(se(Tensor(F)).data - 0.5 * F)) <= 1e-6
    # a random SE gate scales each channel by one factor in (0, 1)
    se = SEBlock(8, 2, rng=rng)
    F = (rng.normal(size=(3, 8, 4, 4)) * 5).astype(np.float32)
    e = se.gate(Tensor(F)).data
    R = se(Tensor(F)).data
    assert np.all((e > 0) & (e < 1))
    assert np.array_equal(R, F * e[:, :, None, None])
    assert np.all(np.abs(R) <= np.abs(F))


@pytest.mark.criterion("soft-vote invariants")
def test_soft_vote_invariants():
    rng = np.random.default_rng(3)
    for _ in range(10_000):
        k = int(rng.integers(2, 9))
        probs = rng.dirichlet(np.ones(k), size=4)
        label, combined = soft_vote(probs)
        assert label == int(np.argmax(combined)) == int(np.argmax(probs.mean(axis=0)))
    ties = [
        ([[0.5, 0.5]] * 4, 0),
        ([[0.5, 0.5], [0.5, 0.5], [0.25, 0.75], [0.75, 0.25]], 0),
        ([[0.0, 0.5, 0.5]] * 4, 1),
        ([[0.25, 0.25, 0.25, 0.25]] * 4, 0),
        ([[0.1, 0.45, 0.0, 0.45], [0.1, 0.45, 0.0, 0.45], [0.1, 0.2, 0.5, 0.2], [0.1, 0.2, 0.5, 0.2]], 1),
    ]
    for probs, expected in ties:
        assert soft_vote(probs)[0] == expected


@pytest.mark.criterion("metric oracles")
def test_metric_oracles():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        tp, fn, fp, tn = rng.integers(0, 50, size=4).tolist()
        den = np.sqrt(float((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)))
        oracle = 0.0 if den == 0 else (tp * tn - fp * fn) / den
        assert abs(multiclass_mcc(np.array([[tp, fn], [fp, tn]]))[0] - oracle) <= 1e-9

    for _ in range(200):
        n, k = int(rng.integers(1, 101)), int(rng.integers(2, 6))
        scores = np.round(rng.random((n, k)), int(rng.integers(1, 4)))
        labels = rng.integers(0, k, size=n)
        truth = np.zeros_like(scores, dtype=bool)
        truth[np.arange(n), labels] = True
        diff = scores[truth][:, None] - scores[~truth][None, :]
        oracle = float(((diff > 0) + 0.5 * (diff == 0)).mean())
        assert abs(roc_auc_micro(scores, labels).auc - oracle) <= 1e-9

    labels = np.repeat(np.arange(4), 5)
    probs = np.eye(4)[labels] * 0.9 + 0.025
    r = classification_metrics(ConfusionMatrix(np.diag(np.bincount(labels))))
    assert r.as_dict() == dict(accuracy=1.0, precision=1.0, recall=1.0, f1=1.0, tpr=1.0, fpr=0.0, mcc=1.0)
    assert roc_auc_micro(probs, labels).auc == 1.0


@pytest.fixture(scope="module")
def benchmark_runs(tmp_path_factory):
    runs = []
    for i in range(2):
        out = tmp_path_factory.mktemp(f"bench{i}")
        start = time.perf_counter()
        result = run_benchmark(seed=0, out_dir=out)
        runs.append((result, out, time.perf_counter() - start))
    return runs


@pytest.mark.criterion("synthetic benchmark")
def test_synthetic_benchmark(benchmark_runs):
    (result, out, elapsed), (_, out2, elapsed2) = benchmark_runs
    accs = result.member_accuracies
    ens = result.ensemble_eval.accuracy
    chance = 1 / 8
    print(f"\nmembers {accs} ensemble {ens:.4f} run times {elapsed:.0f}s {elapsed2:.0f}s")
    assert all(a >= 3 * chance for a in accs)
    assert ens >= max(np.mean(accs) - 0.02, chance)
    assert max(elapsed, elapsed2) < 15 * 60
    for name in ("metrics.csv", "confusion.csv", "roc.csv", "members.csv"):
        assert (out / name).read_bytes() == (out2 / name).read_bytes()


@pytest.mark.criterion("loss-curve property")
def test_loss_curves(benchmark_runs):
    for member in benchmark_runs[0][0].members:
        train = [h.train_loss for h in member.history]
        test = [h.test_loss for h in member.history]
        assert train[-1] < train[0]
        assert np.all(np.isfinite(train)) and np.all(np.isfinite(test))


@pytest.mark.criterion("ablation mechanics")
def test_ablation_mechanics(tmp_path, capsys):
    cfg = tmp_path / "ablate.cfg"
    cfg.write_text(f"epochs=20\nsynth_classes=8\nsynth_per_class=50\nsynth_size=32\nout={tmp_path / 'abl'}\n")
    assert main(["ablate", "--config", str(cfg), "--members", "1x1,2x1,1x2,vote4"]) == 0
    rows = (tmp_path / "abl" / "ablation.csv").read_text().splitlines()
    print("\n" + "\n".join(rows))
    acc = {line.split(",")[0]: float(line.split(",")[-1]) for line in rows[1:]}
    assert set(acc) == {"1x1", "2x1", "1x2", "vote4"}
    assert acc["vote4"] >= acc["1x1"]


@pytest.mark.criterion("serialization")
def test_serialization(tmp_path):
    rng = np.random.default_rng(9)
    for flavor in FLAVORS:
        m = FusionModel(tiny_config(flavor=flavor, seed=2)).eval()
        path = tmp_path / f"{flavor}.ckpt"
        save_checkpoint(path, m)
        x = Tensor(rng.random((2, 3, 16, 16)))
        assert load_checkpoint(path).build_model()(x).data.tobytes() == m(x).data.tobytes()
    for shape in [(1, 1, 3), (7, 5, 3), (32, 32, 3)]:
        img = rng.integers(0, 256, size=shape, dtype=np.uint8)
        write_ppm(tmp_path / "x.ppm", img)
        back = load_ppm(tmp_path / "x.ppm")
        assert back.shape == img.shape and back.tobytes() == img.tobytes()
