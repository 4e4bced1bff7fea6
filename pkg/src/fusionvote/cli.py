"""``fusionvote`` command line: synth, train, eval, ensemble, ablate, explain.

Exit codes: 0 success, 1 runtime error, 2 usage error. Errors go to stderr
as a single line starting with ``error:``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, describe_defaults, load_config
from .data import (GammaParams, LabeledDataset, PreprocessConfig, generate_synthetic_dataset,
                   load_dataset_dir, load_ppm, preprocess, write_dataset_dir)
from .errors import FusionVoteError
from .experiments import (DEFAULT_ABLATION, ablation_csv, ensemble_probs, evaluate_probs, members_csv,
                          run_ablation, write_evaluation)
from .explain import grad_cam, write_attention
from .metrics import loss_svg
from .model import Ensemble
from .training import (Checkpoint, load_checkpoint, predict_proba_batched, prepare_split, save_checkpoint,
                       train_fusion_model)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _formatter(prog):
    return argparse.ArgumentDefaultsHelpFormatter(prog, max_help_position=32)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fusionvote", description="CNN + ViT fusion models with soft-voting ensembles.",
                formatter_class=_formatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic PPM dataset tree", formatter_class=_formatter)
    s.add_argument("--classes", type=int, default=8, help="number of classes")
    s.add_argument("--per-class", type=int, default=50, help="images per class")
    s.add_argument("--size", type=int, default=32, help="image side length")
    s.add_argument("--seed", type=int, default=0, help="generator seed")
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("train", help="train one fusion model", formatter_class=_formatter,
                       epilog="config keys and defaults:\n" + describe_defaults())
    s.add_argument("--config", default=None, help="key=value config file (defaults if omitted)")
    s.add_argument("--flavor", choices=["plain", "residual", "dense", "sep"], default=None,
                   help="CNN backbone flavor (overrides config)")
    s.add_argument("--data", default=None, help="dataset directory (overrides config)")
    s.add_argument("--out", required=True, help="checkpoint path; loss CSV written next to it")

    s = sub.add_parser("eval", help="evaluate one checkpoint", formatter_class=_formatter)
    s.add_argument("--ckpt", required=True, help="checkpoint path")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--split", choices=["test", "train", "all"], default="test", help="which split to score")
    s.add_argument("--out", default=None, help="output directory; None means <ckpt stem>_eval")

    s = sub.add_parser("ensemble", help="soft-vote four checkpoints", formatter_class=_formatter)
    s.add_argument("--ckpts", required=True, help="four comma-separated checkpoint paths")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--split", choices=["test", "train", "all"], default="test", help="which split to score")
    s.add_argument("--out", default="ensemble_out", help="output directory")

    s = sub.add_parser("ablate", help="accuracy versus extractor count", formatter_class=_formatter)
    s.add_argument("--config", default=None, help="key=value config file (defaults if omitted)")
    s.add_argument("--members", default=DEFAULT_ABLATION,
                   help="comma list of VxC (one model, V transformer + C CNN streams) and voteN entries")
    s.add_argument("--out", default=None, help="output directory; None means the config 'out' key")

    s = sub.add_parser("explain", help="Grad-CAM map for one image", formatter_class=_formatter)
    s.add_argument("--ckpt", required=True, help="checkpoint path")
    s.add_argument("--image", required=True, help="input PPM image")
    s.add_argument("--class", dest="target_class", type=int, required=True, help="target class index")
    s.add_argument("--layer", default="se", help="CNN-stream layer: backbone, aspp or se (cnnN.<layer> for multi-stream)")
    s.add_argument("--out", default=None, help="output prefix; None means <image stem>_gradcam")
    return p


# ---------------------------------------------------------------------------


def _dataset_from_config(cfg: RunConfig, data_override: str | None = None) -> LabeledDataset:
    path = data_override or cfg.data
    if path:
        return load_dataset_dir(path, cfg.test_fraction, cfg.split_seed)
    return generate_synthetic_dataset(cfg.synth_classes, cfg.synth_per_class, cfg.synth_size, cfg.synth_seed,
                                      cfg.test_fraction)


def _pre_from_extra(extra: dict) -> PreprocessConfig:
    p = extra.get("preprocess", {})
    return PreprocessConfig(p.get("image_size", 32), GammaParams(p.get("gamma_c", 1.0), p.get("gamma", 1.1)),
                            tuple(p.get("order", ("normalize", "gamma", "resize"))))


def _eval_split(data: LabeledDataset, split: str, pre: PreprocessConfig):
    if split == "all":
        tx, ty = prepare_split(data, "train", pre)
        ex, ey = prepare_split(data, "test", pre)
        return np.concatenate([tx, ex]), ty + ey
    return prepare_split(data, split, pre)


def _load_data_for_ckpt(ckpt: Checkpoint, path: str) -> LabeledDataset:
    extra = ckpt.extra
    return load_dataset_dir(path, extra.get("test_fraction", 0.2), extra.get("split_seed", 0))


def cmd_synth(args) -> None:
    ds = generate_synthetic_dataset(args.classes, args.per_class, args.size, args.seed)
    paths = write_dataset_dir(ds, args.out)
    print(f"wrote {len(paths)} images in {ds.num_classes} classes to {args.out}")


def cmd_train(args) -> None:
    cfg = load_config(args.config) if args.config else RunConfig()
    data = _dataset_from_config(cfg, args.data)
    mcfg = cfg.model_config(data.num_classes, args.flavor)
    pre, aug, tcfg = cfg.preprocess_config(), cfg.augment_config(), cfg.train_config()
    from .model import FusionModel
    result = train_fusion_model(FusionModel(mcfg), data, tcfg, pre, aug)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    extra = dict(
        class_names=data.class_names,
        test_fraction=cfg.test_fraction,
        split_seed=cfg.split_seed,
        preprocess=dict(image_size=pre.image_size, gamma=pre.gamma.gamma, gamma_c=pre.gamma.c, order=list(pre.order)),
        history=[[h.epoch, h.train_loss, h.test_loss] for h in result.history],
    )
    save_checkpoint(out, result.model, result.optimizer, result.rng, tcfg.epochs, tcfg, extra)
    out.with_suffix(".loss.csv").write_text(result.history_csv())
    series = {"train": [(h.epoch, h.train_loss) for h in result.history]}
    if result.history and result.history[0].test_loss is not None:
        series["test"] = [(h.epoch, h.test_loss) for h in result.history]
    out.with_suffix(".loss.svg").write_text(loss_svg(series, f"loss ({mcfg.flavor})"))
    last = result.history[-1]
    print(f"trained {mcfg.flavor}: final train_loss {last.train_loss:.4f}; checkpoint {out}")


def cmd_eval(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    data = _load_data_for_ckpt(ckpt, args.data)
    pre = _pre_from_extra(ckpt.extra)
    images, labels = _eval_split(data, args.split, pre)
    ev = evaluate_probs(predict_proba_batched(model, images), labels, model.num_classes)
    out = Path(args.out) if args.out else Path(args.ckpt).with_name(Path(args.ckpt).stem + "_eval")
    write_evaluation(ev, out, data.class_names)
    print(f"accuracy {ev.accuracy:.4f} mcc {ev.report.mcc:.4f} auc {ev.roc.auc:.4f}; reports in {out}")


def cmd_ensemble(args) -> None:
    paths = [p for p in args.ckpts.split(",") if p]
    if len(paths) != 4:
        raise UsageError(f"ensemble needs exactly four checkpoints, got {len(paths)}")
    ckpts = [load_checkpoint(p) for p in paths]
    models = [c.build_model() for c in ckpts]
    Ensemble(models)
    data = _load_data_for_ckpt(ckpts[0], args.data)
    pre = _pre_from_extra(ckpts[0].extra)
    images, labels = _eval_split(data, args.split, pre)
    per_member, _, combined = ensemble_probs(models, images)
    member_evals = [evaluate_probs(p, labels, data.num_classes) for p in per_member]
    ens = evaluate_probs(combined, labels, data.num_classes)
    out = Path(args.out)
    write_evaluation(ens, out, data.class_names)
    names = [Path(p).stem for p in paths]
    (out / "members.csv").write_text(members_csv(names, [m.backbone_flavor for m in models], member_evals, ens))
    print(f"ensemble accuracy {ens.accuracy:.4f} (members: "
          + ", ".join(f"{e.accuracy:.4f}" for e in member_evals) + f"); reports in {out}")


def cmd_ablate(args) -> None:
    cfg = load_config(args.config) if args.config else RunConfig()
    data = _dataset_from_config(cfg)
    rows = run_ablation(data, cfg.model_config(data.num_classes), cfg.train_config(), args.members,
                        cfg.preprocess_config(), cfg.augment_config())
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(ablation_csv(rows))
    print(ablation_csv(rows), end="")


def cmd_explain(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    pre = _pre_from_extra(ckpt.extra)
    raw = load_ppm(args.image)
    img = preprocess(raw, pre)
    amap = grad_cam(model, img.transpose(2, 0, 1), args.target_class, args.layer)
    prefix = args.out or str(Path(args.image).with_name(Path(args.image).stem + "_gradcam"))
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    shown = np.round(img * 255).astype(np.uint8)
    paths = write_attention(amap, shown, prefix)
    flag = " (all-zero map)" if amap.all_zero else ""
    print(f"wrote {', '.join(str(p) for p in paths)}{flag}")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ensemble": cmd_ensemble,
            "ablate": cmd_ablate, "explain": cmd_explain}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FusionVoteError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


dispatch = main


if __name__ == "__main__":
    sys.exit(main())
