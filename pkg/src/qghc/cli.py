"""Command-line surface: dataset generation, training, evaluation, parameter
auditing, gradient checking, and activation-map export.

Run configs are flat ``key=value`` text files mirroring the model and
training settings; unknown keys are rejected and emission is canonical
(sorted keys). All commands exit 0 on success and print a single
``error: ...`` line on stderr otherwise.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import audit as audit_mod
from . import data as data_mod
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import run_all
from .model import (ModelConfig, VQAModel, append_cam_csv, model_cam,
                    model_forward, upsample_nearest, write_pgm)
from .tensor import ShapeError
from .training import TrainConfig, evaluate, fit

VARIANTS = ("qghc", "naive", "full", "group", "concat", "blind")
# CLI variant -> (fusion, stack kind)
_VARIANT_MAP = {
    "qghc": ("qghc", "hybrid"),
    "naive": ("qghc", "naive"),
    "full": ("qghc", "full"),
    "group": ("qghc", "group"),
    "concat": ("concat", "hybrid"),
    "blind": ("blind", "hybrid"),
}

_MODEL_INT_KEYS = ("embed_dim", "gru_hidden", "channels", "groups",
                   "dynamic_groups", "predictor_hidden", "modules")
_MODEL_STR_KEYS = ("variant", "head", "fusion")
_TRAIN_KEYS = ("epochs", "batch_size", "lr", "seed")
RUN_CONFIG_KEYS = frozenset(_MODEL_INT_KEYS + _MODEL_STR_KEYS + _TRAIN_KEYS
                            + ("encoder_channels",))


class UsageError(ValueError):
    pass


def parse_run_config(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise UsageError(f"run config line {lineno} is not key=value: {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in RUN_CONFIG_KEYS:
            raise UsageError(f"unknown run config key {key!r}")
        if key in pairs:
            raise UsageError(f"duplicate run config key {key!r}")
        pairs[key] = value
    return pairs


def emit_run_config(pairs: dict[str, str]) -> str:
    return "".join(f"{k}={pairs[k]}\n" for k in sorted(pairs))


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def build_model_config(pairs: dict[str, str], variant: str | None,
                       attention: bool, vocab=None, answers=None) -> ModelConfig:
    kwargs: dict = {}
    if vocab is not None:
        kwargs["vocab_words"] = tuple(vocab)
    if answers is not None:
        kwargs["answer_words"] = tuple(answers)
    for key in _MODEL_INT_KEYS:
        if key in pairs:
            kwargs[key] = int(pairs[key])
    for key in _MODEL_STR_KEYS:
        if key in pairs:
            kwargs[key] = pairs[key]
    if "encoder_channels" in pairs:
        kwargs["encoder_channels"] = tuple(int(v) for v in pairs["encoder_channels"].split(","))
    if variant is not None:
        fusion, kind = _VARIANT_MAP[variant]
        kwargs["fusion"] = fusion
        kwargs["variant"] = kind
    if attention:
        kwargs["head"] = "attention"
    return ModelConfig(**kwargs)


def build_train_config(pairs: dict[str, str], seed: int | None) -> TrainConfig:
    kwargs: dict = {}
    if "epochs" in pairs:
        kwargs["epochs"] = int(pairs["epochs"])
    if "batch_size" in pairs:
        kwargs["batch_size"] = int(pairs["batch_size"])
    if "lr" in pairs:
        kwargs["lr"] = float(pairs["lr"])
    if "seed" in pairs:
        kwargs["seed"] = int(pairs["seed"])
    if seed is not None:
        kwargs["seed"] = seed
    return TrainConfig(**kwargs)


def _load_run_config(path: str | None) -> dict[str, str]:
    if path is None:
        return {}
    return parse_run_config(Path(path).read_text())


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    ds = data_mod.generate_dataset(args.seed, args.count)
    data_mod.serialize_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    print("answer histogram:")
    for answer, count in data_mod.answer_histogram(ds).items():
        print(f"  {answer:<10} {count}")
    print(f"majority-class accuracy: {data_mod.majority_class_accuracy(ds):.4f}")
    print(f"blind-optimal accuracy:  {data_mod.blind_optimal_accuracy(ds):.4f}")
    return 0


def cmd_train(args) -> int:
    train_ds = data_mod.load_dataset(args.data)
    val_ds = data_mod.load_dataset(args.val) if args.val else None
    pairs = _load_run_config(args.config)
    model_config = build_model_config(pairs, args.variant, args.attention,
                                      vocab=train_ds.vocab,
                                      answers=train_ds.answer_list)
    train_config = build_train_config(pairs, args.seed)
    model = VQAModel(model_config, seed=train_config.seed)
    history = fit(model, train_ds, val_ds, train_config, log_path=args.log)
    save_checkpoint(args.out, model)
    last = history[-1]
    print(f"trained {train_config.epochs} epochs; final train loss "
          f"{last.train_loss:.4f}, train acc {last.train_acc:.4f}, "
          f"val acc {last.val_acc:.4f}")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = data_mod.load_dataset(args.data)
    if (tuple(ds.vocab) != model.config.vocab_words
            or tuple(ds.answer_list) != model.config.answer_words):
        raise UsageError("vocabulary mismatch between checkpoint and dataset")
    overall, families = evaluate(model, ds)
    print(f"overall accuracy: {overall:.4f}")
    for family, acc in families.items():
        print(f"  {family:<6} {acc:.4f}")
    return 0


def cmd_audit_params(args) -> int:
    pairs = _load_run_config(args.config)
    config = build_model_config(pairs, args.variant, args.attention)
    analytic = audit_mod.count_analytic(config)
    model = VQAModel(config, seed=0)
    enumerated = audit_mod.enumerate_params(model)
    if args.csv:
        print(audit_mod.report_csv(enumerated))
    else:
        print(audit_mod.render_report(enumerated, show_rows=args.rows))
    match = audit_mod.reports_equal(analytic, enumerated)
    print(f"analytic == enumerated: {'yes' if match else 'NO'}")
    if not match:
        raise audit_mod.AuditError("analytic and enumerated parameter counts disagree")
    if args.table1:
        print()
        print(audit_mod.render_table1(audit_mod.compare_table1()))
        full = audit_mod.qd_second_fc(audit_mod.TABLE1_ROWS[8].config, "full")
        dev = abs(full - audit_mod.FULL_SINGLE_MODULE_CLAIM) / audit_mod.FULL_SINGLE_MODULE_CLAIM
        print(f"full-kernel prediction cost: {full:,} "
              f"({100 * dev:.3f}% from the published 117M)")
    return 0


def cmd_grad_check(args) -> int:
    results = run_all(seed=args.seed, tol=args.tol)
    failed = []
    for name, report in results:
        status = "PASS" if report.passed else "FAIL"
        print(f"{status} {name:<28} max rel err {report.max_rel_err:.3e}")
        if not report.passed:
            failed.append(name)
    if failed:
        raise UsageError(f"gradient check failed for: {', '.join(failed)}")
    return 0


def cmd_cam(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = data_mod.load_dataset(args.data)
    if not 0 <= args.index < len(ds):
        raise UsageError(f"index {args.index} outside dataset of {len(ds)} samples")
    i = args.index
    images = ds.images[i:i + 1]
    tokens = ds.tokens[i:i + 1]
    dist = model_forward(images, tokens, model)
    predicted = int(dist.predictions()[0])
    _, normalized = model_cam(model, images, tokens, predicted)
    factor = ds.images.shape[-1] // normalized.shape[-1]
    up = upsample_nearest(normalized[0], factor)
    write_pgm(args.out, up)
    flat = int(np.argmax(up))
    row, col = divmod(flat, up.shape[1])
    csv_path = Path(args.out).with_suffix(".csv")
    append_cam_csv(csv_path, {
        "sample_id": i,
        "question": ds.text(i),
        "predicted": ds.answer_list[predicted],
        "answer": ds.answer_list[int(ds.answers[i])],
        "argmax_row": row,
        "argmax_col": col,
    })
    print(f"wrote heatmap {args.out} and row in {csv_path}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qghc",
                                     description="question-guided hybrid convolution toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic VQA dataset file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=_positive_int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--val", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--variant", choices=VARIANTS, default=None)
    p.add_argument("--attention", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit-params", help="count QD/QI parameters")
    p.add_argument("--config", default=None)
    p.add_argument("--variant", choices=VARIANTS, default=None)
    p.add_argument("--attention", action="store_true")
    p.add_argument("--table1", action="store_true",
                   help="compare closed forms against the published ablation column")
    p.add_argument("--csv", action="store_true")
    p.add_argument("--rows", action="store_true", help="print per-parameter rows")
    p.set_defaults(func=cmd_audit_params)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("cam", help="export an activation heatmap as PGM + CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cam)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, CheckpointError, data_mod.DatasetError, ShapeError,
            audit_mod.AuditError, ValueError, OSError, IndexError) as exc:
        message = " ".join(str(exc).split())
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
