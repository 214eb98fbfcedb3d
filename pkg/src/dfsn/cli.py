"""Command-line surface: data generation, training, evaluation, prediction,
gradient checking, and history reports.

Results go to stdout or files; diagnostics go to stderr. Every command is
deterministic given identical flags, config file, and inputs. Settings merge
as defaults < config file < flags.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import data as dio
from .model import fusion_preset, init_model, predict
from .text import EmbeddingTable
from .train import TrainConfig, evaluate, render_history_markdown
from .train import train as run_training
from .verify import run_gradcheck_suite

CONFIG_DEFAULTS = {
    "preset": "tiny",        # model scale: tiny | full
    "modality": "fused",     # fused | image | text
    "seed": 0,               # master seed for init, shuffling, fallbacks
    "batch_size": 100,
    "lr": 1e-4,              # initial learning rate
    "decay_base": 0.96,
    "decay_every": 3000,
    "epochs": 10,
    "eval_every": 1,
    "holdout": 0.0,          # fraction split off for testing during train
    "n": 1000,               # gen-data sample count
    "mix": "0.25,0.25,0.25,0.25",  # gen-data regime proportions a,b,c,d
}


class CliError(Exception):
    """User-facing failure: printed to stderr, exits nonzero."""


def parse_flat_config(path) -> dict:
    """Flat key = value file; '#' starts a comment, values may be quoted."""
    out = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}: line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise CliError(f"{path}: line {lineno}: empty key")
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "'\"":
            out[key] = value[1:-1]
            continue
        lowered = value.lower()
        if lowered in ("true", "false"):
            out[key] = lowered == "true"
            continue
        try:
            out[key] = int(value)
            continue
        except ValueError:
            pass
        try:
            out[key] = float(value)
            continue
        except ValueError:
            pass
        out[key] = value
    return out


def resolve_settings(args: argparse.Namespace) -> dict:
    """Merge defaults, then the config file, then explicit flags."""
    settings = dict(CONFIG_DEFAULTS)
    if getattr(args, "config", None):
        file_values = parse_flat_config(args.config)
        unknown = set(file_values) - set(CONFIG_DEFAULTS)
        if unknown:
            raise CliError(f"{args.config}: unknown settings {sorted(unknown)}")
        settings.update(file_values)
    for key in CONFIG_DEFAULTS:
        flag = getattr(args, key, None)
        if flag is not None:
            settings[key] = flag
    return settings


def _load_table(path, dim: int, seed: int) -> EmbeddingTable:
    if path is None:
        # no vector file: every word uses the deterministic seeded fallback
        return EmbeddingTable(dim=dim, fallback_seed=seed)
    table = dio.load_embeddings(path, fallback_seed=seed)
    if table.dim != dim:
        raise CliError(f"embedding file dimension {table.dim} != model dimension {dim}")
    return table


def _parse_mix(text: str) -> tuple[float, ...]:
    try:
        mix = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise CliError(f"bad regime mix {text!r}: expected 4 comma-separated numbers") from None
    return mix


def cmd_gen_data(args) -> int:
    settings = resolve_settings(args)
    if args.out is None:
        raise CliError("gen-data needs --out")
    mix = _parse_mix(str(settings["mix"]))
    out_dir = Path(args.out)
    manifest = dio.gen_synthetic(int(settings["n"]), mix, seed=int(settings["seed"]),
                                 out_dir=out_dir)
    manifest_path = out_dir / "manifest.jsonl"
    dio.save_manifest(manifest, manifest_path)
    print(manifest_path)
    print(f"wrote {len(manifest)} samples under {out_dir}", file=sys.stderr)
    return 0


def _build_train_config(settings) -> TrainConfig:
    return TrainConfig(batch_size=int(settings["batch_size"]),
                       initial_lr=float(settings["lr"]),
                       decay_base=float(settings["decay_base"]),
                       decay_every=int(settings["decay_every"]),
                       epochs=int(settings["epochs"]),
                       seed=int(settings["seed"]),
                       eval_every=int(settings["eval_every"]))


def cmd_train(args) -> int:
    settings = resolve_settings(args)
    if args.manifest is None:
        raise CliError("train needs --manifest")
    if args.out is None:
        raise CliError("train needs --out")
    seed = int(settings["seed"])
    config = fusion_preset(str(settings["preset"]), modality=str(settings["modality"]))
    manifest = dio.load_manifest(args.manifest)
    manifest = dio.filter_by_length(manifest)
    if len(manifest) == 0:
        raise CliError("no samples left after the 5 < words < 150 length filter")
    table = None
    if config.modality in ("fused", "text"):
        table = _load_table(args.embeddings, config.text.dim, seed)
    base_dir = Path(args.manifest).parent
    holdout = float(settings["holdout"])
    eval_samples = None
    if args.eval_manifest is not None:
        eval_manifest = dio.filter_by_length(dio.load_manifest(args.eval_manifest))
        eval_samples = dio.materialize(eval_manifest, Path(args.eval_manifest).parent,
                                       config, table)
    elif holdout > 0.0:
        manifest, eval_manifest = dio.split_train_test(manifest, seed, train_frac=1.0 - holdout)
        eval_samples = dio.materialize(eval_manifest, base_dir, config, table)
    train_samples = dio.materialize(manifest, base_dir, config, table)

    params = init_model(config, seed=seed)
    cfg = _build_train_config(settings)
    print(f"training {config.modality} model on {len(train_samples)} samples "
          f"({cfg.epochs} epochs, batch {cfg.batch_size})", file=sys.stderr)
    params, history = run_training(params, train_samples, cfg, table=table,
                                   eval_samples=eval_samples, out_dir=args.out)
    for record in history.epochs[-2:]:
        print(f"{record.split} {record.metrics.row()}")
    print(f"checkpoints and history written under {args.out}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    settings = resolve_settings(args)
    if args.checkpoint is None or args.manifest is None:
        raise CliError("eval needs --checkpoint and --manifest")
    params = dio.load_checkpoint(args.checkpoint)
    config = params.config
    table = None
    if config.modality in ("fused", "text"):
        table = _load_table(args.embeddings, config.text.dim, int(settings["seed"]))
    manifest = dio.load_manifest(args.manifest)
    samples = dio.materialize(manifest, Path(args.manifest).parent, config, table)
    report = evaluate(params, samples, table)
    print(report.row())
    return 0


def cmd_predict(args) -> int:
    settings = resolve_settings(args)
    if args.checkpoint is None:
        raise CliError("predict needs --checkpoint")
    params = dio.load_checkpoint(args.checkpoint)
    config = params.config
    image = None
    if config.modality in ("fused", "image"):
        if args.image is None:
            raise CliError("this model needs --image")
        image = dio.load_ppm(args.image)
    text = args.text
    if config.modality in ("fused", "text") and text is None:
        raise CliError("this model needs --text")
    table = None
    if config.modality in ("fused", "text"):
        table = _load_table(args.embeddings, config.text.dim, int(settings["seed"]))
    result = predict(image, text, params, table)
    print(f"{result.label} {result.p_neg:.3f} {result.p_pos:.3f}")
    return 0


def cmd_gradcheck(args) -> int:
    settings = resolve_settings(args)
    results = run_gradcheck_suite(seed=int(settings["seed"]))
    failures = 0
    for name, report in results:
        status = "PASS" if report.passed else "FAIL"
        print(f"{status} {name}: max_rel_err={report.max_rel_err:.3e} (tol={report.tol:.1e})")
        if not report.passed:
            failures += 1
            print(str(report), file=sys.stderr)
    return 1 if failures else 0


def cmd_report(args) -> int:
    if args.history is None:
        raise CliError("report needs --history")
    csv_text = Path(args.history).read_text(encoding="utf-8")
    try:
        rendered = render_history_markdown(csv_text)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    if args.out:
        Path(args.out).write_text(rendered, encoding="utf-8")
        print(args.out)
    else:
        print(rendered, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfsn",
        description="joint visual-textual sentiment classification")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--seed", type=int, help="master random seed")
        p.add_argument("--preset", choices=("full", "tiny"), help="model scale")
        p.add_argument("--embeddings", help="word-vector file (textual format)")
        p.add_argument("--manifest", help="JSONL dataset manifest")
        p.add_argument("--checkpoint", help="model checkpoint path")
        p.add_argument("--out", help="output file or directory")

    p = sub.add_parser("gen-data", help="generate the synthetic cross-modal dataset")
    common(p)
    p.add_argument("--n", type=int, help="sample count")
    p.add_argument("--mix", help="regime proportions a,b,c,d (must sum to 1)")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write checkpoints + history")
    common(p)
    p.add_argument("--modality", choices=("fused", "image", "text"))
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--decay-base", dest="decay_base", type=float)
    p.add_argument("--decay-every", dest="decay_every", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--holdout", type=float, help="fraction held out for testing")
    p.add_argument("--eval-manifest", help="explicit test manifest")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="print Prec. Rec. F1 Acc. for a checkpoint")
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="classify one image + text pair")
    common(p)
    p.add_argument("--image", help="PPM image path")
    p.add_argument("--text", help="raw text")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("gradcheck", help="run the gradient-check suite (tiny presets)")
    common(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("report", help="render a history CSV as markdown")
    common(p)
    p.add_argument("--history", help="history.csv written by train")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (dio.ManifestError, dio.EmbeddingFormatError, dio.PpmFormatError,
            dio.CheckpointFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
