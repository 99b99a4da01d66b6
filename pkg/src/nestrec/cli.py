"""Command-line interface: preprocess, synth, train, evaluate, extract,
curve, and analyze-memory.

Exit codes: 0 success, 1 usage error (bad flags, bad config), 2 data or
file-format error. Output files are byte-identical across reruns with the
same inputs; pass --deterministic to also drop the timestamp header from
text reports.
"""

from __future__ import annotations

import argparse
import datetime
import sys
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (TrainConfig, configs_from_mapping, mapping_from_configs,
                     read_config_file)
from .data import (load_dataset, preprocess, read_embeddings, save_dataset,
                   synth_generate, write_embeddings)
from .errors import DataError, UsageError
from .model import extract
from .nesting import SizeLadder, memory_report
from .training import (evaluate, format_history, popularity_report,
                       size_curve, train)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through our exit-code scheme."""

    def error(self, message):
        raise UsageError(message)


def _timestamp_header(args) -> str:
    if getattr(args, "deterministic", False):
        return ""
    now = datetime.datetime.now(datetime.timezone.utc)
    return f"# generated {now.isoformat(timespec='seconds')}\n"


def _write_report(path, body: str, args) -> None:
    if not body.endswith("\n"):
        body += "\n"
    Path(path).write_text(_timestamp_header(args) + body, encoding="utf-8")


def _series_slug(metric: str) -> str:
    return metric.lower().replace("@", "_at_")


# ---------------------------------------------------------------------------
# shared loading helpers


def _load_features(args, data_dir: Path, mode: str, n_items: int):
    """Feature matrices for the requested modality mode.

    Explicit --lang-emb / --img-emb paths win; otherwise lang.emb / img.emb
    inside the dataset directory are picked up when present.
    """
    def resolve(flag_value, default_name, needed, what):
        path = Path(flag_value) if flag_value else data_dir / default_name
        if not path.exists():
            if needed:
                raise DataError(
                    f"modality_mode needs {what} features but {path} does "
                    f"not exist; pass --{what}-emb or add {default_name} to "
                    f"the dataset directory")
            return None
        return read_embeddings(path, expect_rows=n_items)

    need_lang = mode in ("both", "text")
    need_img = mode in ("both", "image")
    lang = resolve(args.lang_emb, "lang.emb", need_lang, "lang")
    img = resolve(args.img_emb, "img.emb", need_img, "img")
    return lang, img


def _load_model(path):
    model, manifest, opt_blobs = load_checkpoint(path)
    return model, manifest, opt_blobs


def _eval_batch(ds, split: str):
    if split == "valid":
        return ds.valid_batch()
    return ds.test_batch()


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(args) -> int:
    ds = preprocess(args.interactions, args.metadata,
                    max_len=args.max_len, min_count=args.min_count)
    save_dataset(args.out, ds)
    print(f"wrote {args.out}: {len(ds.users)} users, {ds.n_items} items, "
          f"{sum(len(s) for s in ds.sequences)} interactions "
          f"({ds.manifest.get('filter_passes', 0)} filter passes)")
    return 0


def cmd_synth(args) -> int:
    ds, lang, img = synth_generate(
        n_users=args.users, n_items=args.items, noise=args.noise,
        seed=args.seed if args.seed is not None else 0,
        d_lang=args.d_lang, d_img=args.d_img,
        min_len=args.min_len, max_len_walk=args.max_len_walk,
        max_len=args.max_len)
    out = Path(args.out)
    save_dataset(out, ds)
    write_embeddings(out / "lang.emb", lang)
    write_embeddings(out / "img.emb", img)
    print(f"wrote {out}: {len(ds.users)} users, {ds.n_items} items, "
          f"text {lang.shape[1]}-d, image {img.shape[1]}-d")
    return 0


def _train_configs(args):
    mapping = read_config_file(args.config) if args.config else {}
    model_over = {}
    train_over = {}
    flag_to_field = {
        "d_model": ("model", "d_model"),
        "ladder": ("model", "ladder_spec"),
        "ladder_min": ("model", "ladder_min"),
        "blocks": ("model", "n_blocks"),
        "ffn_scale": ("model", "ffn_scale"),
        "norm": ("model", "norm_mode"),
        "modality": ("model", "modality_mode"),
        "dropout": ("model", "dropout"),
        "r_min": ("model", "r_min"),
        "r_max": ("model", "r_max"),
        "max_len": ("model", "max_len"),
        "lr": ("train", "learning_rate"),
        "weight_decay": ("train", "weight_decay"),
        "epochs": ("train", "max_epochs"),
        "patience": ("train", "patience"),
        "batch_size": ("train", "batch_size"),
        "grad_clip": ("train", "grad_clip"),
        "loss_weights": ("train", "loss_weights"),
        "eval_batch_size": ("train", "eval_batch_size"),
    }
    for flag, (side, field) in flag_to_field.items():
        value = getattr(args, flag)
        if value is None:
            continue
        (model_over if side == "model" else train_over)[field] = value
    if args.seed is not None:
        model_over["seed"] = args.seed
        train_over["seed"] = args.seed
    if args.precision is not None:
        model_over["precision"] = args.precision
        train_over["precision"] = args.precision
    return configs_from_mapping(mapping, model_over, train_over)


def cmd_train(args) -> int:
    mcfg, tcfg = _train_configs(args)
    ds = load_dataset(args.data)
    lang, img = _load_features(args, Path(args.data), mcfg.modality_mode,
                               ds.n_items)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    result = train(mcfg, tcfg, ds, lang, img, log=print)
    sizes = list(result.params.ladder)
    _write_report(out / "history.tsv",
                  format_history(result.history, sizes), args)

    extra = {f"train.{k}": v for k, v in
             mapping_from_configs(mcfg, tcfg).items()
             if k in TrainConfig.__dataclass_fields__}
    extra["best_epoch"] = result.best_epoch
    extra["best_metric"] = result.best_metric
    extra["stop_reason"] = result.stop_reason
    ckpt = out / "checkpoint.ckpt"
    save_checkpoint(ckpt, result.params, extra, opt_state=result.state)

    pop = popularity_report(ds, split="valid")
    print(f"best epoch {result.best_epoch} "
          f"valid NDCG@10 {result.best_metric:.4f} ({result.stop_reason}); "
          f"popularity baseline {pop['NDCG@10']:.4f}")
    print(f"wrote {ckpt} and {out / 'history.tsv'}")
    return 0


def cmd_evaluate(args) -> int:
    model, _, _ = _load_model(args.checkpoint)
    ds = load_dataset(args.data)
    if ds.n_items != model.vocab_size:
        raise DataError(
            f"checkpoint covers {model.vocab_size} items but {args.data} "
            f"holds {ds.n_items}")
    width = args.size
    if width is not None and width not in model.ladder:
        raise UsageError(
            f"size {width} is not in the model ladder {model.ladder.spec()}")
    inputs, labels = _eval_batch(ds, args.split)
    report = evaluate(model, inputs, labels, width=width,
                      batch_size=args.eval_batch_size, split=args.split)
    body = f"split {args.split}\tusers {inputs.shape[0]}\n" \
        + report.format_table()
    print(body)
    if args.out:
        _write_report(args.out, body, args)
    return 0


def cmd_extract(args) -> int:
    model, _, _ = _load_model(args.checkpoint)
    if args.size not in model.ladder:
        raise UsageError(
            f"size {args.size} is not in the model ladder "
            f"{model.ladder.spec()}")
    sub = extract(model, args.size)
    save_checkpoint(args.out, sub, {"extracted_size": args.size,
                                    "extracted_from_width": model.width})
    print(f"wrote {args.out}: width {args.size} "
          f"(ladder {sub.ladder.spec()})")
    return 0


def cmd_curve(args) -> int:
    model, _, _ = _load_model(args.checkpoint)
    ds = load_dataset(args.data)
    if ds.n_items != model.vocab_size:
        raise DataError(
            f"checkpoint covers {model.vocab_size} items but {args.data} "
            f"holds {ds.n_items}")
    report = size_curve(model, ds, batch_size=args.eval_batch_size)
    table = report.format_table()
    print(table)
    pop = popularity_report(ds, split="test")
    print("popularity baseline\t"
          + "\t".join(f"{name} {pop[name]:.4f}"
                      for name in report.metric_names()))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_report(out / "curve.tsv", table, args)
        for name in report.metric_names():
            lines = [f"{w}\t{v:.6f}" for w, v in report.series(name)]
            _write_report(out / f"{_series_slug(name)}.series.tsv",
                          "\n".join(lines), args)
        print(f"wrote {out / 'curve.tsv'} and "
              f"{len(report.metric_names())} series files")
    return 0


def cmd_analyze_memory(args) -> int:
    try:
        ladder = SizeLadder.parse(args.ladder)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = memory_report(args.layers, args.gamma, args.batch, args.len,
                           ladder)
    print(report.format_table())
    top = len(report.sizes) - 1
    weights_saved = report.params_saved[top]
    acts_saved = report.acts_saved[top]
    print(f"weight entries saved at width {report.sizes[top]}: "
          f"{weights_saved:.0f} (~{weights_saved / 1e6:.2f}M)")
    print(f"activation entries saved at width {report.sizes[top]}: "
          f"{acts_saved:.0f} (~{acts_saved / 1e6:.2f}M)")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="seed override for generation and training")
    common.add_argument("--precision", type=int, choices=(32, 64),
                        default=None, help="float width for model math")
    common.add_argument("--deterministic", action="store_true",
                        help="drop timestamp headers from text outputs")

    parser = _Parser(prog="nestrec",
                     description="train once, extract a model per size")
    parser.add_argument("--version", action="version",
                        version=f"nestrec {__version__}")
    sub = parser.add_subparsers(dest="cmd")

    p = sub.add_parser("preprocess", parents=[common],
                       help="raw interaction log to a dataset directory")
    p.add_argument("--interactions", required=True,
                   help="TSV of user, item, timestamp (optionally .gz)")
    p.add_argument("--metadata", default=None,
                   help="JSON-lines item metadata keyed by item_id")
    p.add_argument("--out", required=True)
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--min-count", type=int, default=5)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic dataset with features")
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=2000)
    p.add_argument("--items", type=int, default=500)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--d-lang", type=int, default=32)
    p.add_argument("--d-img", type=int, default=16)
    p.add_argument("--min-len", type=int, default=8)
    p.add_argument("--max-len-walk", type=int, default=16)
    p.add_argument("--max-len", type=int, default=50)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common],
                       help="fit a model and write checkpoint + history")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None,
                   help="key=value file; flags override its values")
    p.add_argument("--lang-emb", default=None)
    p.add_argument("--img-emb", default=None)
    p.add_argument("--d-model", type=int, default=None)
    p.add_argument("--ladder", default=None,
                   help='explicit sizes "8,16,32" or doubling range "8:64"')
    p.add_argument("--ladder-min", type=int, default=None)
    p.add_argument("--blocks", type=int, default=None)
    p.add_argument("--ffn-scale", type=int, default=None)
    p.add_argument("--norm", choices=("segment", "full"), default=None)
    p.add_argument("--modality", choices=("both", "text", "image", "none"),
                   default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--r-min", type=float, default=None)
    p.add_argument("--r-max", type=float, default=None)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--grad-clip", type=float, default=None)
    p.add_argument("--loss-weights", default=None)
    p.add_argument("--eval-batch-size", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common],
                       help="rank the held-out targets over the catalog")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--size", type=int, default=None,
                   help="ladder width to evaluate (default: full width)")
    p.add_argument("--split", choices=("test", "valid"), default="test")
    p.add_argument("--eval-batch-size", type=int, default=256)
    p.add_argument("--out", default=None, help="also write the table here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("extract", parents=[common],
                       help="slice one width out as a standalone checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("curve", parents=[common],
                       help="test metrics for every extractable width")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eval-batch-size", type=int, default=256)
    p.add_argument("--out", default=None,
                   help="directory for curve.tsv and per-metric series files")
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("analyze-memory", parents=[common],
                       help="train-once vs train-independently memory table")
    p.add_argument("--layers", type=int, default=4,
                   help="weight matrices per width")
    p.add_argument("--gamma", type=float, default=2.0,
                   help="entries per weight as a multiple of width^2")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--len", type=int, default=50)
    p.add_argument("--ladder", default="8:512")
    p.set_defaults(func=cmd_analyze_memory)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "cmd", None) is None:
            parser.print_usage(sys.stderr)
            return 1
        return args.func(args) or 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
