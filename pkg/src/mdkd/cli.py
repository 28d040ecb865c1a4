"""Command-line entry points for the distillation pipeline.

Subcommands: train-base, finetune-teacher, distill, eval, dump-attention,
compare-attention, gen-synthetic, sweep. Settings come from a JSON config
file of flat dotted keys (--config), overridable per key with --set key=value
(repeatable); --seed and --out are shortcuts for the keys "seed" and "out".
MDKD_LOG_LEVEL (error|info|debug) controls verbosity.

Exit codes: 0 success, 2 configuration or data error, 1 internal failure.
Output files are written via temp-file rename, so a failing run leaves no
partial outputs behind.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

from .data import (Example, SyntheticTask, TsvSchema, Vocab, gen_synthetic, load_tsv,
                   save_tsv, tokenize, write_atomic)
from .errors import ConfigError, DataError, MdkdError
from .losses import kl_attention_row
from .mapping import match_layers
from .model import EncoderModel, ModelConfig, load_checkpoint, save_checkpoint
from .trainer import RECIPES, RunConfig, evaluate, fit, run_experiment, write_log

LOG = logging.getLogger("mdkd")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    name = os.environ.get("MDKD_LOG_LEVEL", "info").lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"MDKD_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(message)s", force=True)


# ---------------------------------------------------------------------------
# Config handling: flat dotted keys, file < --set < --seed/--out
# ---------------------------------------------------------------------------


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_config(args: argparse.Namespace) -> dict:
    cfg: dict = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
        cfg.update(loaded)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        cfg[key] = _parse_value(value)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    return cfg


_MISSING = object()


def want(cfg: dict, key: str, default=None):
    return cfg.get(key, default)


def need(cfg: dict, key: str):
    if key not in cfg:
        raise ConfigError(f"missing required config key {key!r} (use --set {key}=...)")
    return cfg[key]


def as_int(cfg: dict, key: str, default=_MISSING) -> int:
    value = need(cfg, key) if default is _MISSING else want(cfg, key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise ConfigError(f"config key {key!r} must be an integer, got {value!r}")
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"config key {key!r} must be an integer, got {value!r}") from None


def as_float(cfg: dict, key: str, default=_MISSING) -> float:
    value = need(cfg, key) if default is _MISSING else want(cfg, key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise ConfigError(f"config key {key!r} must be a number, got {value!r}")
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"config key {key!r} must be a number, got {value!r}") from None


def _band(cfg: dict, key: str, default) -> tuple[float, float]:
    value = want(cfg, key, default)
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"config key {key!r} must be a [lo, hi] pair, got {value!r}")
    return float(value[0]), float(value[1])


def out_path(cfg: dict, name: str) -> str:
    out = str(want(cfg, "out", "out"))
    os.makedirs(out, exist_ok=True)
    return os.path.join(out, name)


# ---------------------------------------------------------------------------
# Shared pieces
# ---------------------------------------------------------------------------


def _load_labeled(cfg: dict, key: str, n_classes: int) -> list[Example]:
    path = need(cfg, key)
    schema = TsvSchema(skip_header=bool(want(cfg, "data.skip_header", False)))
    examples, malformed = load_tsv(path, schema, n_classes=n_classes)
    if malformed:
        LOG.info("%s: skipped %d malformed lines", path, malformed)
    if not examples:
        raise DataError(f"{path}: no examples")
    return examples


def _train_classifier(cfg: dict, model: EncoderModel, out_name: str) -> dict:
    vocab = Vocab.load(need(cfg, "data.vocab"))
    if len(vocab) != model.config.vocab_size:
        raise DataError(f"vocab size {len(vocab)} != model vocab {model.config.vocab_size}")
    train_ex = _load_labeled(cfg, "data.train", model.config.n_classes)
    dev_ex = _load_labeled(cfg, "data.dev", model.config.n_classes)
    rc = RunConfig(recipe="exp1.0",
                   epochs=as_int(cfg, "train.epochs", 10),
                   batch_size=as_int(cfg, "train.batch_size", 64),
                   max_seq_len=as_int(cfg, "train.max_seq_len", model.config.max_seq_len),
                   base_lr=as_float(cfg, "train.lr", 1e-3),
                   seed=as_int(cfg, "seed", 0))
    log = fit(model, None, rc, train_ex, dev_ex, vocab)
    path = out_path(cfg, out_name)
    save_checkpoint(model, path)
    write_log(log, out_path(cfg, "log.jsonl"))
    final = log[-1]["dev_metrics"]
    LOG.info("saved %s (final dev accuracy %.4f)", path, final["accuracy"])
    return final


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_synthetic(cfg: dict) -> int:
    task = SyntheticTask(
        n_symbols=as_int(cfg, "task.n_symbols", 20),
        min_tokens=as_int(cfg, "task.min_tokens", 4),
        max_tokens=as_int(cfg, "task.max_tokens", 6),
        threshold=as_float(cfg, "task.threshold", 0.5),
        hi_band=_band(cfg, "task.hi_band", (0.75, 1.0)),
        lo_band=_band(cfg, "task.lo_band", (0.0, 0.25)))
    seed = as_int(cfg, "seed", 0)
    splits = {"train": as_int(cfg, "data.n_train", 8000),
              "dev": as_int(cfg, "data.n_dev", 2000),
              "test": as_int(cfg, "data.n_test", 0)}
    vocab = task.vocab()
    summary = {"vocab": len(vocab), "seed": seed}
    for i, (name, n) in enumerate(splits.items()):
        if n < 1:
            continue
        examples, _ = gen_synthetic(task, n, seed=seed + i)
        save_tsv(examples, out_path(cfg, f"{name}.tsv"))
        summary[name] = n
    vocab.save(out_path(cfg, "vocab.txt"))
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_train_base(cfg: dict) -> int:
    vocab = Vocab.load(need(cfg, "data.vocab"))
    mc = ModelConfig(
        n_layers=as_int(cfg, "model.n_layers", 4),
        n_heads=as_int(cfg, "model.n_heads", 4),
        d_model=as_int(cfg, "model.d_model", 48),
        d_ff=as_int(cfg, "model.d_ff", 96),
        vocab_size=len(vocab),
        max_seq_len=as_int(cfg, "model.max_seq_len", 16),
        n_classes=as_int(cfg, "model.n_classes", 2),
        dropout=as_float(cfg, "model.dropout", 0.0))
    model = EncoderModel.init_random(mc, seed=as_int(cfg, "seed", 0))
    final = _train_classifier(cfg, model, "base.mdkd")
    print(json.dumps(final, sort_keys=True))
    return 0


def cmd_finetune_teacher(cfg: dict) -> int:
    model = load_checkpoint(need(cfg, "init.checkpoint"))
    final = _train_classifier(cfg, model, "teacher.mdkd")
    print(json.dumps(final, sort_keys=True))
    return 0


def cmd_distill(cfg: dict) -> int:
    rc = RunConfig(
        recipe=str(need(cfg, "distill.recipe")),
        epochs=as_int(cfg, "train.epochs", 50),
        train_path=need(cfg, "data.train"),
        dev_path=need(cfg, "data.dev"),
        vocab_path=need(cfg, "data.vocab"),
        teacher_ckpt=want(cfg, "teacher.checkpoint"),
        base_ckpt=want(cfg, "base.checkpoint"),
        out_dir=str(want(cfg, "out", "out")),
        n_student_layers=as_int(cfg, "student.n_layers"),
        batch_size=as_int(cfg, "train.batch_size", 32),
        max_seq_len=as_int(cfg, "train.max_seq_len", 64),
        seed=as_int(cfg, "seed", 0),
        base_lr=as_float(cfg, "train.lr", 2e-5),
        dropout=as_float(cfg, "model.dropout", 0.0),
        lambda_hard=None if want(cfg, "loss.lambda_hard") is None
        else as_float(cfg, "loss.lambda_hard"),
        threshold=None if want(cfg, "schedule.threshold") is None
        else as_float(cfg, "schedule.threshold"),
        stage_limit=None if want(cfg, "schedule.stage_limit") is None
        else as_int(cfg, "schedule.stage_limit"),
        init_from=str(want(cfg, "init.from", "base")))
    _, log = run_experiment(rc)
    print(json.dumps(log[-1]["dev_metrics"], sort_keys=True))
    return 0


def cmd_eval(cfg: dict) -> int:
    model = load_checkpoint(need(cfg, "checkpoint"))
    vocab = Vocab.load(need(cfg, "data.vocab"))
    if len(vocab) != model.config.vocab_size:
        raise DataError(f"vocab size {len(vocab)} != model vocab {model.config.vocab_size}")
    examples = _load_labeled(cfg, "data.path", model.config.n_classes)
    metrics = evaluate(model, examples, vocab,
                       as_int(cfg, "data.max_seq_len", model.config.max_seq_len),
                       as_int(cfg, "data.batch_size", 128))
    print(json.dumps(metrics, sort_keys=True))
    return 0


def _model_id(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:16]


def attention_dump(model: EncoderModel, model_id: str, vocab: Vocab, text_a: str,
                   text_b: str | None, layer: int | None, head: int | None) -> dict:
    """Per-(layer, head) attention matrices for one input, trimmed to real tokens."""
    cfg = model.config
    if layer is not None and not 0 <= layer < cfg.n_layers:
        raise ConfigError(f"layer {layer} out of range for {cfg.n_layers}-layer model")
    if head is not None and not 0 <= head < cfg.n_heads:
        raise ConfigError(f"head {head} out of range for {cfg.n_heads}-head model")
    ids, mask, segs = tokenize(Example(text_a, text_b), vocab, cfg.max_seq_len)
    n_real = int(sum(mask))
    ids, mask, segs = ids[:n_real], mask[:n_real], segs[:n_real]
    rec = model.encode(ids, mask, capture=True, segments=segs)
    names = vocab.tokens()
    entries = []
    for li in range(cfg.n_layers) if layer is None else [layer]:
        for h in range(cfg.n_heads) if head is None else [head]:
            entries.append({"layer": li, "head": h,
                            "matrix": rec.attention[li][h].data.tolist()})
    return {"model_id": model_id, "n_layers": cfg.n_layers, "n_heads": cfg.n_heads,
            "text_a": text_a, "text_b": text_b,
            "tokens": [names[i] for i in ids], "layers": entries}


def cmd_dump_attention(cfg: dict) -> int:
    ckpt = need(cfg, "checkpoint")
    model = load_checkpoint(ckpt)
    vocab = Vocab.load(need(cfg, "data.vocab"))
    if len(vocab) != model.config.vocab_size:
        raise DataError(f"vocab size {len(vocab)} != model vocab {model.config.vocab_size}")
    dump = attention_dump(
        model, _model_id(ckpt), vocab, str(need(cfg, "text.a")), want(cfg, "text.b"),
        None if want(cfg, "layer") is None else as_int(cfg, "layer"),
        None if want(cfg, "head") is None else as_int(cfg, "head"))
    path = want(cfg, "dump.file") or out_path(cfg, "attention.json")
    write_atomic(path, json.dumps(dump, sort_keys=True) + "\n")
    LOG.info("wrote %s (%d matrices)", path, len(dump["layers"]))
    print(path)
    return 0


def compare_dumps(dump_t: dict, dump_s: dict) -> dict:
    """Mean row KL per matched (pair, head) and overall, between two dumps."""
    if dump_t["tokens"] != dump_s["tokens"]:
        raise DataError("attention dumps tokenize the input differently; cannot compare")
    if dump_t["n_heads"] != dump_s["n_heads"]:
        raise ConfigError(f"head counts differ: {dump_t['n_heads']} vs {dump_s['n_heads']}")
    plan = match_layers(dump_t["n_layers"], dump_s["n_layers"])
    t_mats = {(e["layer"], e["head"]): np.asarray(e["matrix"]) for e in dump_t["layers"]}
    s_mats = {(e["layer"], e["head"]): np.asarray(e["matrix"]) for e in dump_s["layers"]}
    report = []
    for layer_s, layer_t in plan.pairs:
        for h in range(dump_t["n_heads"]):
            if (layer_t, h) not in t_mats or (layer_s, h) not in s_mats:
                raise DataError(f"dump missing matched pair ({layer_t}/{layer_s}, head {h}); "
                                "re-dump without layer/head filters")
            p, q = t_mats[(layer_t, h)], s_mats[(layer_s, h)]
            kls = [kl_attention_row(p[i], q[i]) for i in range(p.shape[0])]
            report.append({"student_layer": layer_s, "teacher_layer": layer_t,
                           "head": h, "mean_kl": float(np.mean(kls))})
    return {"pairs": report, "mean_kl": float(np.mean([r["mean_kl"] for r in report])),
            "teacher_id": dump_t["model_id"], "student_id": dump_s["model_id"]}


def cmd_compare_attention(cfg: dict) -> int:
    with open(need(cfg, "dump.teacher"), encoding="utf-8") as fh:
        dump_t = json.load(fh)
    with open(need(cfg, "dump.student"), encoding="utf-8") as fh:
        dump_s = json.load(fh)
    result = compare_dumps(dump_t, dump_s)
    if want(cfg, "report.file"):
        write_atomic(cfg["report.file"], json.dumps(result, sort_keys=True) + "\n")
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_sweep(cfg: dict) -> int:
    axis = str(need(cfg, "sweep.axis"))
    if axis not in ("layers", "datasize"):
        raise ConfigError(f"sweep.axis must be layers|datasize, got {axis!r}")
    raw_values = need(cfg, "sweep.values")
    if not isinstance(raw_values, (list, tuple)) or not raw_values:
        raise ConfigError("sweep.values must be a non-empty list")
    values = [int(v) for v in raw_values]
    recipes = [str(r) for r in want(cfg, "sweep.recipes", ["exp2.0", "exp3.2"])]
    seeds = [int(s) for s in want(cfg, "sweep.seeds", [0, 1, 2, 3, 4])]
    for r in recipes:
        if r not in RECIPES:
            raise ConfigError(f"unknown recipe {r!r} in sweep.recipes")

    base_kw = dict(
        epochs=as_int(cfg, "train.epochs", 10),
        train_path=need(cfg, "data.train"), dev_path=need(cfg, "data.dev"),
        vocab_path=need(cfg, "data.vocab"),
        teacher_ckpt=want(cfg, "teacher.checkpoint"), base_ckpt=want(cfg, "base.checkpoint"),
        n_student_layers=as_int(cfg, "student.n_layers", 2),
        batch_size=as_int(cfg, "train.batch_size", 32),
        max_seq_len=as_int(cfg, "train.max_seq_len", 64),
        base_lr=as_float(cfg, "train.lr", 2e-5),
        init_from=str(want(cfg, "init.from", "base")),
        report_internal=False)

    rows = []
    failures = []
    for value in values:
        for recipe in recipes:
            for seed in seeds:
                kw = dict(base_kw, recipe=recipe, seed=seed)
                if axis == "layers":
                    kw["n_student_layers"] = value
                try:
                    rc = RunConfig(**kw)
                    if axis == "datasize":
                        _, log = _run_with_train_subset(rc, value)
                    else:
                        _, log = run_experiment(rc)
                    metric = log[-1]["dev_metrics"]["accuracy"]
                    rows.append((value, recipe, seed, f"{metric:.6f}"))
                except (MdkdError, OSError) as exc:
                    LOG.error("sweep run (%s=%s, %s, seed %s) failed: %s",
                              axis, value, recipe, seed, exc)
                    failures.append({"value": value, "recipe": recipe, "seed": seed,
                                     "error": str(exc)})
                    rows.append((value, recipe, seed, ""))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    lines = ["axis_value,recipe,seed,metric"] + [",".join(str(c) for c in r) for r in rows]
    path = out_path(cfg, "sweep.csv")
    write_atomic(path, "\n".join(lines) + "\n")
    print(json.dumps({"csv": path, "rows": len(rows), "failures": failures}, sort_keys=True))
    return 0


def _run_with_train_subset(rc: RunConfig, n: int):
    """Datasize sweeps train on the first n examples; generated corpora
    alternate labels, so any prefix is class-balanced."""
    from .trainer import build_student, load_corpus
    teacher = None
    if RECIPES[rc.recipe].needs_teacher:
        if not rc.teacher_ckpt:
            raise ConfigError(f"recipe {rc.recipe} requires teacher.checkpoint")
        teacher = load_checkpoint(rc.teacher_ckpt).freeze()
    student, plan = build_student(rc, teacher)
    vocab, train_ex, dev_ex, _ = load_corpus(rc, student.config.n_classes)
    if n > len(train_ex):
        raise DataError(f"sweep size {n} exceeds corpus size {len(train_ex)}")
    log = fit(student, teacher, rc, train_ex[:n], dev_ex, vocab, plan)
    return student, log


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


COMMANDS = {
    "train-base": cmd_train_base,
    "finetune-teacher": cmd_finetune_teacher,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "dump-attention": cmd_dump_attention,
    "compare-attention": cmd_compare_attention,
    "gen-synthetic": cmd_gen_synthetic,
    "sweep": cmd_sweep,
}


def make_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", metavar="PATH", help="JSON config of flat dotted keys")
    shared.add_argument("--set", metavar="K=V", action="append",
                        help="override one config key (repeatable)")
    shared.add_argument("--seed", type=int, metavar="N", help="sets the 'seed' key")
    shared.add_argument("--out", metavar="DIR", help="sets the 'out' key (output directory)")
    parser = argparse.ArgumentParser(prog="mdkd",
                                     description="Distill transformer encoders into "
                                                 "shallower students")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[shared])
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        _setup_logging()
        cfg = build_config(args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, DataError, OSError) as exc:
        logging.getLogger("mdkd").error("%s", exc)
        return 2
    except MdkdError as exc:
        logging.getLogger("mdkd").error("internal: %s", exc)
        return 1
    except Exception:  # noqa: BLE001 - last-resort boundary for exit-code contract
        logging.getLogger("mdkd").exception("unexpected failure")
        return 1


if __name__ == "__main__":
    sys.exit(main())
