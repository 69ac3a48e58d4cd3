"""Command-line entry point: gen-synth, train, fuse, eval, gradcheck.

Configuration precedence is built-in defaults < ``--config`` JSON < flags.
Every subcommand writes ``<out-dir>/<subcommand>_manifest.json`` before it
starts working. Exit codes: 0 success, 1 usage, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from .baselines import NAIVE, FusionStrategy
from .checkpoint import CheckpointError, load_checkpoint
from .metrics import (
    GroundTruthInstance,
    instance_map,
    make_tertiles,
    semantic_metrics,
    top1_accuracy,
    top1_predictions,
    topk_predictions,
)
from .model import ModelConfig, fuse_many, scoring_scale_bias
from .numerics.gradcheck import ALL_OPS, END_TO_END, check_primitive
from .numerics.optim import LrSchedule
from .trainer import MODES, NumericalError, TrainConfig, ablation_mode, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
METRICS_SCHEMA_VERSION = 1

DEFAULTS = {
    "gen-synth": {
        "classes": 20, "per_class": 100, "views": 12, "dim": 256, "parts": 4,
        "noise_std": 0.3, "distractor_strength": 0.5, "test_fraction": 0.2,
    },
    "train": {
        "train_data": None, "vocab": None, "mode": "final", "epochs": 100, "batch_size": 512,
        "lr_max": 1e-4, "lr_min": 5e-7, "period": 7200, "cycle_decay": 0.5,
        "views_in": 5, "views_target": 5, "checkpoint_every": 0, "grad_clip": None,
        "weight_decay": 0.01, "model_dim": 1024, "blocks": 8, "heads": 8, "mlp_hidden": 4096,
    },
    "fuse": {"data": None, "fusion": "learned", "checkpoint": None, "views": 5},
    "eval": {"fused": None, "vocab": None, "gt": None, "task": "both", "topk": 600,
             "background": []},
    "gradcheck": {"op": None, "cases": 100, "tol": 1e-4, "sweep": 1},
}
SHARED = {"seed": 0, "out_dir": ".", "quiet": False}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    shared = _Parser(add_help=False, argument_default=S)
    shared.add_argument("--seed", type=int)
    shared.add_argument("--config", type=Path, help="JSON file of option overrides")
    shared.add_argument("--out-dir", type=Path)
    shared.add_argument("--quiet", action="store_true")

    parser = _Parser(prog="camfusion", description="Multiview descriptor fusion toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", parents=[shared], argument_default=S,
                       help="write a synthetic complementary-views dataset")
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--parts", type=int)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--distractor-strength", type=float)
    p.add_argument("--test-fraction", type=float)

    p = sub.add_parser("train", parents=[shared], argument_default=S, help="train the fusion model")
    p.add_argument("--train-data", type=Path)
    p.add_argument("--vocab", type=Path)
    p.add_argument("--mode", choices=sorted(MODES))
    for flag, typ in (("--epochs", int), ("--batch-size", int), ("--lr-max", float),
                      ("--lr-min", float), ("--period", int), ("--cycle-decay", float),
                      ("--views-in", int), ("--views-target", int), ("--checkpoint-every", int),
                      ("--grad-clip", float), ("--weight-decay", float), ("--model-dim", int),
                      ("--blocks", int), ("--heads", int), ("--mlp-hidden", int)):
        p.add_argument(flag, type=typ)

    p = sub.add_parser("fuse", parents=[shared], argument_default=S,
                       help="fuse each instance's best views into one descriptor")
    p.add_argument("--data", type=Path)
    p.add_argument("--fusion", choices=[s.value for s in FusionStrategy])
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--views", type=int)

    p = sub.add_parser("eval", parents=[shared], argument_default=S,
                       help="semantic and instance metrics for fused descriptors")
    p.add_argument("--fused", type=Path)
    p.add_argument("--vocab", type=Path)
    p.add_argument("--gt", type=Path, help="dataset NDJSON holding ground-truth classes")
    p.add_argument("--task", choices=["semantic", "instance", "both"])
    p.add_argument("--topk", type=int)
    p.add_argument("--background", type=int, nargs="*",
                   help="class ids left out of instance metrics")

    p = sub.add_parser("gradcheck", parents=[shared], argument_default=S,
                       help="finite-difference gradient verification")
    p.add_argument("--op", choices=list(ALL_OPS))
    p.add_argument("--cases", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--sweep", type=int, help="number of consecutive seeds to run")
    return parser


def resolve(command: str, flags: dict) -> dict:
    """Merge defaults, the optional JSON config file and explicit flags."""
    cfg = {**SHARED, **DEFAULTS[command]}
    path = flags.pop("config", None)
    if path is not None:
        try:
            overrides = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(overrides, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        unknown = sorted(set(overrides) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {unknown}")
        cfg.update(overrides)
    cfg.update(flags)
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in cfg.items()}


def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(command: str, cfg: dict, inputs: list, artifacts: list) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": command,
        "config": cfg,
        "seed": cfg["seed"],
        "inputs": {str(p): sha256_of(p) for p in inputs if p is not None},
        "artifacts": [str(a) for a in artifacts],
        "tool_version": __version__,
    }
    path = out / f"{command}_manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _require(cfg: dict, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join(
            "--" + k.replace("_", "-") for k in missing))


def _say(cfg, msg):
    if not cfg["quiet"]:
        print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synth(cfg: dict) -> int:
    out = Path(cfg["out_dir"])
    files = {k: out / f"{k}.ndjson" for k in ("dataset", "train", "test", "vocab")}
    write_manifest("gen-synth", cfg, [], files.values())
    synth = D.gen_synthetic(D.SynthConfig(
        num_classes=cfg["classes"], instances_per_class=cfg["per_class"],
        views_per_instance=cfg["views"], D=cfg["dim"], parts_per_class=cfg["parts"],
        noise_std=cfg["noise_std"], distractor_strength=cfg["distractor_strength"],
        seed=cfg["seed"]))
    train_set, test_set = D.split_instances(synth.instances, cfg["test_fraction"], cfg["seed"])
    D.save_dataset(files["dataset"], synth.instances, synth.D)
    D.save_dataset(files["train"], train_set, synth.D)
    D.save_dataset(files["test"], test_set, synth.D)
    D.save_vocabulary(files["vocab"], D.with_frequencies(synth.vocab, train_set))
    _say(cfg, f"wrote {len(synth.instances)} instances ({len(train_set)} train, "
              f"{len(test_set)} test) to {out}")
    return EXIT_OK


def train_config_from(cfg: dict, D_dim: int) -> TrainConfig:
    model = ModelConfig(descriptor_dim=D_dim, model_dim=cfg["model_dim"], num_blocks=cfg["blocks"],
                        num_heads=cfg["heads"], mlp_hidden=cfg["mlp_hidden"])
    base = TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"],
        schedule=LrSchedule(cfg["lr_max"], cfg["lr_min"], cfg["period"], cfg["cycle_decay"]),
        views_in=cfg["views_in"], views_target=cfg["views_target"], seed=cfg["seed"],
        checkpoint_every=cfg["checkpoint_every"], grad_clip=cfg["grad_clip"],
        weight_decay=cfg["weight_decay"], model=model)
    return ablation_mode(cfg["mode"], base)


def cmd_train(cfg: dict) -> int:
    _require(cfg, "train_data", "vocab")
    out = Path(cfg["out_dir"])
    log_path = out / "train_log.ndjson"
    final = out / "checkpoints" / "final.json"
    write_manifest("train", cfg, [cfg["train_data"], cfg["vocab"]], [final, log_path])
    instances, vocab = D.load_dataset(cfg["train_data"], cfg["vocab"])
    tcfg = train_config_from(cfg, vocab.embeddings().shape[1])

    def progress(epoch, log):
        recent = [r.L_total for r in log if r.epoch == epoch]
        _say(cfg, f"epoch {epoch + 1}/{tcfg.epochs}  L_total {np.mean(recent):.4f}  lr {log[-1].lr:.3g}")

    result = train(instances, vocab, tcfg, out_dir=out / "checkpoints", log_path=log_path,
                   progress=progress)
    means = result.epoch_means()
    print(json.dumps({"mode": tcfg.mode, "steps": len(result.log), "first_epoch_L": means[0],
                      "final_epoch_L": means[-1], "checkpoint": str(final)}, sort_keys=True))
    return EXIT_OK


FUSED_HEADER_KEYS = ("schema_version", "D", "fusion", "views", "scale", "bias")


def cmd_fuse(cfg: dict) -> int:
    _require(cfg, "data")
    strategy = FusionStrategy(cfg["fusion"])
    if strategy is FusionStrategy.LEARNED and not cfg.get("checkpoint"):
        raise UsageError("--fusion learned needs --checkpoint")
    out = Path(cfg["out_dir"]) / "fused.ndjson"
    inputs = [cfg["data"]]
    if strategy is FusionStrategy.LEARNED:
        inputs += [cfg["checkpoint"], Path(cfg["checkpoint"]).with_suffix(".bin")]
    write_manifest("fuse", cfg, inputs, [out])
    instances, D_dim = D.load_instances(cfg["data"])
    view_sets = [np.stack([v.descriptor for v in D.select_eval_views(inst, cfg["views"])])
                 for inst in instances]
    scale = bias = None
    if strategy is FusionStrategy.LEARNED:
        params, mcfg, _ = load_checkpoint(cfg["checkpoint"])
        if mcfg.descriptor_dim != D_dim:
            raise D.DataError(f"checkpoint descriptor_dim {mcfg.descriptor_dim} != dataset D={D_dim}")
        fused = fuse_many(view_sets, params, mcfg)
        scale, bias = scoring_scale_bias(params)
    else:
        fn = NAIVE[strategy]
        fused = np.stack([fn(v) for v in view_sets])
    header = dict(zip(FUSED_HEADER_KEYS, (D.SCHEMA_VERSION, D_dim, strategy.value, cfg["views"],
                                          scale, bias)))
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for inst, f in zip(instances, fused):
            fh.write(json.dumps({"instance_id": inst.instance_id, "descriptor": D._vec(f)},
                                separators=(",", ":")) + "\n")
    _say(cfg, f"fused {len(instances)} instances with {strategy.value} -> {out}")
    return EXIT_OK


def load_fused(path) -> tuple:
    """``(header, {instance_id: descriptor})``."""
    header, rows = None, {}
    for lineno, obj in D._read_ndjson(path):
        if header is None:
            if set(FUSED_HEADER_KEYS) - set(obj):
                raise D.DataError(f"{path}:{lineno}: fused header lacks {sorted(set(FUSED_HEADER_KEYS) - set(obj))}")
            header = obj
            continue
        try:
            rows[int(obj["instance_id"])] = np.asarray(obj["descriptor"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise D.DataError(f"{path}:{lineno}: bad fused row ({exc})") from None
    if header is None:
        raise D.DataError(f"{path}: empty file")
    return header, rows


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, float):
        return None if not math.isfinite(x) else round(x, 12)
    return x


def evaluate(header: dict, fused: dict, instances, vocab: D.ClassVocabulary, task: str,
             topk: int, background=()) -> dict:
    """The metrics document for one fused file. Ground-truth masks are contiguous point blocks."""
    missing = [i.instance_id for i in instances if i.instance_id not in fused]
    if missing:
        raise D.DataError(f"fused file lacks instances {missing[:5]}")
    for inst in instances:
        vocab.index_of(inst.class_id)  # raises on an unknown class
    learned = header["scale"] is not None
    t = header["scale"] if learned else None
    b = header["bias"] if learned else 0.0
    Y = vocab.embeddings()
    ids = vocab.class_ids
    F = np.stack([fused[i.instance_id] for i in instances])
    starts = np.concatenate([[0], np.cumsum([i.point_count for i in instances])])
    points = [np.arange(starts[k], starts[k + 1]) for k in range(len(instances))]
    top1 = top1_predictions(instances, F, Y, ids, t, b, points)
    doc = {
        "schema_version": METRICS_SCHEMA_VERSION,
        "fusion": header["fusion"],
        "confidence": "sigmoid(t*s+b)" if learned else "cosine",
        "num_instances": len(instances),
        "top1_accuracy": top1_accuracy([p.class_id for p in top1], [i.class_id for i in instances]),
    }
    if task in ("semantic", "both"):
        gt_labels = np.repeat([i.class_id for i in instances], [i.point_count for i in instances])
        pred_labels = np.repeat([p.class_id for p in top1], [i.point_count for i in instances])
        sem = semantic_metrics(gt_labels, pred_labels, ids)
        doc["semantic"] = {k: sem[k] for k in ("mIoU", "mAcc", "f-IoU", "f-Acc")}
    if task in ("instance", "both"):
        bg = set(background)
        keep = [c for c in ids.tolist() if c not in bg]
        gts = [GroundTruthInstance(i.instance_id, i.class_id, points[k])
               for k, i in enumerate(instances) if i.class_id not in bg]
        freqs = {c: f for c, f in vocab.frequencies().items() if c not in bg}
        split = make_tertiles(freqs) if len(freqs) >= 3 else None
        topk_preds = topk_predictions(instances, F, Y, ids, t, b, topk, points)
        doc["instance"] = {}
        for regime, preds in (("top1", top1), ("topk", topk_preds)):
            preds = [p for p in preds if p.class_id not in bg]
            doc["instance"][regime] = instance_map(preds, gts, split=split, class_ids=keep)
    return _clean(doc)


METRIC_ROWS = ("top1_accuracy", "semantic.mIoU", "semantic.mAcc", "semantic.f-IoU",
               "semantic.f-Acc", "instance.top1.mAP", "instance.top1.mAP50",
               "instance.top1.mAP25", "instance.top1.mAP_h", "instance.top1.mAP_c",
               "instance.top1.mAP_t", "instance.topk.mAP", "instance.topk.mAP50",
               "instance.topk.mAP25", "instance.topk.mAP_h", "instance.topk.mAP_c",
               "instance.topk.mAP_t")


def format_table(doc: dict) -> str:
    lines = []
    for row in METRIC_ROWS:
        node = doc
        for part in row.split("."):
            node = node.get(part) if isinstance(node, dict) else None
        if node is not None or row.split(".")[0] in doc:
            lines.append(f"{row:<24}{'n/a' if node is None else f'{node:.4f}':>10}")
    return "\n".join(lines)


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "fused", "vocab", "gt")
    out = Path(cfg["out_dir"]) / "metrics.json"
    write_manifest("eval", cfg, [cfg["fused"], cfg["vocab"], cfg["gt"]], [out])
    header, fused = load_fused(cfg["fused"])
    instances, vocab = D.load_dataset(cfg["gt"], cfg["vocab"])
    doc = evaluate(header, fused, instances, vocab, cfg["task"], cfg["topk"], cfg["background"])
    out.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(format_table(doc))
    return EXIT_OK


def cmd_gradcheck(cfg: dict) -> int:
    ops = [cfg["op"]] if cfg["op"] else list(ALL_OPS)
    out = Path(cfg["out_dir"]) / "gradcheck.json"
    write_manifest("gradcheck", cfg, [], [out])
    reports = []
    ok = True
    for k in range(cfg["sweep"]):
        seed = cfg["seed"] + k
        results = []
        for op in ops:
            # the micro-model check costs ~1 s per case; keep it short unless asked
            cases = cfg["cases"] if op != END_TO_END or cfg["op"] else min(cfg["cases"], 3)
            r = check_primitive(op, cases, seed, cfg["tol"])
            ok &= r.passed
            results.append({"op": op, "cases": cases, "worst_rel_err": r.worst_rel_err,
                            "passed": r.passed})
            print(f"seed {seed}  {op:<22}{r.worst_rel_err:>12.3e}  {'PASS' if r.passed else 'FAIL'}")
        reports.append({"seed": seed, "tol": cfg["tol"], "results": results})
    out.write_text(json.dumps(reports, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {"gen-synth": cmd_gen_synth, "train": cmd_train, "fuse": cmd_fuse,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = _build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    try:
        cfg = resolve(command, args)
        return COMMANDS[command](cfg)
    except UsageError as exc:
        print(f"camfusion {command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"camfusion {command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"camfusion {command}: invalid value: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"camfusion {command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
