"""Command-line entry point: gen-data, train, eval, bench, gradcheck.

Settings resolve as command-line flags, then the JSON ``--config`` file, then built-in
defaults. Every command writes ``config.resolved.json`` beside its outputs.

Exit codes: 0 success, 1 other failure, 2 missing input path, 3 invalid config,
4 non-finite loss.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import asdict, fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import checkpoint, gradcheck
from .bench import bench_inference
from .data import DatasetError, DatasetManifest, StratificationError, SynthSpec, load_directory, stratified_split, synth_generate, write_dataset
from .metrics import build_report, write_report
from .model import SurformerModel, TactileBranchConfig, VisionBranchConfig, count_parameters
from .tensor import ConfigError, NumericError
from .training import TrainConfig, fit, predict_prepared, prepare

EXIT_OK, EXIT_FAIL, EXIT_MISSING, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3, 4
RESOLVED = "config.resolved.json"

log = logging.getLogger("surfuse")


class MissingPathError(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# config schema

_SECTIONS = {
    "vision": VisionBranchConfig,
    "tactile": TactileBranchConfig,
    "train": TrainConfig,
}
_DATA_KEYS = {"root": str, "train_ratio": float}
_BENCH_KEYS = {"warmup": int, "iters": int, "scope": str, "n_samples": int}
_GEN_KEYS = {"classes": int, "per_class": int, "size": int, "noise_modality": (str, type(None))}
_TOP_KEYS = {"seed", "data", "bench", "gen", *_SECTIONS}
# chosen by the dataset or the top-level seed, never set per section
_DERIVED = {"vision": {"n_classes"}, "tactile": {"n_classes"}, "train": {"seed"}}


def _check_section(name: str, doc, allowed: dict[str, type]) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {unknown}")
    for key, value in doc.items():
        want = allowed[key]
        ok = isinstance(value, want) and not (isinstance(value, bool) and want in (int, float))
        if want is float and isinstance(value, int) and not isinstance(value, bool):
            ok = True
        if not ok:
            raise ConfigError(f"{name}.{key} has the wrong type: {value!r}")
    return dict(doc)


def _dataclass_schema(cls, section: str) -> dict[str, type]:
    kinds = {"int": int, "float": float, "bool": bool, "str": str, "tuple": list}
    out = {}
    for f in fields(cls):
        if f.name in _DERIVED.get(section, ()):
            continue
        tname = f.type if isinstance(f.type, str) else f.type.__name__
        out[f.name] = kinds.get(tname, object)
    return out


def load_config(path: str | None) -> dict:
    """Read and validate a JSON run config; unknown keys or wrong types raise ConfigError."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise MissingPathError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    unknown = sorted(set(doc) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {unknown}")
    if "seed" in doc and (not isinstance(doc["seed"], int) or isinstance(doc["seed"], bool)):
        raise ConfigError("seed must be an integer")
    for name, cls in _SECTIONS.items():
        if name in doc:
            _check_section(name, doc[name], _dataclass_schema(cls, name))
    for name, keys in (("data", _DATA_KEYS), ("bench", _BENCH_KEYS), ("gen", _GEN_KEYS)):
        if name in doc:
            _check_section(name, doc[name], keys)
    return doc


def _merge(defaults: dict, file_values: dict, flags: dict) -> dict:
    out = dict(defaults)
    out.update(file_values)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: dict) -> int:
    gen = _merge({"classes": 5, "per_class": 100, "size": 224, "noise_modality": None}, cfg.get("gen", {}),
                 {"classes": args.classes, "per_class": args.per_class, "size": args.size,
                  "noise_modality": args.noise_modality})
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    spec = SynthSpec(size=gen["size"], noise_modality=gen["noise_modality"])
    manifest = synth_generate(gen["classes"], gen["per_class"], seed, spec)
    out = Path(args.out)
    write_dataset(manifest, out)
    _write_json(out / RESOLVED, {"command": "gen-data", "seed": seed, "gen": gen})
    print(f"wrote {len(manifest)} pairs in {len(manifest.classes)} classes to {out}")
    return EXIT_OK


def _resolve_model_train(args, cfg: dict, n_classes: int) -> tuple[dict, VisionBranchConfig, TactileBranchConfig, TrainConfig]:
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    data = _merge({"root": None, "train_ratio": 0.8}, cfg.get("data", {}),
                  {"root": args.data, "train_ratio": args.train_ratio})
    vision_doc = _merge({}, cfg.get("vision", {}), {"input_size": args.input_size})
    vision = VisionBranchConfig(n_classes=n_classes, **vision_doc)
    tactile = TactileBranchConfig(n_classes=n_classes, **cfg.get("tactile", {}))
    train_doc = _merge({}, cfg.get("train", {}), {
        "max_epochs": args.epochs, "batch_size": args.batch_size,
        "lr_vision": args.lr_vision, "lr_tactile": args.lr_tactile, "lr_fusion": args.lr_fusion,
    })
    train = TrainConfig(seed=seed, **train_doc)
    return {"seed": seed, "data": data}, vision, tactile, train


def _load_data(root) -> DatasetManifest:
    if root is None:
        raise ConfigError("no dataset given (use --data or data.root)")
    if not Path(root).is_dir():
        raise MissingPathError(f"dataset directory not found: {root}")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        manifest = load_directory(root)
    for w in caught:
        log.warning("%s", w.message)
    return manifest


def cmd_train(args, cfg: dict) -> int:
    data_root = args.data if args.data is not None else cfg.get("data", {}).get("root")
    manifest = _load_data(data_root)
    top, vision, tactile, train_cfg = _resolve_model_train(args, cfg, len(manifest.classes))
    train_set, _ = stratified_split(manifest, top["data"]["train_ratio"], seed=top["seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {
        "command": "train",
        **top,
        "classes": manifest.classes,
        "vision": asdict(vision),
        "tactile": asdict(tactile),
        "train": asdict(train_cfg),
    }
    resolved["vision"]["backbone_channels"] = list(vision.backbone_channels)
    resolved["train"]["betas"] = list(train_cfg.betas)
    _write_json(out / RESOLVED, resolved)
    model = SurformerModel(vision, tactile, seed=top["seed"])
    model, trainlog = fit(model, train_set, train_cfg)
    checkpoint.save(model, out / "best.ckpt")
    (out / "trainlog.csv").write_text(trainlog.to_csv())
    (out / "trainlog.json").write_text(trainlog.to_json())
    print(f"best epoch {trainlog.best_epoch}, val accuracy {trainlog.best_val_acc:.4f}; wrote {out / 'best.ckpt'}")
    return EXIT_OK


def _ckpt_context(args, cfg: dict) -> tuple[Path, dict]:
    """Locate the checkpoint and the resolved train config beside it (used to replay the split)."""
    ckpt = Path(args.ckpt)
    if not ckpt.is_file():
        raise MissingPathError(f"checkpoint not found: {ckpt}")
    beside = ckpt.parent / RESOLVED
    train_doc = json.loads(beside.read_text()) if beside.is_file() else {}
    seed = args.seed if args.seed is not None else cfg.get("seed", train_doc.get("seed", 0))
    data = _merge({"root": None, "train_ratio": 0.8}, train_doc.get("data", {}), cfg.get("data", {}))
    data = _merge(data, {}, {"root": args.data, "train_ratio": getattr(args, "train_ratio", None)})
    return ckpt, {"seed": seed, "data": data}


def _select(manifest, top: dict, subset: str):
    if subset == "all":
        return manifest
    train, test = stratified_split(manifest, top["data"]["train_ratio"], seed=top["seed"])
    return test if subset == "test" else train


def cmd_eval(args, cfg: dict) -> int:
    ckpt, top = _ckpt_context(args, cfg)
    manifest = _load_data(top["data"]["root"])
    model = checkpoint.load(ckpt)
    if model.normalizer is None:
        raise ConfigError("checkpoint has no fitted feature normalizer")
    if len(manifest.classes) != model.n_classes:
        raise ConfigError(f"dataset has {len(manifest.classes)} classes, checkpoint expects {model.n_classes}")
    subset = _select(manifest, top, args.subset)
    out = Path(args.out) if args.out else ckpt.parent / "eval"
    preds = predict_prepared(model, prepare(subset, model.vision_cfg.input_size))
    report = build_report(
        manifest.classes,
        subset.labels,
        preds["probabilities"],
        {"vision": preds["vision"], "tactile": preds["tactile"], "fused": preds["fused"]},
        fusion_alpha=model.fusion.alpha_values(),
        parameters=count_parameters(model),
    )
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out)
    _write_json(out / RESOLVED, {"command": "eval", "ckpt": str(ckpt), "subset": args.subset, **top})
    print(f"accuracy {report.confusion.accuracy:.4f} macro F1 {report.scores.macro_f1:.4f} "
          f"macro AUC {report.macro_auc:.4f}; wrote {out / 'eval.json'}")
    return EXIT_OK


def cmd_bench(args, cfg: dict) -> int:
    ckpt, top = _ckpt_context(args, cfg)
    bench = _merge({"warmup": 20, "iters": 200, "scope": "both", "n_samples": 16}, cfg.get("bench", {}),
                   {"warmup": args.warmup, "iters": args.iters, "scope": args.scope, "n_samples": args.n_samples})
    if bench["scope"] not in ("full", "model", "both"):
        raise ConfigError(f"bench scope must be full, model or both, got {bench['scope']!r}")
    if bench["iters"] < 10:
        raise ConfigError(f"iters must be >= 10, got {bench['iters']}")
    manifest = _load_data(top["data"]["root"])
    model = checkpoint.load(ckpt)
    samples = _select(manifest, top, "test").samples[: max(1, bench["n_samples"])]
    scopes = ("full", "model") if bench["scope"] == "both" else (bench["scope"],)
    reports = {s: bench_inference(model, samples, bench["warmup"], bench["iters"], s).to_dict() for s in scopes}
    out = Path(args.out) if args.out else ckpt.parent / "bench"
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "bench.json", {"scopes": reports, "parameters": count_parameters(model)})
    _write_json(out / RESOLVED, {"command": "bench", "ckpt": str(ckpt), "bench": bench, **top})
    for s, r in reports.items():
        print(f"{s}: median ms vision {r['vision']['median']:.3f} tactile {r['tactile']['median']:.3f} "
              f"fused {r['fused']['median']:.3f}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: dict) -> int:
    results = gradcheck.run_all(trials=args.trials, seed=args.seed or 0)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:28s} max rel err {r.max_rel_error:.3e} (tol {r.tolerance:.0e}) {status}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / RESOLVED, {"command": "gradcheck", "trials": args.trials, "seed": args.seed or 0})
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="surfuse", description="Two-branch vision/tactile surface classifier.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int)
        if data:
            p.add_argument("--data", help="dataset root (<class>/{vision,tactile}/<id>.png)")

    g = sub.add_parser("gen-data", help="write a synthetic paired dataset")
    common(g, data=False)
    g.add_argument("--classes", type=int)
    g.add_argument("--per-class", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--noise-modality", choices=("vision", "tactile"))
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="fit a model and write best.ckpt plus the training log")
    common(t)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr-vision", type=float)
    t.add_argument("--lr-tactile", type=float)
    t.add_argument("--lr-fusion", type=float)
    t.add_argument("--train-ratio", type=float)
    t.add_argument("--input-size", type=int)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--out", help="output directory (default: <ckpt dir>/eval)")
    e.add_argument("--subset", choices=("test", "train", "all"), default="test")

    b = sub.add_parser("bench", help="batch-1 latency of each inference path")
    common(b)
    b.add_argument("--ckpt", required=True)
    b.add_argument("--out", help="output directory (default: <ckpt dir>/bench)")
    b.add_argument("--warmup", type=int)
    b.add_argument("--iters", type=int)
    b.add_argument("--scope", choices=("full", "model", "both"))
    b.add_argument("--n-samples", type=int)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--trials", type=int, default=10)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
}


def _dispatch(args) -> int:
    cfg = load_config(getattr(args, "config", None))
    return COMMANDS[args.command](args, cfg)


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    threads = os.environ.get("SURFUSE_THREADS")
    try:
        limit = int(threads) if threads else None
        if limit is not None and limit < 1:
            raise ValueError
    except ValueError:
        print(f"error: SURFUSE_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(limits=limit):
            return _dispatch(args)
    except (MissingPathError, FileNotFoundError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, StratificationError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except checkpoint.IntegrityError as exc:
        print(f"error: corrupt checkpoint: {exc}", file=sys.stderr)
        return EXIT_FAIL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
