"""Command-line entry point: synth, train, eval, export.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ConfigError, RunConfig, parse_override
from .data import DataError, carve_split, generate_synthetic_domain, load_domain, load_domain_splits, save_domain
from .evaluation import evaluate, export_embeddings, grad_cam
from .meta import NumericalAbort, train
from .network import load_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("mtfas")


def _domain_dirs(root: Path) -> list[str]:
    return sorted(p.name for p in root.iterdir() if (p / "manifest.json").is_file())


def _resolve_domains(cfg: RunConfig) -> tuple[list[str], str | None]:
    root = Path(cfg["data.root"])
    if not root.is_dir():
        raise DataError(f"data root {root} does not exist")
    available = _domain_dirs(root)
    test = cfg["data.test_domain"]
    train_names = cfg["data.train_domains"]
    if train_names is None:
        train_names = [d for d in available if d != test]
    missing = [d for d in [*train_names, *([test] if test else [])] if d not in available]
    if missing:
        raise DataError(f"domains not found under {root}: {', '.join(missing)}")
    if test in train_names:
        raise ConfigError([f"test domain {test!r} is also listed as a training domain"])
    return list(train_names), test


def cmd_synth(cfg: RunConfig, args) -> int:
    root = Path(cfg["data.root"])
    if root.exists() and any(root.iterdir()) and not args.force:
        raise ConfigError([f"output directory {root} is not empty (use --force to overwrite)"])
    root.mkdir(parents=True, exist_ok=True)
    synth = cfg.synth_config()
    for k in range(synth.n_domains):
        ds = generate_synthetic_domain(synth, k)
        train_part, dev_part = carve_split(ds, cfg["data.dev_fraction"], cfg["seed"])
        path = save_domain(root, [train_part, dev_part])
        splits = load_domain_splits(path)  # self-check: everything written must load back
        counts = {s: len(d) for s, d in sorted(splits.items())}
        print(f"{ds.name}: {counts} -> {path}")
    # only the keys that determine the data, so equal seeds give identical trees
    recipe = {k: v for k, v in sorted(cfg.items()) if k.startswith("synth.") or k in ("seed", "data.dev_fraction")}
    (root / "synth_config.json").write_text(json.dumps(recipe, indent=1))
    return EXIT_OK


def _load_train_domains(cfg: RunConfig, names: list[str]):
    root = Path(cfg["data.root"])
    return [load_domain(root / n, split="train", domain_id=i) for i, n in enumerate(names)]


def cmd_train(cfg: RunConfig, args) -> int:
    names, _ = _resolve_domains(cfg)
    if len(names) < 2:
        raise ConfigError([f"training needs at least two source domains, got {names}"])
    domains = _load_train_domains(cfg, names)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    result = train(
        domains,
        cfg.meta_config(),
        cfg.loss_weights(),
        cfg.net_config(),
        seed=cfg["seed"],
        out_dir=out,
        resume=args.resume,
    )
    print(f"trained on {names}; {len(result.records)} iterations; checkpoint {result.checkpoint}")
    return EXIT_OK


def _check_arch(cfg: RunConfig, model) -> None:
    wanted = cfg.net_config()
    if model.cfg != wanted:
        diff = [
            f"model.{k}: checkpoint {v!r} vs config {getattr(wanted, k)!r}"
            for k, v in asdict(model.cfg).items()
            if v != getattr(wanted, k)
        ]
        raise ConfigError(["architecture mismatch between checkpoint and config"] + diff)


def cmd_eval(cfg: RunConfig, args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    _check_arch(cfg, model)
    root = Path(cfg["data.root"])
    test = args.test_domain or cfg["data.test_domain"]
    if not test:
        raise ConfigError(["no test domain given (data.test_domain or --test-domain)"])
    dev_names = args.dev_domains or [n for n in (cfg["data.train_domains"] or _domain_dirs(root)) if n != test]
    dev = [load_domain(root / n, split="dev") for n in dev_names]
    report = evaluate(model, load_domain(root / test), dev)
    out = Path(args.out) if args.out else Path(cfg["output_dir"]) / f"eval_{test}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_json(out)
    print(f"{test}: AUC {report.auc:.4f} HTER {report.hter:.4f} (threshold {report.threshold:.4f}) -> {out}")
    return EXIT_OK


def cmd_export(cfg: RunConfig, args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    root = Path(cfg["data.root"])
    names = args.domains or _domain_dirs(root)
    out = Path(args.out) if args.out else Path(cfg["output_dir"]) / "export"
    out.mkdir(parents=True, exist_ok=True)
    splits = args.splits or ["all"]
    for split in splits:
        sel = None if split == "all" else split
        datasets = [load_domain(root / n, split=sel) for n in names]
        if args.kind == "embeddings":
            path = export_embeddings(model, datasets).write_csv(out / f"embeddings_{split}.csv")
            print(f"wrote {path}")
            continue
        for ds in datasets:
            ddir = out / "gradcam" / split / ds.name
            ddir.mkdir(parents=True, exist_ok=True)
            arr = ds.arrays(model.cfg.input_size)
            for sample, x in zip(ds.samples, arr.inputs):
                cam = grad_cam(model, x, args.target)
                Image.fromarray(np.round(cam * 255).astype(np.uint8), mode="L").save(ddir / f"{sample.sample_id}.png")
            print(f"wrote {len(ds)} saliency maps to {ddir}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "export": cmd_export}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtfas", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of dotted keys")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write synthetic domains")
    p.add_argument("--force", action="store_true", help="write into a non-empty data root")

    p = sub.add_parser("train", parents=[common], help="meta-train on the source domains")
    p.add_argument("--resume", help="checkpoint directory to continue from")

    p = sub.add_parser("eval", parents=[common], help="HTER/AUC on a held-out domain")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test-domain")
    p.add_argument("--dev-domains", nargs="+")
    p.add_argument("--out", help="report path (default <output_dir>/eval_<test>.json)")

    p = sub.add_parser("export", parents=[common], help="embedding CSVs or Grad-CAM maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kind", choices=("embeddings", "gradcam"), required=True)
    p.add_argument("--domains", nargs="+")
    p.add_argument("--splits", nargs="+", choices=("train", "dev", "test", "all"))
    p.add_argument("--target", choices=("live", "spoof"), default="live")
    p.add_argument("--out")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        overrides = dict(parse_override(s) for s in args.set)
        cfg = RunConfig.resolve(args.config, overrides)
        if args.print_config:
            print(cfg.to_json())
            return EXIT_OK
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        print(json.dumps({"total": exc.report.total, "mtrn": exc.report.mtrn.as_dict()}), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
