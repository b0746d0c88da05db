"""Command-line entry point.

    randsac pretrain   --config exp.cfg --set train.epochs=10
    randsac probe      --config exp.cfg
    randsac finetune   --config exp.cfg
    randsac ablate     --config exp.cfg --axis partition.order=raster,random --axis train.seed=0,1
    randsac dump-segments / dump-masks --set partition.kind=blob --seed 3
    randsac grad-check

Outputs land in ``<out.dir>/<pretrain hash>/``, the config hash without the
evaluation-only keys. Exit codes: 0 ok, 1 failed check, 2 configuration,
3 data, 4 divergence.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ExperimentConfig, parse_assignment
from .data import DatasetHandle, load_cifar, load_image_dir
from .errors import ConfigurationError, DataFormatError, DivergenceError
from .evaluator import REPORT_FIELDS, EvalReport, append_results, finetune, linear_probe
from .layout import sample_layout
from .masks import build_decoder_self_mask, build_memory_mask, build_source_mask, dump_mask
from .model import RandSAC
from .segmenter import dump_segment_map
from .serializer import dump_order
from .trainer import pretrain

log = logging.getLogger("randsac")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4
ABLATE_FIELDS = ("cell",) + REPORT_FIELDS + ("finetune_top1",)


def load_split(cfg: ExperimentConfig, split: str) -> DatasetHandle:
    variant = cfg["data.variant"]
    if variant == "imagedir":
        path = cfg["data.path"] if split == "train" else (cfg["data.test_path"] or cfg["data.path"])
        ds = load_image_dir(path)
    else:
        ds = load_cifar(cfg["data.path"], variant, split)
    limit = cfg["data.train_subset"] if split == "train" else cfg["data.test_subset"]
    return ds.subset(limit) if limit else ds


def _model_for(cfg: ExperimentConfig, ds: DatasetHandle) -> RandSAC:
    h, w, c = ds.dims
    return RandSAC(cfg.model_config((h, w), c), seed=cfg["train.seed"])


@contextlib.contextmanager
def _threads(deterministic: bool):
    if not deterministic:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        yield


def run_pretrain(cfg: ExperimentConfig) -> Path:
    out = cfg.output_dir()
    train = load_split(cfg, "train")
    model = _model_for(cfg, train)
    log.info("pretraining %s on %d images -> %s", cfg.partition_label(), len(train), out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(
        "\n".join(f"{k} = {','.join(map(str, v)) if isinstance(v, tuple) else v}"
                  for k, v in sorted(cfg.values.items())) + "\n")
    with _threads(cfg["train.deterministic"]):
        pretrain(cfg.train_config(), train, model, cfg.partition_spec(), out, log=log.info)
    return out / "checkpoints" / "final.ckpt"


def _load_checkpoint(cfg: ExperimentConfig, path: str | None):
    ckpt = Path(path) if path else cfg.output_dir() / "checkpoints" / "final.ckpt"
    if not ckpt.is_file():
        raise ConfigurationError(f"checkpoint {ckpt} not found; run pretrain first or pass --checkpoint")
    model, meta, _ = checkpoint.load(ckpt)
    return model, meta, ckpt


def _annotate(report: EvalReport, cfg: ExperimentConfig, meta: dict, ckpt: Path) -> EvalReport:
    report.config_hash = cfg.hash
    report.checkpoint_id = f"{ckpt.parent.parent.name}/{ckpt.name}"
    report.extra["pretrain_hash"] = cfg.pretrain_hash
    report.partition = cfg.partition_label()
    report.requested_K = cfg.partition_spec().requested_K
    report.realized_K = meta.get("mean_realized_K")
    report.seed = cfg["train.seed"]
    return report


def run_probe(cfg: ExperimentConfig, ckpt_path: str | None = None, untrained: bool = False) -> EvalReport:
    """Probe a pretrained checkpoint, or a freshly initialized encoder as the baseline."""
    if not untrained:
        model, meta, ckpt = _load_checkpoint(cfg, ckpt_path)
    train, test = load_split(cfg, "train"), load_split(cfg, "test")
    if untrained:
        model, meta, ckpt = _model_for(cfg, train), {}, Path("init")
    with _threads(cfg["train.deterministic"]):
        report = linear_probe(model, train, test, cfg["eval.probe_epochs"], cfg["eval.probe_lr"],
                              cfg["eval.probe_batch"], seed=cfg["train.seed"])
    report.note = "probe optimizer: AdamW wd=0" + ("; untrained encoder" if untrained else "")
    report = _annotate(report, cfg, meta, ckpt)
    if untrained:
        report.checkpoint_id = "untrained/init"
    return report


def run_finetune(cfg: ExperimentConfig, ckpt_path: str | None = None) -> EvalReport:
    model, meta, ckpt = _load_checkpoint(cfg, ckpt_path)
    train, test = load_split(cfg, "train"), load_split(cfg, "test")
    with _threads(cfg["train.deterministic"]):
        report = finetune(model, train, test, cfg["eval.finetune_epochs"], cfg["eval.finetune_lr"],
                          cfg["eval.finetune_batch"], layer_decay=cfg["eval.layer_decay"],
                          warmup_epochs=cfg["eval.finetune_warmup"], seed=cfg["train.seed"])
    report.note = "augmentation: crop+flip only"
    return _annotate(report, cfg, meta, ckpt)


def _parse_axes(axes: list[str], variants: list[str]) -> list[tuple[str, dict]]:
    """Cartesian product as (cell name, overrides); axes vary slowest, variants fastest.

    Values of an axis are comma separated, or ``|`` separated when a value
    itself holds commas (``partition.levels=11,5|7,3``).
    """
    dims: list[list[tuple[str, dict]]] = []
    for axis in axes:
        key, _, values = axis.partition("=")
        key = key.strip()
        if not values:
            raise ConfigurationError(f"--axis needs key=v1,v2, got {axis!r}")
        dims.append([(f"{key}={v.strip()}", dict([parse_assignment(f"{key}={v}")]))
                     for v in values.split("|" if "|" in values else ",")])
    if variants:
        dim = []
        for spec in variants:
            name, _, body = spec.partition(":")
            if not body:
                raise ConfigurationError(f"--variant needs NAME:key=value;key=value, got {spec!r}")
            dim.append((name, dict(parse_assignment(a) for a in body.split(";") if a.strip())))
        dims.append(dim)
    cells = []
    for combo in itertools.product(*dims):
        name = " ".join(n for n, _ in combo)
        overrides = {}
        for _, o in combo:
            overrides.update(o)
        cells.append((name, overrides))
    return cells


def _done_hashes(results: Path) -> set[str]:
    if not results.exists():
        return set()
    with open(results, newline="") as fh:
        return {row["config_hash"] for row in csv.DictReader(fh)}


def sweep_dir(cfg: ExperimentConfig, cells: list[tuple[str, dict]]) -> Path:
    """``out/sweep-<hash>``, the hash covering the base config and every cell."""
    cell_text = json.dumps([[name, {k: list(v) if isinstance(v, tuple) else v for k, v in o.items()}]
                            for name, o in cells], sort_keys=True)
    digest = hashlib.sha256((cfg.canonical() + cell_text).encode()).hexdigest()[:12]
    return Path(cfg["out.dir"]) / f"sweep-{digest}"


def run_ablate(cfg: ExperimentConfig, axes: list[str], variants: list[str]) -> Path:
    cells = _parse_axes(axes, variants)
    if not cells:
        raise ConfigurationError("ablate needs at least one --axis or --variant")
    results = sweep_dir(cfg, cells) / "results.csv"
    done = _done_hashes(results)
    for name, overrides in cells:
        cell = cfg.with_overrides(overrides)
        if cell.hash in done:
            log.info("cell %s (%s) already in %s; skipping", name, cell.hash, results)
            continue
        ckpt = cell.output_dir() / "checkpoints" / "final.ckpt"
        if not ckpt.is_file():
            run_pretrain(cell)
        lin = run_probe(cell)
        row = lin.row()
        row["cell"] = name
        row["finetune_top1"] = ""
        if cell["eval.finetune_epochs"] > 0:
            row["finetune_top1"] = f"{run_finetune(cell).top1:.6f}"
        append_results(results, row, ABLATE_FIELDS)
        log.info("cell %s: linear %.4f", name, lin.top1)
    return results


def _dump_layout(cfg: ExperimentConfig, seed: int):
    mc = cfg.model_config()
    gh, gw = mc.grid
    rng = np.random.default_rng(seed)
    return sample_layout(rng, cfg.partition_spec(), gh, gw), (gh, gw)


def run_dump_segments(cfg: ExperimentConfig, seed: int) -> Path:
    (segments, order), (gh, gw) = _dump_layout(cfg, seed)
    out = cfg.output_dir() / "dumps"
    out.mkdir(parents=True, exist_ok=True)
    dump_segment_map(segments, gh, gw, out / f"segments_seed{seed}.ppm")
    dump_order(order, out / f"order_seed{seed}.txt")
    return out


def run_dump_masks(cfg: ExperimentConfig, seed: int) -> Path:
    (segments, order), _ = _dump_layout(cfg, seed)
    out = cfg.output_dir() / "dumps"
    out.mkdir(parents=True, exist_ok=True)
    dump_mask(build_source_mask(segments, order), out / f"source_seed{seed}.pbm")
    dump_mask(build_decoder_self_mask(segments, order), out / f"decoder_self_seed{seed}.pbm")
    dump_mask(build_memory_mask(segments, order), out / f"memory_seed{seed}.pbm")
    return out


def run_grad_check(seed: int = 0) -> float:
    from .gradcheck import full_model_check
    return full_model_check(seed)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="randsac", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    commands = ("pretrain", "probe", "finetune", "ablate", "dump-segments", "dump-masks", "grad-check")
    for name in commands:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a key")
        p.add_argument("--out", help="shorthand for --set out.dir=DIR")
        p.add_argument("--seed", type=int, default=0, help="layout seed for dumps / grad-check")
        if name in ("probe", "finetune"):
            p.add_argument("--checkpoint")
        if name == "probe":
            p.add_argument("--untrained", action="store_true", help="probe a randomly initialized encoder")
        if name == "ablate":
            p.add_argument("--axis", action="append", default=[], metavar="KEY=V1,V2")
            p.add_argument("--variant", action="append", default=[], metavar="NAME:K=V;K=V")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        overrides = list(args.set) + ([f"out.dir={args.out}"] if args.out else [])
        cfg = ExperimentConfig.build(args.config, overrides)
        if args.command == "pretrain":
            print(run_pretrain(cfg))
        elif args.command in ("probe", "finetune"):
            if args.command == "probe":
                report = run_probe(cfg, args.checkpoint, args.untrained)
            else:
                report = run_finetune(cfg, args.checkpoint)
            append_results(cfg.output_dir() / "results.csv", report.row())
            print(f"{report.mode} top1 {report.top1:.4f}")
        elif args.command == "ablate":
            print(run_ablate(cfg, args.axis, args.variant))
        elif args.command == "dump-segments":
            print(run_dump_segments(cfg, args.seed))
        elif args.command == "dump-masks":
            print(run_dump_masks(cfg, args.seed))
        elif args.command == "grad-check":
            err = run_grad_check(args.seed)
            print(f"max relative error {err:.3e}")
            return EXIT_OK if err < 1e-4 else EXIT_FAILED
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
