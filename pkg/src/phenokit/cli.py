"""Command-line entry point: ``phenokit <command> ...``.

Exit codes: 0 success, 1 bad input, 2 usage error, 3 internal invariant
violation.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from ._util import atomic_write_text
from .dataio import SyntheticSpec, gen_synthetic, load_dataset
from .errors import InputError, InvariantError, PhenokitError
from .evaluation import EMBEDDERS, EvalReport, evaluate, imad, read_annotations
from .model import PhenoNet, PhenoNetConfig
from .pipeline import embed_directory
from .profiles import (
    PcsConfig,
    correct,
    read_profiles,
    write_profiles_binary,
    write_profiles_csv,
)
from .report import emit_report_svg
from .train import TrainConfig, load_checkpoint, save_checkpoint, train

logger = logging.getLogger("phenokit")


# --------------------------------------------------------------------------
# configuration


def _strict(cls, data: dict, what: str):
    if not isinstance(data, dict):
        raise InputError(f"{what} must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise InputError(f"unknown {what} keys: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid {what}: {exc}") from exc


@dataclass(frozen=True)
class Paths:
    index: str | None = None
    annotations: str | None = None
    output_dir: str | None = None


@dataclass(frozen=True)
class Metrics:
    top_frac: float = 0.01
    recall_ks: tuple = (1, 3, 5, 10)

    def __post_init__(self):
        object.__setattr__(self, "recall_ks", tuple(int(k) for k in self.recall_ks))


@dataclass(frozen=True)
class Sphering:
    epsilon: float | None = None


@dataclass(frozen=True)
class RunConfig:
    """Everything one run needs. ``model`` holds PhenoNetConfig overrides."""

    train: TrainConfig = field(default_factory=TrainConfig)
    model: dict = field(default_factory=dict)
    pcs: PcsConfig = field(default_factory=PcsConfig)
    sphering: Sphering = field(default_factory=Sphering)
    paths: Paths = field(default_factory=Paths)
    metrics: Metrics = field(default_factory=Metrics)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        """Accepts either the sectioned layout or a bare TrainConfig object."""
        if not isinstance(data, dict):
            raise InputError("config must be a JSON object")
        sections = {f.name for f in dataclasses.fields(cls)}
        train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
        if data and set(data) <= train_keys:
            data = {"train": data}
        unknown = set(data) - sections
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        try:
            train_cfg = TrainConfig.from_dict(data.get("train", {}))
        except (TypeError, ValueError) as exc:
            raise InputError(f"invalid train config: {exc}") from exc
        model = data.get("model", {})
        _strict(PhenoNetConfig, model, "model")
        return cls(train_cfg, dict(model), _strict(PcsConfig, data.get("pcs", {}), "pcs"),
                   _strict(Sphering, data.get("sphering", {}), "sphering"),
                   _strict(Paths, data.get("paths", {}), "paths"),
                   _strict(Metrics, data.get("metrics", {}), "metrics"))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(_read_json(path))


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read JSON {path}: {exc}") from exc


def _write_profiles(table, path) -> None:
    if str(path).endswith(".ptns"):
        write_profiles_binary(table, path)
    else:
        write_profiles_csv(table, path)


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> None:
    spec = _strict(SyntheticSpec, _read_json(args.spec), "synthetic spec") if args.spec else SyntheticSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    ds = gen_synthetic(spec, args.out)
    print(f"wrote {spec.n_images} sites to {ds.root}")


def cmd_train(args) -> None:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    for flag in ("cls", "mse", "con", "diffconv"):
        if getattr(args, f"no_{flag}"):
            overrides[f"use_{flag}"] = False
    try:
        tcfg = dataclasses.replace(run.train, **overrides)
    except ValueError as exc:
        raise InputError(str(exc)) from exc

    model = dict(run.model)
    image_size = model.get("image_size", PhenoNetConfig.image_size)
    data = load_dataset(args.data, image_size, targets=args.targets)
    model.setdefault("num_classes", len(data.encoder))
    model.setdefault("out_dim", data.targets.shape[1])
    try:
        net = PhenoNet(PhenoNetConfig(**model))
    except ValueError as exc:
        raise InputError(f"invalid model config: {exc}") from exc
    net, log = train(net, data, tcfg, log_path=args.log)
    save_checkpoint(net, args.out, extra={"train": tcfg.to_dict(), "classes": list(data.encoder.classes),
                                          "dataset_digest": data.digest()})
    last = log[-1]
    print(f"trained {len(log)} epochs; final loss_total {last['loss_total']:.6g}; checkpoint {args.out}")


def cmd_embed(args) -> None:
    net, _ = load_checkpoint(args.ckpt)
    table = embed_directory(net, args.data, args.batch_size)
    _write_profiles(table, args.out)
    print(f"wrote {len(table)} site profiles to {args.out}")


def cmd_correct(args) -> None:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    alpha = run.pcs.alpha if args.alpha is None else args.alpha
    epsilon = run.sphering.epsilon if args.epsilon is None else args.epsilon
    site = read_profiles(args.input)
    res = correct(site, alpha, epsilon)
    _write_profiles(res.treatments, args.out)
    if args.wells_out:
        _write_profiles(res.wells, args.wells_out)
    print(f"wrote {len(res.treatments)} treatment profiles to {args.out}")


def cmd_evaluate(args) -> None:
    table = read_profiles(args.profiles)
    ann = read_annotations(args.annotations)
    wells = read_profiles(args.wells) if args.wells else None
    run = RunConfig.load(args.config) if args.config else RunConfig()
    top_frac = run.metrics.top_frac if args.top_frac is None else args.top_frac
    report = evaluate(table, ann, top_frac, run.metrics.recall_ks, wells=wells)
    atomic_write_text(args.out, report.to_json())
    print(f"FoE {report.foe:.3f}  MAP {report.map:.3f}  "
          + "  ".join(f"R@{k} {v:.3f}" for k, v in report.recall_at.items()))


def cmd_imad(args) -> None:
    wells = read_profiles(args.wells)
    if wells.level != "well":
        raise InputError(f"{args.wells}: expected a well-level table, got {wells.level}")
    value = imad(wells, args.embedder)
    atomic_write_text(args.out, f"{value!r}\n")
    print(f"IMAD {value:.6g}")


def cmd_report(args) -> None:
    report = EvalReport.load(args.report)
    atomic_write_text(args.out, emit_report_svg(report, args.title))
    print(f"wrote {args.out}")


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="phenokit", formatter_class=fmt,
                                     description="Train, embed, correct and evaluate phenotypic profiles.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", formatter_class=fmt, help="generate a synthetic screen")
    p.add_argument("--spec", help="JSON with SyntheticSpec fields (defaults if omitted)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, help="override the spec seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", formatter_class=fmt, help="warm-up then joint training")
    p.add_argument("--config", help="run config JSON (sectioned, or bare TrainConfig fields)")
    p.add_argument("--data", required=True, help="dataset directory holding index.csv")
    p.add_argument("--targets", help="regression target CSV; <data>/latents.csv when omitted")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="append per-epoch JSON lines here")
    p.add_argument("--seed", type=int, help="override the training seed")
    for flag, what in (("cls", "classification"), ("mse", "regression"), ("con", "contrastive")):
        p.add_argument(f"--no-{flag}", action="store_true", help=f"drop the {what} loss")
    p.add_argument("--no-diffconv", action="store_true", help="use plain convolutions (theta = 0)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", formatter_class=fmt, help="site-level profiles from a checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset directory holding index.csv")
    p.add_argument("--out", required=True, help="profile file (.csv, or .ptns for lossless)")
    p.add_argument("--batch-size", type=int, default=32, help="images per forward pass")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("correct", formatter_class=fmt,
                       help="plate correction, well means, sphering, treatment means")
    p.add_argument("--in", dest="input", required=True, help="site-level profile file")
    p.add_argument("--config", help="run config JSON supplying pcs.alpha and sphering.epsilon")
    p.add_argument("--alpha", type=float,
                   help=f"control-mean weight in [0, 1]; config value or {PcsConfig.alpha} when omitted")
    p.add_argument("--epsilon", type=float,
                   help="sphering regulariser; config value or 1e-3 x mean eigenvalue when omitted")
    p.add_argument("--out", required=True, help="treatment-level profile file")
    p.add_argument("--wells-out", help="also write corrected well-level profiles (before sphering)")
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("evaluate", formatter_class=fmt, help="FoE, MAP and recall@K report")
    p.add_argument("--profiles", required=True, help="treatment-level profile file")
    p.add_argument("--annotations", required=True, help="CSV treatment,annotation")
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--wells", help="well-level profile file; adds IMAD to the report")
    p.add_argument("--config", help="run config JSON supplying metrics.top_frac and metrics.recall_ks")
    p.add_argument("--top-frac", type=float,
                   help=f"enrichment cutoff fraction; config value or {Metrics.top_frac} when omitted")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("imad", formatter_class=fmt, help="inverse MAD of 2-D well distances")
    p.add_argument("--wells", required=True, help="well-level profile file")
    p.add_argument("--out", required=True, help="text file receiving the value")
    p.add_argument("--embedder", choices=sorted(EMBEDDERS), default="pca2", help="2-D embedding")
    p.set_defaults(func=cmd_imad)

    p = sub.add_parser("report", formatter_class=fmt, help="bar-chart SVG of a report")
    p.add_argument("--report", required=True, help="report JSON")
    p.add_argument("--out", required=True, help="SVG path")
    p.add_argument("--title", default="Retrieval metrics", help="chart title")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except InvariantError as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return exc.exit_code
    except PhenokitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
