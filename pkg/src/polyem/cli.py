"""Command-line entry point: ``polyem {synth,weaken,em,eval,budget}``.

Every run is driven by a YAML key-value config (or flags for the small
commands), every output file carries a hash of the resolved config, and
existing outputs are only replaced with ``--force``.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import budget as bp
from .detector import Candidate, DetectorConfig, DetectorState, LossConfig
from .em_engine import EmConfig, reports_to_csv, reports_to_json, run_em
from .evaluation import detect_all, score_detections
from .geometry import Polygon, bbox_of_polygon
from .scene_synth import (
    SynthParams,
    load_dataset,
    save_dataset,
    split_dataset,
    synth_dataset,
)
from .weak_labels import AnnotationCost, WeakKind, make_weak_label


class CliError(Exception):
    """A user-facing failure; reported as JSON on stderr with exit code 2."""


# -- helpers ----------------------------------------------------------------------


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {p}")
    doc = yaml.safe_load(p.read_text()) or {}
    if not isinstance(doc, dict):
        raise CliError(f"config {p} must be a key-value mapping")
    return doc


def _resolve(path, base: Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else base / p


def _claim(paths, force: bool) -> None:
    taken = [str(p) for p in paths if Path(p).exists()]
    if taken and not force:
        raise CliError(f"refusing to overwrite {', '.join(taken)} (pass --force)")
    for p in paths:
        parent = Path(p).parent
        if parent.exists() and not parent.is_dir():
            raise CliError(f"output directory {parent} is not a directory")
        parent.mkdir(parents=True, exist_ok=True)


def _write(path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as e:
        raise CliError(f"cannot write {path}: {e.strerror}") from None


def _dump_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _build(cls, section: dict | None, name: str, **fixed):
    known = {f.name for f in dataclasses.fields(cls)}
    section = dict(section or {})
    unknown = sorted(set(section) - known)
    if unknown:
        raise CliError(f"unknown {name} keys: {', '.join(unknown)}")
    for key in ("n_instances", "size", "thickness", "curvature", "contrast", "n_distractors",
                "distractor_ink", "distractor_radius", "lr_schedule", "profile", "init_depths", "lr_scale"):
        if key in section and isinstance(section[key], list):
            section[key] = tuple(tuple(v) if isinstance(v, list) else v for v in section[key])
    try:
        return cls(**section, **fixed)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid {name} config: {e}") from None


def _load_dataset(path):
    p = Path(path)
    if not p.is_file():
        raise CliError(f"dataset not found: {p}")
    try:
        return load_dataset(p)
    except (KeyError, ValueError, json.JSONDecodeError) as e:
        raise CliError(f"malformed dataset {p}: {e}") from None


def _sub_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


# -- subcommands --------------------------------------------------------------------


def cmd_synth(args) -> dict:
    """Generate ``n`` synthetic scenes and write them as a dataset file."""
    cfg = load_config(args.config)
    unknown = sorted(set(cfg) - {"n", "rng_seed", "output", "params"})
    if unknown:
        raise CliError(f"unknown synth keys: {', '.join(unknown)}")
    n = int(cfg.get("n", 100))
    if n < 0:
        raise CliError("n must be >= 0")
    params = _build(SynthParams, cfg.get("params"), "params")
    out = Path(args.output or cfg.get("output", "dataset.json"))
    resolved = {"n": n, "rng_seed": int(cfg.get("rng_seed", 0)), "params": dataclasses.asdict(params)}
    h = config_hash(resolved)
    _claim([out], args.force)
    records = synth_dataset(n, resolved["rng_seed"], params)
    save_dataset(out, records, params.feature_dim, {"config_hash": h, "config": resolved})
    return {"dataset": str(out), "n_records": n, "config_hash": h}


def cmd_weaken(args) -> dict:
    """Replace every polygon set with a weak label; polygons go to a sidecar truth file."""
    kind = WeakKind.parse(args.kind)
    fdim, records = _load_dataset(args.dataset)
    out = Path(args.output)
    truth_path = Path(args.truth) if args.truth else out.with_name(out.stem + ".truth.json")
    resolved = {"dataset": str(args.dataset), "kind": kind.value, "rng_seed": args.seed}
    h = config_hash(resolved)
    _claim([out, truth_path], args.force)
    seeds = _sub_seeds(args.seed, max(len(records), 1))
    truth = {}
    for rec, s in zip(records, seeds):
        if rec.strong is None:
            raise CliError(f"record {rec.id} has no polygons to weaken")
        rec.weak = make_weak_label(kind, rec.strong, rec.image.width, rec.image.height, s)
        truth[rec.id] = [p.to_list() for p in rec.strong]
        rec.strong = None
    save_dataset(out, records, fdim, {"config_hash": h, "config": resolved})
    _write(truth_path, _dump_json({"config_hash": h, "truth": truth}))
    return {"dataset": str(out), "truth": str(truth_path), "kind": kind.value, "config_hash": h}


def _experiment(cfg: dict, base: Path) -> dict:
    allowed = {"dataset", "eval_dataset", "truth", "weak_kind", "strong_fraction", "rng_seed",
               "output_dir", "em", "loss", "detector"}
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise CliError(f"unknown experiment keys: {', '.join(unknown)}")
    if "dataset" not in cfg:
        raise CliError("experiment config needs a dataset path")
    exp = {
        "dataset": _resolve(cfg["dataset"], base),
        "eval_dataset": _resolve(cfg["eval_dataset"], base) if cfg.get("eval_dataset") else None,
        "truth": _resolve(cfg["truth"], base) if cfg.get("truth") else None,
        "weak_kind": WeakKind.parse(cfg.get("weak_kind", "tight")),
        "strong_fraction": float(cfg.get("strong_fraction", 0.1)),
        "rng_seed": int(cfg.get("rng_seed", 0)),
        "output_dir": _resolve(cfg.get("output_dir", "run"), base),
    }
    for key in ("dataset", "eval_dataset", "truth"):
        if exp[key] is not None and not exp[key].is_file():
            raise CliError(f"{key} not found: {exp[key]}")
    if not 0.0 < exp["strong_fraction"] <= 1.0:
        raise CliError("strong_fraction must lie in (0, 1]")
    em = dict(cfg.get("em") or {})
    if "rng_seed" in em:
        raise CliError("set rng_seed at the top level; it is split across modules")
    split_seed, em_seed = _sub_seeds(exp["rng_seed"], 2)
    exp["split_seed"] = split_seed
    exp["em"] = _build(EmConfig, em, "em", rng_seed=em_seed)
    loss = _build(LossConfig, cfg.get("loss"), "loss")
    detector = dict(cfg.get("detector") or {})
    detector.pop("loss", None)
    exp["detector_overrides"] = detector
    exp["loss"] = loss
    return exp


def _split(exp, records):
    if any(r.weak is not None for r in records):
        strong = [r for r in records if r.weak is None and r.strong is not None]
        weak = [r for r in records if r.weak is not None]
        bad = [r.id for r in weak if r.weak.kind is not exp["weak_kind"]]
        if bad:
            raise CliError(f"records {bad[:3]} carry a different weak label kind")
        return strong, weak
    return split_dataset(records, exp["strong_fraction"], exp["split_seed"], exp["weak_kind"])


def cmd_em(args) -> dict:
    """Run the EM loop and write per-round reports plus the final model."""
    path = Path(args.config)
    cfg = load_config(path)
    exp = _experiment(cfg, path.parent)
    fdim, records = _load_dataset(exp["dataset"])
    det_cfg = _build(DetectorConfig, exp["detector_overrides"], "detector", feature_dim=fdim, loss=exp["loss"])
    resolved = {
        "dataset": str(exp["dataset"]),
        "eval_dataset": None if exp["eval_dataset"] is None else str(exp["eval_dataset"]),
        "truth": None if exp["truth"] is None else str(exp["truth"]),
        "weak_kind": exp["weak_kind"].value,
        "strong_fraction": exp["strong_fraction"],
        "rng_seed": exp["rng_seed"],
        "em": exp["em"].to_json(),
        "detector": dataclasses.asdict(det_cfg),
    }
    h = config_hash(resolved)
    out_dir = exp["output_dir"]
    outputs = [out_dir / n for n in ("report.json", "report.csv", "model.json", "config.yaml")]
    _claim(outputs, args.force)

    strong, weak = _split(exp, records)
    if not strong:
        raise CliError("no strongly labelled records after the split")
    truth = {r.id: list(r.strong) for r in records if r.strong is not None}
    if exp["truth"] is not None:
        try:
            doc = json.loads(exp["truth"].read_text())
            truth.update({k: [Polygon(p) for p in v] for k, v in doc["truth"].items()})
        except (KeyError, ValueError, AttributeError) as e:
            raise CliError(f"malformed truth file {exp['truth']}: {e}") from None
    eval_records = []
    if exp["eval_dataset"] is not None:
        efdim, eval_records = _load_dataset(exp["eval_dataset"])
        if efdim != fdim:
            raise CliError(f"eval dataset has {efdim} feature channels, training data has {fdim}")
    weak_truth = {r.id: truth[r.id] for r in weak if r.id in truth}

    result = run_em(
        strong,
        weak,
        exp["weak_kind"],
        exp["em"],
        eval_records=eval_records,
        truth=weak_truth if len(weak_truth) == len(weak) else None,
        detector_config=det_cfg,
    )
    meta = {"config_hash": h, "n_strong": len(strong), "n_weak": len(weak)}
    _write(outputs[0], reports_to_json(result.reports, meta))
    _write(outputs[1], reports_to_csv(result.reports))
    model = result.final_state.to_json()
    model["config_hash"] = h
    _write(outputs[2], json.dumps(model))
    _write(outputs[3], yaml.safe_dump({"config_hash": h, **resolved}, sort_keys=True))
    last = result.reports[-1]
    return {"output_dir": str(out_dir), "rounds": len(result.reports) - 1, "final_F": last.eval_F, "config_hash": h}


def _load_detections(doc: dict, path) -> dict:
    try:
        out = {}
        for rid, items in doc["detections"].items():
            polys = [Polygon(d["polygon"]) for d in items]
            out[rid] = [Candidate(bbox_of_polygon(p), p, float(d["score"])) for p, d in zip(polys, items)]
        return out
    except (KeyError, TypeError, ValueError) as e:
        raise CliError(f"malformed detections file {path}: {e}") from None


def cmd_eval(args) -> dict:
    """Score a saved model, or a saved detections file, and write metrics plus the detections."""
    mp = Path(args.model)
    if not mp.is_file():
        raise CliError(f"model not found: {mp}")
    try:
        doc = json.loads(mp.read_text())
    except json.JSONDecodeError as e:
        raise CliError(f"malformed model {mp}: {e}") from None
    fdim, records = _load_dataset(args.dataset)
    state = replayed = None
    if isinstance(doc, dict) and "detections" in doc:
        replayed = _load_detections(doc, mp)
    else:
        try:
            state = DetectorState.from_json(doc)
        except (KeyError, TypeError, ValueError) as e:
            raise CliError(f"malformed model {mp}: {e}") from None
        if fdim != state.config.feature_dim:
            raise CliError(f"model expects {state.config.feature_dim} feature channels, dataset has {fdim}")
    if any(r.strong is None for r in records):
        raise CliError("evaluation needs polygon ground truth on every record")
    resolved = {"model": str(mp), "dataset": str(args.dataset), "iou": args.iou, "score_floor": args.score_floor}
    h = config_hash(resolved)
    out = Path(args.output)
    det_path = Path(args.detections) if args.detections else out.with_name(out.stem + ".detections.json")
    _claim([out, det_path], args.force)
    if replayed is None:
        dets = detect_all(state, records, args.score_floor)
    else:
        dets = {r.id: [c for c in replayed.get(r.id, []) if c.score >= args.score_floor] for r in records}
    truth = {r.id: r.strong for r in records}
    m = score_detections(dets, truth, args.iou)
    _write(out, _dump_json({"config_hash": h, **m.to_json()}))
    doc = {
        "config_hash": h,
        "detections": {
            rid: [{"polygon": c.polygon.to_list(), "score": c.score} for c in cs] for rid, cs in dets.items()
        },
    }
    _write(det_path, json.dumps(doc, sort_keys=True) + "\n")
    return {"metrics": str(out), "detections": str(det_path), **m.to_json()}


def _costs(args) -> AnnotationCost:
    if not args.costs:
        return AnnotationCost()
    doc = load_config(args.costs)
    try:
        return AnnotationCost(**{k: float(v) for k, v in doc.items()})
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid costs file: {e}") from None


def cmd_budget(args) -> dict:
    """Allocate an annotation budget under one policy, or all of them with ``--policy all``."""
    costs = _costs(args)
    names = [p.value for p in bp.PolicyKind] if args.policy == "all" else [args.policy]
    rows = []
    try:
        for name in names:
            kind = bp.PolicyKind.parse(name)
            if kind is bp.PolicyKind.MIXED_FRACTION and args.poly_fraction is None:
                if args.policy == "all":
                    continue
            policy = bp.AnnotationPolicy(
                kind,
                args.poly_fraction if kind is bp.PolicyKind.MIXED_FRACTION else None,
                args.weak_kind if kind is bp.PolicyKind.MIXED_FRACTION else None,
            )
            rows.append((kind.value, bp.plan(policy, args.budget, costs, args.strong_base)))
    except ValueError as e:
        raise CliError(str(e)) from None
    resolved = {
        "policy": args.policy,
        "budget": args.budget,
        "strong_base": args.strong_base,
        "poly_fraction": args.poly_fraction,
        "weak_kind": args.weak_kind,
        "costs": costs.as_dict(),
    }
    h = config_hash(resolved)
    doc = {"config_hash": h, "budget": args.budget, "costs": costs.as_dict(),
           "allocations": {name: a.to_json() for name, a in rows}}
    outputs = [p for p in (args.output, args.table) if p]
    _claim(outputs, args.force)
    if args.output:
        _write(args.output, _dump_json(doc))
    if args.table:
        _write(args.table, f"# config_hash {h}\n" + bp.cost_table(rows, costs))
    return doc


# -- argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="polyem", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("config", help="YAML with n, rng_seed, output and optional params")
    p.add_argument("-o", "--output", help="dataset path (overrides the config)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("weaken", help="replace polygons with weak labels")
    p.add_argument("dataset")
    p.add_argument("--kind", required=True, help="tight, loose, coarse or tag")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--truth", help="sidecar truth path (default: <output>.truth.json)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_weaken)

    p = sub.add_parser("em", help="run an EM experiment")
    p.add_argument("config", help="experiment YAML")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_em)

    p = sub.add_parser("eval", help="evaluate a saved model")
    p.add_argument("model", help="model JSON, or a detections JSON to rescore")
    p.add_argument("dataset")
    p.add_argument("-o", "--output", required=True, help="metrics JSON path")
    p.add_argument("--detections", help="detections JSON path (default: <output>.detections.json)")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--score-floor", type=float, default=0.3)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("budget", help="plan an annotation budget")
    p.add_argument("--policy", default="all", help="strong, equal_time, equal_number, mixed_fraction or all")
    p.add_argument("--budget", type=float, default=43_200.0, help="seconds")
    p.add_argument("--strong-base", type=int, default=560)
    p.add_argument("--poly-fraction", type=float)
    p.add_argument("--weak-kind")
    p.add_argument("--costs", help="YAML of per-image seconds")
    p.add_argument("-o", "--output", help="allocation JSON path (default: stdout)")
    p.add_argument("--table", help="CSV cost table path")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_budget)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        summary = args.func(args)
    except CliError as e:
        print(json.dumps({"error": "usage", "command": args.command, "message": str(e)}), file=sys.stderr)
        return 2
    except (ValueError, OSError, FloatingPointError) as e:
        print(json.dumps({"error": type(e).__name__, "command": args.command, "message": str(e)}), file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
