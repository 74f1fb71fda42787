"""Config-driven experiment runner.

    phlab run <config.json | preset> [--out DIR] [--seed N] [--workers K] [--task T]
    phlab presets
    phlab validate <config.json | preset>

Every run writes ``report.json`` plus task-specific CSV tables into the
output directory.  Exit status: 0 on success, 2 for invalid configuration,
3 for numerical failure, 4 when a gate is inconclusive.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import math
import os
import sys
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .errors import ConfigInvalid, PhlabError

TASKS = ("exponents", "holonomy", "classify", "barycentre-field", "uniformize", "accessibility")
DEFAULT_OUT = "phlab-out"


# ------------------------------------------------------------------ configs


def _schema():
    text = resources.files("phlab").joinpath("schemas/experiment.schema.json").read_text()
    return json.loads(text)


def preset_names():
    """Names of the bundled presets, sorted."""
    folder = resources.files("phlab").joinpath("presets")
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> dict:
    if name not in preset_names():
        raise ConfigInvalid(f"unknown preset {name!r}")
    return json.loads(resources.files("phlab").joinpath(f"presets/{name}.json").read_text())


def load_config(source: str) -> dict:
    """Read a config file, or a bundled preset by name (with or without .json)."""
    path = Path(source)
    if path.is_file():
        try:
            return json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigInvalid(f"{source}: not valid JSON ({e})") from e
    stem = path.name[:-5] if path.name.endswith(".json") else path.name
    if stem in preset_names():
        return load_preset(stem)
    raise ConfigInvalid(f"no config file or preset named {source!r}")


def validate_config(cfg: dict):
    """Schema check, then a full parse of the system spec.  Raises ConfigInvalid."""
    from .fibred import system_from_json

    try:
        jsonschema.validate(cfg, _schema())
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigInvalid(f"{where}: {e.message}") from e
    f = system_from_json(cfg["system"])
    task = cfg["task"]
    if task == "accessibility" and not f.is_group_extension:
        raise ConfigInvalid("accessibility needs an affine (group extension) system")
    return f


def config_hash(cfg: dict) -> str:
    """sha256 of the canonical JSON form (sorted keys, no whitespace)."""
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _plain(obj):
    """Recursively turn numpy values into JSON-safe Python ones; NaN and inf become None."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


# ------------------------------------------------------------------ tasks


def _task_exponents(f, p, seed, workers, out):
    from .lyapunov import check_symplectic_symmetry, gap_significant, gap_threshold, symmetry_holds
    from .lyapunov import centre_exponents

    est = centre_exponents(f, n_orbits=p.get("n_orbits", 32), n_iter=p.get("n_iter", 1_000_000), seed=seed,
                           workers=workers)
    factor = p.get("gap_factor", 10.0)
    floor = p.get("gap_floor", 1e-3)
    sym = p.get("symmetry_factor", 3.0)
    res = est.to_json()
    res.update(
        symmetry_residual=check_symplectic_symmetry(est),
        symmetry_factor=sym,
        symmetry_holds=symmetry_holds(est, sym) if f.volume_preserving else None,
        volume_preserving=f.volume_preserving,
        gap_threshold=gap_threshold(est, factor, floor),
        gap_significant=gap_significant(est, factor, floor),
        max_abs_logdet=float(np.abs(est.orbit_logdet).max()),
    )
    _write_csv(out / "exponent_series.csv", ["n", "lambda_plus"], est.series_rows())
    _write_csv(out / "exponent_orbits.csv", ["orbit", "lambda_plus", "lambda_minus", "logdet"],
               [(i, a, b, c) for i, (a, b, c) in enumerate(zip(est.orbit_plus, est.orbit_minus, est.orbit_logdet))])
    return res, ["exponent_series.csv", "exponent_orbits.csv"], []


def _task_holonomy(f, p, seed, workers, out):
    from .holonomy import derivative_holonomy, fibre_holonomy, fit_geometric_ratio

    kind = p.get("kind", "unstable")
    n_pairs = p.get("n_pairs", 100)
    reach = p.get("leaf_length", 0.3)
    tol = p.get("tol", 1e-10)
    rng = np.random.default_rng(seed)
    rows, devs = [], []
    for i in range(n_pairs):
        x = rng.random(2)
        t = float(rng.uniform(-reach, reach))
        h = fibre_holonomy(f, x, None, kind, tol=tol, n_points=p.get("n_points", 5), seed=seed + i, leaf_length=t)
        dev = h.fit_deviation
        devs.append(dev)
        fit = h.translation_fit if h.translation_fit is not None else [float("nan")] * 2
        rows.append((i, *h.x, *h.y, t, *fit, float("nan") if dev is None else dev, h.n_trunc))
    _write_csv(out / "holonomy_pairs.csv",
               ["pair", "x1", "x2", "y1", "y2", "leaf_length", "fit1", "fit2", "fit_deviation", "n_trunc"], rows)
    # derivative holonomy at a few states, short leaves so the gaps decay visibly
    short = p.get("derivative_leaf_length", 0.08)
    dets, ratios = [], []
    for s in f.random_states(rng, p.get("n_points", 5)):
        x, v = s[:2], s[2: 2 + f.fibre_dim]
        d = derivative_holonomy(f, x, v, None, kind, tol=tol, leaf_length=short)
        dets.append(d.det)
        ratios.append(fit_geometric_ratio(d.gaps))
    rate = f.base.leaf_rate(kind)
    rate = rate if kind == "stable" else 1.0 / rate
    finite = [r for r in ratios if math.isfinite(r)]
    res = {
        "kind": kind,
        "n_pairs": n_pairs,
        "max_fit_deviation": max(devs) if f.is_group_extension else None,
        "derivative_det": dets,
        "max_abs_det_minus_one": float(np.max(np.abs(np.array(dets) - 1))),
        "gap_ratios": ratios,
        "median_gap_ratio": float(np.median(finite)) if finite else None,
        "base_contraction": rate,
    }
    return res, ["holonomy_pairs.csv"], []


def _classifier_config(p, seed, workers):
    from dataclasses import fields

    from .projective import ClassifierConfig

    names = {fl.name for fl in fields(ClassifierConfig)}
    return ClassifierConfig(seed=seed, workers=workers, **{k: v for k, v in p.items() if k in names})


def _field_artifacts(out, disintegration, bfield):
    names = []
    if disintegration is not None:
        _write_csv(out / "disintegration.csv", ["base_i", "base_j", "fibre_i", "fibre_j", "bin", "mass"],
                   disintegration.csv_rows())
        (out / "disintegration.header.json").write_text(json.dumps(_plain(disintegration.header()), sort_keys=True,
                                                                   indent=2) + "\n")
        names += ["disintegration.csv", "disintegration.header.json"]
    if bfield is not None:
        _write_csv(out / "barycentre_field.csv", ["base_i", "base_j", "fibre_i", "fibre_j", "tau_re", "tau_im"],
                   bfield.csv_rows())
        names.append("barycentre_field.csv")
    return names


def _oracle_distance(f, bfield):
    """Distance of the barycentre field to the structure preserved by L, when L
    determines a unique one (elliptic of order at least 3)."""
    from .conformal import invariant_structure_of
    from .fibred import elliptic_order

    if bfield is None or f.L is None or f.spec_kind != "affine":
        return None
    try:
        order = elliptic_order(f.L)
    except PhlabError:
        return None
    if order < 3:
        return None
    ref = invariant_structure_of(f.L)
    return {"tau": [ref.tau.real, ref.tau.imag], "max_distance": bfield.distance_to(ref)}


def _task_classify(f, p, seed, workers, out):
    from .errors import Inconclusive
    from .projective import classify_trichotomy

    cfg = _classifier_config(p, seed, workers)
    try:
        rep = classify_trichotomy(f, cfg)
    except Inconclusive as e:
        e.artifacts = _field_artifacts(out, e.report.disintegration, e.report.barycentre_field)
        e.outputs = e.report.to_json()
        raise
    res = rep.to_json()
    res["invariant_structure"] = _oracle_distance(f, rep.barycentre_field)
    return res, _field_artifacts(out, rep.disintegration, rep.barycentre_field), list(rep.warnings)


def _task_barycentre_field(f, p, seed, workers, out):
    from .conformal import barycentre_field
    from .projective import empirical_disintegration

    cfg = _classifier_config(p, seed, workers)
    d = empirical_disintegration(f, cfg.base_cells, cfg.fibre_cells, cfg.n_bins, cfg.n_particles, cfg.burn_in,
                                 cfg.n_steps, cfg.angles_per_particle, cfg.initial_angle, seed)
    bf = barycentre_field(d, heavy_slack=cfg.heavy_slack)
    res = {"field": bf.to_json(), "disintegration": d.header(), "invariant_structure": _oracle_distance(f, bf)}
    return res, _field_artifacts(out, d, bf), []


def _task_uniformize(f, p, seed, workers, out):
    from dataclasses import fields

    from .fibred import TORUS
    from .uniformize import ExtractionConfig, extract_affine_model, extract_moebius_model

    check = p.get("check_verdict", True)
    classifier = _classifier_config(p, seed, workers) if check else None
    if f.fibre_kind == TORUS:
        names = {fl.name for fl in fields(ExtractionConfig)}
        cfg = ExtractionConfig(**{k: v for k, v in p.items() if k in names and k != "seed"}, seed=seed)
        rep = extract_affine_model(f, config=cfg, classifier=classifier, check_verdict=check)
        _write_csv(out / "affine_model.csv", ["x1", "x2", "a_re", "a_im", "w1", "w2"],
                   [(*x, a.real, a.imag, *w) for x, a, w in zip(rep.base_points, rep.a, rep.w_model)])
        res = rep.to_json()
        res["config"] = cfg.to_json()
        return res, ["affine_model.csv"], []
    rep = extract_moebius_model(f, model_grid=p.get("model_grid", 8), defect_gate=p.get("defect_gate", 1e-6),
                                classifier=classifier, check_verdict=check, seed=seed)
    return rep.to_json(), [], []


def _task_accessibility(f, p, seed, workers, out):
    from .holonomy import holonomy_group_sample

    kw = {k: p[k] for k in ("n_loops", "closure_rounds", "pair_budget", "cells", "max_period", "grid", "tol")
          if k in p}
    g = holonomy_group_sample(f, p.get("base_point", [0.2, 0.3]), rng_seed=seed, **kw)
    _write_csv(out / "holonomy_group.csv", ["h1", "h2"], g.elements)
    res = g.to_json()
    res["trivial_radius"] = math.sqrt(2) / 2
    return res, ["holonomy_group.csv"], []


_TASKS = {
    "exponents": _task_exponents,
    "holonomy": _task_holonomy,
    "classify": _task_classify,
    "barycentre-field": _task_barycentre_field,
    "uniformize": _task_uniformize,
    "accessibility": _task_accessibility,
}


# ------------------------------------------------------------------ running


def resolve_out_dir(cli_out=None, cfg=None) -> Path:
    """--out, then $PHLAB_OUT, then the config's output_dir, then ./phlab-out."""
    for cand in (cli_out, os.environ.get("PHLAB_OUT"), (cfg or {}).get("output_dir")):
        if cand:
            return Path(cand)
    return Path(DEFAULT_OUT)


def effective_config(cfg: dict, seed=None, workers=None, task=None) -> dict:
    cfg = json.loads(json.dumps(cfg))
    if seed is not None:
        cfg["seed"] = int(seed)
    if workers is not None:
        cfg["workers"] = int(workers)
    if task is not None:
        cfg["task"] = task
    cfg.setdefault("seed", 0)
    cfg.setdefault("workers", 1)
    cfg.setdefault("params", {})
    return cfg


def _dump(report: dict) -> str:
    return json.dumps(_plain(report), sort_keys=True, indent=2) + "\n"


def run(cfg: dict, out_dir: Path) -> tuple:
    """Validate and execute one experiment; write the report and artifacts.

    Returns (report, exit_code).  ConfigInvalid raised during validation
    propagates; failures after validation are recorded in the report.
    """
    f = validate_config(cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()
    report = {
        "phlab_version": __version__,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "task": cfg["task"],
        "status": "ok",
        "exit_code": 0,
        "outputs": None,
        "warnings": [],
        "artifacts": [],
        "error": None,
    }
    try:
        outputs, artifacts, warnings = _TASKS[cfg["task"]](f, cfg["params"], cfg["seed"], cfg["workers"], out_dir)
        report.update(outputs=outputs, artifacts=artifacts, warnings=warnings)
    except PhlabError as e:
        report.update(
            status={2: "config_invalid", 3: "numerical_failure", 4: "inconclusive"}.get(e.exit_code, "error"),
            exit_code=e.exit_code,
            error={"type": type(e).__name__, "message": str(e)},
            outputs=getattr(e, "outputs", None),
            artifacts=getattr(e, "artifacts", []),
        )
        if getattr(e, "report", None) is not None and report["outputs"] is None and hasattr(e.report, "to_json"):
            report["outputs"] = e.report.to_json()
    expected = cfg.get("expected_verdict")
    if expected is not None and cfg["task"] == "classify":
        got = (report["outputs"] or {}).get("label")
        report["expected_verdict_met"] = got == expected
        if got != expected:
            report["warnings"].append(f"expected verdict {expected}, got {got}")
    report["timestamp"] = {"started": started, "wall_clock_s": time.perf_counter() - t0}
    (out_dir / "report.json").write_text(_dump(report))
    return report, report["exit_code"]


def strip_timestamp(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "timestamp"}


# ------------------------------------------------------------------ entry point


def _parser():
    ap = argparse.ArgumentParser(prog="phlab", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"phlab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config or a bundled preset")
    r.add_argument("config")
    r.add_argument("--out", default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--workers", type=int, default=None)
    r.add_argument("--task", choices=TASKS, default=None)
    sub.add_parser("presets", help="list bundled presets")
    v = sub.add_parser("validate", help="check a config against the schema")
    v.add_argument("config")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "presets":
            for name in preset_names():
                p = load_preset(name)
                print(f"{name:<20} {p['task']:<12} {p.get('expected_verdict', '-'):<22} {p.get('description', '')}")
            return 0
        cfg = load_config(args.config)
        if args.command == "validate":
            validate_config(cfg)
            print(f"{args.config}: ok ({config_hash(cfg)[:12]})")
            return 0
        cfg = effective_config(cfg, args.seed, args.workers, args.task)
        out = resolve_out_dir(args.out, cfg)
        report, code = run(cfg, out)
    except PhlabError as e:
        print(f"phlab: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    status = report["status"]
    label = (report["outputs"] or {}).get("label") if report["task"] == "classify" else None
    print(f"{status}{'' if label is None else ' ' + label}: {out / 'report.json'}")
    if report["error"]:
        print(f"phlab: {report['error']['type']}: {report['error']['message']}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
