"""Command-line interface: ``geomdeeponet <command> [options]``.

Every command accepts ``--config run.json``; explicit flags override values
from the file and the merged settings are written next to the outputs.
Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import dataset as dsm
from . import evaluation as ev
from .errors import (
    ConfigError, GeomDeepONetError, LoadError, MeshValidationError, ParseError, ResumeError, UsageError,
)
from .geometry import DesignParams, ShapeFamily, param_names, sample_design, sample_interior
from .mesh import load_mesh
from .model import GeomConfig, VanillaConfig, build_model, load_model, save_model
from .training import TrainConfig, TrainingState, resume, train
from .vtk import write_vtk_points

USAGE_ERRORS = (UsageError, ConfigError, ParseError, LoadError, ResumeError, MeshValidationError)


class CliUsageError(UsageError):
    pass


# ---------------------------------------------------------------------------
# config plumbing


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliUsageError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise CliUsageError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise CliUsageError(f"{p}: config must be a JSON object")
    return doc


def _merge(args: argparse.Namespace, keys: Sequence[str], defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    cfg = dict(defaults)
    cfg.update(_load_config(getattr(args, "config", None)))
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _require(cfg: dict, *keys: str):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise CliUsageError(f"missing required setting(s): {', '.join(missing)}")


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliUsageError(f"{what} not found: {p}")
    return p


def _write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return path


def _read_points(path) -> np.ndarray:
    p = _existing(path, "points file")
    try:
        if p.suffix.lower() == ".json":
            pts = np.array(json.loads(p.read_text(encoding="utf-8")), dtype=np.float64)
        else:
            pts = np.loadtxt(p, delimiter="," if p.suffix.lower() == ".csv" else None, ndmin=2)
    except ValueError as exc:
        raise ParseError(f"{p}: cannot parse points ({exc})") from exc
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ParseError(f"{p}: expected an (n, 3) array of points, got shape {pts.shape}")
    return pts


def _log(msg: str):
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    cfg = _merge(args, ["family", "count", "seed", "n_min", "n_max", "c", "out", "workers"],
                 {"n_min": 500, "n_max": 2000, "c": 1, "workers": 1})
    _require(cfg, "family", "count", "seed", "out")
    try:
        family = ShapeFamily(cfg["family"])
    except ValueError as exc:
        raise CliUsageError(f"unknown family {cfg['family']!r}") from exc
    ds = dsm.generate_dataset(family, int(cfg["count"]), int(cfg["seed"]),
                              (int(cfg["n_min"]), int(cfg["n_max"])), int(cfg["c"]),
                              workers=int(cfg["workers"]))
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    dsm.save_dataset(ds, out, config=cfg)
    _log(f"wrote {len(ds)} cases to {out}")
    return 0


def cmd_split(args) -> int:
    cfg = _merge(args, ["dataset", "mode", "fraction", "seed", "out"], {"fraction": 0.8, "seed": 0})
    _require(cfg, "dataset", "mode", "out")
    ds = dsm.load_dataset(_existing(cfg["dataset"], "dataset"))
    mode = cfg["mode"]
    if mode == "random":
        tr, te = dsm.random_split(ds, float(cfg["fraction"]), int(cfg["seed"]))
    elif mode == "similarity":
        tr, te = dsm.similarity_split(ds, float(cfg["fraction"]))
    else:
        raise CliUsageError(f"unknown split mode {mode!r} (use 'random' or 'similarity')")
    dsm.save_split(cfg["out"], tr, te, mode, fraction=float(cfg["fraction"]),
                   seed=int(cfg["seed"]) if mode == "random" else None, config=cfg)
    _log(f"{mode} split: {len(tr)} train / {len(te)} test -> {cfg['out']}")
    return 0


TRAIN_FLAG_MAP = {
    "batch_size": "batch_size", "lr0": "lr0", "decay": "decay_coefficient",
    "iterations": "iterations", "seed": "seed", "resample_n": "resample_N", "eval_every": "eval_every",
}


def _model_config(spec: dict, n_params: int, c: int):
    kind = spec.get("kind", "geom")
    preset = spec.get("preset", "desk")
    widths = {k: v for k, v in spec.items() if k not in ("kind", "preset", "width", "scale")}
    if kind == "geom":
        if preset == "desk":
            base = GeomConfig.desk(n_params, c, h=spec.get("h", 32), width=spec.get("width", 32)).to_dict()
        elif preset == "default":
            base = GeomConfig.default(n_params, c, h=spec.get("h", 32), scale=spec.get("scale", 1)).to_dict()
        else:
            raise CliUsageError(f"unknown model preset {preset!r}")
        base.update(widths)
        base.pop("kind")
        base["n_params"], base["c"] = n_params, c
        return GeomConfig(**base)
    if kind == "vanilla":
        if c != 1:
            raise CliUsageError("the vanilla DeepONet supports scalar outputs (c=1) only")
        if preset == "desk":
            base = VanillaConfig.desk(n_params, h=spec.get("h", 32), width=spec.get("width", 32)).to_dict()
        elif preset == "default":
            base = VanillaConfig(n_params).to_dict()
        else:
            raise CliUsageError(f"unknown model preset {preset!r}")
        base.update(widths)
        base.pop("kind")
        base["n_params"] = n_params
        return VanillaConfig(**base)
    raise CliUsageError(f"unknown model kind {kind!r}")


def cmd_train(args) -> int:
    file_cfg = _load_config(args.config)
    cfg = {"dataset": None, "split": None, "out_dir": None, "model": {}, "train": {}, "model_seed": None}
    cfg.update(file_cfg)
    for k in ("dataset", "split", "out_dir", "model_seed", "resume"):
        if getattr(args, k, None) is not None:
            cfg[k] = getattr(args, k)
    model_spec = dict(cfg.get("model") or {})
    for flag, key in (("model_kind", "kind"), ("preset", "preset"), ("width", "width")):
        if getattr(args, flag, None) is not None:
            model_spec[key] = getattr(args, flag)
    cfg["model"] = model_spec
    tcfg_dict = dict(cfg.get("train") or {})
    for flag, key in TRAIN_FLAG_MAP.items():
        if getattr(args, flag, None) is not None:
            tcfg_dict[key] = getattr(args, flag)
    cfg["train"] = TrainConfig.from_dict(tcfg_dict).to_dict()
    _require(cfg, "dataset", "split", "out_dir")

    ds = dsm.load_dataset(_existing(cfg["dataset"], "dataset"))
    split = dsm.load_split(_existing(cfg["split"], "split file"))
    train_cases, test_cases = ds.by_id(split["train"]), ds.by_id(split["test"])
    tcfg = TrainConfig.from_dict(cfg["train"])
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "effective_config.json", cfg)
    progress = None if args.quiet else _log

    if cfg.get("resume"):
        state = resume(_existing(cfg["resume"], "training state"), train_cases, test_cases, tcfg,
                       progress=progress)
    else:
        model_cfg = _model_config(model_spec, len(param_names(ds.family)), ds.c)
        stats = dsm.fit_stats(train_cases)
        seed = tcfg.seed if cfg.get("model_seed") is None else int(cfg["model_seed"])
        model = build_model(model_cfg, np.random.default_rng(seed), stats)
        _log(f"{model_cfg.kind} model with {model.n_parameters} parameters")
        state = train(model, train_cases, test_cases, tcfg, progress=progress)

    extra = {"run_config": cfg}
    state.history.to_jsonl(out / "history.jsonl")
    state.history.to_jsonl(out / "history_timed.jsonl", with_time=True)
    save_model(state.model, out / "final.json", extra={**extra, "iteration": state.iteration})
    save_model(state.best_model(), out / "best.json",
               extra={**extra, "iteration": state.best_iteration, "test_loss": state.best_test_loss})
    state.save(out / "state.json")
    _log(f"done at iteration {state.iteration}; best test loss {state.best_test_loss:.4e} "
         f"at iteration {state.best_iteration}")
    return 0


def _check_family(model, family: ShapeFamily):
    if model.stats is not None and model.stats.family is not family:
        raise CliUsageError(
            f"checkpoint was trained on {model.stats.family.value}, data is {family.value}"
        )


def cmd_predict(args) -> int:
    cfg = _merge(args, ["checkpoint", "dataset", "mesh", "params", "points", "out", "vtk_dir", "ids"], {})
    _require(cfg, "checkpoint", "out")
    model = load_model(_existing(cfg["checkpoint"], "checkpoint"))
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    vtk_dir = Path(cfg["vtk_dir"]) if cfg.get("vtk_dir") else None
    if vtk_dir is not None:
        vtk_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    if cfg.get("dataset"):
        ds = dsm.load_dataset(_existing(cfg["dataset"], "dataset"))
        _check_family(model, ds.family)
        cases = ds.by_id(cfg["ids"]) if cfg.get("ids") else ds.cases
        for case in cases:
            pred = model.predict_case(case)
            rows.append({"id": case.id, "predictions": pred.tolist()})
            if vtk_dir is not None:
                write_vtk_points(vtk_dir / f"{case.id}.vtk", case.points, pred, sdf=case.sdf)
    elif cfg.get("mesh"):
        _require(cfg, "params", "points")
        mesh = load_mesh(_existing(cfg["mesh"], "mesh file"))
        pdoc = _load_config(cfg["params"])
        try:
            params = DesignParams.from_mapping(pdoc["family"], pdoc["params"])
        except (KeyError, ValueError) as exc:
            raise CliUsageError(f"{cfg['params']}: need {{'family': ..., 'params': {{...}}}} ({exc})") from exc
        _check_family(model, params.family)
        pts = _read_points(cfg["points"])
        sdf = mesh.sdf(pts)
        pred = model.predict_points(params, pts, sdf)
        rows.append({"id": pdoc.get("id", "mesh"), "predictions": pred.tolist()})
        if vtk_dir is not None:
            write_vtk_points(vtk_dir / f"{rows[-1]['id']}.vtk", pts, pred, sdf=sdf)
    else:
        raise CliUsageError("predict needs --dataset or --mesh")
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")
    _write_json(out.with_name(out.name.split(".")[0] + ".config.json"), cfg)
    _log(f"wrote predictions for {len(rows)} case(s) to {out}")
    return 0


def _read_predictions(path: Path) -> dict:
    preds = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                preds[row["id"]] = np.array(row["predictions"], dtype=np.float64)
            except (ValueError, KeyError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return preds


def cmd_eval(args) -> int:
    cfg = _merge(args, ["predictions", "dataset", "split", "subset", "out_dir", "grouping"],
                 {"subset": "test", "grouping": "full_mesh"})
    _require(cfg, "predictions", "dataset", "out_dir")
    preds = _read_predictions(_existing(cfg["predictions"], "predictions file"))
    ds = dsm.load_dataset(_existing(cfg["dataset"], "dataset"))
    split = dsm.load_split(_existing(cfg["split"], "split file")) if cfg.get("split") else None
    subset = cfg["subset"]
    if subset not in ("train", "test", "all"):
        raise CliUsageError(f"subset must be train, test or all, got {subset!r}")
    if split is None or subset == "all":
        ids = ds.ids if split is None else split["train"] + split["test"]
    else:
        ids = split[subset]
    missing = [i for i in ids if i not in preds]
    if missing:
        raise CliUsageError(f"predictions missing for {len(missing)} case(s): {missing[:20]}")
    cases = ds.by_id(ids)
    metrics = []
    for case in cases:
        p = preds[case.id]
        if p.shape != case.fields.shape:
            raise CliUsageError(f"{case.id}: prediction shape {p.shape} vs data {case.fields.shape}")
        metrics.append(ev.case_metrics(p, case.fields, case.id))
    report = ev.aggregate(metrics, cfg["grouping"])
    report.config = cfg
    if split is not None and split.get("mode") == "similarity" and len(cases) >= 2:
        ref = ds.cases[0].params
        sims = [dsm.similarity(c.params, ref) for c in cases]
        try:
            slope, intercept = ev.similarity_regression(metrics, sims)
            report.similarity_regression = {"slope": slope, "intercept": intercept,
                                            "reference": ds.cases[0].id}
        except GeomDeepONetError as exc:
            report.similarity_regression = {"error": str(exc)}
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    _log(f"{len(cases)} case(s): mean MAE {report.mean_mae}, mean rel. error {report.mean_rel_error} %")
    return 0


def cmd_bench(args) -> int:
    cfg = _merge(args, ["checkpoint", "node_counts", "repeats", "seed", "out"],
                 {"node_counts": [100, 1000, 10000], "repeats": 3, "seed": 0})
    _require(cfg, "checkpoint", "out")
    model = load_model(_existing(cfg["checkpoint"], "checkpoint"))
    if model.stats is None:
        raise CliUsageError("checkpoint has no normalization stats")
    rng = np.random.default_rng(int(cfg["seed"]))
    d = sample_design(model.stats.family, rng)
    counts = [int(n) for n in cfg["node_counts"]]
    clouds = {n: sample_interior(d, n, rng) for n in counts}

    def predict(n):
        pts, s = clouds[n]
        return model.predict_points(d, pts, s)

    report = ev.timing_benchmark(predict, counts, repeats=int(cfg["repeats"]))
    doc = {"config": cfg, "design": d.as_dict(), **report.to_dict()}
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, doc)
    _log(f"timing exponent {report.exponent}")
    return 0


def cmd_sdf(args) -> int:
    cfg = _merge(args, ["mesh", "points", "out", "brute_force"], {"brute_force": False})
    _require(cfg, "mesh", "points", "out")
    mesh = load_mesh(_existing(cfg["mesh"], "mesh file"))
    pts = _read_points(cfg["points"])
    values = mesh.brute_force_sdf(pts) if cfg["brute_force"] else mesh.sdf(pts)
    _write_json(Path(cfg["out"]), {"config": cfg, "sdf": values.tolist()})
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="geomdeeponet", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file with settings (flags override)")
        p.set_defaults(func=fn)
        return p

    p = add("gen", cmd_gen, "generate a manufactured-field dataset")
    p.add_argument("--family", choices=[f.value for f in ShapeFamily])
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-min", dest="n_min", type=int)
    p.add_argument("--n-max", dest="n_max", type=int)
    p.add_argument("--c", type=int, choices=[1, 4])
    p.add_argument("--out")
    p.add_argument("--workers", type=int, help="processes for case generation (output is identical)")

    p = add("split", cmd_split, "write a train/test split file")
    p.add_argument("--dataset")
    p.add_argument("--mode")
    p.add_argument("--fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = add("train", cmd_train, "train a model")
    p.add_argument("--dataset")
    p.add_argument("--split")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--model", dest="model_kind", choices=["geom", "vanilla"])
    p.add_argument("--preset", choices=["desk", "default"])
    p.add_argument("--width", type=int)
    p.add_argument("--model-seed", dest="model_seed", type=int)
    p.add_argument("--resume", help="training state file to continue from")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--decay", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resample-n", dest="resample_n", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--quiet", action="store_true")

    p = add("predict", cmd_predict, "predict fields for a dataset or a mesh")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--ids", nargs="+")
    p.add_argument("--mesh")
    p.add_argument("--params", help="JSON {family, params} for --mesh input")
    p.add_argument("--points", help="points file (.json, .csv or whitespace text)")
    p.add_argument("--out")
    p.add_argument("--vtk-dir", dest="vtk_dir")

    p = add("eval", cmd_eval, "score predictions against a dataset")
    p.add_argument("--predictions")
    p.add_argument("--dataset")
    p.add_argument("--split")
    p.add_argument("--subset", choices=["train", "test", "all"])
    p.add_argument("--grouping", choices=["subset", "full_mesh"])
    p.add_argument("--out-dir", dest="out_dir")

    p = add("bench", cmd_bench, "time predictions against node count")
    p.add_argument("--checkpoint")
    p.add_argument("--node-counts", dest="node_counts", type=int, nargs="+")
    p.add_argument("--repeats", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = add("sdf", cmd_sdf, "signed distances from a closed surface mesh")
    p.add_argument("--mesh")
    p.add_argument("--points")
    p.add_argument("--out")
    p.add_argument("--brute-force", dest="brute_force", action="store_true", default=None)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return 2
    except GeomDeepONetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
