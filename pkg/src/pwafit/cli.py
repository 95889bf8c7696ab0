"""Batch command-line front end.

    pwafit fit|cv|synth|check|bench --config cfg.json [--out DIR] [--seed S]
                                    [--threads T]

Configs are strict JSON (unknown keys rejected); reports are JSON with the
fully-resolved config embedded, tables and traces are CSV.  Exit codes:
0 success, 2 configuration error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import os
import sys
import time

import numpy as np

from . import mm, pwa, stationarity
from .mm import MMConfig, SolveReport


class ConfigError(Exception):
    pass


class SolverError(Exception):
    pass


# ---------------------------------------------------------------------------
# config handling

_MM_KEYS = {"c": None, "eps": 1e-4, "tol_rel": 1e-4, "tol_step": 0.0,
            "max_outer": 500, "combo_cap": 64, "sn_tol_floor": 1e-6,
            "sn_max_iter": 100, "variant": "random", "compute_residual": True}

_PROBLEM_KEYS = {"k1": 1, "k2": 0, "loss": "squared", "tau": None, "gamma": 0.0,
                 "reg_smooth": "none"}

_SCHEMAS = {
    "fit": {"dataset": None, "synth": None, "starts": 20, "seed": 0,
            "init": None, **_PROBLEM_KEYS, **_MM_KEYS},
    "cv": {"dataset": None, "synth": None, "grid": [[1, 1]], "folds": 5,
           "starts": 5, "seed": 0, "simulations": 1, "init": None,
           **_PROBLEM_KEYS, **_MM_KEYS},
    "synth": {"example": 1, "N": 100, "seed": 0},
    "check": {"model": None, "dataset": None, "pwa1d": None, "points": None,
              "seed": 0, **_PROBLEM_KEYS,
              "c": None, "combo_cap": 64},
    "bench": {"runs": [], "seed": 0},
}

_INIT_KEYS = {"strategy": "gaussian", "scale": 1.0}
_SYNTH_KEYS = {"example": 1, "N": 100, "seed": 0}


def _validate(raw: dict, schema: dict, where: str) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a JSON object")
    unknown = set(raw) - set(schema)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    out = dict(schema)
    out.update(raw)
    return out


def load_config(path: str, command: str, seed_override=None) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    cfg = _validate(raw, _SCHEMAS[command], command)
    if cfg.get("init") is not None:
        cfg["init"] = _validate(cfg["init"], _INIT_KEYS, "init")
    else:
        cfg["init"] = dict(_INIT_KEYS)
    if "synth" in cfg and cfg.get("synth") is not None:
        cfg["synth"] = _validate(cfg["synth"], _SYNTH_KEYS, "synth")
    if seed_override is not None:
        cfg["seed"] = int(seed_override)
    return cfg


def _load_dataset(cfg: dict) -> pwa.Dataset:
    if cfg.get("dataset"):
        try:
            return pwa.Dataset.load_csv(cfg["dataset"])
        except (OSError, ValueError) as exc:
            raise ConfigError(f"dataset: {exc}") from exc
    if cfg.get("synth"):
        s = cfg["synth"]
        gen = pwa.synth_example1 if int(s["example"]) == 1 else pwa.synth_example2
        return gen(int(s["N"]), int(s["seed"]))[0]
    raise ConfigError("config needs either 'dataset' or 'synth'")


def _mm_config(cfg: dict, seed: int) -> MMConfig:
    return MMConfig(c=cfg["c"], eps=cfg["eps"], variant=cfg["variant"],
                    tol_rel=cfg["tol_rel"], tol_step=cfg["tol_step"],
                    max_outer=cfg["max_outer"], combo_cap=cfg["combo_cap"],
                    seed=seed, sn_tol_floor=cfg["sn_tol_floor"],
                    sn_max_iter=cfg["sn_max_iter"],
                    compute_residual=cfg["compute_residual"])


def _problem(cfg: dict, dataset: pwa.Dataset, gamma=None) -> pwa.PWAProblem:
    g = cfg["gamma"] if gamma is None else gamma
    return pwa.PWAProblem(dataset=dataset, k1=int(cfg["k1"]), k2=int(cfg["k2"]),
                          loss=cfg["loss"], tau=cfg["tau"], gamma=float(g),
                          reg_smooth=cfg["reg_smooth"])


# ---------------------------------------------------------------------------
# multi-start driver

def _one_start(problem, comp, cfg, start: int):
    rng = np.random.default_rng([int(cfg["seed"]), start])
    theta0 = pwa.init_sampler(problem, cfg["init"]["strategy"], rng,
                              float(cfg["init"]["scale"]))
    mc = _mm_config(cfg, seed=int(np.random.default_rng(
        [int(cfg["seed"]), start, 1]).integers(2 ** 31)))
    return mm.run(comp, mc, theta0)


def multi_start(problem, comp, cfg, starts: int, threads: int = 1):
    """Returns list of (start, report-or-None, error-string-or-None)."""
    results = [None] * starts

    def job(i):
        try:
            return i, _one_start(problem, comp, cfg, i), None
        except Exception as exc:  # per-start isolation
            return i, None, f"{type(exc).__name__}: {exc}"

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as ex:
            for i, rep, err in ex.map(job, range(starts)):
                results[i] = (i, rep, err)
    else:
        for i in range(starts):
            results[i] = job(i)
    return results


def _best(results):
    ok = [(i, r) for i, r, e in results if r is not None]
    if not ok:
        raise SolverError("all starts failed")
    return min(ok, key=lambda t: t[1].f_N)


# ---------------------------------------------------------------------------
# gamma selection

def select_gamma(cfg: dict, dataset: pwa.Dataset, folds: int = 5) -> float:
    """Log-grid cross-validated regularization weight."""
    X1 = np.hstack([dataset.X, np.ones((dataset.N, 1))])
    gmax = float(np.abs(X1.T @ dataset.y).max()) / dataset.N
    grid = gmax * np.logspace(0, -4, 10)
    idx = _fold_indices(dataset.N, folds, int(cfg["seed"]))
    best_g, best_err = grid[0], np.inf
    for g in grid:
        err = 0.0
        for f in range(folds):
            tr, te = idx != f, idx == f
            ds_tr = pwa.Dataset(dataset.X[tr], dataset.y[tr])
            prob = _problem(cfg, ds_tr, gamma=g)
            comp = pwa.assemble(prob)
            res = multi_start(prob, comp, cfg, max(1, int(cfg["starts"]) // 2))
            _, rep = _best(res)
            model = prob.model(rep.theta)
            err += float(np.sum((dataset.y[te] - model.eval(dataset.X[te])) ** 2))
        if err < best_err:
            best_g, best_err = g, err
    return float(best_g)


def _fold_indices(N: int, folds: int, seed: int) -> np.ndarray:
    order = np.random.default_rng([seed, 999]).permutation(N)
    idx = np.empty(N, dtype=int)
    for f in range(folds):
        idx[order[f::folds]] = f
    return idx


# ---------------------------------------------------------------------------
# commands

def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_fit(cfg: dict, out: str, threads: int) -> int:
    dataset = _load_dataset(cfg)
    gamma = cfg["gamma"]
    if gamma == "cv":
        gamma = select_gamma(cfg, dataset)
    problem = _problem(cfg, dataset, gamma=gamma)
    comp = pwa.assemble(problem)
    results = multi_start(problem, comp, cfg, int(cfg["starts"]), threads)
    best_i, best = _best(results)

    os.makedirs(out, exist_ok=True)
    model = problem.model(best.theta)
    with open(os.path.join(out, "best_model.json"), "w") as fh:
        json.dump(model.to_json(), fh, indent=1)

    rows = []
    for i, rep, err in results:
        if rep is None:
            rows.append([i, "", "", "", "failed", "", err])
        else:
            rows.append([i, repr(rep.f_N), rep.iterations, rep.sn_total,
                         rep.reason, "" if rep.residual is None else repr(rep.residual),
                         ""])
    _write_csv(os.path.join(out, "starts.csv"),
               ["start", "f_N", "mm_iterations", "sn_total", "reason",
                "residual", "error"], rows)

    _write_csv(os.path.join(out, "trace.csv"),
               ["iteration", "f_N", "surrogate", "step_norm", "accepted",
                "sn_iterations"],
               [[r.iteration, repr(r.f_N), repr(r.surrogate), repr(r.step_norm),
                 int(r.accepted), r.sn_iterations] for r in best.trace])

    values = sorted(round(r.f_N, 6) for _, r, e in results if r is not None)
    hist = []
    for v in dict.fromkeys(values):
        hist.append([repr(v), values.count(v)])
    _write_csv(os.path.join(out, "histogram.csv"), ["objective", "count"], hist)

    report = {
        "command": "fit",
        "config": _json_safe({**cfg, "gamma": gamma}),
        "N": dataset.N, "d": dataset.d,
        "best_start": best_i,
        "best_objective": best.f_N,
        "best_objective_no_half": 2.0 * best.f_N if problem.loss == "squared"
        else best.f_N,
        "iterations": best.iterations,
        "sn_total": best.sn_total,
        "residual": best.residual,
        "residual_kind": best.residual_kind,
        "reason": best.reason,
        "failed_starts": [i for i, r, e in results if r is None],
        "wall_time": best.wall_time,
    }
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=1)
    return 0


def cmd_cv(cfg: dict, out: str, threads: int) -> int:
    dataset = _load_dataset(cfg)
    folds = int(cfg["folds"])
    if folds < 2:
        raise ConfigError("cv needs folds >= 2")
    sims = int(cfg["simulations"])
    grid = [(int(a), int(b)) for a, b in cfg["grid"]]

    cells = {}
    for (k1, k2) in grid:
        ratios = []
        detail = []
        for sim in range(sims):
            idx = _fold_indices(dataset.N, folds, int(cfg["seed"]) + sim)
            e_pa = e_ls = 0.0
            try:
                for f in range(folds):
                    tr, te = idx != f, idx == f
                    ds_tr = pwa.Dataset(dataset.X[tr], dataset.y[tr])
                    cell_cfg = {**cfg, "k1": k1, "k2": k2}
                    prob = _problem(cell_cfg, ds_tr)
                    comp = pwa.assemble(prob)
                    res = multi_start(prob, comp, cell_cfg, int(cfg["starts"]),
                                      threads)
                    _, rep = _best(res)
                    model = prob.model(rep.theta)
                    e_pa += float(np.sum((dataset.y[te] - model.eval(dataset.X[te])) ** 2))
                    w, b, _ = pwa.ols_fit(ds_tr)
                    pred = dataset.X[te] @ w + b
                    e_ls += float(np.sum((dataset.y[te] - pred) ** 2))
                ratios.append(e_pa / e_ls)
                detail.append({"simulation": sim, "E_PA": e_pa, "E_LS": e_ls})
            except SolverError as exc:
                detail.append({"simulation": sim, "failed": str(exc)})
        cells[f"{k1},{k2}"] = {
            "k1": k1, "k2": k2,
            "ratio": float(np.mean(ratios)) if ratios else None,
            "failed": None if ratios else "all simulations failed",
            "folds": folds, "detail": detail,
        }

    os.makedirs(out, exist_ok=True)
    k1s = sorted({a for a, _ in grid})
    k2s = sorted({b for _, b in grid})
    rows = []
    for a in k1s:
        row = [a]
        for b in k2s:
            cell = cells.get(f"{a},{b}")
            row.append("" if cell is None or cell["ratio"] is None
                       else repr(cell["ratio"]))
        rows.append(row)
    _write_csv(os.path.join(out, "ratio_grid.csv"),
               ["k1\\k2"] + [str(b) for b in k2s], rows)
    with open(os.path.join(out, "cv_report.json"), "w") as fh:
        json.dump({"command": "cv", "config": _json_safe(cfg),
                   "cells": cells}, fh, indent=1)
    return 0


def cmd_synth(cfg: dict, out: str, threads: int) -> int:
    gen = pwa.synth_example1 if int(cfg["example"]) == 1 else pwa.synth_example2
    dataset, model = gen(int(cfg["N"]), int(cfg["seed"]))
    os.makedirs(out, exist_ok=True)
    dataset.save_csv(os.path.join(out, "dataset.csv"))
    with open(os.path.join(out, "true_model.json"), "w") as fh:
        json.dump(model.to_json(), fh, indent=1)
    return 0


def cmd_check(cfg: dict, out: str, threads: int) -> int:
    os.makedirs(out, exist_ok=True)
    report = {"command": "check", "config": _json_safe(cfg)}
    if cfg.get("pwa1d") is not None:
        pw = cfg["pwa1d"]
        f = stationarity.PiecewiseAffine1D(
            tuple(float(v) for v in pw.get("breakpoints", [])),
            tuple((float(a), float(b)) for a, b in pw["pieces"]))
        pts = []
        for x in (cfg.get("points") or [0.0]):
            flags = stationarity.classify_point(f, float(x))
            rep = stationarity.subdifferentials(f, float(x))
            pts.append({"x": float(x),
                        "C_stationary": flags.c_stationary,
                        "l_stationary": flags.l_stationary,
                        "d_stationary": flags.d_stationary,
                        "local_min": flags.local_min,
                        "b_sub": list(rep.b_sub),
                        "clarke_sub": list(rep.clarke_sub)})
        report["points"] = pts
    elif cfg.get("model") and cfg.get("dataset"):
        try:
            with open(cfg["model"]) as fh:
                model = pwa.PWAModel.from_json(json.load(fh))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise ConfigError(f"model: {exc}") from exc
        dataset = _load_dataset(cfg)
        cfg2 = {**cfg, "k1": model.k1, "k2": model.k2}
        problem = _problem(cfg2, dataset)
        comp = pwa.assemble(problem)
        c = cfg["c"]
        if c is None:
            c = 1e-2 * (1.0 + float(np.mean(dataset.y ** 2)))
        res, _, cov = stationarity.dstat_residual(comp, model.flatten(), c,
                                                  int(cfg["combo_cap"]),
                                                  seed=int(cfg["seed"]))
        report.update({"dstat_residual": res, "coverage": cov,
                       "objective": comp.f_N(model.flatten())})
    else:
        raise ConfigError("check needs either 'pwa1d' or 'model' + 'dataset'")
    with open(os.path.join(out, "check.json"), "w") as fh:
        json.dump(report, fh, indent=1)
    return 0


def cmd_bench(cfg: dict, out: str, threads: int) -> int:
    os.makedirs(out, exist_ok=True)
    rows = []
    for i, entry in enumerate(cfg["runs"]):
        run_cfg = _validate(entry, {"name": f"run{i}", **_SCHEMAS["fit"]}, "bench run")
        if run_cfg.get("init") is not None:
            run_cfg["init"] = _validate(run_cfg["init"], _INIT_KEYS, "init")
        else:
            run_cfg["init"] = dict(_INIT_KEYS)
        if run_cfg.get("synth") is not None:
            run_cfg["synth"] = _validate(run_cfg["synth"], _SYNTH_KEYS, "synth")
        dataset = _load_dataset(run_cfg)
        problem = _problem(run_cfg, dataset)
        comp = pwa.assemble(problem)
        t0 = time.perf_counter()
        results = multi_start(problem, comp, run_cfg, int(run_cfg["starts"]),
                              threads)
        _, best = _best(results)
        rows.append([run_cfg["name"], dataset.N, dataset.d, best.iterations,
                     best.sn_total, repr(best.f_N),
                     repr(time.perf_counter() - t0)])
    _write_csv(os.path.join(out, "bench.csv"),
               ["name", "N", "d", "mm_iterations", "sn_total", "objective",
                "wall_time"], rows)
    return 0


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    return obj


_COMMANDS = {"fit": cmd_fit, "cv": cmd_cv, "synth": cmd_synth,
             "check": cmd_check, "bench": cmd_bench}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="pwafit")
    ap.add_argument("command", choices=sorted(_COMMANDS))
    ap.add_argument("--config", required=True)
    ap.add_argument("--out", default=".")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config, args.command, args.seed)
        return _COMMANDS[args.command](cfg, args.out, args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
