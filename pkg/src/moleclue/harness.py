"""Contamination sweeps: train, rank worst molecules, run CLUE, aggregate, report."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import shutil
import xml.etree.ElementTree as ET
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .clue import TERMS, ClueConfig, clue_optimize, initial_terms, rank_worst
from .molgraph import (LabeledExample, contaminate, make_synthetic_dataset, parse_dataset,
                       train_test_split)
from .training import Checkpoint, TrainConfig, fit, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


def _default_train() -> TrainConfig:
    # desk-scale default; the full 200-epoch schedule is available via config
    return TrainConfig(epochs=30)


@dataclass(frozen=True)
class SweepConfig:
    taus: tuple[float, ...] = (0.0, 0.01, 0.1, 1.0)
    clue_lrs: tuple[float, ...] = (1.0, 0.1, 0.01)
    repeats: int = 3
    fraction: float = 0.10
    normalize_terms: bool = True
    train: TrainConfig = field(default_factory=_default_train)
    clue: ClueConfig = field(default_factory=ClueConfig)
    seed: int = 0
    n_molecules: int = 200
    test_fraction: float = 0.2
    dataset: str | None = None
    workers: int = 1

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if any(t < 0 for t in self.taus):
            raise ValueError("taus must be non-negative")
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction must be in (0, 1]")
        object.__setattr__(self, "taus", tuple(float(t) for t in self.taus))
        object.__setattr__(self, "clue_lrs", tuple(float(x) for x in self.clue_lrs))

    def run_seed(self, repeat: int) -> int:
        return self.seed + repeat

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        d["taus"], d["clue_lrs"] = list(self.taus), list(self.clue_lrs)
        return d


def _tag(x: float) -> str:
    return f"{x:g}"


def _cell_dir(out: Path, repeat: int, tau: float) -> Path:
    return out / f"run-{repeat}" / f"tau-{_tag(tau)}"


def traj_name(mol_id: str, lr: float) -> str:
    return f"{mol_id}__lr-{_tag(lr)}.json"


def _contam_seed(seed: int, tau: float, index: int) -> int:
    ss = np.random.SeedSequence([seed, int(round(tau * 1e6)), index])
    return int(ss.generate_state(1)[0])


def load_examples(config: SweepConfig, seed: int) -> tuple[list[LabeledExample], list[LabeledExample]]:
    if config.dataset:
        data = parse_dataset(config.dataset)
    else:
        data = make_synthetic_dataset(config.n_molecules, seed)
    return train_test_split(data, config.test_fraction, seed)


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True, indent=1))
    tmp.replace(path)


def run_cell(config: SweepConfig, ckpt: Checkpoint, test: list[LabeledExample],
             repeat: int, tau: float, out: Path) -> dict:
    """One (repeat, tau) cell: contaminate, evaluate, rank, optimize."""
    cell = _cell_dir(out, repeat, tau)
    done = cell / "cell.json"
    if done.exists():
        return json.loads(done.read_text())
    seed = config.run_seed(repeat)
    ccfg = replace(config.clue, normalize_terms=config.normalize_terms)
    noisy = [contaminate(e.conformer, tau, _contam_seed(seed, tau, i)) for i, e in enumerate(test)]
    evals = [initial_terms(e.graph, x, ckpt, ccfg, e.label, reference=e.conformer)
             for e, x in zip(test, noisy)]
    _write_json(cell / "evaluations.json", evals)
    selections = {t: rank_worst(evals, t, config.fraction) for t in TERMS}
    chosen = sorted(set().union(*selections.values()))
    by_id = {e.id: (i, e) for i, e in enumerate(test)}
    files = []
    for lr in config.clue_lrs:
        cfg = replace(ccfg, clue_lr=lr)
        for mol_id in chosen:
            i, e = by_id[mol_id]
            traj = clue_optimize(e.graph, noisy[i], ckpt, cfg, label=e.label,
                                 reference=e.conformer, tau=tau)
            name = traj_name(mol_id, lr)
            _write_json(cell / "traj" / name, traj.to_dict())
            files.append(name)
    info = {"repeat": repeat, "seed": seed, "tau": tau, "status": "done",
            "selections": selections, "trajectories": files}
    _write_json(done, info)
    return info


def _train_run(config: SweepConfig, repeat: int, out: Path):
    seed = config.run_seed(repeat)
    train, test = load_examples(config, seed)
    path = out / f"run-{repeat}" / "checkpoint.bin"
    if path.exists():
        ckpt = load_checkpoint(path, config.train.dims)
    else:
        ckpt = fit(train, replace(config.train, seed=seed))
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, path)
    return ckpt, test, path


def run_sweep(config: SweepConfig, out: str | Path) -> dict:
    """Run every (repeat, tau) cell, skipping cells already completed in ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"config": config.to_dict(), "runs": []}
    for r in range(config.repeats):
        run = {"repeat": r, "seed": config.run_seed(r), "checkpoint": f"run-{r}/checkpoint.bin",
               "cells": []}
        try:
            ckpt, test, _ = _train_run(config, r, out)
        except Exception as exc:  # recorded, later cells of this run are skipped
            log.exception("training failed for repeat %d", r)
            run["status"] = f"failed: {exc}"
            manifest["runs"].append(run)
            continue
        run["status"] = "done"

        def job(tau, r=r, ckpt=ckpt, test=test):
            try:
                return run_cell(config, ckpt, test, r, tau, out)
            except Exception as exc:
                log.exception("cell repeat=%d tau=%g failed", r, tau)
                return {"repeat": r, "tau": tau, "status": f"failed: {exc}"}

        if config.workers > 1:
            with ThreadPoolExecutor(config.workers) as pool:
                cells = list(pool.map(job, config.taus))
        else:
            cells = [job(t) for t in config.taus]
        for c in cells:
            run["cells"].append({k: c[k] for k in ("tau", "status")} |
                                {"dir": f"run-{r}/tau-{_tag(c['tau'])}"})
        manifest["runs"].append(run)
    _write_json(out / MANIFEST, manifest)
    return manifest


# ---------------------------------------------------------------- aggregation


@dataclass
class AggregatedCurves:
    taus: list[float]
    clue_lrs: list[float]
    steps: int
    cells: dict  # (term, tau, lr) -> (mean array, std array, n_repeats)

    def get(self, term: str, tau: float, lr: float):
        return self.cells.get((term, float(tau), float(lr)))


def minmax(curve: np.ndarray) -> np.ndarray:
    lo, hi = float(np.min(curve)), float(np.max(curve))
    if hi == lo:
        return np.zeros_like(curve)
    return (curve - lo) / (hi - lo)


def _load_traj(path: Path) -> dict | None:
    return json.loads(path.read_text()) if path.exists() else None


def _term_curve(traj: dict, term: str) -> np.ndarray | None:
    vals = [s[term] for s in traj["steps"]]
    if any(v is None for v in vals):
        return None
    return np.array(vals, dtype=np.float64)


def aggregate_curves(results: str | Path, normalize_first: bool = False) -> AggregatedCurves:
    """Mean over selected molecules, min-max per run, then mean and std over runs.

    ``normalize_first`` min-max normalizes each molecule's curve before the
    molecule mean instead.
    """
    results = Path(results)
    manifest = json.loads((results / MANIFEST).read_text())
    cfg = manifest["config"]
    taus, lrs = [float(t) for t in cfg["taus"]], [float(x) for x in cfg["clue_lrs"]]
    steps = int(cfg["clue"]["steps"])
    per_cell: dict = {}
    for run in manifest["runs"]:
        for cell in run.get("cells", []):
            if cell["status"] != "done":
                continue
            cdir = results / cell["dir"]
            info = json.loads((cdir / "cell.json").read_text())
            for term in TERMS:
                ids = info["selections"][term]
                for lr in lrs:
                    curves = []
                    for mol_id in ids:
                        traj = _load_traj(cdir / "traj" / traj_name(mol_id, lr))
                        c = None if traj is None else _term_curve(traj, term)
                        if c is not None and len(c) == steps + 1:
                            curves.append(minmax(c) if normalize_first else c)
                    if not curves:
                        continue
                    per_cell.setdefault((term, float(cell["tau"]), lr), []).append(
                        minmax(np.mean(curves, axis=0)))
    cells = {k: (np.mean(v, axis=0), np.std(v, axis=0), len(v)) for k, v in per_cell.items()}
    return AggregatedCurves(taus, lrs, steps, cells)


# ---------------------------------------------------------------- reporting


def curves_csv(curves: AggregatedCurves) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["term", "tau", "clue_lr", "step", "mean", "std"])
    for term in TERMS:
        for tau in curves.taus:
            for lr in curves.clue_lrs:
                cell = curves.get(term, tau, lr)
                if cell is None:
                    continue
                mean, std, _ = cell
                for s in range(len(mean)):
                    w.writerow([term, repr(tau), repr(lr), s, repr(float(mean[s])), repr(float(std[s]))])
    return buf.getvalue()


PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")


def render_svg(curves: AggregatedCurves, term: str, lr: float) -> str:
    W, H, pad = 480, 320, 50
    steps = max(curves.steps, 1)
    sx = lambda s: pad + (W - 2 * pad) * s / steps
    sy = lambda y: H - pad - (H - 2 * pad) * y
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(W), height=str(H),
                     viewBox=f"0 0 {W} {H}")
    ET.SubElement(svg, "text", x=str(W / 2), y="20", attrib={"text-anchor": "middle"}).text = \
        f"{term}, clue_lr={_tag(lr)}"
    ET.SubElement(svg, "line", x1=str(pad), y1=str(H - pad), x2=str(W - pad), y2=str(H - pad),
                  stroke="black")
    ET.SubElement(svg, "line", x1=str(pad), y1=str(pad), x2=str(pad), y2=str(H - pad), stroke="black")
    ET.SubElement(svg, "text", x=str(W / 2), y=str(H - 12), attrib={"text-anchor": "middle"}).text = "step"
    ET.SubElement(svg, "text", x="12", y=str(H / 2),
                  transform=f"rotate(-90 12 {H / 2})", attrib={"text-anchor": "middle"}).text = "normalized loss"
    for i, tau in enumerate(curves.taus):
        cell = curves.get(term, tau, lr)
        if cell is None:
            continue
        mean, std, _ = cell
        color = PALETTE[i % len(PALETTE)]
        xs = [sx(s) for s in range(len(mean))]
        upper = [f"{x:.2f},{sy(min(1.0, m + d)):.2f}" for x, m, d in zip(xs, mean, std)]
        lower = [f"{x:.2f},{sy(max(0.0, m - d)):.2f}" for x, m, d in zip(xs, mean, std)]
        ET.SubElement(svg, "polygon", points=" ".join(upper + lower[::-1]), fill=color,
                      attrib={"fill-opacity": "0.2", "stroke": "none"})
        ET.SubElement(svg, "polyline", points=" ".join(f"{x:.2f},{sy(m):.2f}" for x, m in zip(xs, mean)),
                      fill="none", stroke=color, attrib={"data-tau": _tag(tau)})
        ly = pad + 16 * i
        ET.SubElement(svg, "line", x1=str(W - pad - 70), y1=str(ly), x2=str(W - pad - 50), y2=str(ly),
                      stroke=color)
        ET.SubElement(svg, "text", x=str(W - pad - 45), y=str(ly + 4)).text = f"tau={_tag(tau)}"
    return ET.tostring(svg, encoding="unicode")


def improvement_fractions(results: str | Path) -> dict:
    """(tau, lr) -> (improved, total) over every stored trajectory."""
    results = Path(results)
    manifest = json.loads((results / MANIFEST).read_text())
    counts: dict = {}
    for run in manifest["runs"]:
        for cell in run.get("cells", []):
            if cell["status"] != "done":
                continue
            for f in sorted((results / cell["dir"] / "traj").glob("*.json")):
                traj = json.loads(f.read_text())
                key = (float(traj["tau"]), float(traj["clue_lr"]))
                first, last = traj["steps"][0]["L_total"], traj["steps"][-1]["L_total"]
                good, total = counts.get(key, (0, 0))
                counts[key] = (good + int(last < first), total + 1)
    return counts


def emit_report(curves: AggregatedCurves, results: str | Path, out: str | Path | None = None) -> Path:
    results = Path(results)
    out = Path(out) if out else results / "report"
    out.mkdir(parents=True, exist_ok=True)
    (out / "curves.csv").write_text(curves_csv(curves))
    for term in TERMS:
        for lr in curves.clue_lrs:
            (out / f"{term}_lr-{_tag(lr)}.svg").write_text(render_svg(curves, term, lr))
    tdir = out / "trajectories"
    if tdir.exists():
        shutil.rmtree(tdir)
    for f in sorted(results.glob("run-*/tau-*/traj/*.json")):
        dest = tdir / f.relative_to(results).parent.parent / f.name
        dest.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(f, dest)
    lines = ["tau\tclue_lr\timproved\ttotal\tfraction"]
    for (tau, lr), (good, total) in sorted(improvement_fractions(results).items()):
        frac = good / total if total else math.nan
        lines.append(f"{_tag(tau)}\t{_tag(lr)}\t{good}\t{total}\t{frac:.4f}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return out
