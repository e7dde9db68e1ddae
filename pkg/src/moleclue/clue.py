"""Latent-space gradient descent toward low-uncertainty counterfactual conformers."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .decoder import build_decoder_graph_batch, decode_positions
from .encoder import encode_batch
from .model import GraphBatch
from .molgraph import Conformer, MoleculeGraph, normalize_positions, rmsd
from .training import Checkpoint
from .uncertainty import epistemic_u, predict_tensors

TERMS = ("L_y", "L_e", "L_a", "L_r")
MODES = ("re-encode", "direct")


@dataclass(frozen=True)
class ClueConfig:
    steps: int = 20
    clue_lr: float = 0.1
    normalize_terms: bool = True
    lambda_x: float = 1.0
    lambda_y_pred: float = 0.0
    uncertainty_mode: str = "re-encode"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.clue_lr < 0:
            raise ValueError("clue_lr must be non-negative")
        if self.uncertainty_mode not in MODES:
            raise ValueError(f"uncertainty_mode must be one of {MODES}")


@dataclass
class ClueStep:
    step: int
    z: np.ndarray
    positions: np.ndarray
    L_e: float
    L_a: float
    L_d: float
    L_r: float
    L_total: float
    L_y: float | None = None
    L_r_ref: float | None = None
    raw: dict = field(default_factory=dict)


@dataclass
class ClueTrajectory:
    id: str
    records: list[ClueStep]
    tau: float | None = None
    clue_lr: float | None = None
    normalize_terms: bool = False
    truncated: bool = False
    # topology the decoder actually ran on
    bonds: list = field(default_factory=list)

    @property
    def final(self) -> ClueStep:
        return self.records[-1]

    def curve(self, term: str) -> np.ndarray:
        return np.array([getattr(r, term) for r in self.records], dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "tau": self.tau,
            "clue_lr": self.clue_lr,
            "normalize_terms": self.normalize_terms,
            "truncated": self.truncated,
            "bonds": [list(b) for b in self.bonds],
            "steps": [{
                "step": r.step, "L_e": r.L_e, "L_a": r.L_a, "L_d": r.L_d, "L_r": r.L_r,
                "L_y": r.L_y, "L_total": r.L_total, "L_r_ref": r.L_r_ref,
                "raw": r.raw, "positions": r.positions.tolist(),
            } for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class ClueProblem:
    """Everything about one input conformer that stays fixed while z moves."""

    def __init__(self, graph: MoleculeGraph, x0: Conformer, ckpt: Checkpoint, config: ClueConfig):
        if x0.n_atoms != graph.n_atoms:
            raise ValueError(f"{graph.id}: conformer/graph atom count mismatch")
        self.graph, self.x0, self.ckpt, self.config = graph, x0, ckpt, config
        self.params = ckpt.params.bind()
        self.C = ckpt.certificates.C
        self.batch = GraphBatch.from_graphs([graph])
        self.h_phi, post = encode_batch(self.batch, dc.Tensor(x0.positions), self.params)
        self.z0 = post.mean_vector().data[0].copy()
        norm = normalize_positions(x0)[1]
        self.centroid, self.scale = norm.centroid.reshape(1, 3), np.array([norm.scale])
        self.f_x0 = float(predict_tensors(self.z0, self.params)[0].data[0])

    def decode(self, z: dc.Tensor) -> dc.Tensor:
        zb = dc.reshape(z, (1, z.shape[0]))
        dg = build_decoder_graph_batch(self.batch, self.h_phi, zb, self.params)
        self.last_bonds = dg.bonds
        return decode_positions(dg, self.centroid, self.scale, self.params)

    def raw_terms(self, z: dc.Tensor) -> tuple[dict, dc.Tensor]:
        """Un-normalized objective pieces plus the predicted mean and decoded positions."""
        x_hat = self.decode(z)
        if self.config.uncertainty_mode == "re-encode":
            _, post = encode_batch(self.batch, x_hat, self.params)
            z_eval = post.mean_vector()
        else:
            z_eval = dc.reshape(z, (1, z.shape[0]))
        mean, var = predict_tensors(z_eval, self.params)
        u_e = dc.reshape(epistemic_u(z_eval, self.C), ())
        u_a = dc.reshape(var, ())
        d_x = dc.mean(dc.tsum(dc.square(x_hat - self.x0.positions), axis=1))
        d = self.config.lambda_x * d_x
        if self.config.lambda_y_pred != 0:
            d = d + self.config.lambda_y_pred * dc.square(dc.reshape(mean, ()) - self.f_x0)
        return {"L_e": u_e, "L_a": u_a, "L_d": d, "mean": dc.reshape(mean, ())}, x_hat


def combine(raw: dict, scales: dict | None) -> tuple[dc.Tensor, dict]:
    terms = {}
    for k in ("L_e", "L_a", "L_d"):
        terms[k] = raw[k] / scales[k] if scales else raw[k]
    return terms["L_e"] + terms["L_a"] + terms["L_d"], terms


def step0_scales(raw: dict) -> dict:
    # a term that is exactly zero at step 0 is left un-normalized
    return {k: (raw[k].item() if raw[k].item() != 0 else 1.0) for k in ("L_e", "L_a", "L_d")}


def clue_objective(z, problem: ClueProblem, scales: dict | None = None):
    """Total = u_e + u_a + d, optionally each divided by its frozen step-0 value.

    Returns (total Tensor, dict of term Tensors, decoded positions Tensor).
    """
    z = dc.as_tensor(z)
    if z.shape != (problem.ckpt.dims.latent,):
        raise ValueError(f"z must have length {problem.ckpt.dims.latent}, got shape {z.shape}")
    raw, x_hat = problem.raw_terms(z)
    if problem.config.normalize_terms and scales is None:
        scales = step0_scales(raw)
    total, terms = combine(raw, scales if problem.config.normalize_terms else None)
    terms["raw"] = raw
    return total, terms, x_hat


def clue_optimize(graph: MoleculeGraph, x0: Conformer, checkpoint: Checkpoint,
                  config: ClueConfig, label: float | None = None,
                  reference: Conformer | None = None, tau: float | None = None) -> ClueTrajectory:
    """Plain gradient descent on z from the posterior mean of ``x0``.

    ``label`` and ``reference`` are only observed: they add L_y and L_r_ref
    columns to each record and never enter the gradient.
    """
    problem = ClueProblem(graph, x0, checkpoint, config)
    z = problem.z0.copy()
    scales = None
    records: list[ClueStep] = []
    truncated = False
    for t in range(config.steps + 1):
        zt = dc.Tensor(z, requires_grad=True)
        raw, x_hat = problem.raw_terms(zt)
        if config.normalize_terms and scales is None:
            scales = step0_scales(raw)
        total, terms = combine(raw, scales if config.normalize_terms else None)
        if not np.isfinite(total.item()) or not np.all(np.isfinite(x_hat.data)):
            truncated = True
            break
        pos = x_hat.data.copy()
        pred = raw["mean"].item()
        records.append(ClueStep(
            step=t, z=z.copy(), positions=pos,
            L_e=terms["L_e"].item(), L_a=terms["L_a"].item(), L_d=terms["L_d"].item(),
            L_r=rmsd(pos, x0.positions), L_total=total.item(),
            L_y=None if label is None else (pred - label) ** 2,
            L_r_ref=None if reference is None else rmsd(pos, reference.positions),
            raw={"L_e": raw["L_e"].item(), "L_a": raw["L_a"].item(),
                 "L_d": raw["L_d"].item(), "pred": pred},
        ))
        if t == config.steps:
            break
        (g,) = dc.grad(total, [zt])
        if not np.all(np.isfinite(g)):
            truncated = True
            break
        z = z - config.clue_lr * g
    return ClueTrajectory(graph.id, records, tau, config.clue_lr, config.normalize_terms, truncated,
                          list(problem.last_bonds))


def initial_terms(graph: MoleculeGraph, x0: Conformer, checkpoint: Checkpoint,
                  config: ClueConfig, label: float | None = None,
                  reference: Conformer | None = None) -> dict:
    """Step-0 values of every rankable term for one molecule."""
    problem = ClueProblem(graph, x0, checkpoint, config)
    raw, x_hat = problem.raw_terms(dc.Tensor(problem.z0))
    out = {"id": graph.id, "L_e": raw["L_e"].item(), "L_a": raw["L_a"].item(),
           "L_r": rmsd(x_hat.data, x0.positions), "pred": raw["mean"].item()}
    out["L_y"] = (out["pred"] - label) ** 2 if label is not None else float("nan")
    if reference is not None:
        out["L_r_ref"] = rmsd(x_hat.data, reference.positions)
    return out


def rank_worst(evaluations: Sequence[dict], term: str, fraction: float) -> list[str]:
    """Ids of the top ``ceil(fraction * n)`` molecules by descending ``term``; ties by id."""
    if term not in TERMS:
        raise ValueError(f"unknown term {term!r}; expected one of {TERMS}")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    n = len(evaluations)
    k = min(n, math.ceil(fraction * n - 1e-9))
    ranked = sorted(evaluations, key=lambda e: (-e[term], e["id"]))
    return [e["id"] for e in ranked[:k]]
