"""Rotation-equivariant message-passing encoder with level-separated latents.

Node features carry scalar (L=0) channels of shape (n, s) and vector (L=1)
channels stored as (n, 3, v) so that channel mixing is a right matmul and a
rotation R acts as a left matmul on the spatial axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .model import BoundParams, GraphBatch, ModelParams, bound
from .molgraph import Conformer, MoleculeGraph

LOGVAR_MIN, LOGVAR_MAX = -20.0, 10.0
# neighbour sums are scaled by a constant, not divided by degree, so counts stay visible
AGG_SCALE = 1.0 / 8.0


@dataclass
class NodeStates:
    scalars: dc.Tensor  # (n, s)
    vec: dc.Tensor  # (n, 3, v)

    @property
    def vectors(self) -> np.ndarray:
        """Vector features as (n, v, 3)."""
        return np.swapaxes(self.vec.data, 1, 2)

    def flat(self) -> dc.Tensor:
        n, _, v = self.vec.shape
        return dc.concat([self.scalars, dc.reshape(dc.swapaxes(self.vec, 1, 2), (n, 3 * v))], axis=1)


@dataclass
class LatentPosterior:
    """Per-level Gaussian posterior; the leading axis indexes molecules."""
    mu0: dc.Tensor  # (b, s)
    logvar0: dc.Tensor  # (b, s)
    mu1: dc.Tensor  # (b, 3, v)
    logvar1: dc.Tensor  # (b, v)

    @property
    def n(self) -> int:
        return self.mu0.shape[0]

    def mean_vector(self) -> dc.Tensor:
        return flatten_latent(self.mu0, self.mu1)


def flatten_latent(z0: dc.Tensor, z1: dc.Tensor) -> dc.Tensor:
    """Concatenate z0 with z1 laid out as (v, 3), row-major, per molecule."""
    b, _, v = z1.shape
    return dc.concat([z0, dc.reshape(dc.swapaxes(z1, 1, 2), (b, 3 * v))], axis=1)


def split_latent(z: np.ndarray, s: int, v: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of ``flatten_latent`` for one vector: (s,), (v, 3)."""
    z = np.asarray(z)
    return z[:s], z[s:s + 3 * v].reshape(v, 3)


def _rbf(d: dc.Tensor, n: int, cutoff: float) -> dc.Tensor:
    centers = np.linspace(0.0, cutoff, n)
    gamma = 1.0 / (2.0 * (centers[1] - centers[0]) ** 2)
    return dc.exp(-gamma * dc.square(d - centers))


def encode_batch(batch: GraphBatch, positions: dc.Tensor, params) -> tuple[NodeStates, LatentPosterior]:
    p: BoundParams = bound(params)
    d = p.dims
    S, V, N = d.scalar, d.vector, batch.n_nodes
    src, dst, is_bond = batch.encoder_edges(positions.data, d.cutoff)
    E = len(src)

    s = dc.gather(p["enc.embed"], batch.atom_rows)
    vec = dc.Tensor(np.zeros((N, 3, V)))
    if E:
        rel = dc.gather(positions, src) - dc.gather(positions, dst)
        dist = dc.norm(rel, axis=1, keepdims=True)
        unit = dc.reshape(rel / dist, (E, 3, 1))
        # smooth cosine envelope for non-bonded pairs; bonded pairs always count fully
        is_bond = is_bond.reshape(E, 1)
        env = is_bond + (1.0 - is_bond) * 0.5 * (dc.cos(dist * (np.pi / d.cutoff)) + 1.0)
        rbf = _rbf(dist, d.rbf, d.cutoff)

    for r in range(d.rounds):
        w = lambda k: p[f"enc.{r}.{k}"]
        if E:
            phi = dc.ssp(s @ w("phi1.w") + w("phi1.b")) @ w("phi2.w") + w("phi2.b")
            filt = (rbf @ w("filt.w") + w("filt.b")) * env
            m = dc.gather(phi, src) * filt
            ms, md, mv = m[:, :S], m[:, S:S + V], m[:, S + V:]
            s = s + dc.scatter_add(ms, dst, N) * AGG_SCALE
            vmsg = unit * dc.reshape(md, (E, 1, V)) + dc.gather(vec, src) * dc.reshape(mv, (E, 1, V))
            vec = vec + dc.scatter_add(vmsg, dst, N) * AGG_SCALE
        mixed = vec @ w("mix.w")
        vnorm = dc.norm(mixed, axis=1)
        a = dc.ssp(dc.concat([s, vnorm], axis=1) @ w("upd1.w") + w("upd1.b")) @ w("upd2.w") + w("upd2.b")
        s = s + a[:, :S]
        vec = vec + dc.reshape(a[:, S:], (N, 1, V)) * mixed

    B = batch.n_graphs
    ps = dc.segment_mean(s, batch.node_graph, B)
    pv = dc.segment_mean(vec, batch.node_graph, B)
    h = dc.ssp(ps @ p["enc.out1.w"] + p["enc.out1.b"]) @ p["enc.out2.w"] + p["enc.out2.b"]
    post = LatentPosterior(
        mu0=h[:, :S],
        logvar0=dc.clip(h[:, S:2 * S], LOGVAR_MIN, LOGVAR_MAX),
        mu1=pv @ p["enc.mu1.w"],
        logvar1=dc.clip(h[:, 2 * S:], LOGVAR_MIN, LOGVAR_MAX),
    )
    return NodeStates(s, vec), post


def encode(graph: MoleculeGraph, conformer: Conformer, params: ModelParams | BoundParams):
    """Encode one molecule; relative coordinates make the result translation invariant."""
    if conformer.n_atoms != graph.n_atoms:
        raise ValueError(f"{graph.id}: conformer has {conformer.n_atoms} atoms, graph {graph.n_atoms}")
    batch = GraphBatch.from_graphs([graph])
    return encode_batch(batch, dc.Tensor(conformer.positions), params)


def sample_latent(post: LatentPosterior, seed: int | np.random.Generator | None = None,
                  deterministic: bool = False) -> dc.Tensor:
    """Reparameterized draw from each level; returns z of shape (b, s + 3v)."""
    if deterministic:
        return post.mean_vector()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    b, s = post.mu0.shape
    v = post.logvar1.shape[1]
    eps0 = rng.standard_normal((b, s))
    # drawn as (v, 3) per molecule, then moved to the internal (3, v) layout
    eps1 = np.swapaxes(rng.standard_normal((b, v, 3)), 1, 2)
    lv0 = dc.clip(post.logvar0, LOGVAR_MIN, LOGVAR_MAX)
    lv1 = dc.clip(post.logvar1, LOGVAR_MIN, LOGVAR_MAX)
    z0 = post.mu0 + dc.exp(0.5 * lv0) * eps0
    z1 = post.mu1 + dc.reshape(dc.exp(0.5 * lv1), (b, 1, v)) * eps1
    return flatten_latent(z0, z1)


def kl_divergence(post: LatentPosterior) -> dc.Tensor:
    """KL(q || N(0, I)) per molecule, shape (b,).  Each vector channel has 3 components."""
    k0 = 0.5 * dc.tsum(dc.exp(post.logvar0) + dc.square(post.mu0) - 1.0 - post.logvar0, axis=1)
    k1 = 0.5 * (dc.tsum(3.0 * (dc.exp(post.logvar1) - 1.0 - post.logvar1), axis=1)
                + dc.tsum(dc.square(post.mu1), axis=(1, 2)))
    return k0 + k1
