"""Topology-preserving conformer decoder.

The latent vector enters the molecule graph as one extra "supernode" joined to
every atom by a virtual edge.  A relational graph convolution mixes it with the
encoder's node states, and a small readout maps each atom to coordinates in the
input's normalized frame.  Bonds and atoms are never added or removed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .encoder import NodeStates, encode_batch, sample_latent
from .model import RELATIONS, VIRTUAL, BoundParams, GraphBatch, ModelParams, bound
from .molgraph import (Conformer, MoleculeGraph, NormalizationConstants,
                       distance_dx, normalize_positions)


@dataclass
class DecoderGraph:
    """Node features for real atoms followed by one supernode per molecule."""
    batch: GraphBatch
    node_features: dc.Tensor  # (n + b, d)
    rel_src: np.ndarray  # directed edges, original bonds then virtual links
    rel_dst: np.ndarray
    rel_type: np.ndarray

    @property
    def supernode_index(self) -> np.ndarray:
        return self.batch.n_nodes + np.arange(self.batch.n_graphs)

    @property
    def virtual_edges(self) -> list[tuple[int, int]]:
        """Undirected (atom, supernode) pairs, one per atom."""
        sn = self.supernode_index
        return [(i, int(sn[g])) for i, g in enumerate(self.batch.node_graph)]

    @property
    def bonds(self) -> list[tuple[int, int, str]]:
        return [b for g in self.batch.graphs for b in g.bonds]


def build_decoder_graph_batch(batch: GraphBatch, h_phi: NodeStates, z: dc.Tensor, params) -> DecoderGraph:
    p: BoundParams = bound(params)
    d = p.dims
    N, B = batch.n_nodes, batch.n_graphs
    if h_phi.scalars.shape[0] != N:
        raise ValueError(f"node states cover {h_phi.scalars.shape[0]} atoms, graph has {N}")
    if z.ndim != 2 or z.shape != (B, d.latent):
        raise ValueError(f"latent must have shape ({B}, {d.latent}), got {z.shape}")
    hn = h_phi.flat() @ p["dec.node.w"] + p["dec.node.b"]
    hz = z @ p["dec.z.w"] + p["dec.z.b"]
    atoms = np.arange(N)
    sn = N + batch.node_graph
    src = np.concatenate([batch.bond_src, atoms, sn])
    dst = np.concatenate([batch.bond_dst, sn, atoms])
    rel = np.concatenate([batch.bond_rel, np.full(2 * N, VIRTUAL)])
    return DecoderGraph(batch, dc.concat([hn, hz], axis=0), src, dst, rel)


def propagate(dg: DecoderGraph, params) -> dc.Tensor:
    """Relational convolution stack followed by the coordinate readout; (n + b, 3)."""
    p: BoundParams = bound(params)
    h = dg.node_features
    total = h.shape[0]
    by_rel = [(r, np.nonzero(dg.rel_type == k)[0]) for k, r in enumerate(RELATIONS)]
    for layer in range(p.dims.decoder_layers):
        pre = f"dec.{layer}."
        acc = h @ p[pre + "self.w"] + p[pre + "b"]
        for r, idx in by_rel:
            if idx.size == 0:
                continue
            msg = dc.gather(h, dg.rel_src[idx]) @ p[pre + f"rel.{r}.w"]
            acc = acc + dc.segment_mean(msg, dg.rel_dst[idx], total)
        h = dc.layer_norm(dc.ssp(acc)) * p[pre + "ln.g"] + p[pre + "ln.b"]
    return dc.ssp(h @ p["psi1.w"] + p["psi1.b"]) @ p["psi2.w"] + p["psi2.b"]


def decode_positions(dg: DecoderGraph, centroids: np.ndarray, scales: np.ndarray, params) -> dc.Tensor:
    """Denormalized atom coordinates (n, 3) with supernode rows dropped."""
    out = propagate(dg, params)
    N = dg.batch.n_nodes
    ng = dg.batch.node_graph
    return out[:N] * np.asarray(scales)[ng].reshape(N, 1) + np.asarray(centroids)[ng]


def norm_arrays(norms) -> tuple[np.ndarray, np.ndarray]:
    return (np.array([n.centroid for n in norms]).reshape(-1, 3),
            np.array([n.scale for n in norms], dtype=np.float64))


# ---------------------------------------------------------------- single molecule


def build_decoder_graph(graph: MoleculeGraph, h_phi: NodeStates, z, params) -> DecoderGraph:
    z = z if isinstance(z, dc.Tensor) else dc.Tensor(np.asarray(z, dtype=np.float64))
    if z.ndim == 1:
        z = dc.reshape(z, (1, z.shape[0]))
    return build_decoder_graph_batch(GraphBatch.from_graphs([graph]), h_phi, z, params)


def decode(dg: DecoderGraph, norm: NormalizationConstants, params) -> Conformer:
    pos = decode_positions(dg, norm.centroid.reshape(1, 3), np.array([norm.scale]), params)
    return Conformer(dg.batch.graphs[0].id, pos.data)


def reconstruct(graph: MoleculeGraph, conformer: Conformer, params: ModelParams | BoundParams,
                deterministic: bool = True, seed: int | None = None) -> tuple[Conformer, float]:
    """Encode, sample, decode.  Returns the decoded conformer and its d_x to the input."""
    batch = GraphBatch.from_graphs([graph])
    h_phi, post = encode_batch(batch, dc.Tensor(conformer.positions), params)
    z = sample_latent(post, seed, deterministic=deterministic)
    dg = build_decoder_graph_batch(batch, h_phi, z, params)
    out = decode(dg, normalize_positions(conformer)[1], params)
    return out, distance_dx(out, conformer)
