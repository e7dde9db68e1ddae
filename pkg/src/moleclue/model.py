"""Model dimensions, parameter storage and batched graph layout."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .molgraph import BOND_INDEX, N_ELEMENT_ROWS, MoleculeGraph, element_row

# decoder relation types: the four bond types plus supernode links
RELATIONS = ("single", "double", "triple", "aromatic", "virtual")
VIRTUAL = len(RELATIONS) - 1
INIT_LOGVAR = -4.0


@dataclass(frozen=True)
class Dims:
    scalar: int = 128
    vector: int = 64
    hidden: int = 128
    certificates: int = 100
    rbf: int = 16
    rounds: int = 3
    decoder_layers: int = 4
    cutoff: float = 5.0

    @property
    def latent(self) -> int:
        return self.scalar + 3 * self.vector

    def to_dict(self) -> dict:
        return asdict(self)


FULL_DIMS = Dims()
# certificates capped below the 40-d latent so an orthonormal bank exists
TEST_DIMS = Dims(scalar=16, vector=8, hidden=32, certificates=32)


def param_shapes(d: Dims) -> dict[str, tuple[int, ...]]:
    S, V, H, Z = d.scalar, d.vector, d.hidden, d.latent
    shapes: dict[str, tuple[int, ...]] = {"enc.embed": (N_ELEMENT_ROWS, S)}
    for r in range(d.rounds):
        p = f"enc.{r}."
        shapes.update({
            p + "phi1.w": (S, S), p + "phi1.b": (S,),
            p + "phi2.w": (S, S + 2 * V), p + "phi2.b": (S + 2 * V,),
            p + "filt.w": (d.rbf, S + 2 * V), p + "filt.b": (S + 2 * V,),
            p + "mix.w": (V, V),
            p + "upd1.w": (S + V, S), p + "upd1.b": (S,),
            p + "upd2.w": (S, S + V), p + "upd2.b": (S + V,),
        })
    shapes.update({
        "enc.out1.w": (S, S), "enc.out1.b": (S,),
        "enc.out2.w": (S, 2 * S + V), "enc.out2.b": (2 * S + V,),
        "enc.mu1.w": (V, V),
        "dec.node.w": (S + 3 * V, H), "dec.node.b": (H,),
        "dec.z.w": (Z, H), "dec.z.b": (H,),
    })
    for layer in range(d.decoder_layers):
        p = f"dec.{layer}."
        shapes.update({p + "self.w": (H, H), p + "b": (H,),
                       p + "ln.g": (H,), p + "ln.b": (H,)})
        for r in RELATIONS:
            shapes[p + f"rel.{r}.w"] = (H, H)
    shapes.update({
        "psi1.w": (H, H), "psi1.b": (H,), "psi2.w": (H, 3), "psi2.b": (3,),
        "pred1.w": (Z, H), "pred1.b": (H,), "pred2.w": (H, H), "pred2.b": (H,),
        "pred.mean.w": (H, 1), "pred.mean.b": (1,), "pred.logvar.w": (H, 1), "pred.logvar.b": (1,),
    })
    return shapes


def init_arrays(d: Dims, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(d).items():
        if name.endswith(".ln.g"):
            out[name] = np.ones(shape)
        elif name == "enc.embed":
            out[name] = rng.standard_normal(shape)
        elif len(shape) == 2:
            out[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
        else:
            out[name] = np.zeros(shape)
    # start the posterior narrow so the predictor sees signal before the KL term bites
    out["enc.out2.b"][d.scalar:] = INIT_LOGVAR
    return out


@dataclass
class BoundParams:
    """Tensor view of a parameter set for one forward pass."""
    t: dict[str, dc.Tensor]
    dims: Dims
    label_mean: float = 0.0
    label_std: float = 1.0

    def __getitem__(self, name: str) -> dc.Tensor:
        return self.t[name]


@dataclass
class ModelParams:
    """Encoder, decoder, projection and predictor weights plus label scaling."""
    dims: Dims
    arrays: dict[str, np.ndarray]
    label_mean: float = 0.0
    label_std: float = 1.0

    @classmethod
    def init(cls, dims: Dims, seed: int = 0) -> ModelParams:
        return cls(dims, init_arrays(dims, seed))

    def bind(self, requires_grad: bool = False, names: Sequence[str] | None = None) -> BoundParams:
        grad_names = set(self.arrays if names is None else names) if requires_grad else set()
        t = {k: dc.Tensor(v, requires_grad=k in grad_names) for k, v in self.arrays.items()}
        return BoundParams(t, self.dims, self.label_mean, self.label_std)

    def copy(self) -> ModelParams:
        return ModelParams(self.dims, {k: v.copy() for k, v in self.arrays.items()},
                           self.label_mean, self.label_std)


def bound(params) -> BoundParams:
    return params if isinstance(params, BoundParams) else params.bind()


@dataclass
class GraphBatch:
    """Disjoint union of molecule graphs with nodes laid out molecule by molecule."""
    graphs: list[MoleculeGraph]
    atom_rows: np.ndarray
    node_graph: np.ndarray
    offsets: np.ndarray
    bond_src: np.ndarray
    bond_dst: np.ndarray
    bond_rel: np.ndarray

    @classmethod
    def from_graphs(cls, graphs: Sequence[MoleculeGraph]) -> GraphBatch:
        sizes = [g.n_atoms for g in graphs]
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        rows = np.array([element_row(a) for g in graphs for a in g.atom_types], dtype=np.int64)
        node_graph = np.repeat(np.arange(len(graphs)), sizes).astype(np.int64)
        src, dst, rel = [], [], []
        for g, off in zip(graphs, offsets[:-1]):
            for i, j, t in g.bonds:
                src += [i + off, j + off]
                dst += [j + off, i + off]
                rel += [BOND_INDEX[t]] * 2
        as_i = lambda x: np.array(x, dtype=np.int64)
        return cls(list(graphs), rows, node_graph, offsets, as_i(src), as_i(dst), as_i(rel))

    @property
    def n_nodes(self) -> int:
        return int(self.offsets[-1])

    @property
    def n_graphs(self) -> int:
        return len(self.graphs)

    def encoder_edges(self, positions: np.ndarray, cutoff: float):
        """Directed edges (src -> dst) within ``cutoff`` plus all bonds.

        Returns src, dst and a 0/1 mask marking bonded pairs.
        """
        src, dst, is_bond = [], [], []
        bond_at = np.searchsorted(self.offsets, self.bond_src, side="right") - 1
        for g, (off, end) in enumerate(zip(self.offsets[:-1], self.offsets[1:])):
            n = end - off
            if n < 2:
                continue
            p = positions[off:end]
            near = ((p[:, None, :] - p[None, :, :]) ** 2).sum(-1) < cutoff * cutoff
            adj = np.zeros((n, n), dtype=bool)
            sel = bond_at == g
            adj[self.bond_dst[sel] - off, self.bond_src[sel] - off] = True
            mask = (near | adj) & ~np.eye(n, dtype=bool)
            ii, jj = np.nonzero(mask)
            dst.append(ii + off)
            src.append(jj + off)
            is_bond.append(adj[ii, jj])
        if not src:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty, np.zeros(0)
        return (np.concatenate(src), np.concatenate(dst),
                np.concatenate(is_bond).astype(np.float64))
