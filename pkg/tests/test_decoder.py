import numpy as np
import pytest

from moleclue import diffcore as dc
from moleclue.decoder import build_decoder_graph, decode, decode_positions, propagate, reconstruct
from moleclue.encoder import encode
from moleclue.model import TEST_DIMS, ModelParams
from moleclue.molgraph import (Conformer, NormalizationConstants, distance_dx, make_synthetic_dataset,
                               normalize_positions, rmsd, train_test_split)
from moleclue.training import TrainConfig, fit
from moleclue.uncertainty import CertificateBank


@pytest.fixture
def mol(untrained):
    ex = make_synthetic_dataset(1, 5, min_atoms=5, max_atoms=5)[0]
    h, post = encode(ex.graph, ex.conformer, untrained)
    return ex, h, post.mean_vector().data[0]


def test_graph_construction(mol, untrained):
    ex, h, z = mol
    dg = build_decoder_graph(ex.graph, h, z, untrained)
    assert dg.node_features.shape == (6, TEST_DIMS.hidden)
    assert dg.virtual_edges == [(i, 5) for i in range(5)]
    assert list(dg.supernode_index) == [5]
    assert tuple(dg.bonds) == ex.graph.bonds


def test_wrong_latent_length_rejected(mol, untrained):
    ex, h, z = mol
    with pytest.raises(ValueError):
        build_decoder_graph(ex.graph, h, z[:-1], untrained)


def test_wrong_node_count_rejected(mol, untrained):
    ex, h, z = mol
    other = make_synthetic_dataset(1, 6, min_atoms=7, max_atoms=7)[0]
    with pytest.raises(ValueError):
        build_decoder_graph(other.graph, h, z, untrained)


def test_latent_only_touches_supernode_row(mol, untrained, rng):
    ex, h, z = mol
    a = build_decoder_graph(ex.graph, h, z, untrained).node_features.data
    b = build_decoder_graph(ex.graph, h, z + rng.standard_normal(z.shape), untrained).node_features.data
    assert np.array_equal(a[:5], b[:5]) and not np.array_equal(a[5], b[5])


def test_identity_norm_gives_raw_readout(mol, untrained):
    ex, h, z = mol
    dg = build_decoder_graph(ex.graph, h, z, untrained)
    out = decode(dg, NormalizationConstants(np.zeros(3), 1.0), untrained)
    assert np.array_equal(out.positions, propagate(dg, untrained).data[:5])
    assert out.n_atoms == ex.graph.n_atoms and out.graph_id == ex.id


def test_decode_is_pure(mol, untrained):
    ex, h, z = mol
    norm = normalize_positions(ex.conformer)[1]
    dg = build_decoder_graph(ex.graph, h, z, untrained)
    assert decode(dg, norm, untrained).positions.tobytes() == decode(dg, norm, untrained).positions.tobytes()


def test_translation_moves_output_by_same_shift(untrained):
    ex = make_synthetic_dataset(1, 3)[0]
    shift = np.array([1.5, -2.0, 4.0])
    a, _ = reconstruct(ex.graph, ex.conformer, untrained)
    b, _ = reconstruct(ex.graph, Conformer(ex.id, ex.conformer.positions + shift), untrained)
    np.testing.assert_allclose(b.positions, a.positions + shift, atol=1e-10)


def test_distance_gradient_wrt_latent(mol, untrained):
    ex, h, z = mol
    norm = normalize_positions(ex.conformer)[1]
    def f(zt):
        dg = build_decoder_graph(ex.graph, h, zt, untrained)
        x = decode_positions(dg, norm.centroid.reshape(1, 3), np.array([norm.scale]), untrained)
        return dc.mean(dc.tsum(dc.square(x - ex.conformer.positions), axis=1))

    assert dc.finite_difference_check(f, z).max_rel_error < 1e-4


def test_decoder_parameter_gradients(mol, untrained, rng):
    ex, h, z = mol
    norm = normalize_positions(ex.conformer)[1]
    for name in ["dec.z.w", "dec.0.rel.virtual.w", "dec.3.ln.g", "psi2.w"]:
        def f(w):
            bp = untrained.bind()
            bp.t[name] = w
            dg = build_decoder_graph(ex.graph, h, z, bp)
            x = decode_positions(dg, norm.centroid.reshape(1, 3), np.array([norm.scale]), bp)
            return dc.tsum(dc.square(x))
        arr = untrained.arrays[name]
        coords = [tuple(int(rng.integers(s)) for s in arr.shape) for _ in range(4)]
        assert dc.finite_difference_check(f, arr, coords=coords).max_rel_error < 1e-4


def test_reconstruct_deterministic_and_finite(untrained):
    data = make_synthetic_dataset(100, 17)
    ex = data[0]
    a, da = reconstruct(ex.graph, ex.conformer, untrained)
    b, db = reconstruct(ex.graph, ex.conformer, untrained)
    assert np.array_equal(a.positions, b.positions) and da == db
    assert da == pytest.approx(distance_dx(a, ex.conformer))
    for e in data:
        assert np.isfinite(reconstruct(e.graph, e.conformer, untrained)[1])


def test_topology_never_changes(untrained):
    for ex in make_synthetic_dataset(10, 4):
        out, _ = reconstruct(ex.graph, ex.conformer, untrained, deterministic=False, seed=1)
        assert out.n_atoms == ex.graph.n_atoms and out.graph_id == ex.id


def test_training_halves_reconstruction_rmsd():
    data = make_synthetic_dataset(200, 31)
    train, test = train_test_split(data, 0.2, 0)
    ck = fit(train, TrainConfig(epochs=30, seed=2))
    base = ModelParams.init(TEST_DIMS, 2)
    trained = np.median([rmsd(reconstruct(e.graph, e.conformer, ck.params)[0], e.conformer) for e in test])
    untrained = np.median([rmsd(reconstruct(e.graph, e.conformer, base)[0], e.conformer) for e in test])
    assert trained <= 0.5 * untrained
    assert isinstance(ck.certificates, CertificateBank)
