import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flashdistill.geom import PointSet, apply_rotation, random_rotation, translate
from flashdistill.toymol import (
    ToyChemSpec,
    analyse,
    bond_matrix,
    chain_template,
    compute_metrics,
    generate_dataset,
    load_dataset,
    one_hot,
    radius_of_gyration,
    ring_template,
    save_dataset,
    size_histogram,
)

SPEC = ToyChemSpec()


def mol(types, coords):
    return PointSet(np.asarray(coords, dtype=float), one_hot(types, 2))


def test_generated_dataset_is_fully_valid():
    data = generate_dataset(SPEC, 300, (3, 7), 0)
    m = compute_metrics(data)
    assert (m.atom_stab, m.mol_stab, m.valid) == (1.0, 1.0, 1.0)
    # chain and ring families at five sizes
    assert m.valid_unique == 10 / 300
    assert set(size_histogram(data)) == {3, 4, 5, 6, 7}
    assert all(np.abs(p.com()).max() <= 1e-8 for p in data)


def test_chain_template_bonds():
    types, coords = chain_template(5, SPEC)
    b = bond_matrix(mol(types, coords), SPEC)
    expected = np.zeros((5, 5), dtype=bool)
    for i in range(4):
        expected[i, i + 1] = expected[i + 1, i] = True
    assert np.array_equal(b, expected)


def test_ring_radius_of_gyration():
    # regular hexagon: every atom sits at radius = side
    types, coords = ring_template(6, SPEC)
    assert abs(radius_of_gyration(mol(types, coords)) - 1.8) <= 1e-12


def test_dimer_radius_of_gyration():
    types, coords = chain_template(2, SPEC)
    assert abs(radius_of_gyration(mol(types, coords)) - 0.5) <= 1e-12


def test_missing_terminal_atom_breaks_stability():
    types, coords = chain_template(4, SPEC)
    info = analyse(mol(types[:3], coords[:3]), SPEC)
    assert not info["mol_stable"] and not info["valid"]
    assert info["n_stable_atoms"] == 2


def test_two_far_dimers_are_stable_but_invalid():
    p = mol([0, 0, 0, 0], [[0, 0, 0], [1, 0, 0], [10, 0, 0], [11, 0, 0]])
    info = analyse(p, SPEC)
    assert info["mol_stable"] and not info["valid"]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 7), st.booleans())
def test_analysis_invariant_to_pose_and_order(seed, n, ring):
    rng = np.random.default_rng(seed)
    types, coords = (ring_template if ring else chain_template)(n, SPEC)
    p = mol(types, coords)
    perm = rng.permutation(n)
    q = translate(apply_rotation(PointSet(p.coords[perm], p.feats[perm]), random_rotation(rng)), rng.standard_normal(3))
    a, b = analyse(p, SPEC), analyse(q, SPEC)
    assert a == b
    assert a["valid"]


def test_feature_scale_does_not_change_decoding():
    types, coords = chain_template(5, SPEC)
    p = mol(types, coords)
    assert analyse(p, SPEC) == analyse(PointSet(p.coords, 0.25 * p.feats), SPEC)


def test_round_trip(tmp_path):
    data = generate_dataset(SPEC, 12, (2, 6), 3)
    save_dataset(data, tmp_path / "d.xyz")
    back = load_dataset(tmp_path / "d.xyz")
    assert len(back) == 12
    for a, b in zip(data, back):
        assert np.allclose(a.coords, b.coords, atol=1e-9)
        assert np.array_equal(a.feats, b.feats)
    assert compute_metrics(back) == compute_metrics(data)


def test_validation_errors():
    with pytest.raises(ValueError):
        generate_dataset(SPEC, 1, (1, 3), 0)
    with pytest.raises(ValueError):
        generate_dataset(SPEC, 1, (3, 10), 0)
    with pytest.raises(ValueError):
        ToyChemSpec(bond_table={(0, 0): (0.9, 1.4), (0, 1): (1.3, 1.5), (1, 1): (1.7, 1.9)})
    with pytest.raises(ValueError):
        compute_metrics([])
    with pytest.raises(ValueError):
        ring_template(2, SPEC)


def test_generation_is_seeded():
    a = generate_dataset(SPEC, 5, (3, 7), 11)
    b = generate_dataset(SPEC, 5, (3, 7), 11)
    assert all(np.array_equal(x.coords, y.coords) for x, y in zip(a, b))


def test_uniqueness_counts_distinct_valid_graphs():
    chain = mol(*chain_template(4, SPEC))
    ring = mol(*ring_template(4, SPEC))
    broken = mol([0, 0, 0], [[0, 0, 0], [5, 0, 0], [9, 0, 0]])
    m = compute_metrics([chain, chain, ring, broken])
    assert m.valid == 0.75 and m.valid_unique == 0.5
    assert abs(m.uniqueness - 2 / 3) <= 1e-15
    assert compute_metrics([broken]).uniqueness == 0.0
