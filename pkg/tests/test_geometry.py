"""Geometry oracles: Kabsch, TM-score, parsers, synthetic backbones."""

import numpy as np
import pytest

from bitfold import geometry as geo
from bitfold import kernels
from bitfold.errors import DegenerateInput, LengthMismatch, MissingAtom, ParseError, SpecInvalid


def make_structure(seed=0, length=20, chains=1):
    s, _ = geo.synth_backbone(geo.SynthSpec(length=length, chains=chains), seed=seed)
    return s


def test_kabsch_self_alignment():
    s = make_structure(0)
    res = geo.kabsch_align(s, s)
    assert res.rmsd < 1e-9
    np.testing.assert_allclose(res.rotation, np.eye(3), atol=1e-9)


def test_kabsch_rigid_invariance():
    rng = np.random.default_rng(1)
    s = make_structure(1)
    moved = s.transformed(geo.random_rotation(rng), rng.normal(size=3) * 50)
    assert geo.kabsch_align(moved, s).rmsd < 1e-9


def test_kabsch_proper_rotation():
    rng = np.random.default_rng(2)
    a = make_structure(2)
    b = make_structure(3)
    res = geo.kabsch_align(a, b)
    assert abs(np.linalg.det(res.rotation) - 1.0) < 1e-9
    np.testing.assert_allclose(res.rotation.T @ res.rotation, np.eye(3), atol=1e-9)
    del rng


def test_kabsch_length_mismatch():
    with pytest.raises(LengthMismatch):
        geo.kabsch_align(make_structure(0, length=20), make_structure(0, length=21))


def test_kabsch_degenerate_collinear():
    line = np.zeros((5, 4, 3))
    line[:, 1, 2] = np.arange(5) * 3.8
    s = geo.BackboneStructure(line, np.zeros(5, dtype=int))
    with pytest.raises(DegenerateInput):
        geo.kabsch_align(s, s)


def test_kabsch_symmetric_rmsd():
    a = make_structure(4)
    b = make_structure(5)
    assert abs(geo.kabsch_align(a, b).rmsd - geo.kabsch_align(b, a).rmsd) < 1e-9


def test_mirror_image_matches_so3_grid_bruteforce():
    """Reflection case: Kabsch (proper rotations only) vs an SO(3) grid scan."""
    rng = np.random.default_rng(6)
    pts = rng.normal(size=(5, 3)) * 3.0
    mirror = pts * np.array([1.0, 1.0, -1.0])
    coords_a = np.zeros((5, 4, 3))
    coords_a[:, 1] = pts
    coords_b = np.zeros((5, 4, 3))
    coords_b[:, 1] = mirror
    a = geo.BackboneStructure(coords_a, np.zeros(5, dtype=int))
    b = geo.BackboneStructure(coords_b, np.zeros(5, dtype=int))
    kabsch_rmsd = geo.kabsch_align(b, a).rmsd
    grid_rmsd = kernels.so3_grid_min_rmsd(mirror, pts, step_deg=2.0)
    assert kabsch_rmsd <= grid_rmsd + 1e-9  # Kabsch is the true minimum
    assert abs(kabsch_rmsd - grid_rmsd) < 0.15  # within 2-degree grid resolution


def test_tm_score_identity():
    s = make_structure(7, length=30)
    assert geo.tm_score(s, s) == 1.0


def test_tm_d0_value():
    assert abs(geo.tm_d0(30) - (1.24 * 15 ** (1 / 3) - 1.8)) < 1e-12
    assert abs(geo.tm_d0(30) - 1.258) < 1e-3
    assert geo.tm_d0(10) == 0.5


def test_tm_score_every_distance_at_d0():
    # direct formula check: every d_i == d0 gives score 0.5
    n = 30
    d0 = geo.tm_d0(n)
    assert abs(np.mean(1.0 / (1.0 + (np.full(n, d0) / d0) ** 2)) - 0.5) < 1e-12


def test_tm_score_rigid_invariance():
    rng = np.random.default_rng(8)
    a = make_structure(8, length=40)
    b = make_structure(9, length=40)
    base = geo.tm_score(a, b)
    moved = a.transformed(geo.random_rotation(rng), rng.normal(size=3) * 20)
    assert abs(geo.tm_score(moved, b) - base) < 1e-9


def test_rmsd_invariant_under_rigid_transform():
    rng = np.random.default_rng(9)
    a = make_structure(10, length=25)
    b = make_structure(11, length=25)
    base = geo.rmsd(a, b)
    moved = b.transformed(geo.random_rotation(rng), rng.normal(size=3) * 20)
    assert abs(geo.rmsd(a, moved) - base) < 1e-9


def test_kabsch_not_worse_than_unaligned():
    a = make_structure(12)
    b = make_structure(13)
    unaligned = np.sqrt(((a.ca() - b.ca()) ** 2).sum() / len(a))
    assert geo.rmsd(a, b) <= unaligned + 1e-12


# -- serialization ----------------------------------------------------------

def test_native_roundtrip_bit_exact():
    s = make_structure(14)
    again = geo.parse_backbone(geo.write_backbone(s), "native")
    np.testing.assert_array_equal(again.coords, s.coords)
    np.testing.assert_array_equal(again.chain_ids, s.chain_ids)


def test_native_two_residue_file():
    text = "BKB v1 L=2\n0  " + "  ".join(["0.0 0.0 0.0"] * 4) + "\n0  " + "  ".join(["1.0 2.0 3.0"] * 4) + "\n"
    s = geo.parse_backbone(text, "native")
    assert len(s) == 2
    assert s.coords[1, 1, 2] == 3.0


def test_native_parse_error_carries_line_number():
    text = "BKB v1 L=1\n0  " + "  ".join(["0.0 0.0 xyz"] + ["0.0 0.0 0.0"] * 3) + "\n"
    with pytest.raises(ParseError) as exc:
        geo.parse_backbone(text, "native")
    assert exc.value.line_no == 2


def _pdb_line(serial, name, chain, resseq, x, y, z):
    return (
        f"ATOM  {serial:>5} {name:<4} ALA {chain}{resseq:>4}    "
        f"{x:8.3f}{y:8.3f}{z:8.3f}  1.00  0.00           C"
    )


def test_pdb_subset_three_residues():
    lines = []
    serial = 1
    for r in range(1, 4):
        for k, name in enumerate(geo.ATOM_NAMES):
            lines.append(_pdb_line(serial, name, "A", r, r * 3.8, k * 1.0, 0.0))
            serial += 1
    lines.append("HETATM    1  X   HOH A 999       0.000   0.000   0.000")
    s = geo.parse_backbone("\n".join(lines), "pdb-subset")
    assert len(s) == 3
    assert s.coords[2, 0, 0] == pytest.approx(3 * 3.8)


def test_pdb_missing_atom_rejected():
    lines = [_pdb_line(i + 1, name, "A", 1, 0.0, i, 0.0) for i, name in enumerate(("N", "CA", "C"))]
    with pytest.raises(MissingAtom):
        geo.parse_backbone("\n".join(lines), "pdb-subset")


def test_pdb_chain_ids_honored():
    lines = []
    serial = 1
    for chain in ("A", "B"):
        for r in range(1, 3):
            for name in geo.ATOM_NAMES:
                lines.append(_pdb_line(serial, name, chain, r, serial * 1.0, 0.0, 0.0))
                serial += 1
    s = geo.parse_backbone("\n".join(lines), "pdb-subset")
    assert list(s.chain_ids) == [0, 0, 1, 1]


# -- synthetic data ---------------------------------------------------------

def test_synth_deterministic():
    spec = geo.SynthSpec(length=30, chains=1)
    a, seq_a = geo.synth_backbone(spec, seed=7)
    b, seq_b = geo.synth_backbone(spec, seed=7)
    np.testing.assert_array_equal(a.coords, b.coords)
    np.testing.assert_array_equal(seq_a, seq_b)


def test_synth_helix_ca_distances():
    spec = geo.SynthSpec(length=12, segments=[("helix", 12)])
    s, _ = geo.synth_backbone(spec, seed=1)
    d = np.linalg.norm(np.diff(s.ca(), axis=0), axis=1)
    assert np.all(np.abs(d - 3.8) < 0.3)


def test_synth_consecutive_ca_within_band():
    for seed in range(5):
        s, _ = geo.synth_backbone(geo.SynthSpec(length=60), seed=seed)
        d = np.linalg.norm(np.diff(s.ca(), axis=0), axis=1)
        assert d.min() >= 2.0 and d.max() <= 4.5


def test_synth_two_chains():
    s, seq = geo.synth_backbone(geo.SynthSpec(length=15, chains=2), seed=3)
    assert len(s) == 30
    assert set(s.chain_ids) == {0, 1}
    assert len(seq) == 30
    inter = np.linalg.norm(s.ca()[:15, None] - s.ca()[None, 15:], axis=-1).min()
    assert 5.0 <= inter <= 15.0


def test_synth_spec_invalid():
    with pytest.raises(SpecInvalid):
        geo.synth_backbone(geo.SynthSpec(length=4), seed=0)
    with pytest.raises(SpecInvalid):
        geo.synth_backbone(geo.SynthSpec(length=600), seed=0)


def test_so3_grid_backends_agree():
    rng = np.random.default_rng(10)
    p = rng.normal(size=(5, 3))
    q = rng.normal(size=(5, 3))
    prev = kernels.backend()
    try:
        kernels.set_backend("numpy")
        a = kernels.so3_grid_min_rmsd(p, q, step_deg=15.0)
        kernels.set_backend("numba")
        b = kernels.so3_grid_min_rmsd(p, q, step_deg=15.0)
    finally:
        kernels.set_backend(prev)
    assert abs(a - b) < 1e-9
