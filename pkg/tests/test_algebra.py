import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spectralflow.algebra import (
    PAULI,
    Interaction,
    LocalOperator,
    Region,
    WeightFunction,
    commutator,
    conditional_expectation,
    dump_interaction,
    embed,
    f_norm,
    load_interaction,
    local_hamiltonian,
    locality_from_commutators,
    op_norm,
    pauli_string,
    random_local_operator,
    weight_eval,
)


def test_region_basics():
    r = Region(-2, 3)
    assert r.size == 6 and r.radius == 3 and r.diameter == 5
    assert Region.ball(2) == Region(-2, 2)
    assert Region.chain(4) == Region(0, 3)
    assert 0 in r and 4 not in r
    assert r.intersect(Region(4, 5)) is None
    assert Region(0, 1).distance(Region(4, 6)) == 3
    with pytest.raises(ValueError):
        Region(2, 1)


def test_pauli_commutator_norm():
    x, z = pauli_string([(0, "X")]), pauli_string([(0, "Z")])
    assert commutator(x, z).norm() == pytest.approx(2.0)
    assert commutator(x, pauli_string([(1, "Z")])).norm() == 0.0


def test_pauli_string_validation():
    with pytest.raises(ValueError):
        pauli_string([(0, "X"), (0, "Z")])
    with pytest.raises(ValueError):
        pauli_string([(0, "Q")])
    with pytest.raises(ValueError):
        pauli_string([])
    ident = pauli_string([], region=Region(0, 1))
    assert np.allclose(ident.matrix, np.eye(4))


def test_embedding_ordering():
    zx = pauli_string([(0, "Z"), (1, "X")])
    assert np.allclose(zx.matrix, np.kron(PAULI["Z"], PAULI["X"]))
    big = embed(pauli_string([(1, "X")]), Region(0, 2))
    assert np.allclose(big.matrix, np.kron(np.kron(np.eye(2), PAULI["X"]), np.eye(2)))


def test_operator_arithmetic_auto_embeds():
    a = pauli_string([(0, "X")])
    b = pauli_string([(1, "Z")])
    s = a + b
    assert s.support == Region(0, 1)
    assert (a @ b).allclose(pauli_string([(0, "X"), (1, "Z")]))
    assert (2 * a - a).allclose(a)


def test_op_norm_paths_agree():
    rng = np.random.default_rng(0)
    for n in (8, 300):
        m = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        h = m + m.conj().T
        ref = np.linalg.norm(m, 2)
        assert op_norm(m) == pytest.approx(ref, rel=1e-12)
        assert op_norm(h) == pytest.approx(np.max(np.abs(np.linalg.eigvalsh(h))), rel=1e-12)
        assert op_norm(1j * h) == pytest.approx(op_norm(h), rel=1e-12)


def test_conditional_expectation_examples():
    x = pauli_string([(2, "X")])
    assert conditional_expectation(x, 1).norm() == 0.0
    zz = pauli_string([(0, "Z"), (2, "Z")])
    assert conditional_expectation(zz, 1).norm() == 0.0
    a = pauli_string([(0, "Z")]) + pauli_string([(0, "X"), (2, "X")])
    assert conditional_expectation(a, 1).allclose(embed(pauli_string([(0, "Z")]), a.support))
    with pytest.raises(ValueError):
        conditional_expectation(a, -1)


@settings(max_examples=60, deadline=None)
@given(lo=st.integers(-3, 1), size=st.integers(1, 3), n=st.integers(0, 3), m=st.integers(0, 3), seed=st.integers(0, 10_000))
def test_conditional_expectation_properties(lo, size, n, m, seed):
    rng = np.random.default_rng(seed)
    a = random_local_operator(rng, Region(lo, lo + size - 1))
    en = conditional_expectation(a, n)
    assert np.allclose(conditional_expectation(en, n).matrix, en.matrix, atol=1e-12)
    both = conditional_expectation(conditional_expectation(a, n), m)
    assert np.allclose(both.matrix, conditional_expectation(a, min(n, m)).matrix, atol=1e-12)
    assert en.norm() <= a.norm() * (1 + 1e-12)
    eps, ok, dev = locality_from_commutators(a, n, max_weight=None, probe_count=100)
    assert ok and dev <= 2 * eps + 1e-12


def test_locality_golden_x_against_z():
    # ||[X_j, Z_j]|| = 2 with the probe outside Lambda_0
    eps, ok, dev = locality_from_commutators(pauli_string([(1, "X")]), 0)
    assert eps == pytest.approx(2.0)
    assert dev == pytest.approx(1.0) and ok


def test_weight_functions():
    f = WeightFunction("f")
    t = np.array([1.0, 2.0, 5.0])
    assert np.allclose(weight_eval(f, t), np.exp(-(t**0.9)) / t)
    assert np.all(np.diff(WeightFunction("g")(t)) < 0)
    with pytest.raises(ValueError):
        WeightFunction("q")
    with pytest.raises(ValueError):
        WeightFunction("f", betas=(0.5, 0.6, 0.7, 0.8, 0.9))
    with pytest.raises(ValueError):
        weight_eval(f, 0.0)


def test_f_norm_local_operator():
    a = pauli_string([(0, "X")])
    rep = f_norm(a, WeightFunction("f"))
    assert rep.f_norm == pytest.approx(1.0)
    b = pauli_string([(0, "X"), (2, "Z")])
    rep = f_norm(b, WeightFunction("f"))
    assert rep.sup_ratio == pytest.approx(1.0 / weight_eval(WeightFunction("f"), 1))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_f_norm_algebra_property(seed):
    rng = np.random.default_rng(seed)
    w = WeightFunction("f")
    a = random_local_operator(rng, Region(-2, int(rng.integers(-2, 3))))
    b = random_local_operator(rng, Region(int(rng.integers(-2, 3)), 2))
    fa, fb = f_norm(a, w, 2).f_norm, f_norm(b, w, 2).f_norm
    assert f_norm(a @ b, w, 2).f_norm <= 3 * fa * fb
    assert f_norm(a.adjoint(), w, 2).f_norm == pytest.approx(fa, rel=1e-10)


def test_two_site_tfi_spectrum():
    terms = [pauli_string([(0, "Z"), (1, "Z")], -1.0), pauli_string([(0, "X")], -1.0), pauli_string([(1, "X")], -1.0)]
    h = local_hamiltonian(Interaction(terms), Region(0, 1))
    evals = np.linalg.eigvalsh(h.matrix)
    assert np.allclose(evals, [-np.sqrt(5), -1, 1, np.sqrt(5)])


def test_interaction_validation():
    with pytest.raises(ValueError):
        Interaction([LocalOperator(Region(0, 0), np.array([[0, 1], [0, 0]]))])
    with pytest.raises(ValueError):
        Interaction([pauli_string([(0, "Z"), (2, "Z")])], range=2)


def test_interaction_json_round_trip(tmp_path):
    terms = [
        {"sites": [0, 1], "paulis": ["Z", "Z"], "coeff": [-1.0, 0.0]},
        {"sites": [0], "paulis": ["X"], "coeff": [-0.5, 0.0]},
        {"sites": [1], "paulis": ["X"], "coeff": [-0.5, 0.0]},
    ]
    doc = dump_interaction(terms, {"radius": 1, "d": 2}, range_=2)
    path = tmp_path / "inter.json"
    path.write_text(json.dumps(doc))
    inter, region = load_interaction(path)
    assert region == Region(-1, 1)
    assert inter.range == 2
    assert len(inter.terms) == 3
    with pytest.raises(ValueError):
        load_interaction({**doc, "version": 99})
