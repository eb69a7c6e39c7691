import dataclasses

import numpy as np
import pytest
import scipy.linalg as la
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from modalfreq import LoadStep, modal_study
from modalfreq.dynamics import GOVERNOR_STATES
from modalfreq.modal import (EmptySelectionError, ModalError, eigendecompose, modal_response,
                             participation_factors, select_modes)

REF_REAL = -2.9163
REF_PAIR = complex(-0.1553, 0.1507)


def random_matrix(n, seed):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, n)) / np.sqrt(n) - 0.2 * np.eye(n)


matrices = st.builds(random_matrix, st.integers(1, 8), st.integers(0, 2 ** 32 - 1))


def well_conditioned(basis):
    return np.linalg.cond(basis.v) < 1e4


def test_diagonal_matrix():
    b = eigendecompose(np.diag([-1.0, -2.0]))
    order = np.argsort(-b.eigenvalues.real)
    np.testing.assert_allclose(b.eigenvalues[order], [-1, -2])
    np.testing.assert_allclose(np.abs(b.v), np.eye(2), atol=1e-15)
    np.testing.assert_allclose(np.abs(b.w), np.eye(2), atol=1e-15)
    np.testing.assert_allclose(participation_factors(b), np.eye(2), atol=1e-15)


def test_companion_matrix():
    b = eigendecompose(np.array([[0.0, 1.0], [-2.0, -3.0]]))
    np.testing.assert_allclose(np.sort(b.eigenvalues.real), [-2, -1], atol=1e-12)
    np.testing.assert_allclose(b.eigenvalues.imag, 0, atol=1e-12)


def test_defective_matrix_is_rejected():
    with pytest.raises(ModalError, match="defective"):
        eigendecompose(np.array([[1.0, 1.0], [0.0, 1.0]]))


def test_non_square_rejected():
    with pytest.raises(ValueError):
        eigendecompose(np.ones((2, 3)))


@settings(max_examples=60, deadline=None)
@given(matrices)
def test_biorthonormal_basis(a):
    b = eigendecompose(a)
    assume(well_conditioned(b))
    np.testing.assert_allclose(b.w.T @ b.v, np.eye(a.shape[0]), atol=1e-8)
    resid = np.linalg.norm(a @ b.v - b.v * b.eigenvalues, axis=0)
    assert np.all(resid <= 1e-8 * np.linalg.norm(b.v, axis=0))
    np.testing.assert_allclose(participation_factors(b).sum(axis=1), 1.0, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(matrices, st.integers(0, 2 ** 32 - 1))
def test_full_reconstruction_matches_expm(a, seed):
    b = eigendecompose(a)
    assume(well_conditioned(b))
    dx0 = np.random.default_rng(seed).standard_normal(a.shape[0])
    times = np.linspace(0, 3, 7)
    got = modal_response(b, dx0, range(b.n), times)
    oracle = np.column_stack([la.expm(a * t) @ dx0 for t in times])
    np.testing.assert_allclose(got, oracle, atol=1e-8)
    np.testing.assert_allclose(got[:, 0], dx0, atol=1e-8)


def test_zero_deviation_gives_zero_response():
    b = eigendecompose(random_matrix(5, 3))
    assert not np.any(modal_response(b, np.zeros(5), range(5), [0.0, 1.0, 2.0]))


def test_response_dimension_mismatch():
    b = eigendecompose(random_matrix(4, 1))
    with pytest.raises(ValueError, match="shape"):
        modal_response(b, np.zeros(3), range(4), [0.0])


def test_unpaired_mode_gives_complex_response():
    a = np.array([[0.0, 1.0], [-1.0, -0.2]])
    b = eigendecompose(a)
    with pytest.raises(ModalError, match="conjugation"):
        modal_response(b, np.array([1.0, 0.0]), [0], [0.0, 1.0])


# -- 39-bus fixture ----------------------------------------------------------

def test_spectrum_contains_reported_modes(study1):
    lam = study1.basis.eigenvalues
    assert np.min(np.abs(lam - REF_REAL)) / abs(REF_REAL) < 0.05
    assert np.min(np.abs(lam - REF_PAIR)) / abs(REF_PAIR) < 0.05
    assert np.min(np.abs(lam - REF_PAIR.conjugate())) / abs(REF_PAIR) < 0.05


def test_selection_is_one_real_and_one_pair(study1):
    modes = study1.modes
    assert (modes.n_real, modes.n_pairs, len(modes)) == (1, 1, 3)
    lam = study1.basis.eigenvalues[list(modes.indices)]
    assert np.all(np.abs(lam) <= 10)
    assert all(g > 0.001 for g in modes.governor_pf)


def test_selected_modes_are_governor_dominated(study1):
    # summed per device: the turbine/governor block carries most of each mode
    layout = study1.layout
    gov = np.array([layout.state_kind(k) in GOVERNOR_STATES for k in range(layout.n)])
    for i in study1.modes.indices:
        p = study1.pf_matrix[i]
        assert p[gov].sum() > 0.5
    real = next(i for i, kind in zip(study1.modes.indices, study1.modes.kinds) if kind == "real")
    assert layout.state_kind(int(np.argmax(study1.pf_matrix[real]))) in GOVERNOR_STATES


def test_selected_modes_eigen_residual(study1):
    a = study1.linear.a_s
    for i in study1.modes.indices:
        v = study1.basis.v[:, i]
        lam = study1.basis.eigenvalues[i]
        assert np.linalg.norm(a @ v - lam * v) <= 1e-8 * np.linalg.norm(v) * max(1.0, np.linalg.norm(a, 2))


def test_threshold_one_selects_nothing(study1):
    with pytest.raises(EmptySelectionError, match="threshold"):
        select_modes(study1.basis, study1.pf_matrix, study1.layout, study1.weights, threshold=1.0)
    with pytest.raises(ValueError):
        select_modes(study1.basis, study1.pf_matrix, study1.layout, study1.weights, threshold=0.0)


def test_selection_invariant_to_eigenvector_scaling(study1, rng):
    b = study1.basis
    lam = b.eigenvalues
    k = rng.uniform(0.1, 10, b.n) * np.exp(1j * rng.uniform(-np.pi, np.pi, b.n))
    # conjugate modes keep conjugate eigenvectors
    for i in range(b.n):
        if lam[i].imag < 0:
            j = int(np.argmin(np.abs(lam - lam[i].conjugate())))
            k[i] = np.conj(k[j])
        elif lam[i].imag == 0:
            k[i] = k[i].real
    scaled = dataclasses.replace(b, v=b.v * k, w=b.w / k)
    pf = participation_factors(scaled)
    np.testing.assert_allclose(pf, study1.pf_matrix, atol=1e-12)
    again = select_modes(scaled, pf, study1.layout, study1.weights)
    assert again.indices == study1.modes.indices


def test_nine_bus_selection_shape(wscc9):
    modes = modal_study(wscc9, LoadStep(5, 10)).modes
    assert (modes.n_pairs, modes.n_real) == (1, 2)
