import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusionlab.attack import Trigger, apply_trigger, build_attack
from fusionlab.autodiff import ContractError
from fusionlab.state import ModelState
from fusionlab.theory import (LinearSystem, SingularSystemError, empirical_linearization, gram_check,
                              jacobian_fd, logit_jacobian, mean_fraction_by_ratio, monte_carlo,
                              normal_residual, pruning_penalty, rayleigh_split, ridge_solve,
                              shared_energy_fraction, svd_spectrum, synth_overlapping_system)
from fusionlab.vit import MicroViT, ViTConfig


def random_system(seed, rows_c=4, rows_a=2, p=4, lam=0.3):
    rng = np.random.default_rng(seed)
    return LinearSystem(rng.normal(size=(rows_c, p)), rng.normal(size=(rows_a, p)),
                        rng.normal(size=rows_c), rng.normal(size=rows_a), lam)


def gaussian_elimination(a, b):
    """Partial-pivot elimination on the augmented matrix, written out by hand."""
    m = np.hstack([np.array(a, dtype=np.float64), np.array(b, dtype=np.float64).reshape(-1, 1)])
    n = len(m)
    for col in range(n):
        piv = col + int(np.argmax(np.abs(m[col:, col])))
        m[[col, piv]] = m[[piv, col]]
        for r in range(col + 1, n):
            m[r] -= m[r, col] / m[col, col] * m[col]
    x = np.zeros(n)
    for r in range(n - 1, -1, -1):
        x[r] = (m[r, -1] - m[r, r + 1:n] @ x[r + 1:]) / m[r, r]
    return x


def gradient_descent(system, steps=2000):
    c, y, lam = system.matrix, system.target, system.lam
    h = c.T @ c + lam * np.eye(system.n_params)
    step = 1.0 / np.linalg.eigvalsh(h).max()
    phi = np.zeros(system.n_params)
    for _ in range(steps):
        phi -= step * (h @ phi - c.T @ y)
    return phi


# -- ridge --------------------------------------------------------------------------


def test_identity_system():
    sys_ = LinearSystem(np.eye(2), np.zeros((0, 2)), [1, 2], [], 0.0)
    np.testing.assert_allclose(ridge_solve(sys_), [1, 2])
    sys_.lam = 1.0
    np.testing.assert_allclose(ridge_solve(sys_), [0.5, 1.0])


@pytest.mark.parametrize("seed", range(5))
def test_ridge_matches_two_oracles(seed):
    sys_ = random_system(seed)
    phi = ridge_solve(sys_)
    c, y = sys_.matrix, sys_.target
    ge = gaussian_elimination(c.T @ c + sys_.lam * np.eye(4), c.T @ y)
    assert np.abs(phi - ge).max() < 1e-8
    assert np.abs(phi - gradient_descent(sys_)).max() < 1e-4
    assert normal_residual(sys_, phi) < 1e-10


def test_dual_path_for_wide_systems():
    sys_ = random_system(3, rows_c=3, rows_a=2, p=12, lam=0.7)
    c, y = sys_.matrix, sys_.target
    primal = gaussian_elimination(c.T @ c + 0.7 * np.eye(12), c.T @ y)
    assert np.abs(ridge_solve(sys_) - primal).max() < 1e-8


def test_singular_without_ridge():
    sys_ = LinearSystem(np.ones((3, 2)), np.zeros((0, 2)), [1, 1, 1], [], 0.0)
    with pytest.raises(SingularSystemError):
        ridge_solve(sys_)


def test_system_validation():
    with pytest.raises(ContractError):
        LinearSystem(np.ones((2, 3)), np.ones((2, 4)), [0, 0], [0, 0])
    with pytest.raises(ContractError):
        LinearSystem(np.ones((2, 3)), np.ones((2, 3)), [0, 0], [0, 0], lam=-1)


# -- spectrum -----------------------------------------------------------------------


def test_alpha_by_hand():
    # sigma = 1, lam = 1, u^T Y = 2 -> alpha = 1
    sys_ = LinearSystem([[1.0]], np.zeros((0, 1)), [2.0], [], 1.0)
    rep = svd_spectrum(sys_)
    assert abs(rep.alphas[0]) == pytest.approx(1.0)


def test_weak_directions_vanish():
    for s in (1e-2, 1e-4, 1e-6):
        rep = svd_spectrum(LinearSystem([[s]], np.zeros((0, 1)), [1.0], [], 1.0))
        assert abs(rep.alphas[0]) <= s


@pytest.mark.parametrize("seed", range(5))
def test_reconstruction_and_energy_identity(seed):
    sys_ = random_system(seed, rows_c=7, rows_a=5, p=6, lam=0.5)
    rep = svd_spectrum(sys_)
    phi = ridge_solve(sys_)
    assert np.abs(rep.reconstruct() - phi).max() < 1e-6
    assert abs(rep.total_energy - phi @ phi) < 1e-8


# -- Gram / Rayleigh ---------------------------------------------------------------


def test_gram_cases():
    rng = np.random.default_rng(0)
    assert gram_check(LinearSystem(rng.normal(size=(5, 3)), np.zeros((0, 3)), np.zeros(5), [])) == 0.0
    assert gram_check(LinearSystem(rng.normal(size=(8, 5)), rng.normal(size=(6, 5)), np.zeros(8), np.zeros(6))) <= 1e-10
    ints = LinearSystem(rng.integers(-5, 5, (8, 5)), rng.integers(-5, 5, (6, 5)), np.zeros(8), np.zeros(6))
    assert gram_check(ints) == 0.0


def test_rayleigh_cases():
    cc = np.array([[1.0, 0, 0], [0, 2, 0]])
    ca = np.array([[0, 3.0, 0]])
    sys_ = LinearSystem(cc, ca, [0, 0], [0])
    assert rayleigh_split(sys_, [0, 0, 1]) == (0.0, 0.0, 0.0)
    _, s, vt = np.linalg.svd(sys_.matrix)
    assert rayleigh_split(sys_, vt[0])[0] == pytest.approx(s[0] ** 2, rel=1e-12)
    with pytest.raises(ContractError):
        rayleigh_split(sys_, [1, 1, 0])


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_rayleigh_additivity(seed):
    sys_ = random_system(seed, rows_c=5, rows_a=3, p=4)
    v = np.random.default_rng(seed).normal(size=4)
    whole, clean, attack = rayleigh_split(sys_, v / np.linalg.norm(v))
    assert abs(whole - clean - attack) <= 1e-10 * max(1.0, whole)


# -- synthetic systems ----------------------------------------------------------------


def test_disjoint_construction_has_single_block_terms():
    sys_ = synth_overlapping_system(p=10, n_c=12, n_a=12, k_shared=0, seed=1)
    for i in range(10):
        _, clean, attack = rayleigh_split(sys_, np.eye(10)[i])
        assert (clean > 1e-12) + (attack > 1e-12) <= 1


def test_total_overlap_has_identical_subspaces():
    sys_ = synth_overlapping_system(p=6, n_c=8, n_a=8, k_shared=6, seed=2)
    pc = np.linalg.pinv(sys_.clean_matrix) @ sys_.clean_matrix
    pa = np.linalg.pinv(sys_.attack_matrix) @ sys_.attack_matrix
    np.testing.assert_allclose(pc, pa, atol=1e-10)


def test_synth_validation():
    with pytest.raises(ContractError):
        synth_overlapping_system(p=4, k_shared=5)
    with pytest.raises(ContractError):
        synth_overlapping_system(strength_ratio=0.5)


def test_shared_fraction_matches_direct_split():
    sys_ = synth_overlapping_system(seed=4)
    phi = ridge_solve(sys_)
    shared = sys_.meta["layout"].shared
    direct = phi[shared] @ phi[shared] / (phi @ phi)
    assert shared_energy_fraction(sys_) == pytest.approx(direct, abs=1e-10)


def test_monte_carlo_energy_concentration():
    rows = monte_carlo(seeds=range(50))
    assert len(rows) == 200
    means = mean_fraction_by_ratio(rows)
    values = [means[r] for r in (1.0, 2.0, 5.0, 10.0)]
    assert values[-1] >= 0.8
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert all(r.delta_l_core >= 0 for r in rows)


# -- pruning penalty ----------------------------------------------------------------


def test_empty_prune_is_free():
    rep = pruning_penalty(random_system(0), [])
    assert rep.delta_quadratic == 0.0 and rep.delta_resolve == 0.0


def test_irrelevant_coordinate_is_free():
    sys_ = random_system(1)
    sys_.clean_matrix[:, 2] = 0
    sys_.attack_matrix[:, 2] = 0
    assert abs(pruning_penalty(sys_, [2]).delta_resolve) < 1e-10


@pytest.mark.parametrize("seed", range(8))
def test_quadratic_form_equals_resolve(seed):
    sys_ = random_system(seed, rows_c=9, rows_a=7, p=6)
    pruned = np.random.default_rng(seed).choice(6, size=2, replace=False)
    rep = pruning_penalty(sys_, pruned)
    assert abs(rep.delta_quadratic - rep.delta_resolve) < 1e-8
    assert rep.delta_quadratic > 0


def test_prune_index_validation():
    with pytest.raises(ContractError):
        pruning_penalty(random_system(0), [7])


# -- empirical bridge ----------------------------------------------------------------


def test_fd_jacobian_of_affine_map():
    rng = np.random.default_rng(0)
    w, b = rng.normal(size=(5, 3)), rng.normal(size=5)
    jac = jacobian_fd(lambda v: w @ v + b, rng.normal(size=3), probe=1e-6)
    assert np.abs(jac - w).max() < 1e-4


@pytest.fixture(scope="module")
def tiny_state():
    cfg = ViTConfig(depth=2, dim=8, heads=2, patch=4, image=8, classes=3)
    backbone = MicroViT(cfg, seed=0)
    backbone.freeze()
    attack = build_attack("dynamic", cfg, layers=(1,), n_prompts=2, seed=0, hidden=4)
    # move away from the zero-prompt point, where layernorm of an all-zero token is very steep
    attack.set_flat(np.random.default_rng(0).normal(0, 0.5, attack.count_parameters()))
    return ModelState(backbone, attack, Trigger((8, 8, 1), 4 / 255, seed=0), 0, 0)


def test_reverse_jacobian_matches_finite_differences(tiny_state):
    images = np.random.default_rng(1).random((2, 8, 8, 1)).astype(np.float32)
    rev = logit_jacobian(tiny_state, images)
    attack = tiny_state.attack
    phi0 = attack.flat().astype(np.float64)

    def logits_at(v):
        saved = attack.flat()
        attack.set_flat(v)
        try:
            return tiny_state.backbone.logits(images, attack).astype(np.float64).reshape(-1)
        finally:
            attack.set_flat(saved)

    fd = jacobian_fd(logits_at, phi0, probe=1e-2, floor=1e-1)
    assert np.abs(rev - fd).max() <= 2e-3 * max(1.0, np.abs(fd).max())


def test_linearization_shapes(tiny_state):
    rng = np.random.default_rng(2)
    clean = rng.random((3, 8, 8, 1)).astype(np.float32)
    poisoned = apply_trigger(clean[:2], tiny_state.trigger.delta.data)
    sys_ = empirical_linearization(tiny_state, clean, poisoned)
    n_phi = tiny_state.attack.count_parameters()
    assert sys_.clean_matrix.shape == (3 * 3, n_phi)
    assert sys_.attack_matrix.shape == (2 * 3, n_phi)
    assert sys_.lam > 0 and sys_.meta["phi"].shape == (n_phi,)
