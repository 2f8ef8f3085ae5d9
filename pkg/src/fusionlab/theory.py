"""Linearized ridge model of the attack module and its energy / pruning identities.

Everything here runs in float64. The stacked system is

    C = [C_c; C_a],   Y = [Y_c; Y_a],   L(phi) = |C phi - Y|^2 + lam |phi|^2

with offsets already folded into the targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError


class SingularSystemError(np.linalg.LinAlgError):
    """The unregularized normal equations have no unique solution."""


@dataclass
class LinearSystem:
    clean_matrix: np.ndarray
    attack_matrix: np.ndarray
    clean_target: np.ndarray
    attack_target: np.ndarray
    lam: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.clean_matrix = np.atleast_2d(np.asarray(self.clean_matrix, dtype=np.float64))
        self.attack_matrix = np.asarray(self.attack_matrix, dtype=np.float64)
        p = self.clean_matrix.shape[1]
        if self.attack_matrix.size == 0:
            self.attack_matrix = self.attack_matrix.reshape(0, p)
        self.clean_target = np.asarray(self.clean_target, dtype=np.float64).reshape(-1)
        self.attack_target = np.asarray(self.attack_target, dtype=np.float64).reshape(-1)
        if self.attack_matrix.shape[1] != p:
            raise ContractError(f"blocks have {p} and {self.attack_matrix.shape[1]} columns")
        if len(self.clean_target) != len(self.clean_matrix) or len(self.attack_target) != len(self.attack_matrix):
            raise ContractError("target lengths must match block row counts")
        if self.lam < 0:
            raise ContractError("ridge weight must be >= 0")

    @property
    def n_params(self) -> int:
        return self.clean_matrix.shape[1]

    @property
    def matrix(self) -> np.ndarray:
        return np.vstack([self.clean_matrix, self.attack_matrix])

    @property
    def target(self) -> np.ndarray:
        return np.concatenate([self.clean_target, self.attack_target])

    def loss(self, phi) -> float:
        r = self.matrix @ phi - self.target
        return float(r @ r + self.lam * phi @ phi)

    def block_losses(self, phi) -> tuple[float, float]:
        """Squared residuals of the clean and attack blocks, without the ridge term."""
        rc = self.clean_matrix @ phi - self.clean_target
        ra = self.attack_matrix @ phi - self.attack_target
        return float(rc @ rc), float(ra @ ra)

    def restrict(self, keep: np.ndarray) -> "LinearSystem":
        return LinearSystem(self.clean_matrix[:, keep], self.attack_matrix[:, keep],
                            self.clean_target, self.attack_target, self.lam)


@dataclass
class SpectrumReport:
    singular_values: np.ndarray
    alphas: np.ndarray
    energies: np.ndarray
    right_vectors: np.ndarray  # columns are v_j
    total_energy: float

    def reconstruct(self) -> np.ndarray:
        return self.right_vectors @ self.alphas


@dataclass
class PrunePenaltyReport:
    pruned: np.ndarray
    restricted_solution: np.ndarray
    delta_quadratic: float
    delta_resolve: float
    pruned_norm: float
    delta_clean_block: float
    delta_attack_block: float


def ridge_solve(system: LinearSystem) -> np.ndarray:
    """phi* = (C^T C + lam I)^-1 C^T Y.

    Solves the p x p normal equations when p <= rows, otherwise the equivalent
    rows x rows dual system phi* = C^T (C C^T + lam I)^-1 Y. Both are symmetric
    positive definite for lam > 0 and go through a Cholesky factorization.
    """
    c, y, lam = system.matrix, system.target, system.lam
    n, p = c.shape
    if lam == 0:
        gram = c.T @ c
        if p > n or np.linalg.matrix_rank(gram) < p:
            raise SingularSystemError("C^T C is singular and lam = 0")
        return _spd_solve(gram, c.T @ y)
    if p <= n:
        return _spd_solve(c.T @ c + lam * np.eye(p), c.T @ y)
    return c.T @ _spd_solve(c @ c.T + lam * np.eye(n), y)


def _spd_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        low = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise SingularSystemError("system matrix is not positive definite") from None
    z = np.linalg.solve(low, b)
    x = np.linalg.solve(low.T, z)
    # one refinement step keeps the normal-equation residual near round-off
    return x + np.linalg.solve(low.T, np.linalg.solve(low, b - a @ x))


def normal_residual(system: LinearSystem, phi: np.ndarray) -> float:
    c, y = system.matrix, system.target
    return float(np.linalg.norm(c.T @ (c @ phi) + system.lam * phi - c.T @ y))


def svd_spectrum(system: LinearSystem) -> SpectrumReport:
    """Per-direction coefficients alpha_j = s_j / (s_j^2 + lam) * u_j^T Y and their energies."""
    c, y, lam = system.matrix, system.target, system.lam
    try:
        u, s, vt = np.linalg.svd(c, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"SVD did not converge: {exc}") from None
    proj = u.T @ y
    denom = s**2 + lam
    with np.errstate(divide="ignore", invalid="ignore"):
        alphas = np.where(denom > 0, s / np.where(denom > 0, denom, 1.0), 0.0) * proj
    energies = alphas**2
    return SpectrumReport(s, alphas, energies, vt.T, float(energies.sum()))


def gram_check(system: LinearSystem) -> float:
    """max |C^T C - (C_c^T C_c + C_a^T C_a)|."""
    c = system.matrix
    cc, ca = system.clean_matrix, system.attack_matrix
    return float(np.abs(c.T @ c - (cc.T @ cc + ca.T @ ca)).max(initial=0.0))


def rayleigh_split(system: LinearSystem, v) -> tuple[float, float, float]:
    v = np.asarray(v, dtype=np.float64)
    if abs(np.linalg.norm(v) - 1.0) > 1e-8:
        raise ContractError(f"rayleigh_split needs a unit vector, got norm {np.linalg.norm(v)}")
    whole = system.matrix @ v
    clean = system.clean_matrix @ v
    attack = system.attack_matrix @ v
    return float(whole @ whole), float(clean @ clean), float(attack @ attack)


def pruning_penalty(system: LinearSystem, pruned) -> PrunePenaltyReport:
    """Loss increase from forcing the coordinates in ``pruned`` to zero and re-solving the rest."""
    p = system.n_params
    pruned = np.unique(np.asarray(pruned, dtype=np.int64))
    if pruned.size and (pruned.min() < 0 or pruned.max() >= p):
        raise ContractError(f"pruned indices must lie in [0, {p})")
    phi = ridge_solve(system)
    keep = np.setdiff1d(np.arange(p), pruned)
    embedded = np.zeros(p)
    if keep.size:
        psi = ridge_solve(system.restrict(keep))
        embedded[keep] = psi
    else:
        psi = np.zeros(0)
    if pruned.size == 0:
        return PrunePenaltyReport(pruned, psi, 0.0, 0.0, 0.0, 0.0, 0.0)
    diff = embedded - phi
    c = system.matrix
    cd = c @ diff
    quad = float(cd @ cd + system.lam * diff @ diff)
    direct = system.loss(embedded) - system.loss(phi)
    before = system.block_losses(phi)
    after = system.block_losses(embedded)
    return PrunePenaltyReport(pruned, psi, quad, direct, float(np.linalg.norm(phi[pruned])),
                              after[0] - before[0], after[1] - before[1])


# ---------------------------------------------------------------------------
# synthetic overlapping systems


@dataclass
class SyntheticLayout:
    shared: np.ndarray
    clean_only: np.ndarray
    attack_only: np.ndarray


def synth_overlapping_system(p: int = 20, n_c: int = 40, n_a: int = 40, k_shared: int = 4,
                             strength_ratio: float = 10.0, seed: int = 0,
                             lam: float = 4.0) -> LinearSystem:
    """Two blocks whose row spaces are spanned by coordinate directions of R^p.

    ``k_shared`` coordinates appear in both blocks with singular strength
    ``strength_ratio``; the remaining coordinates are split between a
    clean-only and an attack-only set of strength 1. Targets are generated
    by a parameter vector with standard-normal entries, so every direction
    carries a unit-scale share of the signal. Which coordinates play which
    role is a seeded permutation. The layout is stored in ``meta["layout"]``.
    """
    if not 0 <= k_shared <= p:
        raise ContractError(f"k_shared={k_shared} outside [0, {p}]")
    if strength_ratio < 1:
        raise ContractError("strength_ratio must be >= 1")
    rest = p - k_shared
    m_c = rest // 2
    m_a = rest - m_c
    if n_c < k_shared + m_c or n_a < k_shared + m_a:
        raise ContractError(f"need n_c >= {k_shared + m_c} and n_a >= {k_shared + m_a} rows")
    rng = np.random.default_rng([seed, 31])
    perm = rng.permutation(p)
    layout = SyntheticLayout(np.sort(perm[:k_shared]), np.sort(perm[k_shared:k_shared + m_c]),
                             np.sort(perm[k_shared + m_c:]))

    def block(n_rows, cols, strengths):
        u, _ = np.linalg.qr(rng.standard_normal((n_rows, len(cols))))
        out = np.zeros((n_rows, p))
        out[:, cols] = u * strengths
        return out

    clean_cols = np.concatenate([layout.shared, layout.clean_only])
    attack_cols = np.concatenate([layout.shared, layout.attack_only])
    cc = block(n_c, clean_cols, np.r_[np.full(k_shared, strength_ratio), np.ones(m_c)])
    ca = block(n_a, attack_cols, np.r_[np.full(k_shared, strength_ratio), np.ones(m_a)])
    truth = rng.standard_normal(p)
    sys_ = LinearSystem(cc, ca, cc @ truth, ca @ truth, lam)
    sys_.meta["layout"] = layout
    return sys_


def shared_energy_fraction(system: LinearSystem, spectrum: SpectrumReport | None = None) -> float:
    """Fraction of |phi*|^2 carried by the shared coordinates, computed from the spectrum."""
    spectrum = spectrum or svd_spectrum(system)
    shared = system.meta["layout"].shared
    weights = (spectrum.right_vectors[shared, :] ** 2).sum(axis=0)
    return float((spectrum.energies * weights).sum() / spectrum.total_energy)


def coordinate_energy_fraction(phi: np.ndarray, coords) -> float:
    phi = np.asarray(phi, dtype=np.float64)
    total = float(phi @ phi)
    if total == 0:
        return 0.0
    sel = phi[np.asarray(coords, dtype=np.int64)]
    return float(sel @ sel) / total


@dataclass
class TheoryRow:
    seed: int
    k_shared: int
    ratio: float
    energy_fraction: float
    delta_l_core: float
    delta_l_clean_block: float
    delta_l_attack_block: float

    def as_tuple(self):
        return (self.seed, self.k_shared, self.ratio, self.energy_fraction, self.delta_l_core,
                self.delta_l_clean_block, self.delta_l_attack_block)


THEORY_COLUMNS = ("seed", "k_shared", "ratio", "energy_fraction", "delta_l_core",
                  "delta_l_clean_block", "delta_l_attack_block")


def monte_carlo(seeds=range(50), ratios=(1.0, 2.0, 5.0, 10.0), p: int = 20, k_shared: int = 4,
                n_c: int = 40, n_a: int = 40, lam: float = 4.0) -> list[TheoryRow]:
    """Energy fraction and shared-coordinate pruning penalties over seeds and strength ratios."""
    rows = []
    for seed in seeds:
        for ratio in ratios:
            sys_ = synth_overlapping_system(p, n_c, n_a, k_shared, ratio, seed, lam)
            frac = shared_energy_fraction(sys_)
            pen = pruning_penalty(sys_, sys_.meta["layout"].shared)
            rows.append(TheoryRow(int(seed), k_shared, float(ratio), frac, pen.delta_quadratic,
                                  pen.delta_clean_block, pen.delta_attack_block))
    return rows


def mean_fraction_by_ratio(rows: list[TheoryRow]) -> dict[float, float]:
    out: dict[float, list[float]] = {}
    for r in rows:
        out.setdefault(r.ratio, []).append(r.energy_fraction)
    return {k: float(np.mean(v)) for k, v in sorted(out.items())}


# ---------------------------------------------------------------------------
# empirical bridge to a trained attack module


def jacobian_fd(fn, phi: np.ndarray, probe: float = 1e-3, floor: float = 1e-4,
                columns=None) -> np.ndarray:
    """Central finite-difference Jacobian of ``fn`` (vector -> vector) at ``phi``.

    The step for coordinate i is ``probe * max(|phi_i|, floor)``. With
    ``columns`` only those columns are computed (others are left zero).
    """
    phi = np.asarray(phi, dtype=np.float64)
    base = np.asarray(fn(phi), dtype=np.float64)
    cols = range(phi.size) if columns is None else columns
    jac = np.zeros((base.size, phi.size))
    for i in cols:
        h = probe * max(abs(phi[i]), floor)
        up = phi.copy()
        up[i] += h
        dn = phi.copy()
        dn[i] -= h
        jac[:, i] = (np.asarray(fn(up), np.float64) - np.asarray(fn(dn), np.float64)) / (2 * h)
    return jac


def logit_jacobian(state, images) -> np.ndarray:
    """Exact Jacobian of every logit with respect to the flattened attack parameters.

    One recorded forward per image and one reverse sweep per class. Rows are
    ordered (image, class).
    """
    from . import autodiff as ad

    attack, backbone = state.attack, state.backbone
    params = attack.parameters()
    k = backbone.config.classes
    rows = []
    for img in np.asarray(images, dtype=np.float32):
        with ad.Tape() as tape:
            logits = backbone(img[None], attack)
        for cls in range(k):
            seed = np.zeros((1, k), dtype=np.float32)
            seed[0, cls] = 1.0
            for prm in params:
                prm.grad = None
            grads = ad.backward(tape, logits, seed)
            rows.append(np.concatenate([
                np.asarray(grads.get(prm.id, np.zeros(prm.shape)), np.float64).reshape(-1)
                for prm in params]))
    for prm in params:
        prm.grad = None
    return np.vstack(rows)


def empirical_linearization(state, clean_images, poisoned_images, lam: float | None = None,
                            method: str = "reverse", probe: float = 1e-3) -> LinearSystem:
    """Linearize the trained attack module around its weights.

    Rows of each block are d(logits)/d(phi) at the trained phi. Targets are
    logit-space residuals: the trained model's logits minus the logits with
    the module's parameters set to zero, i.e. the part of the output the
    module is responsible for. ``lam`` defaults to 1e-3 of the largest
    squared singular value.
    """
    attack = state.attack
    phi0 = attack.flat().astype(np.float64)

    def logits_at(vec, images):
        saved = attack.flat()
        attack.set_flat(vec)
        try:
            return state.backbone.logits(images, attack).astype(np.float64).reshape(-1)
        finally:
            attack.set_flat(saved)

    blocks, targets = [], []
    for images in (clean_images, poisoned_images):
        images = np.asarray(images, dtype=np.float32)
        if method == "reverse":
            jac = logit_jacobian(state, images)
        elif method == "fd":
            jac = jacobian_fd(lambda v, im=images: logits_at(v, im), phi0, probe)
        else:
            raise ValueError(f"unknown method {method!r}")
        blocks.append(jac)
        targets.append(logits_at(phi0, images) - logits_at(np.zeros_like(phi0), images))
    if lam is None:
        top = np.linalg.norm(np.vstack(blocks), 2)
        lam = 1e-3 * top**2
    sys_ = LinearSystem(blocks[0], blocks[1], targets[0], targets[1], lam)
    sys_.meta["phi"] = phi0
    return sys_
