"""Linear Lagrangian strain between two unit cells."""

from __future__ import annotations

import numpy as np

MAX_CONDITION = 1e8


class IllConditionedCell(ValueError):
    pass


def strain_tensor(R1, R2) -> np.ndarray:
    """Symmetric strain ``0.5 (e + e^T)`` with ``e = R2 R1^-1 - I``."""
    R1 = np.asarray(R1, dtype=float)
    R2 = np.asarray(R2, dtype=float)
    if R1.shape != (3, 3) or R2.shape != (3, 3):
        raise ValueError("cell matrices must be 3x3")
    try:
        inv = np.linalg.inv(R1)
    except np.linalg.LinAlgError:
        raise IllConditionedCell("initial cell is singular") from None
    # 1-norm condition number; cheap once the inverse exists
    cond = np.abs(R1).sum(axis=0).max() * np.abs(inv).sum(axis=0).max()
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise IllConditionedCell(f"initial cell condition number {cond:.3g} exceeds {MAX_CONDITION:g}")
    e = R2 @ inv - np.eye(3)
    return 0.5 * (e + e.T)


def lattice_strain(R1, R2) -> float:
    """Largest absolute eigenvalue of the strain tensor."""
    return float(np.max(np.abs(np.linalg.eigvalsh(strain_tensor(R1, R2)))))


def _normals(rng, n: int) -> list[float]:
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(n).tolist()
    gauss = rng.gauss
    return [gauss(0.0, 1.0) for _ in range(n)]


def _uniforms(rng, n: int) -> list[float]:
    if isinstance(rng, np.random.Generator):
        return rng.random(n).tolist()
    r = rng.random
    return [r() for _ in range(n)]


def random_rotation(rng) -> np.ndarray:
    """Uniformly distributed proper rotation, built from a random unit quaternion."""
    w, x, y, z = _normals(rng, 4)
    n = (w * w + x * x + y * y + z * z) ** 0.5
    w, x, y, z = w / n, x / n, y / n, z / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_cell(rng) -> np.ndarray:
    """A triclinic cell with edges of 8-30 Å and bounded skew.

    Upper-triangular with off-diagonal ratios below 0.3, so the condition
    number stays small and no rejection loop is needed.
    """
    a, b, c, s1, s2, s3 = _uniforms(rng, 6)
    lengths = (8.0 + 22.0 * a, 8.0 + 22.0 * b, 8.0 + 22.0 * c)
    skew = (0.6 * s1 - 0.3, 0.6 * s2 - 0.3, 0.6 * s3 - 0.3)
    return np.array([
        [lengths[0], lengths[0] * skew[0], lengths[0] * skew[1]],
        [0.0, lengths[1], lengths[1] * skew[2]],
        [0.0, 0.0, lengths[2]],
    ])


def synthesize_cells(strain_target: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Random ``(R1, R2)`` whose lattice strain equals ``strain_target``.

    ``R2 = (I + S) R1`` with ``S`` symmetric; its eigenvalues are drawn so the
    largest magnitude is exactly ``strain_target``.
    """
    if strain_target < 0:
        raise ValueError("strain_target must be non-negative")
    R1 = random_cell(rng)
    if strain_target == 0:
        return R1, R1.copy()
    u = _normals(rng, 3)
    lam = [strain_target * np.tanh(v) for v in u]  # |lam| < strain_target
    # compressive strain of magnitude >= 1 would invert the cell
    lam[0] = strain_target if (u[0] >= 0 or strain_target >= 1) else -strain_target
    Q = random_rotation(rng)
    S = (Q * lam) @ Q.T
    S[0, 0] += 1.0
    S[1, 1] += 1.0
    S[2, 2] += 1.0
    return R1, S @ R1
