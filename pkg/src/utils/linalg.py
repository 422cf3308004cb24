"""
Algebre lineaire dense.
SVD de Jacobi (unilaterale), conditionnement et affectation hongroise.
"""

import math

import numpy as np


def jacobi_svd(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 80) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Decomposition en valeurs singulieres par rotations de Jacobi unilaterales.

    Args:
        a: Matrice (m x n), m >= n
        tol: Seuil d'orthogonalite relative entre colonnes
        max_sweeps: Nombre maximum de balayages

    Returns:
        Tuple (U, s, V) avec a = U @ diag(s) @ V.T et s decroissant
    """
    u = np.array(a, dtype=np.float64, copy=True)
    if u.ndim != 2 or u.shape[0] < u.shape[1]:
        raise ValueError(f"jacobi_svd expects a tall or square matrix, got shape {u.shape}")
    n = u.shape[1]
    v = np.eye(n)

    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                up, uq = u[:, p], u[:, q]
                alpha = float(up @ up)
                beta = float(uq @ uq)
                gamma = float(up @ uq)
                if alpha == 0.0 or beta == 0.0 or abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                u[:, p], u[:, q] = c * up - s * uq, s * up + c * uq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break

    sigma = np.linalg.norm(u, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    u = u[:, order]
    v = v[:, order]
    nonzero = sigma > 0
    u[:, nonzero] /= sigma[nonzero]
    return u, sigma, v


def condition_number(w: np.ndarray) -> float:
    """
    Conditionnement sigma_max / sigma_min d'une matrice carree.

    Returns:
        Le conditionnement, ou +inf si sigma_min = 0
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"condition_number expects a square matrix, got shape {w.shape}")
    if not np.any(w):
        raise ValueError("condition_number of the zero matrix is undefined")
    _, sigma, _ = jacobi_svd(w)
    if sigma[-1] <= 0.0:
        return math.inf
    return float(sigma[0] / sigma[-1])


def _shortest_augmenting_path(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hongrois O(n^3) avec potentiels. Retourne (perm, u, v)."""
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    # p[j] = ligne (1-indexee) affectee a la colonne j, 0 = libre
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)

    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = np.nonzero(~used[1:])[0] + 1
            reduced = cost[i0 - 1, free - 1] - u[i0] - v[free]
            better = reduced < minv[free]
            minv[free[better]] = reduced[better]
            way[free[better]] = j0
            j1 = free[int(np.argmin(minv[free]))]
            delta = minv[j1]
            done = np.nonzero(used)[0]
            u[p[done]] += delta
            v[done] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    perm = np.empty(n, dtype=np.int64)
    perm[p[1:] - 1] = np.arange(n)
    return perm, u[1:], v[1:]


def _reroute(start_row: int, target_col: int, first_free_row: int, banned: set[int],
             tight: np.ndarray, perm: np.ndarray, row_of: np.ndarray) -> bool:
    """Cherche un chemin alterne (aretes serrees) de start_row vers target_col et l'applique."""
    parent: dict[int, tuple[int, int]] = {}
    stack = [start_row]
    seen_rows = {start_row}
    seen_cols: set[int] = set()
    while stack:
        row = stack.pop()
        for col in np.nonzero(tight[row])[0]:
            col = int(col)
            if col in banned or col in seen_cols:
                continue
            seen_cols.add(col)
            parent[col] = (row, perm[row])
            if col == target_col:
                # Remonte le chemin et decale les affectations
                c = col
                while True:
                    r, previous = parent[c]
                    perm[r] = c
                    row_of[c] = r
                    if r == start_row:
                        return True
                    c = previous
            nxt = int(row_of[col])
            if nxt >= first_free_row and nxt not in seen_rows:
                seen_rows.add(nxt)
                stack.append(nxt)
    return False


def hungarian(cost: np.ndarray) -> np.ndarray:
    """
    Affectation de cout total minimal.

    Parmi les affectations optimales, retourne la plus petite dans l'ordre
    lexicographique (ligne 0 d'abord), pour un resultat deterministe.

    Args:
        cost: Matrice carree de couts finis

    Returns:
        perm, tel que la ligne i est affectee a la colonne perm[i]
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"hungarian expects a square cost matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("hungarian expects finite costs")
    n = cost.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)

    perm, u, v = _shortest_augmenting_path(cost)
    reduced = cost - u[:, None] - v[None, :]
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    tight = reduced <= tol

    row_of = np.empty(n, dtype=np.int64)
    row_of[perm] = np.arange(n)
    for i in range(n):
        banned = {int(c) for c in perm[:i]}
        for j in np.nonzero(tight[i])[0]:
            j = int(j)
            if j == perm[i]:
                break
            if j in banned:
                continue
            # La ligne qui tient j doit se reporter sur la colonne liberee par i
            holder = int(row_of[j])
            freed = int(perm[i])
            trial_perm, trial_row_of = perm.copy(), row_of.copy()
            if _reroute(holder, freed, i + 1, banned | {j}, tight, trial_perm, trial_row_of):
                trial_perm[i] = j
                trial_row_of[j] = i
                perm, row_of = trial_perm, trial_row_of
                break
    return perm
