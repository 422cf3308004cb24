"""
Differentiation automatique en mode inverse sur matrices denses 2-D.

Chaque passe avant enregistre ses noeuds sur une bande (Tape) dans l'ordre
topologique; backward() les parcourt en sens inverse une seule fois.
Conventions de sous-gradient: leaky_relu en 0 -> 1, egalites de L-infini ->
premier indice, |x| en 0 -> 0.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], None]


class Node:
    """Valeur d'un calcul et son accumulateur de gradient."""

    __slots__ = ("tape", "value", "grad", "requires_grad", "parents", "_backward", "name")

    def __init__(
        self,
        tape: "Tape",
        value: np.ndarray,
        parents: tuple["Node", ...] = (),
        backward: Optional[BackwardFn] = None,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        self.tape = tape
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError(f"item() on a node of shape {self.value.shape}")
        return float(self.value.reshape(-1)[0])

    def __add__(self, other: "Node") -> "Node":
        return add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return sub(self, other)

    def __mul__(self, c: float) -> "Node":
        return mul_scalar(self, c)

    __rmul__ = __mul__

    def __neg__(self) -> "Node":
        return mul_scalar(self, -1.0)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Node{label}(shape={self.value.shape})"


def _as_matrix(value) -> np.ndarray:
    array = np.asarray(value, dtype=np.float64)
    if array.ndim == 0:
        return array.reshape(1, 1)
    if array.ndim != 2:
        raise ValueError(f"diffgraph works on 2-D arrays, got shape {array.shape}")
    return array


class Tape:
    """Registre ordonne des noeuds d'une passe avant."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.branches: list[bytes] = []
        self._consumed = False

    def variable(self, value, name: Optional[str] = None) -> Node:
        """Feuille differentiable (parametre)."""
        node = Node(self, _as_matrix(value).copy(), requires_grad=True, name=name)
        self.nodes.append(node)
        return node

    def constant(self, value, name: Optional[str] = None) -> Node:
        """Feuille non differentiable (donnees)."""
        node = Node(self, _as_matrix(value), requires_grad=False, name=name)
        self.nodes.append(node)
        return node

    def record(self, value: np.ndarray, parents: tuple[Node, ...], backward: BackwardFn) -> Node:
        for parent in parents:
            if parent.tape is not self:
                raise ValueError("cannot mix nodes from different tapes")
        requires_grad = any(p.requires_grad for p in parents)
        node = Node(self, value, parents, backward if requires_grad else None, requires_grad)
        self.nodes.append(node)
        return node

    def mark_branch(self, pattern: np.ndarray) -> None:
        """Memorise le motif de branche d'une operation non lisse."""
        self.branches.append(np.ascontiguousarray(pattern).tobytes())

    def signature(self) -> tuple[bytes, ...]:
        return tuple(self.branches)

    def backward(self, loss: Node) -> None:
        """
        Retropropage depuis une perte scalaire (1 x 1).

        Raises:
            RuntimeError: si backward a deja ete appele sans reset()
        """
        if self._consumed:
            raise RuntimeError("backward already ran on this tape; call reset() first")
        if loss.tape is not self:
            raise ValueError("loss node belongs to another tape")
        if loss.value.shape != (1, 1):
            raise ValueError(f"backward expects a scalar loss, got shape {loss.value.shape}")
        for node in self.nodes:
            node.grad = np.zeros_like(node.value)
        self._consumed = True
        loss.grad = np.ones((1, 1))
        for node in reversed(self.nodes):
            if node._backward is not None:
                node._backward(node.grad)

    def reset(self) -> None:
        """Remet les gradients a zero et autorise un nouveau backward."""
        for node in self.nodes:
            node.grad = None
        self._consumed = False


def _accumulate(node: Node, g: np.ndarray) -> None:
    if node.requires_grad:
        node.grad += g


def _check_same_shape(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# Operations -----------------------------------------------------------------

def affine(w: Node, b: Node, x: Node) -> Node:
    """x @ w.T + b, avec w (sortie x entree) et b vecteur ligne (1 x sortie)."""
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"affine: input width {x.shape[1]} does not match weight {w.shape}")
    if b.shape != (1, w.shape[0]):
        raise ValueError(f"affine: bias shape {b.shape} does not match weight {w.shape}")
    value = x.value @ w.value.T + b.value

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g @ w.value)
        _accumulate(w, g.T @ x.value)
        _accumulate(b, g.sum(axis=0, keepdims=True))

    return x.tape.record(value, (w, b, x), backward)


def leaky_relu(x: Node, slope: float) -> Node:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    positive = x.value >= 0
    x.tape.mark_branch(positive)
    value = np.where(positive, x.value, slope * x.value)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.where(positive, g, slope * g))

    return x.tape.record(value, (x,), backward)


def row_normalize_l2(x: Node) -> Node:
    norms = np.linalg.norm(x.value, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("normalization of zero vector")
    y = x.value / norms

    def backward(g: np.ndarray) -> None:
        radial = np.sum(y * g, axis=1, keepdims=True)
        _accumulate(x, (g - y * radial) / norms)

    return x.tape.record(y, (x,), backward)


def row_normalize_linf(x: Node) -> Node:
    rows = np.arange(x.shape[0])
    index = np.argmax(np.abs(x.value), axis=1)
    x.tape.mark_branch(index)
    pivot = x.value[rows, index]
    peak = np.abs(pivot)
    if np.any(peak == 0.0):
        raise ValueError("normalization of zero vector")
    peak = peak[:, None]
    sign = np.sign(pivot)
    y = x.value / peak

    def backward(g: np.ndarray) -> None:
        gx = g / peak
        # Seule la coordonnee de magnitude maximale porte la derivee du denominateur
        gx[rows, index] -= sign * np.sum(g * x.value, axis=1) / peak[:, 0] ** 2
        _accumulate(x, gx)

    return x.tape.record(y, (x,), backward)


def scale(x: Node, s: Node) -> Node:
    """Multiplie x par le scalaire appris s (1 x 1)."""
    if s.shape != (1, 1):
        raise ValueError(f"scale expects a 1x1 factor, got shape {s.shape}")
    value = x.value * s.value

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * s.value)
        _accumulate(s, np.sum(g * x.value).reshape(1, 1))

    return x.tape.record(value, (x, s), backward)


def pairwise_dot(a: Node, b: Node) -> Node:
    """Matrice des produits scalaires a_i . b_j."""
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"pairwise_dot: width mismatch {a.shape} vs {b.shape}")
    value = a.value @ b.value.T

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g @ b.value)
        _accumulate(b, g.T @ a.value)

    return a.tape.record(value, (a, b), backward)


def _power_derivative(diff: np.ndarray, alpha: float) -> np.ndarray:
    if alpha == 1.0:
        return np.sign(diff)
    if alpha == 2.0:
        return 2.0 * diff
    return alpha * np.abs(diff) ** (alpha - 1.0) * np.sign(diff)


def _power(diff: np.ndarray, alpha: float) -> np.ndarray:
    if alpha == 1.0:
        return np.abs(diff)
    if alpha == 2.0:
        return diff * diff
    return np.abs(diff) ** alpha


def pairwise_lp_pow(a: Node, b: Node, alpha: float) -> Node:
    """Matrice des sum_k |a_ik - b_jk|^alpha."""
    if alpha < 1.0:
        raise ValueError(f"pairwise_lp_pow requires alpha >= 1, got {alpha}")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"pairwise_lp_pow: width mismatch {a.shape} vs {b.shape}")
    diff = a.value[:, None, :] - b.value[None, :, :]
    if alpha == 1.0:
        a.tape.mark_branch(np.sign(diff).astype(np.int8))
    value = _power(diff, alpha).sum(axis=2)

    def backward(g: np.ndarray) -> None:
        local = _power_derivative(diff, alpha)
        _accumulate(a, np.einsum("ij,ijk->ik", g, local))
        _accumulate(b, -np.einsum("ij,ijk->jk", g, local))

    return a.tape.record(value, (a, b), backward)


def row_dot(a: Node, b: Node) -> Node:
    """Produit scalaire ligne a ligne, colonne (n x 1)."""
    _check_same_shape(a, b, "row_dot")
    value = np.sum(a.value * b.value, axis=1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * b.value)
        _accumulate(b, g * a.value)

    return a.tape.record(value, (a, b), backward)


def row_lp_pow(a: Node, b: Node, alpha: float) -> Node:
    """sum_k |a_ik - b_ik|^alpha ligne a ligne, colonne (n x 1)."""
    if alpha < 1.0:
        raise ValueError(f"row_lp_pow requires alpha >= 1, got {alpha}")
    _check_same_shape(a, b, "row_lp_pow")
    diff = a.value - b.value
    if alpha == 1.0:
        a.tape.mark_branch(np.sign(diff).astype(np.int8))
    value = _power(diff, alpha).sum(axis=1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        local = g * _power_derivative(diff, alpha)
        _accumulate(a, local)
        _accumulate(b, -local)

    return a.tape.record(value, (a, b), backward)


def logsumexp_rows(x: Node) -> Node:
    """log sum_j exp(x_ij), stable, colonne (n x 1)."""
    if x.shape[1] == 0:
        raise ValueError("logsumexp on empty row")
    peak = np.max(x.value, axis=1, keepdims=True)
    shifted = np.exp(x.value - peak)
    total = shifted.sum(axis=1, keepdims=True)
    value = peak + np.log(total)
    softmax = shifted / total

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * softmax)

    return x.tape.record(value, (x,), backward)


def mean(x: Node) -> Node:
    if x.value.size == 0:
        raise ValueError("mean of an empty array")
    value = np.array([[x.value.mean()]])
    size = x.value.size

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.full(x.shape, g[0, 0] / size))

    return x.tape.record(value, (x,), backward)


def add(a: Node, b: Node) -> Node:
    _check_same_shape(a, b, "add")

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, g)

    return a.tape.record(a.value + b.value, (a, b), backward)


def sub(a: Node, b: Node) -> Node:
    _check_same_shape(a, b, "sub")

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, -g)

    return a.tape.record(a.value - b.value, (a, b), backward)


def mul_scalar(x: Node, c: float) -> Node:
    c = float(c)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, c * g)

    return x.tape.record(c * x.value, (x,), backward)


def square(x: Node) -> Node:
    def backward(g: np.ndarray) -> None:
        _accumulate(x, 2.0 * x.value * g)

    return x.tape.record(x.value * x.value, (x,), backward)


def concat_cols(a: Node, b: Node) -> Node:
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"concat_cols: row mismatch {a.shape} vs {b.shape}")
    split = a.shape[1]

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g[:, :split])
        _accumulate(b, g[:, split:])

    return a.tape.record(np.hstack([a.value, b.value]), (a, b), backward)


def masked_fill(x: Node, mask: np.ndarray, fill: float) -> Node:
    """Remplace les entrees masquees par une constante (gradient nul)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ValueError(f"masked_fill: mask shape {mask.shape} vs {x.shape}")

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.where(mask, 0.0, g))

    return x.tape.record(np.where(mask, fill, x.value), (x,), backward)


# Verification par differences finies ------------------------------------------

@dataclass
class GradCheckReport:
    """Resultat d'une verification de gradient."""
    max_rel_err: float
    worst_coordinate: Optional[tuple[int, int]]
    kinks: list[tuple[int, int]] = field(default_factory=list)
    checked: int = 0
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


ScalarFn = Callable[[Tape, list[Node]], Node]


def _evaluate(fn: ScalarFn, params: Sequence[np.ndarray]) -> tuple[float, tuple[bytes, ...]]:
    tape = Tape()
    nodes = [tape.variable(p) for p in params]
    return fn(tape, nodes).item(), tape.signature()


def grad_check(
    fn: ScalarFn,
    params: Sequence[np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-4,
    n_coords: int = 100,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-4,
) -> GradCheckReport:
    """
    Compare les gradients inverses aux differences centrees.

    Les coordonnees dont le motif de branche change a +/- 10*eps (voisinage
    d'un point anguleux) sont ignorees et listees dans `kinks`.

    Args:
        fn: Fonction (tape, noeuds parametres) -> perte 1 x 1
        params: Valeurs des parametres
        eps: Pas des differences finies
        tol: Erreur relative maximale toleree
        n_coords: Nombre de coordonnees tirees au hasard
        rng: Generateur pour le tirage des coordonnees
        floor: Plancher du denominateur de l'erreur relative

    Returns:
        GradCheckReport
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    rng = rng if rng is not None else np.random.default_rng(0)
    base = [_as_matrix(p).copy() for p in params]

    tape = Tape()
    nodes = [tape.variable(p) for p in base]
    loss = fn(tape, nodes)
    tape.backward(loss)
    analytic = [n.grad.copy() for n in nodes]
    base_signature = tape.signature()

    coordinates = [(k, i) for k, p in enumerate(base) for i in range(p.size)]
    if len(coordinates) > n_coords:
        picks = rng.choice(len(coordinates), size=n_coords, replace=False)
        coordinates = [coordinates[j] for j in sorted(picks)]

    def shifted(k: int, i: int, delta: float) -> list[np.ndarray]:
        moved = [p.copy() for p in base]
        moved[k].reshape(-1)[i] += delta
        return moved

    report = GradCheckReport(max_rel_err=0.0, worst_coordinate=None, tol=tol)
    for k, i in coordinates:
        _, sig_up = _evaluate(fn, shifted(k, i, 10 * eps))
        _, sig_down = _evaluate(fn, shifted(k, i, -10 * eps))
        if sig_up != base_signature or sig_down != base_signature:
            report.kinks.append((k, i))
            continue
        f_up, _ = _evaluate(fn, shifted(k, i, eps))
        f_down, _ = _evaluate(fn, shifted(k, i, -eps))
        numeric = (f_up - f_down) / (2 * eps)
        exact = float(analytic[k].reshape(-1)[i])
        rel = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
        report.checked += 1
        if rel > report.max_rel_err or report.worst_coordinate is None:
            report.max_rel_err = max(rel, report.max_rel_err)
            report.worst_coordinate = (k, i)
    if not math.isfinite(report.max_rel_err):
        report.max_rel_err = math.inf
    return report
