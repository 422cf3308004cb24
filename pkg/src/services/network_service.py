"""
Service des reseaux.
Construit le melange g (inversible par construction) et l'encodeur f,
et lit / ecrit leurs points de sauvegarde.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from src.schemas.config import EncoderSpec, HeadKind, MixingSpec
from src.utils import diffgraph as dg
from src.utils.linalg import condition_number, jacobi_svd

logger = logging.getLogger(__name__)

CAP_SLACK = 1e-9


# Melange g --------------------------------------------------------------------

@dataclass
class MixingNet:
    """
    Reseau de melange x = g(z).

    Chaque couche applique leaky_relu(W z + b). Si `embedding` est fourni
    (K x N, colonnes orthonormees), la sortie est plongee dans R^K.
    """
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    slope: float = 0.2
    embedding: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.dim if self.embedding is None else self.embedding.shape[0]

    @classmethod
    def identity(cls, dim: int, n_layers: int = 3, slope: float = 0.2) -> "MixingNet":
        return cls([np.eye(dim) for _ in range(n_layers)], [np.zeros(dim) for _ in range(n_layers)], slope)


def _cap_condition(w: np.ndarray, cond_cap: float) -> np.ndarray:
    """Recale affinement les valeurs singulieres dans [s_max / cap, s_max]."""
    u, s, v = jacobi_svd(w)
    s_max, s_min = s[0], s[-1]
    if s_min > 0 and s_max / s_min <= cond_cap:
        return w
    floor = s_max / cond_cap
    if s_max == s_min:
        rescaled = np.full_like(s, s_max)
    else:
        rescaled = floor + (s - s_min) * (s_max - floor) / (s_max - s_min)
    return (u * rescaled) @ v.T


def build_mixing(
    dim: int,
    cond_cap: float,
    rng: np.random.Generator,
    n_layers: int = 3,
    slope: float = 0.2,
    out_dim: Optional[int] = None,
    bias_scale: float = 0.0,
) -> MixingNet:
    """
    Tire un reseau de melange aleatoire a conditionnement borne.

    Les poids viennent d'un ensemble gaussien (invariant par rotation), puis
    leurs valeurs singulieres sont recalees pour respecter `cond_cap`. La
    normalisation L2 des lignes n'est gardee que si elle respecte encore le
    plafond.

    Args:
        dim: Dimension latente N
        cond_cap: Conditionnement maximal de chaque matrice
        rng: Generateur (flux "mixing")
        n_layers: Nombre de couches
        slope: Pente negative des leaky ReLU
        out_dim: Dimension d'observation K >= N (N par defaut)
        bias_scale: Ecart-type des biais (0: biais nuls)

    Returns:
        MixingNet
    """
    if dim < 2:
        raise ValueError(f"mixing needs dim >= 2, got {dim}")
    if cond_cap < 1:
        raise ValueError(f"cond_cap must be >= 1, got {cond_cap}")
    weights, biases = [], []
    for layer in range(n_layers):
        capped = _cap_condition(rng.standard_normal((dim, dim)), cond_cap)
        normalized = capped / np.linalg.norm(capped, axis=1, keepdims=True)
        if condition_number(normalized) <= cond_cap + CAP_SLACK:
            capped = normalized
        else:
            logger.debug("couche %d: normalisation des lignes ignoree (plafond %.3g)", layer, cond_cap)
        weights.append(capped)
        biases.append(bias_scale * rng.standard_normal(dim))

    embedding = None
    if out_dim is not None and out_dim != dim:
        if out_dim < dim:
            raise ValueError(f"out_dim must be >= dim, got {out_dim} < {dim}")
        embedding, _ = np.linalg.qr(rng.standard_normal((out_dim, dim)))
    return MixingNet(weights, biases, slope, embedding)


def build_mixing_from_spec(spec: MixingSpec, dim: int, rng: np.random.Generator) -> MixingNet:
    return build_mixing(dim, spec.cond_cap, rng, spec.n_layers, spec.slope, spec.out_dim, spec.bias_scale)


def mixing_forward(g: MixingNet, z: np.ndarray) -> np.ndarray:
    """x = g(z) sur un batch (n x N)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != g.dim:
        raise ValueError(f"expected latents of dimension {g.dim}, got {z.shape[1]}")
    h = z
    for w, b in zip(g.weights, g.biases):
        pre = h @ w.T + b
        h = np.where(pre >= 0, pre, g.slope * pre)
    if g.embedding is not None:
        h = h @ g.embedding.T
    return h


def mixing_invert(g: MixingNet, x: np.ndarray) -> np.ndarray:
    """
    z = g^-1(x): couches inversees dans l'ordre inverse.

    Raises:
        numpy.linalg.LinAlgError: matrice singuliere
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != g.out_dim:
        raise ValueError(f"expected observations of dimension {g.out_dim}, got {x.shape[1]}")
    h = x @ g.embedding if g.embedding is not None else x
    for w, b in zip(reversed(g.weights), reversed(g.biases)):
        pre = np.where(h >= 0, h, h / g.slope)
        h = np.linalg.solve(w, (pre - b).T).T
    return h


# Encodeur f -------------------------------------------------------------------

@dataclass
class Encoder:
    """
    Perceptron f: couches cachees affine + leaky_relu, couche finale affine,
    puis tete de normalisation multipliee par `magnitude`.
    """
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head: HeadKind
    slope: float = 0.01
    magnitude: np.ndarray = field(default_factory=lambda: np.ones((1, 1)))

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def latent_dim(self) -> int:
        return self.weights[-1].shape[0]

    def parameters(self) -> list[np.ndarray]:
        """Parametres entraines, dans un ordre fixe (magnitude en dernier si tete normalisee)."""
        params = [p for pair in zip(self.weights, self.biases) for p in pair]
        if self.head != HeadKind.NONE:
            params.append(self.magnitude)
        return params

    def with_parameters(self, params: Sequence[np.ndarray]) -> "Encoder":
        n_layers = len(self.weights)
        expected = 2 * n_layers + (self.head != HeadKind.NONE)
        if len(params) != expected:
            raise ValueError(f"expected {expected} parameter arrays, got {len(params)}")
        magnitude = params[-1] if self.head != HeadKind.NONE else self.magnitude
        return Encoder(
            weights=[np.array(p) for p in params[0:2 * n_layers:2]],
            biases=[np.array(p) for p in params[1:2 * n_layers:2]],
            head=self.head,
            slope=self.slope,
            magnitude=np.array(magnitude).reshape(1, 1),
        )


def init_encoder(
    in_dim: int,
    latent_dim: int,
    head: HeadKind,
    rng: np.random.Generator,
    spec: EncoderSpec = EncoderSpec(),
) -> Encoder:
    """
    Initialise f avec U(-1/sqrt(entree), 1/sqrt(entree)) pour poids et biais.

    Les largeurs cachees sont `spec.hidden` multiplies par la dimension latente.
    """
    widths = [in_dim] + [m * latent_dim for m in spec.hidden] + [latent_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=(1, fan_out)))
    return Encoder(weights, biases, head, spec.slope, np.full((1, 1), spec.magnitude_init))


def encoder_forward(
    f: Encoder,
    x: Union[np.ndarray, dg.Node],
    tape: dg.Tape,
    params: Optional[list[dg.Node]] = None,
    trainable: bool = True,
) -> tuple[dg.Node, list[dg.Node]]:
    """
    Passe avant differentiable de f.

    Args:
        f: Encodeur
        x: Observations (n x K)
        tape: Bande d'enregistrement
        params: Noeuds parametres deja enregistres (partage entre vues)
        trainable: Enregistre les parametres comme variables ou constantes

    Returns:
        (sortie n x N, noeuds parametres dans l'ordre de Encoder.parameters())

    Raises:
        ValueError: "normalization of zero vector" si une ligne avant la tete est nulle
    """
    if params is None:
        leaf = tape.variable if trainable else tape.constant
        params = [leaf(p) for p in f.parameters()]
    h = x if isinstance(x, dg.Node) else tape.constant(x)
    if h.shape[1] != f.in_dim:
        raise ValueError(f"expected observations of dimension {f.in_dim}, got {h.shape[1]}")

    n_layers = len(f.weights)
    for layer in range(n_layers):
        h = dg.affine(params[2 * layer], params[2 * layer + 1], h)
        if layer < n_layers - 1:
            h = dg.leaky_relu(h, f.slope)

    if f.head == HeadKind.SPHERE_L2:
        h = dg.scale(dg.row_normalize_l2(h), params[-1])
    elif f.head == HeadKind.BOX_LINF:
        h = dg.scale(dg.row_normalize_linf(h), params[-1])
    return h, params


def predict(f: Encoder, x: np.ndarray) -> np.ndarray:
    """f(x) sans gradient."""
    out, _ = encoder_forward(f, np.atleast_2d(x), dg.Tape(), trainable=False)
    return out.value


def apply_head(head: HeadKind, h: np.ndarray, magnitude: float = 1.0) -> np.ndarray:
    """Tete seule, hors bande."""
    tape = dg.Tape()
    node = tape.constant(h)
    if head == HeadKind.SPHERE_L2:
        node = dg.row_normalize_l2(node)
    elif head == HeadKind.BOX_LINF:
        node = dg.row_normalize_linf(node)
    return magnitude * node.value


# Points de sauvegarde ---------------------------------------------------------

CHECKPOINT_MAGIC = b"CLIDCKPT"
CHECKPOINT_VERSION = 1
KIND_MIXING = 0
KIND_ENCODER = 1
HEAD_CODES = {HeadKind.SPHERE_L2: 0, HeadKind.BOX_LINF: 1, HeadKind.NONE: 2}
NO_HEAD = 255
_HEADER = struct.Struct("<8sIIIdI")


def save_checkpoint(path: Union[str, Path], net: Union[MixingNet, Encoder]) -> None:
    """
    Ecrit un reseau au format binaire documente dans docs/checkpoint_format.md.
    """
    if isinstance(net, Encoder):
        kind, head, arrays = KIND_ENCODER, HEAD_CODES[net.head], net.parameters()
        if net.head == HeadKind.NONE:
            arrays = arrays + [net.magnitude]
    else:
        kind, head = KIND_MIXING, NO_HEAD
        arrays = [p for pair in zip(net.weights, net.biases) for p in pair]
        if net.embedding is not None:
            arrays.append(net.embedding)

    chunks = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, kind, head, net.slope, len(arrays))]
    for array in arrays:
        array = np.asarray(array, dtype="<f8")
        chunks.append(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
        chunks.append(np.ascontiguousarray(array).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: Union[str, Path]) -> Union[MixingNet, Encoder]:
    """
    Relit un reseau ecrit par save_checkpoint.

    Raises:
        ValueError: fichier tronque, magie ou version inconnue
    """
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError("truncated checkpoint")
    magic, version, kind, head, slope, n_arrays = _HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")

    offset = _HEADER.size
    arrays = []
    try:
        for _ in range(n_arrays):
            (ndim,) = struct.unpack_from("<I", data, offset)
            shape = struct.unpack_from(f"<{ndim}I", data, offset + 4)
            offset += 4 + 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            array = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
            arrays.append(array.reshape(shape).astype(np.float64))
            offset += 8 * count
    except (struct.error, ValueError) as exc:
        raise ValueError("truncated checkpoint") from exc

    if kind == KIND_ENCODER:
        codes = {code: h for h, code in HEAD_CODES.items()}
        if head not in codes:
            raise ValueError(f"unknown head code {head}")
        layers = (n_arrays - 1) // 2
        return Encoder(
            weights=arrays[0:2 * layers:2],
            biases=arrays[1:2 * layers:2],
            head=codes[head],
            slope=slope,
            magnitude=arrays[-1].reshape(1, 1),
        )
    if kind == KIND_MIXING:
        layers = n_arrays // 2
        embedding = arrays[-1] if n_arrays % 2 else None
        return MixingNet(arrays[0:2 * layers:2], arrays[1:2 * layers:2], slope, embedding)
    raise ValueError(f"unknown checkpoint kind {kind}")
