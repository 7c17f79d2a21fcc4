"""Embedding tables, score functions and losses with analytic gradients.

All parameters live in ordinary ``R^d`` (the ambient space). Lorentz-based
models lift rows onto the hyperboloid on the fly; HyperBPR clips rows into
the Poincare ball at use. Gradients are therefore taken with respect to the
ambient rows, through the lift or the clip.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.special import expit

from .geometry import BALL_MAX_NORM

# Floor on arccosh(z) near z = 1 so that d/dz stays finite for coincident points.
_ACOSH_EPS = 1e-15

CHECKPOINT_MAGIC = b"TRPLH1\0\0"


class ModelKind(str, Enum):
    TRIPLH = "TriplH"
    TRIPLE = "TriplE"
    BPR = "BPR"
    MF = "MF"
    LORENTZFM = "LorentzFM"
    HYPERBPR = "HyperBPR"

    @classmethod
    def parse(cls, name: str) -> "ModelKind":
        if isinstance(name, cls):
            return name
        for kind in cls:
            if kind.value.lower() == str(name).lower():
                return kind
        valid = ", ".join(k.value for k in cls)
        raise ValueError(f"unknown model kind {name!r}; valid kinds: {valid}")

    @property
    def geometry(self) -> str:
        if self in (ModelKind.TRIPLH, ModelKind.LORENTZFM):
            return "lorentz"
        if self is ModelKind.HYPERBPR:
            return "poincare"
        return "euclidean"


TRIPLET_KINDS = (ModelKind.TRIPLH, ModelKind.TRIPLE)
PAIRWISE_KINDS = (ModelKind.BPR, ModelKind.HYPERBPR)
POINTWISE_KINDS = (ModelKind.MF, ModelKind.LORENTZFM)


@dataclass(frozen=True)
class ModelConfig:
    model_kind: ModelKind = ModelKind.TRIPLH
    dim: int = 64
    beta: float = 1.0
    lam: float = 0.0
    init_scale: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "model_kind", ModelKind.parse(self.model_kind))
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"dim must be a positive integer, got {self.dim}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.lam < 0:
            raise ValueError(f"lam must be nonnegative, got {self.lam}")
        if self.init_scale < 0:
            raise ValueError(f"init_scale must be nonnegative, got {self.init_scale}")
        if self.model_kind.geometry == "lorentz" and self.beta != 1.0:
            # The score is defined through the beta = 1 origin.
            raise ValueError(f"{self.model_kind.value} scores require beta = 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model_kind"] = self.model_kind.value
        return d


@dataclass
class EmbeddingTable:
    users: np.ndarray
    items: np.ndarray
    margin_a: float = 1.0
    margin_b: float = 0.0

    @property
    def n_users(self) -> int:
        return self.users.shape[0]

    @property
    def n_items(self) -> int:
        return self.items.shape[0]

    @property
    def dim(self) -> int:
        return self.users.shape[1]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.users.copy(), self.items.copy(), self.margin_a, self.margin_b)

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.users))
            and np.all(np.isfinite(self.items))
            and np.isfinite(self.margin_a)
            and np.isfinite(self.margin_b)
        )

    def equals(self, other: "EmbeddingTable") -> bool:
        return (
            np.array_equal(self.users, other.users)
            and np.array_equal(self.items, other.items)
            and self.margin_a == other.margin_a
            and self.margin_b == other.margin_b
        )


@dataclass
class TripletBatch:
    users: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.positives = np.asarray(self.positives, dtype=np.int64)
        self.negatives = np.asarray(self.negatives, dtype=np.int64)
        if not (len(self.users) == len(self.positives) == len(self.negatives)):
            raise ValueError("triplet batch index vectors must have equal lengths")

    def __len__(self) -> int:
        return len(self.users)


@dataclass
class Gradients:
    """Row-sparse gradients: only rows that appear in the batch are stored."""

    user_rows: np.ndarray
    user_grads: np.ndarray
    item_rows: np.ndarray
    item_grads: np.ndarray
    margin_a: float = 0.0
    margin_b: float = 0.0

    def dense(self, table: EmbeddingTable) -> EmbeddingTable:
        users = np.zeros_like(table.users)
        items = np.zeros_like(table.items)
        users[self.user_rows] = self.user_grads
        items[self.item_rows] = self.item_grads
        return EmbeddingTable(users, items, self.margin_a, self.margin_b)

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.user_grads))
            and np.all(np.isfinite(self.item_grads))
            and np.isfinite(self.margin_a)
            and np.isfinite(self.margin_b)
        )


def init_table(cfg: ModelConfig, n_users: int, n_items: int, seed: int = 0) -> EmbeddingTable:
    if n_users < 1 or n_items < 1:
        raise ValueError("user and item counts must be positive")
    rng = np.random.default_rng(seed)
    users = rng.normal(0.0, cfg.init_scale, size=(n_users, cfg.dim))
    items = rng.normal(0.0, cfg.init_scale, size=(n_items, cfg.dim))
    return EmbeddingTable(users, items, margin_a=1.0, margin_b=0.0)


# ---------------------------------------------------------------------------
# pairwise score kernels: (x, y) rows -> (score, d score/dx, d score/dy)


def _rowdot(x, y):
    return np.einsum("ij,ij->i", x, y)


def _dot_pair(x, y):
    return _rowdot(x, y), y, x


def _lorentz_pair(x, y):
    # Closed form of the LorentzFM score for beta = 1 lifts:
    #   S = ((x0 - 1)(y0 - 1) - x.y) / (x0 y0)
    x0 = np.sqrt(1.0 + _rowdot(x, x))[:, None]
    y0 = np.sqrt(1.0 + _rowdot(y, y))[:, None]
    s = ((x0 - 1.0) * (y0 - 1.0) - _rowdot(x, y)[:, None]) / (x0 * y0)
    dx = ((y0 - 1.0) * x / x0 - y) / (x0 * y0) - s * x / x0**2
    dy = ((x0 - 1.0) * y / y0 - x) / (x0 * y0) - s * y / y0**2
    return s[:, 0], dx, dy


def _clip_with_jacobian(x, max_norm=BALL_MAX_NORM):
    norm = np.sqrt(_rowdot(x, x))[:, None]
    clipped = norm > max_norm
    scale = np.where(clipped, max_norm / np.maximum(norm, 1e-300), 1.0)
    xc = x * scale

    def backward(g):
        unit = x / np.maximum(norm, 1e-300)
        projected = scale * (g - unit * _rowdot(unit, g)[:, None])
        return np.where(clipped, projected, g)

    return xc, backward


def _poincare_pair(x, y):
    # score = -arccosh(z), z = 1 + 2|x - y|^2 / ((1 - |x|^2)(1 - |y|^2))
    xc, back_x = _clip_with_jacobian(x)
    yc, back_y = _clip_with_jacobian(y)
    diff = xc - yc
    sq = _rowdot(diff, diff)[:, None]
    alpha = 1.0 - _rowdot(xc, xc)[:, None]
    gamma = 1.0 - _rowdot(yc, yc)[:, None]
    z = np.maximum(1.0 + 2.0 * sq / (alpha * gamma), 1.0)
    dist = np.arccosh(z)
    dd_dz = 1.0 / np.sqrt(np.maximum((z - 1.0) * (z + 1.0), _ACOSH_EPS))
    dz_dx = 4.0 * diff / (alpha * gamma) + 4.0 * sq * xc / (alpha**2 * gamma)
    dz_dy = -4.0 * diff / (alpha * gamma) + 4.0 * sq * yc / (alpha * gamma**2)
    return -dist[:, 0], back_x(-dd_dz * dz_dx), back_y(-dd_dz * dz_dy)


_PAIR_KERNELS = {"euclidean": _dot_pair, "lorentz": _lorentz_pair, "poincare": _poincare_pair}


def pair_scores(cfg: ModelConfig, x: np.ndarray, y: np.ndarray):
    """Scores and gradients for aligned rows of ``x`` and ``y``."""
    return _PAIR_KERNELS[cfg.model_kind.geometry](np.atleast_2d(x), np.atleast_2d(y))


def _check_indices(table: EmbeddingTable, users, items):
    users = np.asarray(users)
    items = np.asarray(items)
    if users.size and (users.min() < 0 or users.max() >= table.n_users):
        raise IndexError("user index out of range")
    if items.size and (items.min() < 0 or items.max() >= table.n_items):
        raise IndexError("item index out of range")


def score(table: EmbeddingTable, cfg: ModelConfig, user: int, item: int) -> float:
    """Relevance of ``item`` for ``user``; higher is better for every model kind."""
    _check_indices(table, [user], [item])
    s, _, _ = pair_scores(cfg, table.users[[user]], table.items[[item]])
    return float(s[0])


def score_matrix(table: EmbeddingTable, cfg: ModelConfig, users=None) -> np.ndarray:
    """Scores of the given users (all users by default) against the full catalog."""
    if users is None:
        users = np.arange(table.n_users)
    users = np.asarray(users, dtype=np.int64)
    _check_indices(table, users, [])
    x, y = table.users[users], table.items
    geometry = cfg.model_kind.geometry
    if geometry == "euclidean":
        return x @ y.T
    if geometry == "lorentz":
        x0 = np.sqrt(1.0 + _rowdot(x, x))
        y0 = np.sqrt(1.0 + _rowdot(y, y))
        return (np.outer(x0 - 1.0, y0 - 1.0) - x @ y.T) / np.outer(x0, y0)
    xc, _ = _clip_with_jacobian(x)
    yc, _ = _clip_with_jacobian(y)
    xx = _rowdot(xc, xc)
    yy = _rowdot(yc, yc)
    sq = np.maximum(xx[:, None] + yy[None, :] - 2.0 * (xc @ yc.T), 0.0)
    z = 1.0 + 2.0 * sq / np.outer(1.0 - xx, 1.0 - yy)
    return -np.arccosh(np.maximum(z, 1.0))


# ---------------------------------------------------------------------------
# losses


def _softplus(z):
    return np.logaddexp(0.0, z)


def _item_product(cfg: ModelConfig, y, z):
    """``<lift(y), lift(z)>_L`` for Lorentz models, ``y.z`` otherwise, with gradients."""
    if cfg.model_kind.geometry == "lorentz":
        y0 = np.sqrt(cfg.beta + _rowdot(y, y))[:, None]
        z0 = np.sqrt(cfg.beta + _rowdot(z, z))[:, None]
        p = -y0[:, 0] * z0[:, 0] + _rowdot(y, z)
        return p, z - z0 * y / y0, y - y0 * z / z0
    return _rowdot(y, z), z, y


def _collect(table, batch, user_grad, pos_grad, neg_grad, a=0.0, b=0.0) -> Gradients:
    user_rows, user_inv = np.unique(batch.users, return_inverse=True)
    user_grads = np.zeros((len(user_rows), table.dim))
    np.add.at(user_grads, user_inv, user_grad)
    items = np.concatenate([batch.positives, batch.negatives])
    item_rows, item_inv = np.unique(items, return_inverse=True)
    item_grads = np.zeros((len(item_rows), table.dim))
    np.add.at(item_grads, item_inv, np.concatenate([pos_grad, neg_grad]))
    return Gradients(user_rows, user_grads, item_rows, item_grads, float(a), float(b))


def triplh_loss(table: EmbeddingTable, cfg: ModelConfig, batch: TripletBatch):
    """Triplet loss with adaptive margin, mean over the batch.

    Per triplet: ``-log sigmoid(S(u,v+) - S(u,v-) - (a*S(v+,v-) + b)) + lam*<v+,v->^2``.
    Returns ``(loss, Gradients)``.
    """
    if cfg.model_kind not in TRIPLET_KINDS:
        raise ValueError(f"triplet loss is defined for TriplH/TriplE, not {cfg.model_kind.value}")
    _check_indices(table, batch.users, np.concatenate([batch.positives, batch.negatives]))
    u = table.users[batch.users]
    vp = table.items[batch.positives]
    vn = table.items[batch.negatives]
    a, b = table.margin_a, table.margin_b
    n = len(batch)

    s_pos, dpos_u, dpos_v = pair_scores(cfg, u, vp)
    s_neg, dneg_u, dneg_v = pair_scores(cfg, u, vn)
    s_pp, dpp_p, dpp_n = pair_scores(cfg, vp, vn)
    prod, dprod_p, dprod_n = _item_product(cfg, vp, vn)

    z = s_pos - s_neg - (a * s_pp + b)
    loss = np.mean(_softplus(-z) + cfg.lam * prod**2)

    g = (-expit(-z) / n)[:, None]
    r = (2.0 * cfg.lam * prod / n)[:, None]
    grad_u = g * (dpos_u - dneg_u)
    grad_p = g * (dpos_v - a * dpp_p) + r * dprod_p
    grad_n = g * (-dneg_v - a * dpp_n) + r * dprod_n
    grad_a = float(np.sum(-g[:, 0] * s_pp))
    grad_b = float(np.sum(-g[:, 0]))
    return float(loss), _collect(table, batch, grad_u, grad_p, grad_n, grad_a, grad_b)


def bpr_loss(table: EmbeddingTable, cfg: ModelConfig, batch: TripletBatch):
    """``mean(-log sigmoid(S(u,v+) - S(u,v-)))`` for BPR and HyperBPR."""
    if cfg.model_kind not in PAIRWISE_KINDS:
        raise ValueError(f"BPR loss is defined for BPR/HyperBPR, not {cfg.model_kind.value}")
    _check_indices(table, batch.users, np.concatenate([batch.positives, batch.negatives]))
    u = table.users[batch.users]
    s_pos, dpos_u, dpos_v = pair_scores(cfg, u, table.items[batch.positives])
    s_neg, dneg_u, dneg_v = pair_scores(cfg, u, table.items[batch.negatives])
    z = s_pos - s_neg
    loss = np.mean(_softplus(-z))
    g = (-expit(-z) / len(batch))[:, None]
    return float(loss), _collect(table, batch, g * (dpos_u - dneg_u), g * dpos_v, -g * dneg_v)


def pointwise_loss(table: EmbeddingTable, cfg: ModelConfig, batch: TripletBatch):
    """Binary cross-entropy: positives labelled 1, sampled negatives 0.

    The mean is taken over all ``2 * len(batch)`` labelled pairs.
    """
    if cfg.model_kind not in POINTWISE_KINDS:
        raise ValueError(f"pointwise loss is defined for MF/LorentzFM, not {cfg.model_kind.value}")
    _check_indices(table, batch.users, np.concatenate([batch.positives, batch.negatives]))
    u = table.users[batch.users]
    s_pos, dpos_u, dpos_v = pair_scores(cfg, u, table.items[batch.positives])
    s_neg, dneg_u, dneg_v = pair_scores(cfg, u, table.items[batch.negatives])
    m = 2 * len(batch)
    loss = (np.sum(_softplus(-s_pos)) + np.sum(_softplus(s_neg))) / m
    g_pos = (-expit(-s_pos) / m)[:, None]
    g_neg = (expit(s_neg) / m)[:, None]
    return float(loss), _collect(
        table, batch, g_pos * dpos_u + g_neg * dneg_u, g_pos * dpos_v, g_neg * dneg_v
    )


def loss_and_grads(table: EmbeddingTable, cfg: ModelConfig, batch: TripletBatch):
    """Dispatch to the training loss of ``cfg.model_kind``."""
    kind = cfg.model_kind
    if kind in TRIPLET_KINDS:
        return triplh_loss(table, cfg, batch)
    if kind in PAIRWISE_KINDS:
        return bpr_loss(table, cfg, batch)
    return pointwise_loss(table, cfg, batch)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(table: EmbeddingTable, cfg: ModelConfig, path) -> None:
    """Write header, little-endian float64 users, items, margins, then a JSON config trailer."""
    header = CHECKPOINT_MAGIC + struct.pack("<III", table.n_users, table.n_items, table.dim)
    body = np.concatenate(
        [table.users.ravel(), table.items.ravel(), [table.margin_a, table.margin_b]]
    ).astype("<f8")
    trailer = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    Path(path).write_bytes(header + body.tobytes() + trailer)


def load_checkpoint(path) -> tuple[EmbeddingTable, ModelConfig]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    n_users, n_items, dim = struct.unpack_from("<III", raw, 8)
    n_floats = (n_users + n_items) * dim + 2
    start = 8 + 12
    end = start + 8 * n_floats
    if len(raw) < end:
        raise ValueError(f"{path}: truncated checkpoint")
    body = np.frombuffer(raw, dtype="<f8", count=n_floats, offset=start).astype(np.float64)
    users = body[: n_users * dim].reshape(n_users, dim).copy()
    items = body[n_users * dim : (n_users + n_items) * dim].reshape(n_items, dim).copy()
    cfg = ModelConfig(**json.loads(raw[end:].decode("utf-8")))
    if cfg.dim != dim:
        raise ValueError(f"{path}: config dim {cfg.dim} disagrees with header dim {dim}")
    return EmbeddingTable(users, items, float(body[-2]), float(body[-1])), cfg
