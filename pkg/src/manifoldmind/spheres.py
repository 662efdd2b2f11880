"""Probabilistic sphere embeddings ``(center, radius, curvature)`` and the kernel."""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry as geo

EPS_KERNEL = 1e-6
INIT_STD = 0.1
INIT_RADIUS = 1.0
KERNEL_VARIANTS = ("as_printed", "uncertainty_penalizing")


class Kind(enum.IntEnum):
    USER = 0
    ITEM = 1
    TAG = 2


@dataclass(frozen=True, order=True)
class EntityId:
    kind: Kind
    index: int

    def __str__(self):
        return f"{self.kind.name.lower()}:{self.index}"

    @classmethod
    def parse(cls, text: str) -> "EntityId":
        kind, _, index = text.partition(":")
        return cls(Kind[kind.upper()], int(index))


@dataclass
class ProbabilisticSphere:
    center: np.ndarray
    radius: float
    curvature: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if not self.radius > 0:
            raise geo.DomainError("radius must be positive")
        if not geo.KAPPA_MIN <= self.curvature <= geo.KAPPA_MAX:
            raise geo.DomainError(f"curvature {self.curvature} outside clamp range")


def softplus(w):
    w = np.asarray(w, dtype=np.float64)
    return np.logaddexp(0.0, w)


def inv_softplus(r):
    r = np.asarray(r, dtype=np.float64)
    return r + np.log(-np.expm1(-r))


def sigmoid(w):
    w = np.asarray(w, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -w))


def clamp_curvature(raw):
    return np.clip(raw, geo.KAPPA_MIN, geo.KAPPA_MAX)


def init_sphere(seed_vector, rng: np.random.Generator,
                radius: float = INIT_RADIUS) -> ProbabilisticSphere:
    """Build one sphere from an initializer draw ``seed_vector``.

    The curvature is drawn from ``rng`` first so that the center can be mapped
    into the ball of that curvature.
    """
    e = np.asarray(seed_vector, dtype=np.float64)
    kappa = float(rng.uniform(geo.KAPPA_MIN, geo.KAPPA_MAX))
    return ProbabilisticSphere(_init_center(e, kappa), radius, kappa)


def _init_center(e: np.ndarray, kappa) -> np.ndarray:
    norm = np.linalg.norm(e, axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    v = np.where(norm > 0, e / safe * np.tanh(norm), 0.0)
    origin = np.zeros_like(e)
    return geo.exp_map(origin, v, np.asarray(kappa, dtype=np.float64))


@dataclass
class ModelParams:
    """All sphere parameters, indexed by a global entity id.

    Global ids are laid out users first, then items, then tags, which is also
    the ``(kind, index)`` sort order of :class:`EntityId`.
    """

    n_users: int
    n_items: int
    n_tags: int
    centers: np.ndarray
    raw_radius: np.ndarray
    raw_curvature: np.ndarray

    @property
    def n_entities(self) -> int:
        return self.n_users + self.n_items + self.n_tags

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def radii(self) -> np.ndarray:
        return softplus(self.raw_radius)

    @property
    def curvatures(self) -> np.ndarray:
        return clamp_curvature(self.raw_curvature)

    def offset(self, kind: Kind) -> int:
        return (0, self.n_users, self.n_users + self.n_items)[kind]

    def gid(self, entity: EntityId) -> int:
        size = (self.n_users, self.n_items, self.n_tags)[entity.kind]
        if not 0 <= entity.index < size:
            raise KeyError(f"unknown entity {entity}")
        return self.offset(entity.kind) + entity.index

    def entity(self, gid: int) -> EntityId:
        if gid < self.n_users:
            return EntityId(Kind.USER, gid)
        if gid < self.n_users + self.n_items:
            return EntityId(Kind.ITEM, gid - self.n_users)
        return EntityId(Kind.TAG, gid - self.n_users - self.n_items)

    def sphere(self, entity: EntityId | int) -> ProbabilisticSphere:
        g = entity if isinstance(entity, (int, np.integer)) else self.gid(entity)
        return ProbabilisticSphere(self.centers[g].copy(), float(self.radii[g]),
                                   float(self.curvatures[g]))

    def copy(self) -> "ModelParams":
        return ModelParams(self.n_users, self.n_items, self.n_tags, self.centers.copy(),
                           self.raw_radius.copy(), self.raw_curvature.copy())

    def model_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.array([self.n_users, self.n_items, self.n_tags], dtype=np.int64).tobytes())
        for a in (self.centers, self.raw_radius, self.raw_curvature):
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        return h.hexdigest()[:16]


def init_model(n_users: int, n_items: int, n_tags: int, dim: int, seed: int,
               radius: float = INIT_RADIUS) -> ModelParams:
    """Initialize every entity from one seeded stream, in ``(kind, index)`` order."""
    rng = np.random.default_rng(seed)
    n = n_users + n_items + n_tags
    e = rng.normal(0.0, INIT_STD, size=(n, dim))
    kappa = rng.uniform(geo.KAPPA_MIN, geo.KAPPA_MAX, size=n)
    centers = _init_center(e, kappa)
    return ModelParams(n_users, n_items, n_tags, centers,
                       np.full(n, float(inv_softplus(radius))), kappa)


@dataclass(frozen=True)
class KernelSettings:
    variant: str = "as_printed"
    euclidean: bool = False
    eps: float = EPS_KERNEL

    def __post_init__(self):
        if self.variant not in KERNEL_VARIANTS:
            raise ValueError(f"unknown kernel variant {self.variant!r}")


DEFAULT_KERNEL = KernelSettings()


def _log_kernel_from(d, ra, rb, settings: KernelSettings):
    denom = ra * ra + rb * rb + settings.eps
    if settings.variant == "as_printed":
        return -d * d / denom
    return -d * d * denom


def pair_distance(a: ProbabilisticSphere, b: ProbabilisticSphere,
                  settings: KernelSettings = DEFAULT_KERNEL) -> tuple[float, float]:
    """Return ``(distance, effective curvature)`` for two spheres."""
    k = geo.effective_curvature(a.radius, a.curvature, b.radius, b.curvature)
    if settings.euclidean:
        return geo.euclidean_distance(a.center, b.center), k
    return geo.geodesic_distance(a.center, b.center, k), k


def log_kernel(a: ProbabilisticSphere, b: ProbabilisticSphere,
               settings: KernelSettings = DEFAULT_KERNEL) -> float:
    d, _ = pair_distance(a, b, settings)
    return float(_log_kernel_from(d, a.radius, b.radius, settings))


def kernel(a: ProbabilisticSphere, b: ProbabilisticSphere,
           settings: KernelSettings = DEFAULT_KERNEL) -> float:
    """Curvature-aware similarity in ``(0, 1]``; 1 exactly when centers coincide."""
    return float(np.exp(log_kernel(a, b, settings)))


def log_kernel_edges(params: ModelParams, src: np.ndarray, dst: np.ndarray,
                     settings: KernelSettings = DEFAULT_KERNEL) -> np.ndarray:
    """Vectorized log-kernel for edges ``src[n] -> dst[n]`` (global ids)."""
    if len(src) == 0:
        return np.zeros(0)
    r = params.radii
    kap = params.curvatures
    ra, rb = r[src], r[dst]
    ma, mb = params.centers[src], params.centers[dst]
    if settings.euclidean:
        d = np.linalg.norm(ma - mb, axis=-1)
    else:
        k = (ra + rb) / (ra / kap[src] + rb / kap[dst])
        d = geo._distance(ma, mb, k)
    return _log_kernel_from(np.asarray(d), ra, rb, settings)


@dataclass
class EdgeGrads:
    """Partials of per-edge log-kernels w.r.t. raw parameters of both endpoints."""

    log_k: np.ndarray
    d_center_src: np.ndarray
    d_center_dst: np.ndarray
    d_raw_radius_src: np.ndarray
    d_raw_radius_dst: np.ndarray
    d_raw_curv_src: np.ndarray
    d_raw_curv_dst: np.ndarray


def log_kernel_edges_grad(params: ModelParams, src: np.ndarray, dst: np.ndarray,
                          settings: KernelSettings = DEFAULT_KERNEL) -> EdgeGrads:
    wa, wb = params.raw_radius[src], params.raw_radius[dst]
    ra, rb = softplus(wa), softplus(wb)
    ma, mb = params.centers[src], params.centers[dst]
    ka_raw, kb_raw = params.raw_curvature[src], params.raw_curvature[dst]
    ka, kb = clamp_curvature(ka_raw), clamp_curvature(kb_raw)
    in_a = ((ka_raw >= geo.KAPPA_MIN) & (ka_raw <= geo.KAPPA_MAX)).astype(float)
    in_b = ((kb_raw >= geo.KAPPA_MIN) & (kb_raw <= geo.KAPPA_MAX)).astype(float)

    zeros = np.zeros(len(src))
    if settings.euclidean:
        delta = ma - mb
        d = np.linalg.norm(delta, axis=-1)
        safe = np.where(d > 0, d, 1.0)[:, None]
        dd_ma = np.where((d > 0)[:, None], delta / safe, 0.0)
        dd_mb = -dd_ma
        dd_k = zeros
        dk_ra = dk_ka = dk_rb = dk_kb = zeros
    else:
        k, dk_ra, dk_ka, dk_rb, dk_kb = geo.effective_curvature_grad(ra, ka, rb, kb)
        d, dd_ma, dd_mb, dd_k = geo.geodesic_distance_grad(ma, mb, k)

    denom = ra * ra + rb * rb + settings.eps
    if settings.variant == "as_printed":
        log_k = -d * d / denom
        dl_dd = -2.0 * d / denom
        dl_dden = d * d / (denom * denom)
    else:
        log_k = -d * d * denom
        dl_dd = -2.0 * d * denom
        dl_dden = -d * d

    dl_dk = dl_dd * dd_k
    dl_ra = dl_dden * 2.0 * ra + dl_dk * dk_ra
    dl_rb = dl_dden * 2.0 * rb + dl_dk * dk_rb
    return EdgeGrads(
        log_k=log_k,
        d_center_src=dl_dd[:, None] * dd_ma,
        d_center_dst=dl_dd[:, None] * dd_mb,
        d_raw_radius_src=dl_ra * sigmoid(wa),
        d_raw_radius_dst=dl_rb * sigmoid(wb),
        d_raw_curv_src=dl_dk * dk_ka * in_a,
        d_raw_curv_dst=dl_dk * dk_kb * in_b,
    )


def save_checkpoint(path: str | Path, params: ModelParams, *, seed: int,
                    config_hash: str, extra: dict | None = None) -> None:
    """Write a JSON checkpoint; floats use shortest round-trip repr (bit-exact)."""
    entities = {}
    for g in range(params.n_entities):
        entities[str(params.entity(g))] = {
            "raw_center": [float(x) for x in params.centers[g]],
            "raw_radius": float(params.raw_radius[g]),
            "raw_curvature": float(params.raw_curvature[g]),
        }
    doc = {
        "format": "manifoldmind-checkpoint/1",
        "seed": seed,
        "config_hash": config_hash,
        "model_hash": params.model_hash(),
        "shape": {"users": params.n_users, "items": params.n_items,
                  "tags": params.n_tags, "dim": params.dim},
        "entities": entities,
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    shape = doc["shape"]
    params = ModelParams(shape["users"], shape["items"], shape["tags"],
                         np.zeros((0, shape["dim"])), np.zeros(0), np.zeros(0))
    n = params.n_entities
    centers = np.zeros((n, shape["dim"]))
    raw_r = np.zeros(n)
    raw_k = np.zeros(n)
    for key, rec in doc["entities"].items():
        g = params.gid(EntityId.parse(key))
        centers[g] = rec["raw_center"]
        raw_r[g] = rec["raw_radius"]
        raw_k[g] = rec["raw_curvature"]
    params.centers, params.raw_radius, params.raw_curvature = centers, raw_r, raw_k
    meta = {k: v for k, v in doc.items() if k != "entities"}
    return params, meta
