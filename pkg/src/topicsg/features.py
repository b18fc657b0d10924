"""Visual, geometry and union features for objects and object pairs.

Detector training is out of reach at desk scale, so raw object features are
synthesized deterministically from the scene record: a per-category
prototype, attribute prototypes, a box-size direction and seeded noise.
Precomputed features can be supplied instead through a small binary format.

The projection functions are written against the ``@`` operator and
broadcasting only, so they accept numpy arrays and torch tensors alike.
"""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import Box, SceneRecord, TrainingScene, box_iou

GEOMETRY_PROJ_DIM = 64


class ConfigError(ValueError):
    """Inconsistent dimensions or model settings."""


@dataclass(frozen=True)
class ModelConfig:
    d_v: int = 64
    d_l: int = 32
    d_h: int = 64
    d_a: int = 32
    d_e: int = 32
    d_u: int = 64
    d_s: int = 32
    d_sem: int = 16
    d_tr: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    lam: float = 0.7
    seed: int = 0
    backbone: str = "updown"
    attn_layer: int = -1  # transformer decoder layer whose cross-attention is exported

    def __post_init__(self):
        for f in fields(self):
            if f.name.startswith("d_") or f.name in ("heads", "enc_layers", "dec_layers"):
                v = getattr(self, f.name)
                if not isinstance(v, int) or v <= 0:
                    raise ConfigError(f"{f.name} must be a positive integer, got {v!r}")
        if self.d_tr % self.heads:
            raise ConfigError(f"d_tr={self.d_tr} is not divisible by heads={self.heads}")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.backbone not in ("updown", "transformer"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeatureSet:
    """Features for one image.

    Raw parts (``visual``, ``union_raw``, ``geometry``) come from the feature
    source; the projected parts are filled in by :func:`project_features`.
    Matrices are column-per-item: ``visual`` is ``d_v x n`` and pair matrices
    are ``dim x P`` with columns ordered as ``pairs``.
    """

    image_id: str
    object_ids: list[int]
    categories: list[int]
    visual: np.ndarray
    pairs: list[tuple[int, int]]
    union_raw: np.ndarray
    geometry: np.ndarray
    visual_proj: np.ndarray | None = None
    global_feature: np.ndarray | None = None
    union_proj: np.ndarray | None = None
    _obj_index: dict = field(default_factory=dict, repr=False)
    _pair_index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._obj_index = {o: i for i, o in enumerate(self.object_ids)}
        self._pair_index = {p: k for k, p in enumerate(self.pairs)}

    @property
    def n(self) -> int:
        return len(self.object_ids)

    def obj_index(self, obj_id: int) -> int:
        try:
            return self._obj_index[obj_id]
        except KeyError:
            raise KeyError(f"{self.image_id}: unknown object id {obj_id}") from None

    def pair_index(self, pair: tuple[int, int]) -> int:
        try:
            return self._pair_index[tuple(pair)]
        except KeyError:
            raise KeyError(f"{self.image_id}: unknown pair {pair}") from None


def _check(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def project_visual(V, W_v, b_v):
    """Column-wise affine map ``W_v v_i + b_v``."""
    _check(W_v.shape[1] == V.shape[0], f"W_v expects {W_v.shape[1]} input rows, V has {V.shape[0]}")
    _check(b_v.shape[0] == W_v.shape[0], "b_v length must equal W_v rows")
    return W_v @ V + b_v[:, None]


def geometry_feature(bi: Box, bj: Box) -> np.ndarray:
    si = math.sqrt(bi.w * bi.h)
    return np.array([
        (bj.cx - bi.cx) / si,
        (bj.cy - bi.cy) / si,
        math.sqrt((bj.w * bj.h) / (bi.w * bi.h)),
        bi.w / bi.h,
        bj.w / bj.h,
        box_iou(bi, bj),
    ])


def union_feature(v_ij, g_ij, W_u, b_u, W_g, b_g):
    """``W_u [v_ij ; W_g g_ij + b_g] + b_u`` for column vectors or column matrices.

    ``W_u`` is split into its union and geometry blocks instead of
    concatenating the inputs, which keeps the function backend-agnostic.
    """
    d_u = v_ij.shape[0]
    _check(W_g.shape == (GEOMETRY_PROJ_DIM, 6), f"W_g must be {GEOMETRY_PROJ_DIM}x6, got {tuple(W_g.shape)}")
    _check(W_u.shape[1] == d_u + GEOMETRY_PROJ_DIM,
           f"W_u expects {W_u.shape[1]} inputs, got d_u + {GEOMETRY_PROJ_DIM} = {d_u + GEOMETRY_PROJ_DIM}")
    vec = v_ij.ndim == 1
    if vec:
        v_ij, g_ij = v_ij[:, None], g_ij[:, None]
    geo = W_g @ g_ij + b_g[:, None]
    out = W_u[:, :d_u] @ v_ij + W_u[:, d_u:] @ geo + b_u[:, None]
    return out[:, 0] if vec else out


def _rng(*keys) -> np.random.Generator:
    ints = [k if isinstance(k, int) else zlib.crc32(str(k).encode()) for k in keys]
    return np.random.default_rng([abs(i) for i in ints])


NOISE_STD = 0.3
ATTR_WEIGHT = 0.35
SIZE_WEIGHT = 0.35
UNION_NOISE_STD = 0.3


def _prototype(seed: int, kind: str, idx: int, dim: int) -> np.ndarray:
    return _rng(seed, kind, idx).standard_normal(dim)


def synth_visual(scene: TrainingScene, config: ModelConfig) -> np.ndarray:
    """Raw object features, ``d_v x n``."""
    size_dir = _prototype(config.seed, "size", 0, config.d_v)
    cols = []
    for o in scene.objects:
        v = _prototype(config.seed, "category", o.category, config.d_v)
        for a in o.attribute_words:
            v = v + ATTR_WEIGHT * _prototype(config.seed, "attribute", a, config.d_v)
        # log side length relative to a 100px object
        v = v + SIZE_WEIGHT * math.log(math.sqrt(o.box.area) / 100.0) * size_dir
        v = v + NOISE_STD * _rng(config.seed, scene.image_id, o.id).standard_normal(config.d_v)
        cols.append(v)
    return np.stack(cols, axis=1)


def all_pairs(object_ids) -> list[tuple[int, int]]:
    return [(i, j) for i in object_ids for j in object_ids if i != j]


def synth_features(scene: TrainingScene, config: ModelConfig, visual: np.ndarray | None = None) -> FeatureSet:
    """Deterministic raw features for every object and every ordered object pair.

    ``visual`` overrides the synthesized object features (precomputed input);
    union features are then mixed from the supplied columns.
    """
    V = synth_visual(scene, config) if visual is None else np.asarray(visual, dtype=np.float64)
    ids = scene.object_ids
    if V.shape != (config.d_v, len(ids)):
        raise ConfigError(f"{scene.image_id}: visual features have shape {V.shape}, expected {(config.d_v, len(ids))}")
    pairs = all_pairs(ids)
    mix = _rng(config.seed, "union-mix").standard_normal((2, config.d_u, config.d_v)) / math.sqrt(config.d_v)
    col = {o: k for k, o in enumerate(ids)}
    U = np.empty((config.d_u, len(pairs)))
    G = np.empty((6, len(pairs)))
    for k, (i, j) in enumerate(pairs):
        noise = _rng(config.seed, scene.image_id, i, j).standard_normal(config.d_u)
        U[:, k] = mix[0] @ V[:, col[i]] + mix[1] @ V[:, col[j]] + UNION_NOISE_STD * noise
        G[:, k] = geometry_feature(scene.object(i).box, scene.object(j).box)
    return FeatureSet(scene.image_id, list(ids), [o.category for o in scene.objects], V, pairs, U, G)


def project_features(fs: FeatureSet, params: dict) -> FeatureSet:
    """Fill the projected parts of ``fs`` from a numpy parameter map.

    Keys follow the captioner's parameter names (``visual.weight`` etc.).
    """
    fs.visual_proj = project_visual(fs.visual, params["visual.weight"], params["visual.bias"])
    fs.global_feature = fs.visual_proj.mean(axis=1)
    fs.union_proj = union_feature(fs.union_raw, fs.geometry, params["union.weight"], params["union.bias"],
                                  params["geometry.weight"], params["geometry.bias"])
    return fs


def save_precomputed(features: dict[str, np.ndarray], manifest_path: str | Path) -> None:
    """Write ``{image_id: d_v x n array}`` as a float32 blob plus JSON manifest.

    The blob sits next to the manifest with a ``.bin`` suffix; each image's
    matrix is stored object-major (one object's ``d_v`` values contiguous).
    """
    manifest_path = Path(manifest_path)
    blob_path = manifest_path.with_suffix(".bin")
    entries, offset = [], 0
    with open(blob_path, "wb") as fh:
        for image_id, V in features.items():
            V = np.asarray(V)
            data = np.ascontiguousarray(V.T, dtype="<f4").tobytes()
            fh.write(data)
            entries.append({"image_id": image_id, "n": int(V.shape[1]), "d_v": int(V.shape[0]), "offset": offset})
            offset += len(data)
    manifest_path.write_text(json.dumps({"blob": blob_path.name, "images": entries}, indent=1) + "\n")


def load_precomputed(manifest_path: str | Path) -> dict[str, np.ndarray]:
    manifest_path = Path(manifest_path)
    meta = json.loads(manifest_path.read_text())
    raw = (manifest_path.parent / meta["blob"]).read_bytes()
    out = {}
    for e in meta["images"]:
        count = e["n"] * e["d_v"]
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=e["offset"])
        out[e["image_id"]] = arr.reshape(e["n"], e["d_v"]).T.astype(np.float64)
    return out


def scene_features(records, config: ModelConfig, precomputed: dict[str, np.ndarray] | None = None) -> list[FeatureSet]:
    return [synth_features(r, config, None if precomputed is None else precomputed[r.image_id]) for r in records]


def strip_flags(records) -> list[TrainingScene]:
    return [r.for_training() if isinstance(r, SceneRecord) else r for r in records]
