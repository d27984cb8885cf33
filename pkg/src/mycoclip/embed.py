"""Small dual encoder mapping images and captions onto the unit sphere.

Image path: 8x8 RGB patches -> linear patch projection -> per-patch tanh
block (``g1``) -> mean over patches -> tanh block (``g2``) -> head ->
L2 normalization.

Text path: tokens -> embedding table -> mean pool -> tanh block (``g3``)
-> head -> L2 normalization.  Mean pooling makes the text encoder
invariant to token order.

Parameters live in a flat ``dict[str, ndarray]`` (float64) so the training
code can treat every tensor uniformly.  Each name belongs to one freeze
group: ``g1``, ``g2``, ``g3``, ``heads`` or ``log_tau``.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .captions import tokenize
from .errors import ShapeError
from .raster import RasterImage
from .rng import make_rng

GROUPS = ("g1", "g2", "g3", "heads", "log_tau")
PARAM_GROUP = {
    "img.patch_w": "g1",
    "img.patch_b": "g1",
    "img.w1": "g1",
    "img.b1": "g1",
    "img.w2": "g2",
    "img.b2": "g2",
    "img.head_w": "heads",
    "img.head_b": "heads",
    "txt.embed": "g3",
    "txt.w": "g3",
    "txt.b": "g3",
    "txt.head_w": "heads",
    "txt.head_b": "heads",
    "log_tau": "log_tau",
}
UNK = "<unk>"
TAU_INIT = 0.07
TAU_MIN, TAU_MAX = 0.01, 1.0
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderDims:
    patch: int = 8
    channels: int = 3
    hidden: int = 64
    token_dim: int = 32
    text_hidden: int = 64
    embed_dim: int = 64

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


def build_vocabulary(captions: Iterable[str]) -> dict[str, int]:
    words = sorted({w for c in captions for w in tokenize(c)} - {UNK})
    return {UNK: 0, **{w: i + 1 for i, w in enumerate(words)}}


def param_shapes(dims: EncoderDims, vocab_size: int) -> dict[str, tuple[int, ...]]:
    h, d = dims.hidden, dims.embed_dim
    return {
        "img.patch_w": (dims.patch_dim, h),
        "img.patch_b": (h,),
        "img.w1": (h, h),
        "img.b1": (h,),
        "img.w2": (h, h),
        "img.b2": (h,),
        "img.head_w": (h, d),
        "img.head_b": (d,),
        "txt.embed": (vocab_size, dims.token_dim),
        "txt.w": (dims.token_dim, dims.text_hidden),
        "txt.b": (dims.text_hidden,),
        "txt.head_w": (dims.text_hidden, d),
        "txt.head_b": (d,),
        "log_tau": (),
    }


def fan_in(name: str, shape: tuple[int, ...], dims: EncoderDims) -> int:
    """Input width feeding a tensor; the embedding table is a lookup (fan-in 1)."""
    if name == "txt.embed":
        return 1
    fans = {
        "img.patch_b": dims.patch_dim, "img.b1": dims.hidden, "img.b2": dims.hidden,
        "img.head_b": dims.hidden, "txt.b": dims.token_dim, "txt.head_b": dims.text_hidden,
    }
    return fans.get(name, shape[0] if shape else 1)


@dataclass
class EncoderPair:
    params: dict[str, np.ndarray]
    vocab: dict[str, int]
    dims: EncoderDims = field(default_factory=EncoderDims)
    frozen: set[str] = field(default_factory=lambda: set(GROUPS))

    @property
    def tau(self) -> float:
        return float(np.clip(np.exp(self.params["log_tau"]), TAU_MIN, TAU_MAX))

    def trainable(self, name: str) -> bool:
        return PARAM_GROUP[name] not in self.frozen

    def trainable_count(self) -> int:
        return sum(p.size for n, p in self.params.items() if self.trainable(n))

    def set_trainable(self, groups: Iterable[str]) -> None:
        groups = set(groups)
        unknown = groups - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown layer groups {sorted(unknown)}")
        self.frozen = set(GROUPS) - groups

    def copy(self) -> "EncoderPair":
        return EncoderPair({k: v.copy() for k, v in self.params.items()}, dict(self.vocab), self.dims, set(self.frozen))

    def token_ids(self, caption: str) -> list[int]:
        ids = [self.vocab.get(w, 0) for w in tokenize(caption)]
        return ids or [0]


def init_params(seed: int, dims: EncoderDims, vocab: dict[str, int]) -> EncoderPair:
    """Uniform(+-1/sqrt(fan_in)) weights, tau = 0.07, every group frozen."""
    rng = make_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(dims, len(vocab)).items():
        if name == "log_tau":
            params[name] = np.array(math.log(TAU_INIT))
            continue
        bound = 1.0 / math.sqrt(fan_in(name, shape, dims))
        params[name] = rng.uniform(-bound, bound, size=shape)
    return EncoderPair(params, dict(vocab), dims)


# --- forward / backward -----------------------------------------------------


def _pixels(image) -> np.ndarray:
    return image.pixels if isinstance(image, RasterImage) else np.asarray(image)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) uint8 -> (B, n_patches, patch*patch*C) float64 in [0, 1]."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} is not divisible into {patch}x{patch} patches")
    x = images.reshape(b, h // patch, patch, w // patch, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch * c).astype(np.float64) / 255.0


def _normalize(e: np.ndarray):
    norm = np.sqrt(np.sum(e * e, axis=-1, keepdims=True))
    return e / norm, norm


def _normalize_backward(y: np.ndarray, norm: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return (dy - y * np.sum(y * dy, axis=-1, keepdims=True)) / norm


def image_forward(params: dict, images, patch: int):
    """Returns unit embeddings (B, d) and a cache for :func:`image_backward`."""
    if isinstance(images, (list, tuple)):
        images = np.stack([_pixels(im) for im in images])
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[-1] * patch * patch != params["img.patch_w"].shape[0]:
        raise ShapeError(f"image batch of shape {images.shape} does not match the patch projection")
    x = patchify(images, patch)
    z = x @ params["img.patch_w"] + params["img.patch_b"]
    a1 = np.tanh(z @ params["img.w1"] + params["img.b1"])
    m = a1.mean(axis=1)
    a2 = np.tanh(m @ params["img.w2"] + params["img.b2"])
    e = a2 @ params["img.head_w"] + params["img.head_b"]
    y, norm = _normalize(e)
    return y, (x, z, a1, m, a2, y, norm)


def image_backward(params: dict, cache, dy: np.ndarray) -> dict[str, np.ndarray]:
    x, z, a1, m, a2, y, norm = cache
    g = {}
    de = _normalize_backward(y, norm, dy)
    g["img.head_w"] = a2.T @ de
    g["img.head_b"] = de.sum(axis=0)
    dpre2 = (de @ params["img.head_w"].T) * (1.0 - a2 * a2)
    g["img.w2"] = m.T @ dpre2
    g["img.b2"] = dpre2.sum(axis=0)
    dm = dpre2 @ params["img.w2"].T
    n = a1.shape[1]
    dpre1 = (dm[:, None, :] / n) * (1.0 - a1 * a1)
    g["img.w1"] = np.einsum("bnh,bnk->hk", z, dpre1)
    g["img.b1"] = dpre1.sum(axis=(0, 1))
    dz = dpre1 @ params["img.w1"].T
    g["img.patch_w"] = np.einsum("bnp,bnh->ph", x, dz)
    g["img.patch_b"] = dz.sum(axis=(0, 1))
    return g


def pooling_matrix(pair: EncoderPair, captions: Sequence[str]) -> np.ndarray:
    """(B, V) matrix whose rows average the token embeddings of each caption."""
    pool = np.zeros((len(captions), len(pair.vocab)))
    for i, c in enumerate(captions):
        ids = pair.token_ids(c)
        np.add.at(pool[i], ids, 1.0 / len(ids))
    return pool


def text_forward(params: dict, pool: np.ndarray):
    m = pool @ params["txt.embed"]
    a = np.tanh(m @ params["txt.w"] + params["txt.b"])
    e = a @ params["txt.head_w"] + params["txt.head_b"]
    y, norm = _normalize(e)
    return y, (pool, m, a, y, norm)


def text_backward(params: dict, cache, dy: np.ndarray) -> dict[str, np.ndarray]:
    pool, m, a, y, norm = cache
    g = {}
    de = _normalize_backward(y, norm, dy)
    g["txt.head_w"] = a.T @ de
    g["txt.head_b"] = de.sum(axis=0)
    dpre = (de @ params["txt.head_w"].T) * (1.0 - a * a)
    g["txt.w"] = m.T @ dpre
    g["txt.b"] = dpre.sum(axis=0)
    g["txt.embed"] = pool.T @ (dpre @ params["txt.w"].T)
    return g


def encode_images(pair: EncoderPair, images) -> np.ndarray:
    return image_forward(pair.params, images, pair.dims.patch)[0]


def encode_image(pair: EncoderPair, image) -> np.ndarray:
    return encode_images(pair, _pixels(image)[None])[0]


def encode_texts(pair: EncoderPair, captions: Sequence[str]) -> np.ndarray:
    return text_forward(pair.params, pooling_matrix(pair, captions))[0]


def encode_text(pair: EncoderPair, caption: str) -> np.ndarray:
    return encode_texts(pair, [caption])[0]


# --- checkpoints ------------------------------------------------------------


def save_checkpoint(pair: EncoderPair, path, extra: dict | None = None) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "dims": asdict(pair.dims),
        "vocab": pair.vocab,
        "frozen": sorted(pair.frozen),
        "extra": extra or {},
    }
    arrays = {k.replace(".", "__"): v for k, v in pair.params.items()}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), np.uint8), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[EncoderPair, dict]:
    with np.load(Path(path)) as npz:
        meta = json.loads(npz["__meta__"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        params = {k.replace("__", "."): npz[k].copy() for k in npz.files if k != "__meta__"}
    pair = EncoderPair(params, meta["vocab"], EncoderDims(**meta["dims"]), set(meta["frozen"]))
    return pair, meta["extra"]
