"""Weak and strong view transformations over HxWx3 uint8 images.

The weak view is pad-4 random crop plus horizontal flip. The strong view is
a fresh weak view followed by ``n`` RandAugment operations drawn with
replacement from 14 candidates, each at a random strength, and a final
Cutout. Every random draw comes from an :class:`RngStream` keyed by
``(seed, epoch, index, tag)``, so the output for a sample never depends on
evaluation order or on how many workers produce a batch.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from crld import kernels

GEOMETRIC_FILL = 128
CUTOUT_FILL = 127
CROP_PAD = 4


@dataclass(frozen=True)
class AugOpSpec:
    kind: str
    v_min: float
    v_max: float

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise ValueError(f"unknown augmentation op {self.kind!r}")
        if self.v_min > self.v_max:
            raise ValueError(f"{self.kind}: v_min {self.v_min} > v_max {self.v_max}")


OP_KINDS = (
    "autocontrast", "brightness", "color", "contrast", "equalize", "identity", "posterize",
    "rotate", "sharpness", "shear_x", "shear_y", "solarize", "translate_x", "translate_y", "cutout",
)

# Parameter ranges of the strong-view operation table. Autocontrast, equalize
# and identity take no parameter and ignore v.
RANDAUGMENT_OPS = (
    AugOpSpec("autocontrast", 0.0, 1.0),
    AugOpSpec("brightness", 0.05, 0.95),
    AugOpSpec("color", 0.05, 0.95),
    AugOpSpec("contrast", 0.05, 0.95),
    AugOpSpec("equalize", 0.0, 1.0),
    AugOpSpec("identity", 0.0, 1.0),
    AugOpSpec("posterize", 4.0, 8.0),
    AugOpSpec("rotate", -30.0, 30.0),
    AugOpSpec("sharpness", 0.05, 0.95),
    AugOpSpec("shear_x", -0.3, 0.3),
    AugOpSpec("shear_y", -0.3, 0.3),
    AugOpSpec("solarize", 0.0, 256.0),
    AugOpSpec("translate_x", -0.3, 0.3),
    AugOpSpec("translate_y", -0.3, 0.3),
)
CUTOUT_SPEC = AugOpSpec("cutout", 0.0, 0.5)
DEFAULT_OPS = RANDAUGMENT_OPS + (CUTOUT_SPEC,)
OPS_BY_KIND = {spec.kind: spec for spec in DEFAULT_OPS}


@dataclass(frozen=True)
class StrongPolicy:
    n: int = 2
    p_s: float = 1.0
    op_table: tuple = RANDAUGMENT_OPS

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"strong policy needs n >= 1, got {self.n}")
        if not 0.0 < self.p_s <= 1.0:
            raise ValueError(f"p_s must lie in (0, 1], got {self.p_s}")


class RngStream:
    """Counter-based random stream identified by ``(seed, epoch, index, tag)``."""

    def __init__(self, seed, epoch=0, index=0, tag=0):
        self.key = (int(seed), int(epoch), int(index), int(tag))
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(list(self.key))))

    def random(self):
        return float(self._gen.random())

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)


# stream tags, one per view slot
WEAK_TAG, STRONG_TAG, WEAK_B_TAG, STRONG_B_TAG = 1, 2, 3, 4


def sample_strength(spec: AugOpSpec, p: float, p_s: float = 1.0) -> float:
    return spec.v_min + (spec.v_max - spec.v_min) * p * p_s


def sample_cutout_strength(p_co: float, p_s: float = 1.0) -> float:
    return 0.5 * p_co * p_s


# ---------------------------------------------------------------------------
# pixel operations
# ---------------------------------------------------------------------------


def _to_u8(x):
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def _blend(degenerate, img, v):
    d = degenerate.astype(np.float64)
    return _to_u8(d + v * (img.astype(np.float64) - d))


def grayscale(img):
    """ITU-R 601 luma with the integer rounding PIL uses."""
    x = img.astype(np.int64)
    return ((x[..., 0] * 19595 + x[..., 1] * 38470 + x[..., 2] * 7471 + 0x8000) >> 16).astype(np.uint8)


def autocontrast(img):
    lo = img.min(axis=(0, 1)).astype(np.float64)
    hi = img.max(axis=(0, 1)).astype(np.float64)
    span = hi - lo
    scale = np.where(span > 0, 255.0 / np.where(span > 0, span, 1.0), 1.0)
    offset = np.where(span > 0, lo, 0.0)
    return _to_u8((img - offset) * scale)


def posterize(img, v):
    bits = min(max(int(round(v)), 0), 8)
    mask = (0xFF << (8 - bits)) & 0xFF
    return img & np.uint8(mask)


def solarize(img, v):
    return np.where(img >= v, 255 - img, img).astype(np.uint8)


def _rotation_matrix(deg, h, w):
    th = math.radians(deg)
    c, s = math.cos(th), math.sin(th)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    return np.array([[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy]])


def _geometric(img, kind, v):
    h, w = img.shape[:2]
    if kind == "rotate":
        m = _rotation_matrix(v, h, w)
    elif kind == "shear_x":
        m = np.array([[1.0, v, -v * (h - 1) / 2.0], [0.0, 1.0, 0.0]])
    elif kind == "shear_y":
        m = np.array([[1.0, 0.0, 0.0], [v, 1.0, -v * (w - 1) / 2.0]])
    elif kind == "translate_x":
        m = np.array([[1.0, 0.0, -float(round(v * w))], [0.0, 1.0, 0.0]])
    else:
        m = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, -float(round(v * h))]])
    return kernels.warp_nearest(np.ascontiguousarray(img), m, GEOMETRIC_FILL)


def cutout(img, v, rng):
    h, w = img.shape[:2]
    side = int(round(v * min(h, w)))
    cy = int(rng.integers(0, h))
    cx = int(rng.integers(0, w))
    out = img.copy()
    if side > 0:
        y0, x0 = cy - side // 2, cx - side // 2
        out[max(y0, 0):min(y0 + side, h), max(x0, 0):min(x0 + side, w)] = CUTOUT_FILL
    return out


def apply_op(img: np.ndarray, kind: str, v: float, rng: RngStream | None = None) -> np.ndarray:
    if kind == "identity":
        return img.copy()
    if kind == "autocontrast":
        return autocontrast(img)
    if kind == "equalize":
        return kernels.equalize(np.ascontiguousarray(img))
    if kind == "posterize":
        return posterize(img, v)
    if kind == "solarize":
        return solarize(img, v)
    if kind == "brightness":
        return _blend(np.zeros_like(img), img, v)
    if kind == "color":
        return _blend(np.repeat(grayscale(img)[..., None], 3, axis=2), img, v)
    if kind == "contrast":
        level = int(grayscale(img).mean() + 0.5)
        return _blend(np.full_like(img, level), img, v)
    if kind == "sharpness":
        return _blend(kernels.smooth3x3(np.ascontiguousarray(img)), img, v)
    if kind in ("rotate", "shear_x", "shear_y", "translate_x", "translate_y"):
        return _geometric(img, kind, v)
    if kind == "cutout":
        if rng is None:
            raise ValueError("cutout needs an RngStream for the patch centre")
        return cutout(img, v, rng)
    raise ValueError(f"unknown augmentation op {kind!r}")


# ---------------------------------------------------------------------------
# views
# ---------------------------------------------------------------------------


def crop_flip(img, dy, dx, flip, pad=CROP_PAD):
    """Zero-pad by ``pad``, crop the original size at offset (dy, dx), optionally mirror."""
    h, w = img.shape[:2]
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)))
    out = padded[dy:dy + h, dx:dx + w]
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def weak_view(img, rng: RngStream):
    dy, dx = (int(v) for v in rng.integers(0, 2 * CROP_PAD + 1, size=2))
    flip = rng.random() < 0.5
    return crop_flip(img, dy, dx, flip)


def strong_view(img, policy: StrongPolicy, rng: RngStream, trace=None):
    """Weak view, then ``policy.n`` sampled ops, then Cutout.

    If ``trace`` is a list, ``(kind, v)`` is appended for every applied op.
    """
    out = weak_view(img, rng)
    table = policy.op_table
    for _ in range(policy.n):
        spec = table[int(rng.integers(0, len(table)))]
        v = sample_strength(spec, rng.random(), policy.p_s)
        out = apply_op(out, spec.kind, v, rng)
        if trace is not None:
            trace.append((spec.kind, v))
    v_co = sample_cutout_strength(rng.random(), policy.p_s)
    out = apply_op(out, "cutout", v_co, rng)
    if trace is not None:
        trace.append(("cutout", v_co))
    return out


VIEW_MODES = {
    "strong_weak": (("weak", WEAK_TAG), ("strong", STRONG_TAG)),
    "weak_weak": (("weak", WEAK_TAG), ("weak", WEAK_B_TAG)),
    "strong_strong": (("strong", STRONG_TAG), ("strong", STRONG_B_TAG)),
}


def view(img, kind, policy, rng):
    return weak_view(img, rng) if kind == "weak" else strong_view(img, policy, rng)


def batch_view(images, indices, seed, epoch, kind, tag, policy=None, workers=1):
    """Transform each ``images[i]`` with its own stream (seed, epoch, indices[i], tag)."""
    policy = policy or StrongPolicy()

    def one(i):
        return view(images[i], kind, policy, RngStream(seed, epoch, indices[i], tag))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(one, range(len(images))))
    else:
        outs = [one(i) for i in range(len(images))]
    return np.stack(outs) if outs else np.empty_like(images)


def make_views(images, indices, seed, epoch, view_mode="strong_weak", policy=None, workers=1,
               single=False):
    """Return the two uint8 view batches ``(view_a, view_b)`` for ``view_mode``.

    With ``single`` only the first slot is produced and ``view_b`` is None.
    """
    if view_mode not in VIEW_MODES:
        raise ValueError(f"unknown view mode {view_mode!r}")
    (ka, ta), (kb, tb) = VIEW_MODES[view_mode]
    va = batch_view(images, indices, seed, epoch, ka, ta, policy, workers)
    if single:
        return va, None
    return va, batch_view(images, indices, seed, epoch, kb, tb, policy, workers)


def write_ppm(path, img):
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: not a binary 8-bit PPM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(raw, dtype=np.uint8, count=h * w * 3, offset=pos + 1).reshape(h, w, 3).copy()
