"""Ground-truth corruption operators used to synthesize observations.

Every operator is a pure function of (input batch, parameters, seed):
rerunning with the same seed reproduces the observation bit-for-bit.  The
64x64 reference coordinates (occlusion cross, inpainting bands, stuck-pixel
column) are stored as fractions of image size so the same operators run at
desk-scale resolutions; at 64x64 they reproduce the reference coordinates
exactly.

The stylization operator is a stand-in: the filtering stage is identity and
only the bright-pixel noise stage is kept, so it is not faithful to a real
stylization filter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .priors import as_rng

# reference coordinates on the 64x64 grid
_REF = 64
_INPAINT_BAND_STARTS = (4, 12, 20, 28, 36, 44, 52, 60)
_INPAINT_BAND_HEIGHT = 4
_INPAINT_COLS = (12, 54)
_OCCLUDE_ROWS = (24, 44)
_OCCLUDE_COLS = (12, 54)
_STUCK_COLUMN = 26

GRAY_TRUNC = 120.0  # on the [0, 255] scale


def _scaled(v: int, size: int) -> int:
    return int(round(v * size / _REF))


def blur_sigma(k: int, sigma: float = 0.0) -> float:
    """Kernel width to Gaussian sigma; sigma <= 0 selects the library default."""
    if sigma > 0:
        return sigma
    return 0.3 * ((k - 1) * 0.5 - 1.0) + 0.8


def blur_weights(k: int, sigma: float = 0.0) -> np.ndarray:
    """Normalized symmetric 1-D Gaussian taps."""
    if k < 1 or k % 2 == 0:
        raise ValueError("blur kernel size must be odd and positive")
    s = blur_sigma(k, sigma)
    x = np.arange(k) - (k - 1) / 2.0
    w = np.exp(-(x * x) / (2.0 * s * s))
    return w / w.sum()


def _blur_axis(x: np.ndarray, w: np.ndarray, axis: int) -> np.ndarray:
    k = len(w)
    if k == 1:
        return x.copy()
    r = k // 2
    pad = [(r, r) if i == axis else (0, 0) for i in range(x.ndim)]
    xp = np.pad(x, pad, mode="reflect")  # reflect-101 border
    out = np.zeros_like(x)
    sl = [slice(None)] * x.ndim
    for t in range(k):
        sl[axis] = slice(t, t + x.shape[axis])
        out += w[t] * xp[tuple(sl)]
    return out


def gaussian_blur(img: np.ndarray, k: int, sigma: float = 0.0) -> np.ndarray:
    """Separable blur over the two spatial axes of [...,H,W,C] or [H,W] arrays."""
    w = blur_weights(k, sigma)
    ax_h = img.ndim - 3 if img.ndim >= 3 else img.ndim - 2
    return _blur_axis(_blur_axis(img, w, ax_h), w, ax_h + 1)


# ---------------------------------------------------------------------------
# corruption operators; all take/return [B, H, W, C]


def _check_batch(batch: np.ndarray) -> tuple[int, int, int, int]:
    if batch.ndim != 4:
        raise ValueError("expected batch [B, H, W, C]")
    return batch.shape


def inpainting(batch: np.ndarray, rng, noise_sigma: float = 0.5) -> np.ndarray:
    """Multiply by a mask that is 1 outside the horizontal bands and Gaussian
    noise inside them; one mask is drawn and shared by the whole batch."""
    rng = as_rng(rng)
    _, h, w, c = _check_batch(batch)
    mask = np.ones((h, w, c))
    bh = max(1, _scaled(_INPAINT_BAND_HEIGHT, h))
    c0, c1 = _scaled(_INPAINT_COLS[0], w), _scaled(_INPAINT_COLS[1], w)
    for start in _INPAINT_BAND_STARTS:
        r0 = _scaled(start, h)
        r1 = min(r0 + bh, h)
        mask[r0:r1, c0:c1, :] = noise_sigma * rng.standard_normal((r1 - r0, c1 - c0, c))
    return batch * mask[None]


def inpainting_band_mask(h: int, w: int, c: int) -> np.ndarray:
    """Boolean mask of the coordinates the inpainting bands touch."""
    mask = np.zeros((h, w, c), dtype=bool)
    bh = max(1, _scaled(_INPAINT_BAND_HEIGHT, h))
    c0, c1 = _scaled(_INPAINT_COLS[0], w), _scaled(_INPAINT_COLS[1], w)
    for start in _INPAINT_BAND_STARTS:
        r0 = _scaled(start, h)
        mask[r0:min(r0 + bh, h), c0:c1, :] = True
    return mask


def occlusion_zero_mask(h: int, w: int, c: int) -> np.ndarray:
    """The cross: the row band united with its transpose."""
    band = np.zeros((h, w, c), dtype=bool)
    r0, r1 = _scaled(_OCCLUDE_ROWS[0], h), _scaled(_OCCLUDE_ROWS[1], h)
    c0, c1 = _scaled(_OCCLUDE_COLS[0], w), _scaled(_OCCLUDE_COLS[1], w)
    band[r0:r1, c0:c1, :] = True
    return band | band.transpose(1, 0, 2)


def occlusion(batch: np.ndarray, rng, noise_sigma: float = 0.5) -> np.ndarray:
    """Replace the cross-shaped region with per-image Gaussian noise."""
    rng = as_rng(rng)
    b, h, w, c = _check_batch(batch)
    zeros = occlusion_zero_mask(h, w, c)
    out = batch.copy()
    n = int(zeros.sum())
    for i in range(b):
        out[i][zeros] = noise_sigma * rng.standard_normal(n)
    return out


def pixel_error(batch: np.ndarray, rng, column: int | None = None,
                noise_sigma: float = 0.25) -> np.ndarray:
    """Stuck-pixel column: copy column z over all preceding columns and add
    one noise field shared across the batch."""
    rng = as_rng(rng)
    b, h, w, c = _check_batch(batch)
    z = _scaled(_STUCK_COLUMN, w) if column is None else int(column)
    if not 0 <= z < w:
        raise ValueError(f"column {z} out of range for width {w}")
    out = batch.copy()
    if z == 0:
        return out
    noise = rng.standard_normal((h, z, c))  # one field for every image
    stuck = np.repeat(batch[:, :, [z], :], z, axis=2)
    out[:, :, :z, :] = stuck + noise_sigma * noise[None]
    return out


def negative(batch: np.ndarray, blur_scale: int = 11) -> np.ndarray:
    """Blur then invert: 0 - gaussian_blur(x)."""
    _check_batch(batch)
    return 0.0 - gaussian_blur(batch, blur_scale)


def gray_blur(batch: np.ndarray, blur_scale: int = 15, trunc: float = GRAY_TRUNC) -> np.ndarray:
    """Blur, truncate bright values at `trunc` on the [0,255] scale, then
    collapse channels to their mean ([B,H,W,C] -> [B,H,W,1])."""
    _check_batch(batch)
    blurred = gaussian_blur(batch, blur_scale)
    v = 127.5 * (blurred + 1.0)
    v = np.minimum(v, trunc)
    back = v / 127.5 - 1.0
    return back.mean(axis=3, keepdims=True)


def stylize_noise(batch: np.ndarray, rng, percentile: float = 90.0,
                  noise_sigma: float = 0.5) -> np.ndarray:
    """Pixels above the batch-wide brightness percentile are replaced by the
    percentile value plus Gaussian noise; all other pixels pass through."""
    rng = as_rng(rng)
    _check_batch(batch)
    level = np.percentile(batch, percentile)
    out = batch.copy()
    hot = batch > level
    out[hot] = level + noise_sigma * rng.standard_normal(int(hot.sum()))
    return out


def binary_threshold(batch: np.ndarray, percentile: float = 50.0) -> np.ndarray:
    """Per-image percentile threshold to {+1, -1} (single-channel input)."""
    b, _, _, c = _check_batch(batch)
    if c != 1:
        raise ValueError("binary threshold expects single-channel images")
    out = np.empty_like(batch)
    for i in range(b):
        level = np.percentile(batch[i], percentile)
        out[i] = np.where(batch[i] >= level, 1.0, -1.0)
    return out


def drop_pixels(batch: np.ndarray, rng, rate: float = 0.7) -> np.ndarray:
    """Zero exactly floor(rate * d) coordinates per image, without replacement."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must be in [0, 1]")
    rng = as_rng(rng)
    b, h, w, c = _check_batch(batch)
    d = h * w * c
    n = int(np.floor(rate * d))
    out = batch.copy()
    for i in range(b):
        idx = rng.choice(d, size=n, replace=False)
        out[i].reshape(-1)[idx] = 0.0
    return out


def blur_negative(batch: np.ndarray, blur_scale: int = 25) -> np.ndarray:
    """Heavy blur followed by inversion (single-channel variant of negative)."""
    return negative(batch, blur_scale)


# ---------------------------------------------------------------------------
# tagged spec with JSON round-trip


_KINDS = ("identity", "inpainting", "occlusion", "pixel_error", "negative",
          "gray_blur", "stylize_noise", "binary", "drop_pixels", "blur_negative")


@dataclass
class CorruptionSpec:
    """One corruption operator plus everything needed to replay it exactly."""

    kind: str
    seed: int = 0
    noise_sigma: float | None = None
    blur_scale: int | None = None
    column: int | None = None
    percentile: float | None = None
    rate: float | None = None
    trunc: float | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")

    def apply(self, batch: np.ndarray) -> np.ndarray:
        """Corrupt `batch`; deterministic in (spec, seed)."""
        rng = np.random.default_rng(self.seed)
        k = self.kind
        if k == "identity":
            return batch.copy()
        if k == "inpainting":
            return inpainting(batch, rng, self._or(self.noise_sigma, 0.5))
        if k == "occlusion":
            return occlusion(batch, rng, self._or(self.noise_sigma, 0.5))
        if k == "pixel_error":
            return pixel_error(batch, rng, self.column, self._or(self.noise_sigma, 0.25))
        if k == "negative":
            return negative(batch, int(self._or(self.blur_scale, 11)))
        if k == "gray_blur":
            return gray_blur(batch, int(self._or(self.blur_scale, 15)),
                             self._or(self.trunc, GRAY_TRUNC))
        if k == "stylize_noise":
            return stylize_noise(batch, rng, self._or(self.percentile, 90.0),
                                 self._or(self.noise_sigma, 0.5))
        if k == "binary":
            return binary_threshold(batch, self._or(self.percentile, 50.0))
        if k == "drop_pixels":
            return drop_pixels(batch, rng, self._or(self.rate, 0.7))
        return blur_negative(batch, int(self._or(self.blur_scale, 25)))

    @staticmethod
    def _or(value, default):
        return default if value is None else value

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape (gray_blur collapses channels)."""
        if self.kind == "gray_blur":
            return input_shape[:-1] + (1,)
        return tuple(input_shape)

    def to_json(self) -> dict:
        d = {"kind": self.kind, "seed": self.seed}
        for name in ("noise_sigma", "blur_scale", "column", "percentile", "rate", "trunc"):
            v = getattr(self, name)
            if v is not None:
                d[name] = v
        return d

    @classmethod
    def from_json(cls, d: dict) -> "CorruptionSpec":
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "CorruptionSpec":
        return cls.from_json(json.loads(text))
