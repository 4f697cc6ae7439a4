"""Image-quality evaluation: SSIM, MS-SSIM, PSNR, Fréchet/kernel feature
distances, and a perceptual distance with a pluggable feature extractor.

Deep-net weights are out of scope: the default extractor is a fixed-seed
random-projection conv stack, and externally computed feature files can be
imported for out-of-band comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .arrayio import read_array
from .errors import (
    InsufficientSamplesError,
    MatrixShapeError,
    NotPsdError,
    NotSymmetricError,
    ShapeMismatchError,
    StainbenchError,
)
from .imaging import ImageTensor

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

# Wang et al. multi-scale weights, coarsest last
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _as_chw(x) -> np.ndarray:
    if isinstance(x, ImageTensor):
        return x.data
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeMismatchError(f"expected (c, h, w) image, got shape {arr.shape}")
    return arr


def gaussian_window(width: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian window (separable outer product)."""
    if width % 2 == 0 or width < 1:
        raise StainbenchError("window width must be odd and positive")
    r = np.arange(width, dtype=np.float64) - (width - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _gauss1d(width: int, sigma: float) -> np.ndarray:
    r = np.arange(width, dtype=np.float64) - (width - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _windowed_mean(plane: np.ndarray, g1d: np.ndarray) -> np.ndarray:
    """Valid-region separable Gaussian window means of a 2-D plane."""
    r = g1d.size // 2
    filt = correlate1d(correlate1d(plane, g1d, axis=0), g1d, axis=1)
    return filt[r:plane.shape[0] - r, r:plane.shape[1] - r]


def _ssim_cs_maps(a: np.ndarray, b: np.ndarray, window: int, sigma: float,
                  c1: float, c2: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel luminance and contrast-structure maps over valid windows."""
    g = _gauss1d(window, sigma)
    lum, cs = [], []
    for ch in range(a.shape[0]):
        x, y = a[ch], b[ch]
        mu_x = _windowed_mean(x, g)
        mu_y = _windowed_mean(y, g)
        var_x = _windowed_mean(x * x, g) - mu_x ** 2
        var_y = _windowed_mean(y * y, g) - mu_y ** 2
        cov = _windowed_mean(x * y, g) - mu_x * mu_y
        lum.append((2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1))
        cs.append((2 * cov + c2) / (var_x + var_y + c2))
    return np.stack(lum), np.stack(cs)


def ssim(a, b, window: int = 11, sigma: float = 1.5,
         c1: float = SSIM_C1, c2: float = SSIM_C2) -> float:
    """Mean of Gaussian-windowed local SSIM over valid positions and channels."""
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[1] < window or a.shape[2] < window:
        raise StainbenchError(
            f"image {a.shape[1]}x{a.shape[2]} smaller than window {window}"
        )
    lum, cs = _ssim_cs_maps(a, b, window, sigma, c1, c2)
    return float((lum * cs).mean())


def _downsample2(x: np.ndarray) -> np.ndarray:
    """2x2 box-mean over each channel, cropping a trailing odd row/column."""
    c, h, w = x.shape
    x = x[:, :h - h % 2, :w - w % 2]
    return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def ms_ssim(a, b, levels: int = 5, window: int = 11, sigma: float = 1.5,
            weights: tuple[float, ...] | None = None) -> float:
    """Product of per-scale contrast-structure terms, luminance at the coarsest.

    Negative contrast-structure means are clamped to zero before the
    fractional powers. weights default to the standard five, truncated and
    renormalized for fewer levels.
    """
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")
    if levels < 1:
        raise StainbenchError("levels must be >= 1")
    if weights is None:
        base = MS_SSIM_WEIGHTS[:levels]
        weights = tuple(w / sum(base) for w in base)
    if len(weights) != levels:
        raise StainbenchError("weights length must equal levels")
    if min(a.shape[1], a.shape[2]) // (2 ** (levels - 1)) < window:
        raise StainbenchError(
            f"image {a.shape[1]}x{a.shape[2]} too small for {levels} levels with window {window}"
        )
    result = 1.0
    for lvl in range(levels):
        lum, cs = _ssim_cs_maps(a, b, window, sigma, SSIM_C1, SSIM_C2)
        mean_cs = max(float(cs.mean()), 0.0)
        if lvl == levels - 1:
            mean_l = max(float((lum * cs).mean()), 0.0)
            result *= mean_l ** weights[lvl]
        else:
            result *= mean_cs ** weights[lvl]
            a, b = _downsample2(a), _downsample2(b)
    return float(result)


def psnr(a, b, max_value: float = 1.0) -> float:
    """10*log10(max^2 / MSE); returns +inf when the images are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value ** 2 / mse)


# --- feature-space distances ---

@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray        # (d,)
    covariance: np.ndarray  # (d, d), symmetric PSD
    n: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.covariance, dtype=np.float64)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise MatrixShapeError(
                f"mean {mean.shape} and covariance {cov.shape} are inconsistent"
            )
        if self.n < 2:
            raise InsufficientSamplesError("need n >= 2 samples for covariance")
        if np.abs(cov - cov.T).max() > 1e-9 * max(1.0, np.abs(cov).max()):
            raise NotSymmetricError("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", (cov + cov.T) / 2.0)

    @classmethod
    def from_features(cls, features: np.ndarray) -> "FeatureStats":
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2:
            raise MatrixShapeError(f"expected (n, d) features, got {feats.shape}")
        if feats.shape[0] < 2:
            raise InsufficientSamplesError("need n >= 2 feature vectors")
        mean = feats.mean(axis=0)
        centered = feats - mean
        cov = centered.T @ centered / (feats.shape[0] - 1)
        return cls(mean, cov, feats.shape[0])


def matrix_sqrt_psd(m: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition; tiny negative
    eigenvalues (within tolerance) are clamped to zero."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise MatrixShapeError(f"expected a square matrix, got {m.shape}")
    scale = max(1.0, float(np.abs(m).max()))
    if np.abs(m - m.T).max() > 1e-8 * scale:
        raise NotSymmetricError("matrix is not symmetric within tolerance")
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    tol = 1e-9 * max(1.0, float(vals.max(initial=0.0)))
    if vals.min() < -tol:
        raise NotPsdError(f"matrix is indefinite: min eigenvalue {vals.min():g}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(stats_a: FeatureStats, stats_b: FeatureStats) -> float:
    """Fréchet distance between Gaussian summaries; the cross term uses the
    symmetrized product sqrt(sa . Sb . sa) so the root stays real PSD."""
    if stats_a.mean.shape != stats_b.mean.shape:
        raise ShapeMismatchError(
            f"feature dims differ: {stats_a.mean.shape} vs {stats_b.mean.shape}"
        )
    mu_diff = stats_a.mean - stats_b.mean
    sa = matrix_sqrt_psd(stats_a.covariance)
    inner = sa @ stats_b.covariance @ sa
    cross = matrix_sqrt_psd((inner + inner.T) / 2.0)
    return float(mu_diff @ mu_diff
                 + np.trace(stats_a.covariance) + np.trace(stats_b.covariance)
                 - 2.0 * np.trace(cross))


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def _mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    m = x.shape[0]
    kxx = _poly_kernel(x, x)
    kyy = _poly_kernel(y, y)
    kxy = _poly_kernel(x, y)
    sum_xx = kxx.sum() - np.trace(kxx)   # diagonal excluded
    sum_yy = kyy.sum() - np.trace(kyy)
    return float(sum_xx / (m * (m - 1)) + sum_yy / (m * (m - 1))
                 - 2.0 * kxy.sum() / (m * m))


def kid(features_a, features_b, subset_size: int | None = None,
        subsets: int = 100, seed: int = 0) -> tuple[float, float]:
    """Unbiased polynomial-kernel MMD^2 averaged over seeded random subsets."""
    xa = np.asarray(features_a, dtype=np.float64)
    xb = np.asarray(features_b, dtype=np.float64)
    if xa.ndim != 2 or xb.ndim != 2 or xa.shape[1] != xb.shape[1]:
        raise ShapeMismatchError(
            f"expected (n, d) feature lists of equal d, got {xa.shape} and {xb.shape}"
        )
    if subset_size is None:
        subset_size = min(1000, xa.shape[0], xb.shape[0])
    if subset_size < 2:
        raise InsufficientSamplesError("subset_size must be >= 2")
    if xa.shape[0] < subset_size or xb.shape[0] < subset_size:
        raise InsufficientSamplesError(
            f"need at least subset_size={subset_size} samples in each set"
        )
    rng = np.random.default_rng(seed)
    scores = np.empty(subsets)
    for i in range(subsets):
        ia = rng.choice(xa.shape[0], size=subset_size, replace=False)
        ib = rng.choice(xb.shape[0], size=subset_size, replace=False)
        scores[i] = _mmd2_unbiased(xa[ia], xb[ib])
    return float(scores.mean()), float(scores.std())


# --- feature extractors ---

def _np_conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Plain NCHW-free conv for (C,H,W) input and (O,C,k,k) weight."""
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    k = w.shape[2]
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]                       # (C, OH, OW, k, k)
    return np.einsum("cijhw,ochw->oij", win, w)


class RandomProjectionExtractor:
    """Fixed-seed two-layer random conv stack; deterministic by construction."""

    def __init__(self, seed: int = 0, channels: tuple[int, int] = (8, 16)):
        self.name = "random-projection"
        rng = np.random.default_rng(seed)
        c1, c2 = channels
        self.w1 = rng.normal(0.0, np.sqrt(2.0 / 27), (c1, 3, 3, 3))
        self.w2 = rng.normal(0.0, np.sqrt(2.0 / (9 * c1)), (c2, c1, 3, 3))
        self.dim = c1 + c2

    def feature_maps(self, image) -> list[np.ndarray]:
        x = _as_chw(image)
        if x.shape[0] == 1:
            x = np.repeat(x, 3, axis=0)
        f1 = np.maximum(_np_conv2d(x, self.w1, stride=1, pad=1), 0.0)
        f2 = np.maximum(_np_conv2d(f1, self.w2, stride=2, pad=1), 0.0)
        return [f1, f2]

    def embed(self, image) -> np.ndarray:
        return np.concatenate([f.mean(axis=(1, 2)) for f in self.feature_maps(image)])

    def __call__(self, image) -> np.ndarray:
        return self.embed(image)


class IdentityExtractor:
    """Feature map is the image itself; embedding is per-channel means."""

    name = "identity"

    def feature_maps(self, image) -> list[np.ndarray]:
        return [_as_chw(image)]

    def embed(self, image) -> np.ndarray:
        return _as_chw(image).mean(axis=(1, 2))

    def __call__(self, image) -> np.ndarray:
        return self.embed(image)


class BackboneFeatureExtractor:
    """Wraps a trained backbone's encoder activations (the toy-trained option)."""

    def __init__(self, net, layers: tuple[str, ...] = ("enc0",), name: str = "toy-trained"):
        self.net = net
        self.layers = layers
        self.name = name

    def feature_maps(self, image) -> list[np.ndarray]:
        from .autodiff import no_grad
        x = _as_chw(image)[None]
        with no_grad():
            _, feats = self.net.forward(x, return_features=True)
        return [feats[layer].value[0] for layer in self.layers]

    def embed(self, image) -> np.ndarray:
        return np.concatenate([f.mean(axis=(1, 2)) for f in self.feature_maps(image)])

    def __call__(self, image) -> np.ndarray:
        return self.embed(image)


def load_feature_file(path: str | Path) -> np.ndarray:
    """Import externally computed (n, d) embeddings (checkpoint array format)."""
    feats = read_array(path)
    if feats.ndim != 2:
        raise MatrixShapeError(f"feature file must hold a 2-D array, got {feats.shape}")
    return feats


def perceptual_distance(a, b, extractor, layer_weights=None) -> float:
    """Channel-normalized squared feature differences, spatially averaged,
    weighted per channel, summed over layers."""
    maps_a = extractor.feature_maps(a)
    maps_b = extractor.feature_maps(b)
    if len(maps_a) == 0:
        raise StainbenchError("extractor exposes no feature layers")
    if len(maps_a) != len(maps_b):
        raise ShapeMismatchError("extractor returned differing layer counts")
    if layer_weights is None:
        layer_weights = [1.0] * len(maps_a)
    if len(layer_weights) != len(maps_a):
        raise ShapeMismatchError(
            f"{len(layer_weights)} layer weights for {len(maps_a)} layers"
        )
    total = 0.0
    for fa, fb, w in zip(maps_a, maps_b, layer_weights):
        if fa.shape != fb.shape:
            raise ShapeMismatchError(f"layer shapes differ: {fa.shape} vs {fb.shape}")
        na = fa / np.sqrt((fa ** 2).sum(axis=0, keepdims=True) + 1e-10)
        nb = fb / np.sqrt((fb ** 2).sum(axis=0, keepdims=True) + 1e-10)
        diff2 = (na - nb) ** 2
        w_arr = np.asarray(w, dtype=np.float64)
        if w_arr.ndim == 0:
            weighted = w_arr * diff2.sum(axis=0)
        elif w_arr.shape == (fa.shape[0],):
            weighted = (w_arr[:, None, None] * diff2).sum(axis=0)
        else:
            raise ShapeMismatchError(
                f"layer weight shape {w_arr.shape} incompatible with {fa.shape[0]} channels"
            )
        total += float(weighted.mean())
    return total


# --- per-tile report ---

@dataclass(frozen=True)
class TileMetrics:
    tile_id: str
    ssim: float
    ms_ssim: float
    psnr: float
    lpips: float


@dataclass(frozen=True)
class MetricReport:
    rows: tuple[TileMetrics, ...]
    fid: float
    kid_mean: float
    kid_std: float
    extractor: str = "random-projection"


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.10g}"


def write_report(report: MetricReport, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["#fields\ttile_id\tssim\tms_ssim\tpsnr\tlpips"]
    for row in report.rows:
        lines.append("\t".join([
            row.tile_id, _fmt(row.ssim), _fmt(row.ms_ssim),
            _fmt(row.psnr), _fmt(row.lpips),
        ]))
    lines.append(
        f"#summary\tfid={_fmt(report.fid)}\tkid_mean={_fmt(report.kid_mean)}"
        f"\tkid_std={_fmt(report.kid_std)}\textractor={report.extractor}"
    )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report(path: str | Path) -> MetricReport:
    path = Path(path)
    rows: list[TileMetrics] = []
    summary: dict[str, str] = {}
    for raw in path.read_text(encoding="utf-8").splitlines():
        if not raw:
            continue
        if raw.startswith("#summary"):
            for item in raw.split("\t")[1:]:
                key, value = item.split("=", 1)
                summary[key] = value
            continue
        if raw.startswith("#"):
            continue
        parts = raw.split("\t")
        if len(parts) != 5:
            raise StainbenchError(f"malformed report row: {raw!r}")
        rows.append(TileMetrics(parts[0], float(parts[1]), float(parts[2]),
                                float(parts[3]), float(parts[4])))
    if "fid" not in summary:
        raise StainbenchError(f"{path}: missing #summary trailer")
    return MetricReport(
        tuple(rows),
        fid=float(summary["fid"]),
        kid_mean=float(summary["kid_mean"]),
        kid_std=float(summary["kid_std"]),
        extractor=summary.get("extractor", "unknown"),
    )
