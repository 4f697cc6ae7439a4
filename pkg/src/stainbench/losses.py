"""Training objectives for the three GAN frameworks.

Pyramidal multi-scale L1, patch contrastive (NCE) loss, its
similarity-weighted two-pair variant, the conditional adversarial loss, and
the MAE/SSIM/classification composite. Everything runs on the autodiff tape,
so gradients with respect to the generated image come for free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import NonFiniteError, ShapeMismatchError, StainbenchError
from .imaging import HER2_SCORES, ImageTensor
from .metrics import SSIM_C1, SSIM_C2, gaussian_window


def _to_var(x) -> Var:
    if isinstance(x, Var):
        return x
    if isinstance(x, ImageTensor):
        return Var(x.data)
    return Var(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class PyramidConfig:
    num_scales: int = 4
    weights: tuple[float, ...] | None = None   # None -> all ones
    blur_width: int = 3
    blur_sigma: float = 1.0

    def __post_init__(self):
        if self.num_scales < 1:
            raise StainbenchError("num_scales must be >= 1")
        if self.blur_width % 2 == 0 or self.blur_width < 1:
            raise StainbenchError("blur_width must be odd and positive")
        if self.blur_sigma <= 0:
            raise StainbenchError("blur_sigma must be positive")
        if self.weights is not None:
            if len(self.weights) != self.num_scales:
                raise StainbenchError("weights length must equal num_scales")
            if any(w < 0 for w in self.weights):
                raise StainbenchError("weights must be nonnegative")

    def scale_weights(self) -> tuple[float, ...]:
        return self.weights if self.weights is not None else (1.0,) * self.num_scales


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.07
    patches_per_image: int = 64
    feature_layers: tuple[str, ...] = ("enc0",)

    def __post_init__(self):
        if self.temperature <= 0:
            raise StainbenchError("temperature must be positive")
        if self.patches_per_image < 2:
            raise StainbenchError("patches_per_image must be >= 2")


@dataclass(frozen=True)
class CompositeWeights:
    lambda_adv: float = 1.0
    lambda_mae: float = 1.0
    lambda_ssim: float = 1.0
    lambda_cls: float = 1.0
    ssim_window: int = 11
    ssim_sigma: float = 1.5

    def __post_init__(self):
        lams = (self.lambda_adv, self.lambda_mae, self.lambda_ssim, self.lambda_cls)
        if any(l < 0 for l in lams):
            raise StainbenchError("loss weights must be nonnegative")
        if all(l == 0 for l in lams):
            raise StainbenchError("at least one loss weight must be nonzero")


# --- pyramidal L1 ---

def _blur(x: Var, width: int, sigma: float) -> Var:
    """Depthwise Gaussian blur with replicate padding (constants stay constant)."""
    kernel = gaussian_window(width, sigma)
    c, h, w = x.shape
    x4 = ad.reshape(x, (c, 1, h, w))
    out = ad.conv2d(x4, Var(kernel[None, None]), padding=width // 2, pad_mode="edge")
    return ad.reshape(out, (c, h, w))


def gaussian_pyramid(image, config: PyramidConfig) -> list[Var]:
    """Level 1 is the input; each next level is blur + 2x decimation."""
    x = _to_var(image)
    if x.ndim != 3:
        raise ShapeMismatchError(f"expected (c, h, w), got {x.shape}")
    levels = [x]
    for _ in range(config.num_scales - 1):
        h, w = x.shape[1], x.shape[2]
        if h < config.blur_width or w < config.blur_width:
            raise StainbenchError(
                f"image too small for {config.num_scales} pyramid levels "
                f"(level is {h}x{w}, kernel {config.blur_width})"
            )
        x = _blur(x, config.blur_width, config.blur_sigma)
        x = x[:, ::2, ::2]
        levels.append(x)
    return levels


def pyramidal_l1_loss(fake, real, config: PyramidConfig = PyramidConfig()) -> Var:
    fake, real = _to_var(fake), _to_var(real)
    if fake.shape != real.shape:
        raise ShapeMismatchError(f"shape mismatch: {fake.shape} vs {real.shape}")
    pyr_f = gaussian_pyramid(fake, config)
    pyr_r = gaussian_pyramid(real, config)
    total = Var(0.0)
    for w, f, r in zip(config.scale_weights(), pyr_f, pyr_r):
        total = ad.add(total, ad.mul(ad.mean(ad.abs_(ad.add(f, ad.mul(r, -1.0)))), w))
    return total


# --- patch contrastive losses ---

def _locations(feat: Var) -> Var:
    """(C, H, W) or (C, N) feature map -> (N, C) location matrix."""
    if feat.ndim == 3:
        c = feat.shape[0]
        feat = ad.reshape(feat, (c, feat.shape[1] * feat.shape[2]))
    elif feat.ndim != 2:
        raise ShapeMismatchError(f"expected (C,H,W) or (C,N) features, got {feat.shape}")
    return ad.transpose(feat, (1, 0))


def _select(n: int, k: int, rng: np.random.Generator | None) -> np.ndarray:
    if k >= n:
        return np.arange(n)
    if rng is None:
        return np.unique(np.linspace(0, n - 1, k).round().astype(int))
    return np.sort(rng.choice(n, size=k, replace=False))


def _normalize_rows(x: Var) -> Var:
    norm = ad.sqrt(ad.add(ad.sum_(ad.mul(x, x), axis=1, keepdims=True), 1e-12))
    return ad.div(x, norm)


def _nce_terms(query: Var, key: Var, temperature: float) -> Var:
    """Per-location cross-entropy of softmax over similarities, positive on
    the diagonal. Inputs are (N, C) location matrices; output is (N,)."""
    qn = _normalize_rows(query)
    kn = _normalize_rows(key)
    sim = ad.div(ad.matmul(qn, ad.transpose(kn, (1, 0))), temperature)
    n = sim.shape[0]
    pos = ad.getitem(sim, (np.arange(n), np.arange(n)))
    return ad.add(ad.logsumexp(sim, axis=1), ad.mul(pos, -1.0))


def patchnce_loss(feat_query, feat_key, config: ContrastiveConfig,
                  rng: np.random.Generator | None = None) -> Var:
    """Mean NCE over sampled locations; negatives are the other locations."""
    q, k = _to_var(feat_query), _to_var(feat_key)
    if q.shape != k.shape:
        raise ShapeMismatchError(f"query/key grids differ: {q.shape} vs {k.shape}")
    ql, kl = _locations(q), _locations(k)
    n = ql.shape[0]
    if n < 2:
        raise StainbenchError(f"need at least 2 locations, got {n}")
    idx = _select(n, config.patches_per_image, rng)
    if idx.size < 2:
        raise StainbenchError("need at least 2 sampled locations")
    ql, kl = ad.getitem(ql, idx), ad.getitem(kl, idx)
    return ad.mean(_nce_terms(ql, kl, config.temperature))


def asp_anchor_weights(feat_fake, feat_real) -> np.ndarray:
    """Per-location max(0, cosine) between fake and real anchor embeddings."""
    fv = _locations(_to_var(feat_fake)).value
    rv = _locations(_to_var(feat_real)).value
    denom = np.linalg.norm(fv, axis=1) * np.linalg.norm(rv, axis=1)
    cos = np.einsum("nc,nc->n", fv, rv) / np.maximum(denom, 1e-12)
    return np.maximum(cos, 0.0)


def asp_loss(feat_fake, feat_real, feat_src, config: ContrastiveConfig,
             rng: np.random.Generator | None = None,
             fixed_weights: np.ndarray | None = None) -> Var:
    """Similarity-weighted NCE over the (fake, real) and (fake, src) pairs.

    Each location's two NCE terms are scaled by max(0, cos(fake_i, real_i)).
    The weight is a constant: no gradient flows through it. `fixed_weights`
    (one per sampled location) overrides the computed weights, which pins
    them for gradient verification and weight-perturbation studies.
    """
    f, r, s = _to_var(feat_fake), _to_var(feat_real), _to_var(feat_src)
    if not (f.shape == r.shape == s.shape):
        raise ShapeMismatchError(
            f"feature grids differ: {f.shape}, {r.shape}, {s.shape}"
        )
    fl, rl, sl = _locations(f), _locations(r), _locations(s)
    n = fl.shape[0]
    if n < 2:
        raise StainbenchError(f"need at least 2 locations, got {n}")
    idx = _select(n, config.patches_per_image, rng)
    fl, rl, sl = ad.getitem(fl, idx), ad.getitem(rl, idx), ad.getitem(sl, idx)

    if fixed_weights is not None:
        weights = np.asarray(fixed_weights, dtype=np.float64)
        if weights.shape != (idx.size,):
            raise ShapeMismatchError(
                f"fixed_weights shape {weights.shape}, expected ({idx.size},)"
            )
    else:
        fv, rv = fl.value, rl.value
        denom = np.linalg.norm(fv, axis=1) * np.linalg.norm(rv, axis=1)
        cos = np.einsum("nc,nc->n", fv, rv) / np.maximum(denom, 1e-12)
        weights = np.maximum(cos, 0.0)  # detached by construction

    terms = ad.add(_nce_terms(fl, rl, config.temperature),
                   _nce_terms(fl, sl, config.temperature))
    return ad.mean(ad.mul(terms, Var(weights)))


# --- adversarial ---

def _check_finite(x: Var, what: str) -> None:
    if not np.all(np.isfinite(x.value)):
        raise NonFiniteError(f"non-finite {what}")


def cgan_losses(d_real, d_fake) -> tuple[Var, Var]:
    """Non-saturating BCE on patch logit maps.

    g_loss = -mean log sigmoid(d_fake);
    d_loss = -mean log sigmoid(d_real) - mean log(1 - sigmoid(d_fake)).
    """
    d_real, d_fake = _to_var(d_real), _to_var(d_fake)
    _check_finite(d_real, "real logits")
    _check_finite(d_fake, "fake logits")
    g_loss = ad.mean(ad.softplus(ad.mul(d_fake, -1.0)))
    d_loss = ad.add(ad.mean(ad.softplus(ad.mul(d_real, -1.0))),
                    ad.mean(ad.softplus(d_fake)))
    return g_loss, d_loss


def class_cross_entropy(logits, label: int) -> Var:
    logits = _to_var(logits)
    if logits.ndim != 1:
        raise ShapeMismatchError(f"expected 1-D class logits, got {logits.shape}")
    n = logits.shape[0]
    if not 0 <= label < n:
        raise StainbenchError(f"label {label} out of range for {n} classes")
    return ad.add(ad.logsumexp(ad.reshape(logits, (1, n)), axis=1)[0],
                  ad.mul(logits[label], -1.0))


def ssim_index(a, b, window: int = 11, sigma: float = 1.5,
               c1: float = SSIM_C1, c2: float = SSIM_C2) -> Var:
    """Differentiable SSIM; numerically identical to the metric-suite version."""
    a, b = _to_var(a), _to_var(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 3:
        raise ShapeMismatchError(f"expected (c, h, w), got {a.shape}")
    c, h, w = a.shape
    if h < window or w < window:
        raise StainbenchError(f"image {h}x{w} smaller than SSIM window {window}")
    kern = Var(gaussian_window(window, sigma)[None, None])

    def wmean(x: Var) -> Var:
        return ad.conv2d(ad.reshape(x, (c, 1, h, w)), kern)

    mu_a, mu_b = wmean(a), wmean(b)
    sigma_a = ad.add(wmean(ad.mul(a, a)), ad.mul(ad.mul(mu_a, mu_a), -1.0))
    sigma_b = ad.add(wmean(ad.mul(b, b)), ad.mul(ad.mul(mu_b, mu_b), -1.0))
    sigma_ab = ad.add(wmean(ad.mul(a, b)), ad.mul(ad.mul(mu_a, mu_b), -1.0))
    num = ad.mul(ad.add(ad.mul(ad.mul(mu_a, mu_b), 2.0), c1),
                 ad.add(ad.mul(sigma_ab, 2.0), c2))
    den = ad.mul(ad.add(ad.add(ad.mul(mu_a, mu_a), ad.mul(mu_b, mu_b)), c1),
                 ad.add(ad.add(sigma_a, sigma_b), c2))
    return ad.mean(ad.div(num, den))


def bcistainer_composite(fake, real, d_fake, cls_logits, cls_label,
                         weights: CompositeWeights) -> Var:
    """adv + MAE + (1 - SSIM) + class cross-entropy, each term weighted."""
    fake, real = _to_var(fake), _to_var(real)
    if fake.shape != real.shape:
        raise ShapeMismatchError(f"shape mismatch: {fake.shape} vs {real.shape}")
    if isinstance(cls_label, str):
        if cls_label not in HER2_SCORES:
            raise StainbenchError(f"invalid HER2 label: {cls_label!r}")
        cls_label = HER2_SCORES.index(cls_label)

    total = Var(0.0)
    if weights.lambda_adv:
        d_fake = _to_var(d_fake)
        _check_finite(d_fake, "fake logits")
        total = ad.add(total, ad.mul(ad.mean(ad.softplus(ad.mul(d_fake, -1.0))),
                                     weights.lambda_adv))
    if weights.lambda_mae:
        mae = ad.mean(ad.abs_(ad.add(fake, ad.mul(real, -1.0))))
        total = ad.add(total, ad.mul(mae, weights.lambda_mae))
    if weights.lambda_ssim:
        ssim_term = ad.add(Var(1.0), ad.mul(
            ssim_index(fake, real, weights.ssim_window, weights.ssim_sigma), -1.0))
        total = ad.add(total, ad.mul(ssim_term, weights.lambda_ssim))
    if weights.lambda_cls:
        total = ad.add(total, ad.mul(class_cross_entropy(_to_var(cls_logits), cls_label),
                                     weights.lambda_cls))
    return total
