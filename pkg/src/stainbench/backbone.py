"""Small differentiable convolutional nets for desk-scale training.

A U-shaped generator/denoiser with sinusoidal step embedding and optional
per-class conditioning bias, plus a PatchGAN-style discriminator and an
adaptive-moment optimizer. All parameters live in a named dict of autodiff
Vars and round-trip through a single flat vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .arrayio import read_array, write_array
from .autodiff import Var
from .errors import NonFiniteError, ShapeMismatchError, StainbenchError


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 3
    out_channels: int = 3
    width: int = 16
    levels: int = 2
    cond_channels: int = 0       # extra channels concatenated to the input
    num_classes: int = 0         # >0 enables the per-class bottleneck bias
    with_time: bool = True

    def __post_init__(self):
        if self.levels < 1:
            raise StainbenchError("levels must be >= 1")
        if self.width < 1:
            raise StainbenchError("width must be >= 1")


def _sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Classic sin/cos positional embedding of a (batch,) step array."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = max(dim // 2, 1)
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return emb[:, :dim]


class SmallUNet:
    """Encoder/decoder conv net with skip connections; output shape = input shape."""

    def __init__(self, config: UNetConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.params: dict[str, Var] = {}
        c_in = config.in_channels + config.cond_channels
        ch = [config.width * (2 ** l) for l in range(config.levels)]

        prev = c_in
        for l, c in enumerate(ch):
            self._conv(rng, f"enc{l}a", prev, c)
            self._conv(rng, f"enc{l}b", c, c)
            prev = c
        cb = ch[-1]
        if config.with_time:
            self._linear(rng, "time", cb, cb)
        if config.num_classes > 0:
            self.params["class_bias"] = Var(np.zeros((config.num_classes, cb)),
                                            requires_grad=True)
        self._conv(rng, "mid", cb, cb)
        for l in reversed(range(config.levels - 1)):
            self._conv(rng, f"up{l}", ch[l + 1], ch[l])
            self._conv(rng, f"dec{l}", 2 * ch[l], ch[l])
        # zero-initialized head: a fresh net is the zero map
        self.params["head_w"] = Var(np.zeros((config.out_channels, ch[0], 3, 3)),
                                    requires_grad=True)
        self.params["head_b"] = Var(np.zeros(config.out_channels), requires_grad=True)

    def _conv(self, rng, name: str, c_in: int, c_out: int, k: int = 3) -> None:
        scale = np.sqrt(2.0 / (c_in * k * k))
        self.params[f"{name}_w"] = Var(rng.normal(0.0, scale, (c_out, c_in, k, k)),
                                       requires_grad=True)
        self.params[f"{name}_b"] = Var(np.zeros(c_out), requires_grad=True)

    def _linear(self, rng, name: str, d_in: int, d_out: int) -> None:
        scale = np.sqrt(1.0 / d_in)
        self.params[f"{name}_w"] = Var(rng.normal(0.0, scale, (d_in, d_out)),
                                       requires_grad=True)
        self.params[f"{name}_b"] = Var(np.zeros(d_out), requires_grad=True)

    # --- forward ---

    def _block(self, x: Var, name: str) -> Var:
        x = ad.conv2d(x, self.params[f"{name}_w"], self.params[f"{name}_b"], padding=1)
        return ad.silu(x)

    def forward(self, x, t=None, cond_image=None, cond_class=None,
                return_features: bool = False):
        """x: (N, C, H, W) array or Var; t: scalar or (N,) steps; cond_image
        is concatenated on the channel axis; cond_class indexes the class bias."""
        x = x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))
        if x.ndim != 4:
            raise ShapeMismatchError(f"expected (N,C,H,W), got shape {x.shape}")
        cfg = self.config
        if cond_image is not None:
            cond_image = cond_image if isinstance(cond_image, Var) else Var(cond_image)
            x = ad.concat([x, cond_image], axis=1)
        if x.shape[1] != cfg.in_channels + cfg.cond_channels:
            raise ShapeMismatchError(
                f"expected {cfg.in_channels + cfg.cond_channels} input channels, got {x.shape[1]}"
            )
        div = 2 ** (cfg.levels - 1)
        if x.shape[2] % div or x.shape[3] % div:
            raise ShapeMismatchError(
                f"spatial dims {x.shape[2:]} must divide {div} for {cfg.levels} levels"
            )

        feats: dict[str, Var] = {}
        skips: list[Var] = []
        for l in range(cfg.levels):
            x = self._block(x, f"enc{l}a")
            x = self._block(x, f"enc{l}b")
            feats[f"enc{l}"] = x
            skips.append(x)
            if l < cfg.levels - 1:
                x = ad.avg_pool2x2(x)

        n = x.shape[0]
        if cfg.with_time and t is not None:
            t_arr = np.full(n, float(t)) if np.ndim(t) == 0 else np.asarray(t, dtype=np.float64)
            emb = _sinusoidal_embedding(t_arr, x.shape[1])
            emb = ad.add(ad.matmul(Var(emb), self.params["time_w"]), self.params["time_b"])
            x = ad.add(x, ad.reshape(emb, (n, x.shape[1], 1, 1)))
        if cfg.num_classes > 0 and cond_class is not None:
            ids = np.asarray(cond_class, dtype=np.int64).reshape(-1)
            if ids.shape[0] != n:
                raise ShapeMismatchError("cond_class batch size mismatch")
            if ids.min() < 0 or ids.max() >= cfg.num_classes:
                raise StainbenchError(f"class id out of range 0..{cfg.num_classes - 1}")
            bias = ad.getitem(self.params["class_bias"], ids)
            x = ad.add(x, ad.reshape(bias, (n, x.shape[1], 1, 1)))
        x = self._block(x, "mid")
        feats["bottleneck"] = x

        for l in reversed(range(cfg.levels - 1)):
            x = ad.upsample_nearest2x(x)
            x = self._block(x, f"up{l}")
            x = ad.concat([x, skips[l]], axis=1)
            x = self._block(x, f"dec{l}")
        out = ad.conv2d(x, self.params["head_w"], self.params["head_b"], padding=1)
        if return_features:
            return out, feats
        return out

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    # --- parameter plumbing ---

    def param_names(self) -> list[str]:
        return sorted(self.params)

    def num_params(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.params[n].value.ravel() for n in self.param_names()])

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64).ravel()
        if vec.size != self.num_params():
            raise ShapeMismatchError(
                f"checkpoint has {vec.size} values, net needs {self.num_params()}"
            )
        offset = 0
        for name in self.param_names():
            p = self.params[name]
            n = p.value.size
            p.value = vec[offset:offset + n].reshape(p.value.shape).copy()
            offset += n

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def save(self, path) -> None:
        write_array(path, self.flatten())

    def load(self, path) -> None:
        self.load_flat(read_array(path))

    def clone(self) -> "SmallUNet":
        other = SmallUNet(self.config, seed=0)
        other.load_flat(self.flatten())
        return other


class PatchDiscriminator:
    """Conv stack producing a logit map over patches (PatchGAN style)."""

    def __init__(self, in_channels: int, width: int = 16, seed: int = 0,
                 num_classes: int = 0):
        self.in_channels = in_channels
        self.num_classes = num_classes
        rng = np.random.default_rng(seed)
        self.params: dict[str, Var] = {}

        def conv(name, ci, co, k=3):
            scale = np.sqrt(2.0 / (ci * k * k))
            self.params[f"{name}_w"] = Var(rng.normal(0.0, scale, (co, ci, k, k)),
                                           requires_grad=True)
            self.params[f"{name}_b"] = Var(np.zeros(co), requires_grad=True)

        conv("c0", in_channels, width)
        conv("c1", width, width * 2)
        out_ch = 1 if num_classes == 0 else num_classes
        conv("head", width * 2, out_ch)

    def forward(self, x) -> Var:
        x = x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))
        x = ad.leaky_relu(ad.conv2d(x, self.params["c0_w"], self.params["c0_b"],
                                    stride=2, padding=1))
        x = ad.leaky_relu(ad.conv2d(x, self.params["c1_w"], self.params["c1_b"],
                                    padding=1))
        return ad.conv2d(x, self.params["head_w"], self.params["head_b"], padding=1)

    def logits(self, x) -> Var:
        """Class logits: global average pool of the map (classifier use)."""
        return ad.mean(self.forward(x), axis=(2, 3))

    def __call__(self, x):
        return self.forward(x)

    def param_names(self):
        return sorted(self.params)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


@dataclass
class AdamState:
    """Adaptive-moment optimizer state for a named parameter dict."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Var],
              grads: dict[str, np.ndarray] | None = None) -> None:
    """One bias-corrected adaptive-moment update, in place on param values.

    Grads default to each Var's accumulated .grad; missing grads are zero.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for name in sorted(params):
        p = params[name]
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.value)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.value.shape:
            raise ShapeMismatchError(f"grad shape {g.shape} != param shape {p.value.shape} ({name})")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1 - b1 ** state.step)
        v_hat = v / (1 - b2 ** state.step)
        p.value = p.value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
