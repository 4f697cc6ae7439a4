"""Desk-scale training loops for the six translation frameworks.

Each loop is a deterministic function of (data, hyperparameters, seed) and
returns the loss history plus trained nets. Images stay in [0, 1]; the
diffusion loops convert through the signed-domain helpers at their boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

from . import autodiff as ad
from . import diffusion as df
from .autodiff import Var
from .backbone import AdamState, PatchDiscriminator, SmallUNet, UNetConfig, adam_step
from .errors import StainbenchError
from .imaging import HER2_SCORES, ImageTensor, Manifest, load_image
from .losses import (
    CompositeWeights,
    ContrastiveConfig,
    PyramidConfig,
    bcistainer_composite,
    cgan_losses,
    class_cross_entropy,
    asp_loss,
    pyramidal_l1_loss,
)

FRAMEWORKS = ("ppx2px", "asp", "bcistainer", "ddib", "cm", "bbdm")

GAN_FRAMEWORKS = ("ppx2px", "asp", "bcistainer")
DM_FRAMEWORKS = ("ddib", "cm", "bbdm")


@dataclass
class TrainResult:
    framework: str
    losses: list[float]
    nets: dict = field(default_factory=dict)
    labels: list[int] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    def smoothed(self, window: int = 20) -> tuple[float, float]:
        w = min(window, max(len(self.losses) // 2, 1))
        return float(np.mean(self.losses[:w])), float(np.mean(self.losses[-w:]))


# --- toy data ---

def toy_two_domain(n: int = 16, shape: tuple[int, int, int] = (1, 1, 2),
                   jitter: float = 0.02, seed: int = 0):
    """Two-pixel two-domain set: source near 0, target near 1, small jitter."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        src = rng.uniform(0.0, jitter, size=shape)
        tgt = rng.uniform(1.0 - jitter, 1.0, size=shape)
        pairs.append((ImageTensor(src), ImageTensor(tgt)))
    return pairs


def toy_paired_tiles(n: int = 16, shape: tuple[int, int, int] = (3, 8, 8),
                     seed: int = 0):
    """Smooth random sources with a fixed channel-mixing target transform."""
    rng = np.random.default_rng(seed)
    c, h, w = shape
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    pairs = []
    for _ in range(n):
        phase = rng.uniform(0, 2 * np.pi, size=(c, 2))
        freq = rng.uniform(1.0, 3.0, size=(c, 2))
        src = np.stack([
            0.5 + 0.4 * np.sin(freq[k, 0] * 2 * np.pi * yy + phase[k, 0])
                      * np.cos(freq[k, 1] * 2 * np.pi * xx + phase[k, 1])
            for k in range(c)
        ])
        src = np.clip(src, 0.0, 1.0)
        tgt = np.clip(1.0 - np.roll(src, 1, axis=0), 0.0, 1.0)
        pairs.append((ImageTensor(src), ImageTensor(tgt)))
    return pairs


def toy_labeled_tiles(n: int = 16, shape: tuple[int, int, int] = (3, 8, 8),
                      seed: int = 0):
    """Paired tiles plus a synthetic HER2 class per pair (for conditioning)."""
    pairs = toy_paired_tiles(n, shape, seed)
    rng = np.random.default_rng(seed + 1)
    labels = [int(rng.integers(0, len(HER2_SCORES))) for _ in pairs]
    return pairs, labels


def load_pairs_from_manifest(manifest: Manifest, split: str = "train",
                             limit: int | None = None):
    records = [r for r in manifest.records
               if r.status == "kept" and (split == "all" or r.split == split)]
    if limit is not None:
        records = records[:limit]
    pairs, labels = [], []
    for rec in records:
        pairs.append((load_image(rec.path_source), load_image(rec.path_target)))
        labels.append(HER2_SCORES.index(rec.her2_score))
    return pairs, labels


def _stack(pairs, which: int) -> np.ndarray:
    return np.stack([p[which].data for p in pairs])


# --- GAN loops ---

def _alternating_gan_step(gen, disc, src, real, g_extra, opt_g, opt_d,
                          lambda_adv: float):
    """One generator + one discriminator update; returns the generator loss."""
    fake = gen.forward(src)
    d_fake = disc.forward(ad.concat([Var(src), fake], axis=1))
    g_adv = ad.mean(ad.softplus(ad.mul(d_fake, -1.0)))  # non-saturating form
    g_loss = ad.add(ad.mul(g_adv, lambda_adv), g_extra(fake))
    gen.zero_grad()
    disc.zero_grad()
    g_loss.backward()
    adam_step(opt_g, gen.params)

    with ad.no_grad():
        fake_np = gen.forward(src).value
    d_real = disc.forward(np.concatenate([src, real], axis=1))
    d_fake2 = disc.forward(np.concatenate([src, fake_np], axis=1))
    _, d_loss = cgan_losses(d_real, d_fake2)
    disc.zero_grad()
    d_loss.backward()
    adam_step(opt_d, disc.params)
    return float(g_loss.item())


def train_ppx2px(pairs, steps: int = 200, lr: float = 2e-3, seed: int = 0,
                 width: int = 8, levels: int = 1, lambda_adv: float = 0.05,
                 lambda_l1: float = 1.0, lambda_pyr: float = 1.0,
                 pyramid: PyramidConfig | None = None) -> TrainResult:
    c = pairs[0][0].channels
    if pyramid is None:
        scales = 2 if min(pairs[0][0].height, pairs[0][0].width) >= 8 else 1
        pyramid = PyramidConfig(num_scales=scales)
    gen = SmallUNet(UNetConfig(c, c, width=width, levels=levels, with_time=False), seed=seed)
    disc = PatchDiscriminator(2 * c, width=width, seed=seed + 1)
    opt_g, opt_d = AdamState(lr=lr), AdamState(lr=lr)
    src, real = _stack(pairs, 0), _stack(pairs, 1)

    def g_extra(fake: Var) -> Var:
        l1 = ad.mean(ad.abs_(ad.add(fake, ad.mul(Var(real), -1.0))))
        pyr = Var(0.0)
        for i in range(fake.shape[0]):
            pyr = ad.add(pyr, pyramidal_l1_loss(fake[i], real[i], pyramid))
        pyr = ad.mul(pyr, 1.0 / fake.shape[0])
        return ad.add(ad.mul(l1, lambda_l1), ad.mul(pyr, lambda_pyr))

    history = [
        _alternating_gan_step(gen, disc, src, real, g_extra, opt_g, opt_d, lambda_adv)
        for _ in range(steps)
    ]
    return TrainResult("ppx2px", history, {"generator": gen, "discriminator": disc})


def train_asp(pairs, steps: int = 200, lr: float = 2e-3, seed: int = 0,
              width: int = 8, levels: int = 1, lambda_adv: float = 0.05,
              lambda_l1: float = 1.0, lambda_asp: float = 0.5,
              contrastive: ContrastiveConfig | None = None) -> TrainResult:
    c = pairs[0][0].channels
    contrastive = contrastive or ContrastiveConfig(temperature=0.3, patches_per_image=16)
    gen = SmallUNet(UNetConfig(c, c, width=width, levels=levels, with_time=False), seed=seed)
    disc = PatchDiscriminator(2 * c, width=width, seed=seed + 1)
    opt_g, opt_d = AdamState(lr=lr), AdamState(lr=lr)
    src, real = _stack(pairs, 0), _stack(pairs, 1)
    layer = contrastive.feature_layers[0]

    def encoder_feats(images: Var | np.ndarray) -> Var:
        _, feats = gen.forward(images, return_features=True)
        return feats[layer]

    def g_extra(fake: Var) -> Var:
        l1 = ad.mean(ad.abs_(ad.add(fake, ad.mul(Var(real), -1.0))))
        feats_fake = encoder_feats(fake)
        with ad.no_grad():
            feats_real = encoder_feats(real)
            feats_src = encoder_feats(src)
        total = Var(0.0)
        for i in range(fake.shape[0]):
            total = ad.add(total, asp_loss(feats_fake[i], Var(feats_real.value[i]),
                                           Var(feats_src.value[i]), contrastive))
        return ad.add(ad.mul(l1, lambda_l1), ad.mul(total, lambda_asp / fake.shape[0]))

    history = [
        _alternating_gan_step(gen, disc, src, real, g_extra, opt_g, opt_d, lambda_adv)
        for _ in range(steps)
    ]
    return TrainResult("asp", history, {"generator": gen, "discriminator": disc})


def train_bcistainer(pairs, labels=None, steps: int = 200, lr: float = 2e-3,
                     seed: int = 0, width: int = 8, levels: int = 1,
                     weights: CompositeWeights | None = None) -> TrainResult:
    c = pairs[0][0].channels
    if labels is None:
        labels = [0] * len(pairs)
    if weights is None:
        win = min(5, pairs[0][0].height, pairs[0][0].width)
        win -= (win + 1) % 2
        weights = CompositeWeights(lambda_adv=0.05, lambda_mae=1.0,
                                   lambda_ssim=0.5, lambda_cls=0.1, ssim_window=win)
    gen = SmallUNet(UNetConfig(c, c, width=width, levels=levels, with_time=False,
                               num_classes=len(HER2_SCORES)), seed=seed)
    disc = PatchDiscriminator(2 * c, width=width, seed=seed + 1)
    classifier = PatchDiscriminator(c, width=width, seed=seed + 2,
                                    num_classes=len(HER2_SCORES))
    opt_g, opt_d, opt_c = AdamState(lr=lr), AdamState(lr=lr), AdamState(lr=lr)
    src, real = _stack(pairs, 0), _stack(pairs, 1)
    label_arr = np.asarray(labels, dtype=np.int64)

    history = []
    for _ in range(steps):
        # classifier learns the scores on real target tiles
        cls_logits = classifier.logits(real)
        c_loss = Var(0.0)
        for i, lab in enumerate(label_arr):
            c_loss = ad.add(c_loss, class_cross_entropy(cls_logits[i], int(lab)))
        c_loss = ad.mul(c_loss, 1.0 / len(label_arr))
        classifier.zero_grad()
        c_loss.backward()
        adam_step(opt_c, classifier.params)

        fake = gen.forward(src, cond_class=label_arr)
        d_fake = disc.forward(ad.concat([Var(src), fake], axis=1))
        cls_fake = classifier.logits(fake)
        g_loss = Var(0.0)
        for i, lab in enumerate(label_arr):
            g_loss = ad.add(g_loss, bcistainer_composite(
                fake[i], real[i], d_fake[i], cls_fake[i], int(lab), weights))
        g_loss = ad.mul(g_loss, 1.0 / len(label_arr))
        gen.zero_grad()
        disc.zero_grad()
        classifier.zero_grad()
        g_loss.backward()
        adam_step(opt_g, gen.params)

        with ad.no_grad():
            fake_np = gen.forward(src, cond_class=label_arr).value
        d_real = disc.forward(np.concatenate([src, real], axis=1))
        d_fake2 = disc.forward(np.concatenate([src, fake_np], axis=1))
        _, d_loss = cgan_losses(d_real, d_fake2)
        disc.zero_grad()
        d_loss.backward()
        adam_step(opt_d, disc.params)
        history.append(float(g_loss.item()))
    return TrainResult("bcistainer", history,
                       {"generator": gen, "discriminator": disc, "classifier": classifier},
                       labels=list(labels))


# --- diffusion loops ---

def _sigma_to_embedding(sigma: float, config: df.CmConfig) -> float:
    """Map the noise grid onto a well-conditioned range for the embedding."""
    return 10.0 * np.log(sigma / config.sigma_min) / np.log(config.sigma_max / config.sigma_min)


def denoiser_from_net(net: SmallUNet, cond_channels: bool = False) -> df.DenoiserFn:
    """Wrap a net as the (x, t, condition) -> prediction callable."""
    def fn(x, t, condition):
        with ad.no_grad():
            cond = None
            if cond_channels and condition is not None:
                cond = np.asarray(condition)[None]
            out = net.forward(np.asarray(x)[None], t=float(t), cond_image=cond)
        return out.value[0]
    return fn


def cm_denoiser_from_net(net: SmallUNet, config: df.CmConfig) -> df.DenoiserFn:
    def fn(x, sigma, condition):
        with ad.no_grad():
            cond = np.asarray(condition)[None] if condition is not None else None
            out = net.forward(np.asarray(x)[None],
                              t=_sigma_to_embedding(float(sigma), config),
                              cond_image=cond)
        return out.value[0]
    return fn


def train_ddpm(images: list[np.ndarray], schedule: df.AlphaSchedule,
               steps: int = 200, lr: float = 2e-3, seed: int = 0,
               width: int = 8, levels: int = 1) -> tuple[SmallUNet, list[float]]:
    """Noise-prediction training of one domain model (signed-domain inputs)."""
    c = images[0].shape[0]
    net = SmallUNet(UNetConfig(c, c, width=width, levels=levels), seed=seed)
    opt = AdamState(lr=lr)
    rng = np.random.default_rng(seed)
    x0 = np.stack(images)
    history = []
    for _ in range(steps):
        t = int(rng.integers(1, schedule.T + 1))
        noise = rng.standard_normal(x0.shape)
        x_t = df.ddpm_forward_sample(x0, t, schedule, noise)
        pred = net.forward(x_t, t=float(t))
        diff = ad.add(pred, ad.mul(Var(noise), -1.0))
        loss = ad.mean(ad.mul(diff, diff))
        net.zero_grad()
        loss.backward()
        adam_step(opt, net.params)
        history.append(loss.item())
    return net, history


def train_ddib(pairs, steps: int = 200, lr: float = 2e-3, seed: int = 0,
               width: int = 8, levels: int = 1,
               schedule: df.AlphaSchedule | None = None) -> TrainResult:
    """Two independent domain models trained on source and target sets."""
    schedule = schedule or df.linear_beta_schedule(50, 0.02, 0.2)
    src = [df.to_signed(p[0]) for p in pairs]
    tgt = [df.to_signed(p[1]) for p in pairs]
    net_src, hist_src = train_ddpm(src, schedule, steps, lr, seed, width, levels)
    net_tgt, hist_tgt = train_ddpm(tgt, schedule, steps, lr, seed + 1, width, levels)
    history = [0.5 * (a + b) for a, b in zip(hist_src, hist_tgt)]
    return TrainResult("ddib", history,
                       {"model_src": net_src, "model_tgt": net_tgt, "schedule": schedule})


def train_cm(pairs, steps: int = 1000, lr: float = 3e-3, seed: int = 0,
             width: int = 8, levels: int = 1, ema_rate: float = 0.99,
             config: df.CmConfig | None = None) -> TrainResult:
    """Conditional consistency training: source concatenated as condition."""
    config = config or df.CmConfig(n_sigmas=8, sigma_max=5.0)
    c = pairs[0][0].channels
    net = SmallUNet(UNetConfig(c, c, width=width, levels=levels, cond_channels=c), seed=seed)
    ema = net.clone()
    opt = AdamState(lr=lr)
    rng = np.random.default_rng(seed)
    grid = df.karras_sigmas(config)
    x0 = np.stack([df.to_signed(p[1]) for p in pairs])
    cond = np.stack([df.to_signed(p[0]) for p in pairs])

    def model_batch(x, sigma):
        return net.forward(x, t=_sigma_to_embedding(sigma, config), cond_image=cond)

    history = []
    for _ in range(steps):
        i = int(rng.integers(0, len(grid) - 1))
        sigma_a, sigma_b = float(grid[i]), float(grid[i + 1])
        noise = rng.standard_normal(x0.shape)
        x_a = x0 + sigma_a * noise
        x_b = x0 + sigma_b * noise
        online = df.cm_apply(x_a, sigma_a, model_batch(x_a, sigma_a), config)
        with ad.no_grad():
            ema_raw = ema.forward(x_b, t=_sigma_to_embedding(sigma_b, config),
                                  cond_image=cond).value
        target = df.cm_apply(x_b, sigma_b, ema_raw, config)
        target = target.value if isinstance(target, Var) else target
        diff = ad.add(online, ad.mul(Var(target), -1.0))
        loss = ad.mean(ad.mul(diff, diff))
        net.zero_grad()
        loss.backward()
        adam_step(opt, net.params)
        for name in ema.params:
            ema.params[name].value = (ema_rate * ema.params[name].value
                                      + (1.0 - ema_rate) * net.params[name].value)
        history.append(loss.item())
    return TrainResult("cm", history, {"model": net, "ema": ema, "config": config})


def train_bbdm(pairs, steps: int = 300, lr: float = 2e-3, seed: int = 0,
               width: int = 8, levels: int = 1,
               schedule: df.BridgeSchedule | None = None) -> TrainResult:
    """Bridge training: predict drift + noise between paired endpoints."""
    schedule = schedule or df.bridge_schedule(50)
    c = pairs[0][0].channels
    net = SmallUNet(UNetConfig(c, c, width=width, levels=levels, cond_channels=c), seed=seed)
    opt = AdamState(lr=lr)
    rng = np.random.default_rng(seed)
    x0 = np.stack([df.to_signed(p[1]) for p in pairs])   # target is the clean end
    xT = np.stack([df.to_signed(p[0]) for p in pairs])   # source is the far end
    history = []
    for _ in range(steps):
        t = int(rng.integers(1, schedule.T + 1))
        noise = rng.standard_normal(x0.shape)
        x_t = df.bbdm_forward_sample(x0, xT, t, schedule, noise)
        target = df.bbdm_training_target(x0, xT, t, schedule, noise)
        pred = net.forward(x_t, t=float(t), cond_image=xT)
        diff = ad.add(pred, ad.mul(Var(target), -1.0))
        loss = ad.mean(ad.mul(diff, diff))
        net.zero_grad()
        loss.backward()
        adam_step(opt, net.params)
        history.append(loss.item())
    return TrainResult("bbdm", history, {"model": net, "schedule": schedule})


def train_framework(framework: str, pairs, labels=None, **kwargs) -> TrainResult:
    if framework == "ppx2px":
        return train_ppx2px(pairs, **kwargs)
    if framework == "asp":
        return train_asp(pairs, **kwargs)
    if framework == "bcistainer":
        return train_bcistainer(pairs, labels=labels, **kwargs)
    if framework == "ddib":
        return train_ddib(pairs, **kwargs)
    if framework == "cm":
        return train_cm(pairs, **kwargs)
    if framework == "bbdm":
        return train_bbdm(pairs, **kwargs)
    raise StainbenchError(f"unknown framework: {framework!r}")


# --- sampling with trained results ---

def translate(result: TrainResult, source: ImageTensor, seed: int = 0,
              sample_steps: int | None = None, label: int = 0) -> ImageTensor:
    """Run the trained model of any framework on one source image."""
    fw = result.framework
    if fw in GAN_FRAMEWORKS:
        gen = result.nets["generator"]
        with ad.no_grad():
            if fw == "bcistainer":
                out = gen.forward(source.data[None], cond_class=np.array([label]))
            else:
                out = gen.forward(source.data[None])
        return ImageTensor(np.clip(out.value[0], 0.0, 1.0))
    x_src = df.to_signed(source)
    if fw == "ddib":
        schedule = result.nets["schedule"]
        steps = sample_steps or min(10, schedule.T)
        out = df.ddib_translate(
            x_src,
            denoiser_from_net(result.nets["model_src"]),
            denoiser_from_net(result.nets["model_tgt"]),
            schedule, steps)
        return df.from_signed(out)
    if fw == "cm":
        config = result.nets["config"]
        out = df.cm_sample_single_step(
            x_src, cm_denoiser_from_net(result.nets["model"], config), config, seed)
        return df.from_signed(out)
    if fw == "bbdm":
        schedule = result.nets["schedule"]
        steps = sample_steps or min(10, schedule.T)
        out = df.bbdm_sample(
            x_src, denoiser_from_net(result.nets["model"], cond_channels=True),
            schedule, steps, seed)
        return df.from_signed(out)
    raise StainbenchError(f"unknown framework: {fw!r}")
