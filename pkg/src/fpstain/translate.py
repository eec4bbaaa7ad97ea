"""Unpaired cycle-consistent adversarial translator for virtual staining.

Two generators map between the coherent domain A (monochrome reconstructed
intensity or phase) and the incoherent domain B (color brightfield or
fluorescence); two patch discriminators judge realism.  The generator
objective is the sum of five terms: the two least-squares adversarial
losses, an L1 cycle-consistency loss weighted by ``cycle_weight``, and two
structure terms ``0.1 * (1 - msssim_green(G(x), x))`` that tie each
generator's output to its input's green-channel structure.

Training is a pure function of (datasets, config): model initialization,
shuffling, and the fake replay buffers all draw from seeded streams, so the
same seed reproduces the same parameters bit for bit.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import pipeline
from .errors import (
    ConfigurationError,
    EmptyInputError,
    FormatError,
    NumericError,
    ShapeError,
)
from .metrics import DEFAULT_SCALE_WEIGHTS, feasible_scales

STRUCT_WEIGHT = 0.1
ADAM_BETAS = (0.5, 0.999)
MODEL_MAGIC = b"FPSM"
MODEL_VERSION = 1


@dataclass
class TrainConfig:
    """Hyperparameters for unpaired training."""

    epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 2e-4
    cycle_weight: float = 10.0
    seed: int = 0
    tile_size: int = 0
    fake_buffer_size: int = 50
    base_width: int = 32
    n_res_blocks: int = 4
    disc_base_width: int = 32

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.cycle_weight <= 0:
            raise ConfigurationError("cycle_weight must be > 0")
        if self.fake_buffer_size < 1:
            raise ConfigurationError("fake_buffer_size must be >= 1")
        if self.tile_size and self.tile_size < 11:
            raise ConfigurationError(
                f"tile_size must cover at least one ms-SSIM window (11 px), got {self.tile_size}"
            )
        if self.base_width < 1 or self.n_res_blocks < 0 or self.disc_base_width < 1:
            raise ConfigurationError("network widths must be positive")


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    """Residual encoder-transformer-decoder with bounded (tanh) output."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        base_width: int = 32,
        n_res_blocks: int = 4,
        n_downsample: int = 2,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        layers: List[nn.Module] = [
            nn.Conv2d(in_channels, base_width, 7, padding=3, padding_mode="reflect"),
            nn.InstanceNorm2d(base_width),
            nn.ReLU(inplace=True),
        ]
        ch = base_width
        for _ in range(n_downsample):
            layers += [
                nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1),
                nn.InstanceNorm2d(ch * 2),
                nn.ReLU(inplace=True),
            ]
            ch *= 2
        layers += [ResidualBlock(ch) for _ in range(n_res_blocks)]
        for _ in range(n_downsample):
            layers += [
                nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(ch // 2),
                nn.ReLU(inplace=True),
            ]
            ch //= 2
        layers += [
            nn.Conv2d(ch, out_channels, 7, padding=3, padding_mode="reflect"),
            nn.Tanh(),
        ]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class Discriminator(nn.Module):
    """Patch classifier: 3 stride-2 blocks, spatial realness map output."""

    def __init__(self, in_channels: int, base_width: int = 32, n_layers: int = 3):
        super().__init__()
        self.in_channels = in_channels
        layers: List[nn.Module] = [
            nn.Conv2d(in_channels, base_width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        ch = base_width
        for _ in range(1, n_layers):
            layers += [
                nn.Conv2d(ch, ch * 2, 4, stride=2, padding=1),
                nn.InstanceNorm2d(ch * 2),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            ch *= 2
        layers += [nn.Conv2d(ch, 1, 3, stride=1, padding=1)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            m.weight.data.normal_(0.0, 0.02)
            if m.bias is not None:
                m.bias.data.zero_()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


@dataclass
class TranslationModel:
    """The two generator-discriminator pairs plus bookkeeping."""

    g_ab: Generator
    g_ba: Generator
    d_a: Discriminator
    d_b: Discriminator
    domain_a_channels: int
    domain_b_channels: int
    arch: Dict[str, int] = field(default_factory=dict)
    training_meta: Dict[str, int] = field(default_factory=dict)
    loss_history: List["LossBreakdown"] = field(default_factory=list)

    @staticmethod
    def create(
        domain_a_channels: int,
        domain_b_channels: int,
        seed: int = 0,
        base_width: int = 32,
        n_res_blocks: int = 4,
        n_downsample: int = 2,
        disc_base_width: int = 32,
        disc_layers: int = 3,
    ) -> "TranslationModel":
        """Build a fresh model with seeded normal(0, 0.02) convolutions."""
        arch = {
            "base_width": base_width,
            "n_res_blocks": n_res_blocks,
            "n_downsample": n_downsample,
            "disc_base_width": disc_base_width,
            "disc_layers": disc_layers,
        }
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            g_ab = Generator(domain_a_channels, domain_b_channels, base_width, n_res_blocks, n_downsample)
            g_ba = Generator(domain_b_channels, domain_a_channels, base_width, n_res_blocks, n_downsample)
            d_a = Discriminator(domain_a_channels, disc_base_width, disc_layers)
            d_b = Discriminator(domain_b_channels, disc_base_width, disc_layers)
            for module in (g_ab, g_ba, d_a, d_b):
                _init_weights(module)
        model = TranslationModel(g_ab, g_ba, d_a, d_b, domain_a_channels, domain_b_channels, arch)
        model.training_meta = {"epochs": 0, "seed": seed}
        return model

    def modules_by_name(self) -> List[Tuple[str, nn.Module]]:
        return [("g_ab", self.g_ab), ("g_ba", self.g_ba), ("d_a", self.d_a), ("d_b", self.d_b)]

    def eval(self) -> "TranslationModel":
        for _, m in self.modules_by_name():
            m.eval()
        return self


@dataclass
class LossBreakdown:
    """One evaluation of the five-term generator objective."""

    gan_ab: float
    gan_ba: float
    cyc: float
    struct_ab: float
    struct_ba: float
    total: float

    @staticmethod
    def from_components(
        gan_ab: float, gan_ba: float, cyc: float, struct_ab: float, struct_ba: float
    ) -> "LossBreakdown":
        total = gan_ab + gan_ba + cyc + struct_ab + struct_ba
        return LossBreakdown(gan_ab, gan_ba, cyc, struct_ab, struct_ba, total)


# ---------------------------------------------------------------------------
# Differentiable green-channel multiscale SSIM (mirrors metrics.ms_ssim_green)


def _gaussian_kernel_t(window: int, sigma: float, dtype, device) -> torch.Tensor:
    x = torch.arange(window, dtype=dtype, device=device) - (window - 1) / 2.0
    g = torch.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid_t(img: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    c = img.shape[1]
    krow = kernel.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    kcol = kernel.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    out = F.conv2d(img, krow, groups=c)
    return F.conv2d(out, kcol, groups=c)


def _lum_cs_t(
    a: torch.Tensor, b: torch.Tensor, kernel: torch.Tensor, c1: float, c2: float
) -> Tuple[torch.Tensor, torch.Tensor]:
    mu_a = _filter_valid_t(a, kernel)
    mu_b = _filter_valid_t(b, kernel)
    var_a = _filter_valid_t(a * a, kernel) - mu_a * mu_a
    var_b = _filter_valid_t(b * b, kernel) - mu_b * mu_b
    cov = _filter_valid_t(a * b, kernel) - mu_a * mu_b
    lum = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    cs = (2.0 * cov + c2) / (var_a + var_b + c2)
    return lum.mean(dim=(1, 2, 3)), cs.mean(dim=(1, 2, 3))


def _downsample2_t(img: torch.Tensor) -> torch.Tensor:
    h = img.shape[2] - img.shape[2] % 2
    w = img.shape[3] - img.shape[3] % 2
    return F.avg_pool2d(img[:, :, :h, :w], kernel_size=2)


def ms_ssim_unit(a: torch.Tensor, b: torch.Tensor, window: int = 11, sigma: float = 1.5,
                 k1: float = 0.01, k2: float = 0.03) -> torch.Tensor:
    """Per-sample multiscale SSIM of single-channel [0, 1] batches.

    Same algorithm as :func:`fpstain.metrics.ms_ssim_green` (valid Gaussian
    statistics, clamped contrast-structure means, dyadic downsampling,
    auto-reduced scale count) but differentiable; returns shape ``(n,)``.
    """
    if a.shape != b.shape:
        raise ShapeError(f"batch shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    c1, c2 = k1 * k1, k2 * k2
    kernel = _gaussian_kernel_t(window, sigma, a.dtype, a.device)
    m = feasible_scales((a.shape[2], a.shape[3]), window, len(DEFAULT_SCALE_WEIGHTS))
    weights = np.asarray(DEFAULT_SCALE_WEIGHTS[:m])
    weights = weights / weights.sum()
    result = torch.ones(a.shape[0], dtype=a.dtype, device=a.device)
    for level in range(m):
        lum, cs = _lum_cs_t(a, b, kernel, c1, c2)
        cs = torch.clamp(cs, min=0.0)
        if level == m - 1:
            result = result * torch.clamp(lum, min=0.0) ** weights[level] * cs ** weights[level]
        else:
            result = result * cs ** weights[level]
            a = _downsample2_t(a)
            b = _downsample2_t(b)
    return result


def _green_t(batch: torch.Tensor) -> torch.Tensor:
    if batch.shape[1] == 3:
        return batch[:, 1:2]
    if batch.shape[1] == 1:
        return batch
    raise ShapeError(f"expected 1- or 3-channel batch, got {batch.shape[1]} channels")


def _structure_term(output: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """``0.1 * (1 - msssim_g)`` between output and reference, batch mean.

    Both tensors live in [-1, 1]; they are rescaled to [0, 1] and reduced to
    their green planes before scoring.
    """
    out_g = (_green_t(output) + 1.0) * 0.5
    ref_g = (_green_t(reference) + 1.0) * 0.5
    return STRUCT_WEIGHT * (1.0 - ms_ssim_unit(out_g, ref_g).mean())


# ---------------------------------------------------------------------------
# Generator objective (Eq. of the five-term composite loss)


class ReplayBuffer:
    """Pool of past generator outputs used to train the discriminators.

    Each pushed image is returned as-is until the pool fills; afterwards,
    with probability one half it swaps with (and returns) a random stored
    image.  All randomness comes from the injected generator.
    """

    def __init__(self, capacity: int, rng: np.random.Generator):
        self.capacity = capacity
        self.rng = rng
        self.images: List[torch.Tensor] = []

    def push_and_sample(self, batch: torch.Tensor) -> torch.Tensor:
        out = []
        for img in batch:
            img = img.unsqueeze(0)
            if len(self.images) < self.capacity:
                self.images.append(img)
                out.append(img)
            elif self.rng.random() < 0.5:
                idx = int(self.rng.integers(0, self.capacity))
                out.append(self.images[idx])
                self.images[idx] = img
            else:
                out.append(img)
        return torch.cat(out, dim=0)


def _check_batch(batch: torch.Tensor, channels: int, name: str) -> None:
    if batch.ndim != 4:
        raise ShapeError(f"{name} must be a 4-D batch, got shape {tuple(batch.shape)}")
    if batch.shape[0] < 1:
        raise EmptyInputError(f"{name} is empty")
    if batch.shape[1] != channels:
        raise ShapeError(f"{name} has {batch.shape[1]} channels, expected {channels}")


def _generator_objective(
    model: TranslationModel,
    batch_a: torch.Tensor,
    batch_b: torch.Tensor,
    cycle_weight: float,
) -> Tuple[Dict[str, torch.Tensor], torch.Tensor, torch.Tensor, torch.Tensor]:
    """Five loss terms plus the fake images, with the graph attached."""
    fake_b = model.g_ab(batch_a)
    fake_a = model.g_ba(batch_b)
    pred_fake_b = model.d_b(fake_b)
    pred_fake_a = model.d_a(fake_a)
    gan_ab = F.mse_loss(pred_fake_b, torch.ones_like(pred_fake_b))
    gan_ba = F.mse_loss(pred_fake_a, torch.ones_like(pred_fake_a))
    rec_a = model.g_ba(fake_b)
    rec_b = model.g_ab(fake_a)
    cyc_ab = torch.mean(torch.abs(rec_a - batch_a))
    cyc_ba = torch.mean(torch.abs(rec_b - batch_b))
    cyc = cycle_weight * (cyc_ab + cyc_ba)
    struct_ab = _structure_term(fake_b, batch_a)
    struct_ba = _structure_term(fake_a, batch_b)
    total = gan_ab + gan_ba + cyc + struct_ab + struct_ba
    terms = {
        "gan_ab": gan_ab,
        "gan_ba": gan_ba,
        "cyc_ab": cyc_ab,
        "cyc_ba": cyc_ba,
        "struct_ab": struct_ab,
        "struct_ba": struct_ba,
    }
    return terms, total, fake_b, fake_a


def _breakdown_from_terms(terms: Dict[str, torch.Tensor], cycle_weight: float) -> LossBreakdown:
    for name, value in terms.items():
        if not torch.all(torch.isfinite(value)):
            raise NumericError(f"non-finite loss term {name!r}")
    return LossBreakdown.from_components(
        terms["gan_ab"].item(),
        terms["gan_ba"].item(),
        cycle_weight * (terms["cyc_ab"].item() + terms["cyc_ba"].item()),
        terms["struct_ab"].item(),
        terms["struct_ba"].item(),
    )


def generator_objective(
    model: TranslationModel,
    batch_a: torch.Tensor,
    batch_b: torch.Tensor,
    cycle_weight: float = 10.0,
) -> Tuple[LossBreakdown, torch.Tensor]:
    """Breakdown plus the differentiable total (graph attached).

    The returned tensor is what training backpropagates; the breakdown holds
    the same five terms as Python floats.
    """
    if cycle_weight <= 0:
        raise ConfigurationError("cycle_weight must be > 0")
    _check_batch(batch_a, model.domain_a_channels, "batch_a")
    _check_batch(batch_b, model.domain_b_channels, "batch_b")
    terms, total, _, _ = _generator_objective(model, batch_a, batch_b, cycle_weight)
    return _breakdown_from_terms(terms, cycle_weight), total


def total_loss(
    model: TranslationModel,
    batch_a: torch.Tensor,
    batch_b: torch.Tensor,
    fake_a_buffer: Optional[ReplayBuffer] = None,
    fake_b_buffer: Optional[ReplayBuffer] = None,
    cycle_weight: float = 10.0,
) -> LossBreakdown:
    """Evaluate the generator objective on one batch pair.

    The adversarial components are the generator-side least-squares losses
    (discriminator updates happen separately during training).  Freshly
    generated fakes are pushed into the given replay buffers so a training
    step can hand them to the discriminators afterwards.  The ``cyc``
    component scales linearly in ``cycle_weight`` and the breakdown's
    ``total`` is exactly the ordered sum of its five components.
    """
    if cycle_weight <= 0:
        raise ConfigurationError("cycle_weight must be > 0")
    _check_batch(batch_a, model.domain_a_channels, "batch_a")
    _check_batch(batch_b, model.domain_b_channels, "batch_b")
    with torch.no_grad():
        terms, _, fake_b, fake_a = _generator_objective(model, batch_a, batch_b, cycle_weight)
        if fake_a_buffer is not None:
            fake_a_buffer.push_and_sample(fake_a.detach())
        if fake_b_buffer is not None:
            fake_b_buffer.push_and_sample(fake_b.detach())
    return _breakdown_from_terms(terms, cycle_weight)


def cycle_mismatch(model: TranslationModel, batch_a: torch.Tensor, batch_b: torch.Tensor) -> float:
    """Unweighted cycle figure: sum of the two round-trip L1 means.

    Equals the ``cyc`` breakdown component divided by the cycle weight.
    """
    with torch.no_grad():
        terms, _, _, _ = _generator_objective(model, batch_a, batch_b, 1.0)
    return terms["cyc_ab"].item() + terms["cyc_ba"].item()


# ---------------------------------------------------------------------------
# Training


def _batch_to_tensor(dataset, name: str) -> torch.Tensor:
    """Stack tiles into an (n, c, h, w) float32 tensor in [-1, 1]."""
    if isinstance(dataset, np.ndarray):
        arrays = list(dataset)
    else:
        arrays = [np.asarray(a) for a in dataset]
    if not arrays:
        raise EmptyInputError(f"{name} is empty")
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        raise ShapeError(f"{name} tiles disagree on shape: {sorted(shapes)}")
    stacked = np.stack(arrays).astype(np.float32)
    if stacked.ndim == 3:
        stacked = stacked[:, np.newaxis]
    elif stacked.ndim == 4:
        stacked = np.moveaxis(stacked, -1, 1)
    else:
        raise ShapeError(f"{name} tiles must be 2-D or 3-D, got shape {shapes.pop()}")
    if not np.all(np.isfinite(stacked)):
        raise NumericError(f"{name} contains non-finite values")
    return torch.from_numpy(stacked)


def train(dataset_a, dataset_b, config: TrainConfig) -> TranslationModel:
    """Train the translator on two unpaired tile sets.

    Tiles are [-1, 1]-normalized arrays, ``(h, w)`` for single-channel and
    ``(h, w, 3)`` for color.  Per batch the generators take one step on the
    composite objective, then each discriminator takes one least-squares
    step against real tiles and replay-buffered fakes.  Epoch-averaged loss
    breakdowns are recorded on ``model.loss_history``.
    """
    a_t = _batch_to_tensor(dataset_a, "dataset_a")
    b_t = _batch_to_tensor(dataset_b, "dataset_b")
    if config.tile_size:
        for name, t in (("dataset_a", a_t), ("dataset_b", b_t)):
            if t.shape[2] != config.tile_size or t.shape[3] != config.tile_size:
                raise ConfigurationError(
                    f"{name} tiles are {t.shape[2]}x{t.shape[3]}, "
                    f"expected {config.tile_size}x{config.tile_size}"
                )

    model = TranslationModel.create(
        a_t.shape[1],
        b_t.shape[1],
        seed=config.seed,
        base_width=config.base_width,
        n_res_blocks=config.n_res_blocks,
        disc_base_width=config.disc_base_width,
    )
    if config.epochs == 0:
        return model

    rng = np.random.default_rng(config.seed)
    shuffle_rng, buffer_rng = rng.spawn(2)
    fake_a_pool = ReplayBuffer(config.fake_buffer_size, buffer_rng)
    fake_b_pool = ReplayBuffer(config.fake_buffer_size, buffer_rng)

    gen_params = list(model.g_ab.parameters()) + list(model.g_ba.parameters())
    disc_params = list(model.d_a.parameters()) + list(model.d_b.parameters())
    opt_g = torch.optim.Adam(gen_params, lr=config.learning_rate, betas=ADAM_BETAS)
    opt_d = torch.optim.Adam(disc_params, lr=config.learning_rate, betas=ADAM_BETAS)

    n_a, n_b = a_t.shape[0], b_t.shape[0]
    steps_per_epoch = max(1, min(n_a, n_b) // config.batch_size)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        for _ in range(config.epochs):
            perm_a = shuffle_rng.permutation(n_a)
            perm_b = shuffle_rng.permutation(n_b)
            sums = {"gan_ab": 0.0, "gan_ba": 0.0, "cyc": 0.0, "struct_ab": 0.0, "struct_ba": 0.0}
            for step in range(steps_per_epoch):
                ia = perm_a[step * config.batch_size : (step + 1) * config.batch_size]
                ib = perm_b[step * config.batch_size : (step + 1) * config.batch_size]
                batch_a, batch_b = a_t[ia], b_t[ib]

                opt_g.zero_grad(set_to_none=True)
                terms, total, fake_b, fake_a = _generator_objective(
                    model, batch_a, batch_b, config.cycle_weight
                )
                breakdown = _breakdown_from_terms(terms, config.cycle_weight)
                total.backward()
                opt_g.step()

                buf_a = fake_a_pool.push_and_sample(fake_a.detach())
                buf_b = fake_b_pool.push_and_sample(fake_b.detach())
                opt_d.zero_grad(set_to_none=True)
                pred_real_a = model.d_a(batch_a)
                pred_real_b = model.d_b(batch_b)
                pred_buf_a = model.d_a(buf_a)
                pred_buf_b = model.d_b(buf_b)
                d_loss = 0.5 * (
                    F.mse_loss(pred_real_a, torch.ones_like(pred_real_a))
                    + F.mse_loss(pred_buf_a, torch.zeros_like(pred_buf_a))
                ) + 0.5 * (
                    F.mse_loss(pred_real_b, torch.ones_like(pred_real_b))
                    + F.mse_loss(pred_buf_b, torch.zeros_like(pred_buf_b))
                )
                if not torch.isfinite(d_loss):
                    raise NumericError(
                        f"non-finite discriminator loss; last generator breakdown {breakdown}"
                    )
                d_loss.backward()
                opt_d.step()

                for key in ("gan_ab", "gan_ba", "cyc", "struct_ab", "struct_ba"):
                    sums[key] += getattr(breakdown, key)
            model.loss_history.append(
                LossBreakdown.from_components(
                    *(sums[k] / steps_per_epoch
                      for k in ("gan_ab", "gan_ba", "cyc", "struct_ab", "struct_ba"))
                )
            )

    model.training_meta = {"epochs": config.epochs, "seed": config.seed}
    return model


def loss_history_csv(history: Sequence[LossBreakdown]) -> str:
    lines = ["epoch,gan_ab,gan_ba,cyc,struct_ab,struct_ba,total"]
    for i, row in enumerate(history, start=1):
        lines.append(
            f"{i},{row.gan_ab:.10g},{row.gan_ba:.10g},{row.cyc:.10g},"
            f"{row.struct_ab:.10g},{row.struct_ba:.10g},{row.total:.10g}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Inference-facing single-image operations


def _image_to_tensor(image: np.ndarray, channels: int, name: str) -> torch.Tensor:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        got = 1
        t = torch.from_numpy(image)[None, None]
    elif image.ndim == 3:
        got = image.shape[2]
        t = torch.from_numpy(np.moveaxis(image, -1, 0))[None]
    else:
        raise ShapeError(f"{name}: expected 2-D or 3-D image, got shape {image.shape}")
    if got != channels:
        raise ShapeError(f"{name}: got {got} channel(s), expected {channels}")
    return t


def _tensor_to_image(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().numpy()[0]
    if arr.shape[0] == 1:
        return arr[0]
    return np.moveaxis(arr, 0, -1)


def generator_forward(gen: Generator, image: np.ndarray) -> np.ndarray:
    """Run a generator on one [-1, 1]-normalized image, same spatial size out."""
    t = _image_to_tensor(image, gen.in_channels, "generator input")
    gen.eval()
    with torch.no_grad():
        out = gen(t)
    return _tensor_to_image(out)


def discriminator_forward(disc: Discriminator, image: np.ndarray) -> np.ndarray:
    """Patch realness map for one normalized image."""
    t = _image_to_tensor(image, disc.in_channels, "discriminator input")
    disc.eval()
    with torch.no_grad():
        out = disc(t)
    return _tensor_to_image(out)


def virtual_stain(model: TranslationModel, image: np.ndarray, kind: str = "intensity8") -> np.ndarray:
    """Translate one FPM intensity or phase image into a stained 8-bit image.

    ``kind`` selects the input normalization (``intensity8`` for 0..255
    data, ``phase`` for [-pi, pi] radians).  The output of G_AB is mapped
    back to 8-bit range; spatial size is preserved.
    """
    normalized = pipeline.normalize_for_network(image, kind)
    out = generator_forward(model.g_ab.eval(), normalized.astype(np.float32))
    return pipeline.to_uint8(pipeline.denormalize_from_network(out, "intensity8"))


# ---------------------------------------------------------------------------
# Model file format (FPSM)


def model_to_bytes(model: TranslationModel) -> bytes:
    """Serialize parameters and metadata to the FPSM container."""
    blocks: List[Tuple[str, np.ndarray]] = []
    for prefix, module in model.modules_by_name():
        for key, tensor in module.state_dict().items():
            blocks.append((f"{prefix}.{key}", tensor.detach().cpu().numpy().astype("<f4")))
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<I", MODEL_VERSION))
    buf.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    meta = {
        "domain_a_channels": model.domain_a_channels,
        "domain_b_channels": model.domain_b_channels,
        **model.arch,
        **model.training_meta,
    }
    trailer = "".join(f"{k}={v}\n" for k, v in meta.items())
    buf.write(trailer.encode("utf-8"))
    return buf.getvalue()


def save_model(model: TranslationModel, path) -> None:
    pipeline.atomic_write_bytes(path, model_to_bytes(model))


def load_model(path) -> TranslationModel:
    """Load an FPSM model file written by :func:`save_model`."""
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0: {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (n_blocks,) = struct.unpack_from("<I", raw, 8)
    offset = 12
    blocks: Dict[str, np.ndarray] = {}
    for _ in range(n_blocks):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", raw, offset)
        offset += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        if offset + 4 * count > len(raw):
            raise FormatError(f"{path}: block {name!r} truncated at offset {len(raw)}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(dims)
        offset += 4 * count
        blocks[name] = arr
    meta: Dict[str, int] = {}
    for line in raw[offset:].decode("utf-8").splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            meta[key.strip()] = int(value.strip())
    try:
        model = TranslationModel.create(
            meta["domain_a_channels"],
            meta["domain_b_channels"],
            seed=meta.get("seed", 0),
            base_width=meta["base_width"],
            n_res_blocks=meta["n_res_blocks"],
            n_downsample=meta["n_downsample"],
            disc_base_width=meta["disc_base_width"],
            disc_layers=meta["disc_layers"],
        )
    except KeyError as exc:
        raise FormatError(f"{path}: missing metadata key {exc}") from exc
    for prefix, module in model.modules_by_name():
        state = {}
        for key in module.state_dict():
            full = f"{prefix}.{key}"
            if full not in blocks:
                raise FormatError(f"{path}: missing parameter block {full!r}")
            state[key] = torch.from_numpy(blocks[full].copy())
        module.load_state_dict(state, strict=True)
    model.training_meta = {"epochs": meta.get("epochs", 0), "seed": meta.get("seed", 0)}
    return model
