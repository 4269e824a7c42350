"""Amortized residual registration: a small U-Net trained on the same loss.

The network maps a (fixed, moving) pair to a displacement field in one
forward pass. Training minimizes the unsupervised registration loss, written
here in torch so autograd can differentiate through the warp.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import InvalidParams, NumericalDivergence, ShapeError
from ..types import DisplacementField
from .loss import VARIANCE_FLOOR

logger = logging.getLogger(__name__)

WIDTHS = (16, 32, 64, 128)
_MULTIPLE = 2 ** len(WIDTHS)


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.LeakyReLU(0.2),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.LeakyReLU(0.2),
    )


class UNet(nn.Module):
    """Four pooling levels, widths 16/32/64/128, a 128-wide bottleneck and a
    zero-initialized 3x3 head so an untrained model predicts the zero field."""

    def __init__(self, widths: Sequence[int] = WIDTHS):
        super().__init__()
        self.down = nn.ModuleList()
        cin = 2
        for w in widths:
            self.down.append(_block(cin, w))
            cin = w
        self.bottleneck = _block(cin, widths[-1])
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        cin = widths[-1]
        for w in reversed(widths):
            self.up.append(nn.ConvTranspose2d(cin, w, 2, stride=2))
            self.dec.append(_block(2 * w, w))
            cin = w
        self.head = nn.Conv2d(widths[0], 2, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        skips = []
        for blk in self.down:
            x = blk(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@dataclass
class PredictorParams:
    """Network weights (as numpy arrays) plus the training record."""

    state: Dict[str, np.ndarray]
    train_loss: List[float] = field(default_factory=list)
    hyper: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, seed: int = 0) -> "PredictorParams":
        torch.manual_seed(seed)
        return cls.from_model(UNet())

    @classmethod
    def from_model(cls, model: nn.Module, **kw) -> "PredictorParams":
        return cls({k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}, **kw)

    def build(self) -> UNet:
        for k, v in self.state.items():
            if not np.all(np.isfinite(v)):
                raise InvalidParams(f"non-finite weights in {k}")
        model = UNet()
        try:
            model.load_state_dict({k: torch.from_numpy(np.asarray(v)) for k, v in self.state.items()})
        except RuntimeError as exc:
            raise InvalidParams(str(exc)) from exc
        model.eval()
        return model

    def n_parameters(self) -> int:
        return int(sum(v.size for k, v in self.state.items()))

    def save(self, path) -> None:
        meta = {"train_loss": np.asarray(self.train_loss, dtype=np.float64)}
        np.savez(path, **{f"w:{k}": v for k, v in self.state.items()}, **meta)

    @classmethod
    def load(cls, path) -> "PredictorParams":
        with np.load(path) as z:
            state = {k[2:]: z[k] for k in z.files if k.startswith("w:")}
            curve = z["train_loss"].tolist() if "train_loss" in z.files else []
        return cls(state, curve)


# ----------------------------------------------------------------------
# torch versions of the loss pieces (mirror refine.loss / refine.warp)
# ----------------------------------------------------------------------

def torch_warp(src: torch.Tensor, phi: torch.Tensor) -> torch.Tensor:
    """Pull-back bilinear warp with zero padding; src (B,1,H,W), phi (B,2,H,W) in pixels."""
    _, _, h, w = src.shape
    yy, xx = torch.meshgrid(
        torch.arange(h, dtype=src.dtype), torch.arange(w, dtype=src.dtype), indexing="ij"
    )
    X = xx + phi[:, 0]
    Y = yy + phi[:, 1]
    gx = 2.0 * X / max(w - 1, 1) - 1.0
    gy = 2.0 * Y / max(h - 1, 1) - 1.0
    grid = torch.stack([gx, gy], dim=-1)
    return F.grid_sample(src, grid, mode="bilinear", padding_mode="zeros", align_corners=True)


def torch_local_ncc(I: torch.Tensor, J: torch.Tensor, window: int = 9) -> torch.Tensor:
    """Per-sample mean local NCC over valid windows; shape (B,)."""
    k = torch.ones(1, 1, window, window, dtype=I.dtype)
    pad = window // 2

    def box(x):
        return F.conv2d(x, k, padding=pad)

    n = box(torch.ones_like(I[:1]))

    SI, SJ = box(I), box(J)
    SII, SJJ, SIJ = box(I * I), box(J * J), box(I * J)
    cross = SIJ - SI * SJ / n
    vI = SII - SI * SI / n
    vJ = SJJ - SJ * SJ / n
    valid = (vI / n >= VARIANCE_FLOOR) & (vJ / n >= VARIANCE_FLOOR)
    denom = torch.sqrt(torch.where(valid, vI * vJ, torch.ones_like(vI)))
    cc = torch.where(valid, cross / denom, torch.zeros_like(cross))
    count = valid.flatten(1).sum(dim=1).clamp(min=1)
    return cc.flatten(1).sum(dim=1) / count


def torch_smoothness(phi: torch.Tensor) -> torch.Tensor:
    dx = phi[:, :, :, 1:] - phi[:, :, :, :-1]
    dy = phi[:, :, 1:, :] - phi[:, :, :-1, :]
    per_channel = (dx ** 2).flatten(2).mean(dim=2) + (dy ** 2).flatten(2).mean(dim=2)
    return per_channel.mean(dim=1)


def torch_loss_us(I, M, phi, lam: float, window: int = 9) -> torch.Tensor:
    """Per-sample loss, shape (B,)."""
    return -torch_local_ncc(I, torch_warp(M, phi), window) + lam * torch_smoothness(phi)


# ----------------------------------------------------------------------
# inference and training
# ----------------------------------------------------------------------

def _pad_amount(n: int) -> Tuple[int, int]:
    extra = (-n) % _MULTIPLE
    return extra // 2, extra - extra // 2


def _forward(model: UNet, I: torch.Tensor, M: torch.Tensor) -> torch.Tensor:
    h, w = I.shape[-2:]
    (pt, pb), (pl, pr) = _pad_amount(h), _pad_amount(w)
    x = torch.cat([I, M], dim=1)
    if pt or pb or pl or pr:
        mode = "reflect" if min(h, w) > max(pt, pb, pl, pr) else "replicate"
        x = F.pad(x, (pl, pr, pt, pb), mode=mode)
    out = model(x)
    return out[:, :, pt:pt + h, pl:pl + w]


def _as_tensor(arr) -> torch.Tensor:
    a = arr.astype_float() if hasattr(arr, "astype_float") else np.asarray(arr, dtype=np.float64)
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))[None, None]


def predictor_apply(params: PredictorParams, fixed, moving) -> DisplacementField:
    """One deterministic forward pass; inputs are padded to a multiple of 16
    by reflection and the output cropped back."""
    I, M = _as_tensor(fixed), _as_tensor(moving)
    if I.shape != M.shape:
        raise ShapeError(f"shapes differ: {tuple(I.shape[-2:])} vs {tuple(M.shape[-2:])}")
    model = params.build()
    with torch.no_grad():
        phi = _forward(model, I, M)[0].double().numpy()
    return DisplacementField(phi[0], phi[1])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-4
    batch: int = 8
    seed: int = 0
    lam: float = 0.01
    window: int = 9
    augment: bool = False   # random flips, transposes and fixed/moving swaps per batch

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _augment(I: torch.Tensor, M: torch.Tensor, gen: torch.Generator):
    # the loss is defined pixelwise, so any dihedral relabelling of the grid
    # (applied to both images) gives another valid training pair
    code = torch.randint(0, 16, (1,), generator=gen).item()
    if code & 1:
        I, M = I.flip(-1), M.flip(-1)
    if code & 2:
        I, M = I.flip(-2), M.flip(-2)
    if code & 4 and I.shape[-1] == I.shape[-2]:
        I, M = I.transpose(-1, -2), M.transpose(-1, -2)
    if code & 8:
        I, M = M, I
    return I, M


def train_amortized(pairs, cfg: TrainConfig = TrainConfig(), init: Optional[PredictorParams] = None) -> PredictorParams:
    """Fit the U-Net to a list of pre-aligned ``(fixed, moving)`` pairs.

    Mini-batches are drawn from a seeded permutation each epoch, so a given
    seed reproduces the same weights. The recorded curve holds the mean
    training loss per epoch.
    """
    if not pairs:
        raise ValueError("need at least one training pair")
    torch.manual_seed(cfg.seed)
    model = UNet() if init is None else init.build()
    if cfg.epochs <= 0:
        return PredictorParams.from_model(model, train_loss=[], hyper=cfg.to_dict())

    fixed = torch.cat([_as_tensor(f) for f, _ in pairs])
    moving = torch.cat([_as_tensor(m) for _, m in pairs])
    if fixed.shape != moving.shape:
        raise ShapeError("all pairs must share one shape")
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999))
    gen = torch.Generator().manual_seed(cfg.seed)
    n = fixed.shape[0]
    curve = []
    model.train()
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            I, M = fixed[idx], moving[idx]
            if cfg.augment:
                I, M = _augment(I, M, gen)
            loss = torch_loss_us(I, M, _forward(model, I, M), cfg.lam, cfg.window).mean()
            if not torch.isfinite(loss):
                raise NumericalDivergence(f"training loss became {loss.item()}", iteration=epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        curve.append(total / n)
        if epoch % 10 == 0 or epoch == cfg.epochs - 1:
            logger.debug("epoch %d loss %.5f", epoch, curve[-1])
    model.eval()
    return PredictorParams.from_model(model, train_loss=curve, hyper=cfg.to_dict())
