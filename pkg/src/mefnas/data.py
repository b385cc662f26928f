"""Synthetic exposure-pair data: loading, synthesis, misalignment, augmentation.

Images are float tensors of shape [B, 3, H, W] with values in [0, 1], RGB
channel order. H and W are kept divisible by 4 so the alignment pyramid can
downsample twice without remainder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

MAX_TRANSLATION_PX = 16.0
MAX_ROTATION_DEG = 5.0
SCALE_RANGE = (0.97, 1.03)


class DataError(ValueError):
    """Raised for unreadable, malformed, or out-of-contract image data."""


def _check_image(x: torch.Tensor) -> torch.Tensor:
    if x.dim() != 4 or x.shape[1] != 3:
        raise DataError("unsupported format")
    if not torch.isfinite(x).all():
        raise DataError("non-finite image values")
    return x


@dataclass(frozen=True)
class WarpParams:
    """Rigid-ish misalignment: translation in pixels, rotation in degrees, scale."""

    dx: float = 0.0
    dy: float = 0.0
    rotation: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if abs(self.dx) > MAX_TRANSLATION_PX or abs(self.dy) > MAX_TRANSLATION_PX:
            raise DataError("translation exceeds misalignment regime")
        if abs(self.rotation) > MAX_ROTATION_DEG:
            raise DataError("rotation exceeds misalignment regime")
        if not (SCALE_RANGE[0] <= self.scale <= SCALE_RANGE[1]):
            raise DataError("scale exceeds misalignment regime")


@dataclass(frozen=True)
class SynthConfig:
    """Exposure synthesis: multiplicative stops, then gamma, then clip."""

    under_exposure: float = -3.0
    over_exposure: float = 3.0
    gamma: float = 1.2
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        # equality permitted so the identity-exposure case stays expressible
        if self.under_exposure > 0 or self.over_exposure < 0:
            raise DataError("exposure stops must straddle zero")
        if self.gamma <= 0:
            raise DataError("gamma must be positive")
        if self.noise_sigma < 0:
            raise DataError("noise sigma must be non-negative")


@dataclass
class ExposurePair:
    """(under, over, gt) triple; `warp` records the misalignment applied to `over`."""

    under: torch.Tensor
    over: torch.Tensor
    gt: torch.Tensor
    warp: WarpParams | None = None

    def __post_init__(self):
        for t in (self.under, self.over, self.gt):
            _check_image(t)
        if not (self.under.shape == self.over.shape == self.gt.shape):
            raise DataError("pair shape error")


def load_image(path: str | Path) -> torch.Tensor:
    """Load an RGB raster as a [1, 3, H, W] tensor in [0, 1].

    H and W are cropped down to the nearest multiple of 4.
    """
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError("unreadable image") from exc
    if mode != "RGB":
        raise DataError("unsupported format")
    x = torch.from_numpy(arr.astype(np.float32) / 255.0)
    x = x.permute(2, 0, 1).unsqueeze(0)
    h, w = x.shape[-2:]
    return x[..., : h - h % 4, : w - w % 4].contiguous()


def save_image(img: torch.Tensor, path: str | Path) -> None:
    """Write a [1, 3, H, W] or [3, H, W] tensor as an 8-bit PNG."""
    if img.dim() == 4:
        img = img[0]
    arr = (img.clamp(0, 1) * 255.0).round().to(torch.uint8)
    Image.fromarray(arr.permute(1, 2, 0).numpy()).save(path)


def quantize8(img: torch.Tensor) -> torch.Tensor:
    """8-bit quantization, identical to a PNG round-trip."""
    return (img.clamp(0, 1) * 255.0).round() / 255.0


def apply_warp(img: torch.Tensor, warp: WarpParams) -> torch.Tensor:
    """Resample `img` under the inverse-mapped affine warp (bilinear, replicate border)."""
    _check_image(img)
    b, _, h, w = img.shape
    theta = torch.zeros(b, 2, 3, dtype=img.dtype)
    rad = np.deg2rad(warp.rotation)
    cos, sin = np.cos(rad) / warp.scale, np.sin(rad) / warp.scale
    theta[:, 0, 0] = cos
    theta[:, 0, 1] = -sin * h / w
    theta[:, 1, 0] = sin * w / h
    theta[:, 1, 1] = cos
    # affine_grid works in [-1, 1] coords; convert the pixel translation
    theta[:, 0, 2] = -2.0 * warp.dx / max(w - 1, 1)
    theta[:, 1, 2] = -2.0 * warp.dy / max(h - 1, 1)
    grid = F.affine_grid(theta, list(img.shape), align_corners=True)
    return F.grid_sample(img, grid, mode="bilinear", padding_mode="border", align_corners=True)


def _expose(gt: torch.Tensor, stops: float, gamma: float, noise: torch.Tensor | None) -> torch.Tensor:
    x = (gt * 2.0**stops) ** gamma
    if noise is not None:
        x = x + noise
    return x.clamp(0.0, 1.0)


def draw_warp(seed: int, max_translation: float = 8.0, max_rotation: float = 1.0,
              scale_jitter: float = 0.01) -> WarpParams:
    rng = np.random.default_rng(seed)
    return WarpParams(
        dx=float(rng.uniform(-max_translation, max_translation)),
        dy=float(rng.uniform(-max_translation, max_translation)),
        rotation=float(rng.uniform(-max_rotation, max_rotation)),
        scale=float(rng.uniform(1.0 - scale_jitter, 1.0 + scale_jitter)),
    )


def synth_pair(gt: torch.Tensor, cfg: SynthConfig, misaligned: bool = False,
               warp: WarpParams | None = None) -> ExposurePair:
    """Synthesize an under/over exposure pair from a ground-truth image.

    Deterministic given `cfg.seed`. When misaligned, the over-exposed image is
    warped (by `warp` if given, else drawn from the seed) and the warp is
    recorded in the pair.
    """
    _check_image(gt)
    rng = np.random.default_rng(cfg.seed)
    noise_u = noise_o = None
    if cfg.noise_sigma > 0:
        noise_u = torch.from_numpy(
            rng.normal(0.0, cfg.noise_sigma, size=tuple(gt.shape)).astype(np.float32))
        noise_o = torch.from_numpy(
            rng.normal(0.0, cfg.noise_sigma, size=tuple(gt.shape)).astype(np.float32))
    under = _expose(gt, cfg.under_exposure, cfg.gamma, noise_u)
    over = _expose(gt, cfg.over_exposure, cfg.gamma, noise_o)
    pair_warp = None
    if misaligned:
        pair_warp = warp if warp is not None else draw_warp(cfg.seed)
        over = apply_warp(over, pair_warp)
    return ExposurePair(under=under, over=over, gt=gt.clone(), warp=pair_warp)


@dataclass(frozen=True)
class AugmentParams:
    top: int
    left: int
    patch: int
    hflip: bool
    vflip: bool
    rot90: int  # quarter turns


def sample_augment(seed: int, height: int, width: int, patch: int = 128) -> AugmentParams:
    if patch > min(height, width):
        raise DataError("patch exceeds image")
    rng = np.random.default_rng(seed)
    return AugmentParams(
        top=int(rng.integers(0, height - patch + 1)),
        left=int(rng.integers(0, width - patch + 1)),
        patch=patch,
        hflip=bool(rng.integers(0, 2)),
        vflip=bool(rng.integers(0, 2)),
        rot90=int(rng.integers(0, 4)),
    )


def apply_augment(img: torch.Tensor, p: AugmentParams) -> torch.Tensor:
    out = img[..., p.top : p.top + p.patch, p.left : p.left + p.patch]
    if p.hflip:
        out = out.flip(-1)
    if p.vflip:
        out = out.flip(-2)
    if p.rot90:
        out = torch.rot90(out, p.rot90, dims=(-2, -1))
    return out.contiguous()


def augment(pair: ExposurePair, seed: int, patch: int = 128) -> ExposurePair:
    """Apply one random crop/flip/rotation, identical across under, over and gt."""
    h, w = pair.gt.shape[-2:]
    p = sample_augment(seed, h, w, patch)
    return ExposurePair(
        under=apply_augment(pair.under, p),
        over=apply_augment(pair.over, p),
        gt=apply_augment(pair.gt, p),
        warp=pair.warp,
    )


def make_test_image(seed: int, size: int = 64) -> torch.Tensor:
    """Deterministic textured scene: low-frequency field plus blobs and stripes."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    img = np.zeros((3, size, size), dtype=np.float64)
    for c in range(3):
        field = rng.uniform(0.1, 0.4) + rng.uniform(-0.3, 0.3) * xx + rng.uniform(-0.3, 0.3) * yy
        for _ in range(4):
            fx, fy = rng.uniform(1, 6, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            field += rng.uniform(0.03, 0.12) * np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)
        img[c] = field
    for _ in range(6):  # shared blobs so channels correlate like a real scene
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        r = rng.uniform(0.05, 0.25)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r**2))
        img += rng.uniform(-0.35, 0.45) * blob * rng.uniform(0.5, 1.0, size=(3, 1, 1))
    lo, hi = img.min(), img.max()
    img = (img - lo) / max(hi - lo, 1e-8)
    img = 0.05 + 0.9 * img  # keep away from hard clip at both ends
    return torch.from_numpy(img.astype(np.float32)).unsqueeze(0)


def write_dataset(out_dir: str | Path, count: int, seed: int, size: int = 64,
                  misaligned: bool = False, cfg: SynthConfig | None = None,
                  max_translation: float = 8.0) -> dict:
    """Write `count` PNG triples plus a JSON sidecar manifest; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = cfg if cfg is not None else SynthConfig()
    entries = []
    for i in range(count):
        sample_cfg = replace(base, seed=seed + i)
        gt = make_test_image(seed + i, size=size)
        warp = draw_warp(seed + i, max_translation=max_translation) if misaligned else None
        pair = synth_pair(gt, sample_cfg, misaligned=misaligned, warp=warp)
        names = {}
        for kind, img in (("gt", pair.gt), ("under", pair.under), ("over", pair.over)):
            name = f"{kind}_{i:04d}.png"
            save_image(img, out / name)
            names[kind] = name
        entries.append({
            "index": i,
            "files": names,
            "synth": asdict(sample_cfg),
            "warp": asdict(pair.warp) if pair.warp is not None else None,
        })
    manifest = {"count": count, "seed": seed, "size": size, "misaligned": misaligned,
                "samples": entries}
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest


def load_dataset(dir_path: str | Path) -> list[ExposurePair]:
    """Load the PNG triples listed in a dataset manifest."""
    root = Path(dir_path)
    try:
        with open(root / "manifest.json") as f:
            manifest = json.load(f)
    except OSError as exc:
        raise DataError("unreadable image") from exc
    pairs = []
    for entry in manifest["samples"]:
        files = entry["files"]
        warp = WarpParams(**entry["warp"]) if entry.get("warp") else None
        pairs.append(ExposurePair(
            under=load_image(root / files["under"]),
            over=load_image(root / files["over"]),
            gt=load_image(root / files["gt"]),
            warp=warp,
        ))
    return pairs
