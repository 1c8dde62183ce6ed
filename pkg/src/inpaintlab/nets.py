"""Networks: gated-convolution coarse-to-fine generator, spectrally
normalized patch discriminator, similarity encoder, and the auxiliary
encoder-decoder used by the contextual-reconstruction objective.

Images are (B, 3, H, W) in [-1, 1]; masks are (B, 1, H, W) with
1 = missing.  All networks are fully convolutional: spatial sizes that
are not multiples of the downsampling factor are reflect-padded
internally and cropped on the way out.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from . import patchops
from .patchops import EmptyKnownRegionError, SimilarityMap

CHECKPOINT_FORMAT = 1


class GatedConv2d(nn.Module):
    """Convolution gated elementwise by a sigmoid branch.

    output = act(feature_conv(x)) * sigmoid(gate_conv(x)).  ELU keeps the
    map smooth for finite-difference probes; pass activation="none" for
    output layers.
    """

    def __init__(self, in_channels, out_channels, kernel_size,
                 stride=1, dilation=1, activation="elu"):
        super().__init__()
        padding = dilation * (kernel_size - 1) // 2
        self.feature = nn.Conv2d(in_channels, out_channels, kernel_size,
                                 stride=stride, padding=padding, dilation=dilation)
        self.gate = nn.Conv2d(in_channels, out_channels, kernel_size,
                              stride=stride, padding=padding, dilation=dilation)
        if activation == "elu":
            self.act = nn.ELU()
        elif activation == "none":
            self.act = nn.Identity()
        else:
            raise ValueError(f"unsupported activation {activation!r}")

    def forward(self, x):
        return self.act(self.feature(x)) * torch.sigmoid(self.gate(x))


@dataclass(frozen=True)
class GeneratorConfig:
    """Width/depth profile shared by the coarse and refinement networks."""

    base_width: int = 48
    downsamples: int = 2
    dilations: tuple[int, ...] = (2, 4, 8, 16)
    detach_coarse: bool = True

    @classmethod
    def toy(cls, detach_coarse: bool = True) -> "GeneratorConfig":
        """Small profile for 64x64 experiments and tests."""
        return cls(base_width=16, downsamples=2, dilations=(2, 4),
                   detach_coarse=detach_coarse)

    @property
    def pad_multiple(self) -> int:
        return 2 ** self.downsamples


def _pad_to_multiple(x, multiple):
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    return x, (h, w)


class _EncoderDecoder(nn.Module):
    """Gated encoder, dilated bottleneck, nearest-upsample decoder."""

    def __init__(self, in_channels, cfg: GeneratorConfig):
        super().__init__()
        w = cfg.base_width
        widths = [w * min(2 ** i, 4) for i in range(cfg.downsamples + 1)]
        self.cfg = cfg

        enc = [GatedConv2d(in_channels, widths[0], 5)]
        for a, b in zip(widths[:-1], widths[1:]):
            enc.append(GatedConv2d(a, b, 3, stride=2))
            enc.append(GatedConv2d(b, b, 3))
        self.encoder = nn.Sequential(*enc)

        deep = widths[-1]
        self.bottleneck = nn.Sequential(
            *[GatedConv2d(deep, deep, 3, dilation=d) for d in cfg.dilations]
        )

        dec = []
        for a, b in zip(widths[::-1][:-1], widths[::-1][1:]):
            dec.append(nn.Upsample(scale_factor=2, mode="nearest"))
            dec.append(GatedConv2d(a, b, 3))
        self.decoder = nn.Sequential(*dec)
        self.to_image = nn.Conv2d(widths[0], 3, 3, padding=1)

    def forward(self, x):
        x, (h, w) = _pad_to_multiple(x, self.cfg.pad_multiple)
        x = self.encoder(x)
        x = self.bottleneck(x)
        x = self.decoder(x)
        x = torch.tanh(self.to_image(x))
        return x[..., :h, :w]


class CoarseNet(nn.Module):
    """First-stage prediction from the zero-filled image and its mask."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.net = _EncoderDecoder(4, cfg)

    def forward(self, u, m):
        _check_image_mask(u, m)
        return self.net(torch.cat([u, m], dim=1))


class RefineNet(nn.Module):
    """Second-stage prediction from the coarse composite and the mask."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.net = _EncoderDecoder(4, cfg)

    def forward(self, coarse_out, m):
        _check_image_mask(coarse_out, m)
        return self.net(torch.cat([coarse_out, m], dim=1))


class InpaintGenerator(nn.Module):
    """Coarse-to-fine generator without any in-network patch borrowing."""

    def __init__(self, cfg: GeneratorConfig | None = None):
        super().__init__()
        self.cfg = cfg or GeneratorConfig()
        self.coarse = CoarseNet(self.cfg)
        self.refine = RefineNet(self.cfg)

    def forward(self, u, m):
        """Returns (coarse prediction, refined prediction).

        The refinement stage consumes the coarse composite; with
        detach_coarse the coarse network sees only its own L1 gradient.
        """
        y1 = self.coarse(u, m)
        y1_comp = compose(y1, u, m)
        if self.cfg.detach_coarse:
            y1_comp = y1_comp.detach()
        y2 = self.refine(y1_comp, m)
        return y1, y2

    @torch.no_grad()
    def inpaint(self, u, m):
        """Final composite for inference."""
        _, y2 = self.forward(u, m)
        return compose(y2, u, m)


def _check_image_mask(img, m):
    if img.dim() != 4 or m.dim() != 4:
        raise ValueError("expected batched (B, C, H, W) image and (B, 1, H, W) mask")
    if img.shape[-2:] != m.shape[-2:] or img.shape[0] != m.shape[0]:
        raise ValueError(
            f"image {tuple(img.shape)} and mask {tuple(m.shape)} disagree"
        )


def compose(y, u, m):
    """Paste the prediction into the hole: y * m + u.

    Known pixels come out exactly equal to u. The mask must be binary.
    """
    _check_image_mask(y, m)
    if not torch.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary")
    return y * m + u


class PatchDiscriminator(nn.Module):
    """Spectrally normalized fully convolutional discriminator.

    Emits an (B, 1, h', w') score map; each cell rates the receptive
    field around it.
    """

    def __init__(self, width: int = 64, in_channels: int = 3):
        super().__init__()
        w = width
        self.body = nn.Sequential(
            spectral_norm(nn.Conv2d(in_channels, w, 5, stride=2, padding=2)),
            nn.LeakyReLU(0.2),
            spectral_norm(nn.Conv2d(w, 2 * w, 5, stride=2, padding=2)),
            nn.LeakyReLU(0.2),
            spectral_norm(nn.Conv2d(2 * w, 2 * w, 5, stride=2, padding=2)),
            nn.LeakyReLU(0.2),
            spectral_norm(nn.Conv2d(2 * w, 1, 3, stride=1, padding=1)),
        )

    def forward(self, img):
        if img.shape[1] != 3:
            raise ValueError("discriminator expects 3-channel images")
        return self.body(img)


class SimilarityEncoder(nn.Module):
    """Encodes a composite image into features whose patchwise cosine
    similarities drive the patch replacement. Output is at 1/4 the input
    resolution."""

    def __init__(self, width: int = 16):
        super().__init__()
        w = width
        self.body = nn.Sequential(
            nn.Conv2d(4, w, 3, padding=1), nn.ELU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.ELU(),
            nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1), nn.ELU(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1),
        )

    def forward(self, composite, m):
        _check_image_mask(composite, m)
        return self.body(torch.cat([composite, m], dim=1))


def build_similarities(features, m, patch_size=3, stride=1):
    """Per-sample similarity maps from encoder features.

    ``features`` is (B, C, h, w) and ``m`` the pixel-resolution masks.
    Returns a list with one SimilarityMap per sample, or None where the
    mask leaves no fully-known patch.
    """
    sims: list[SimilarityMap | None] = []
    scale = m.shape[-1] // features.shape[-1]
    for i in range(features.shape[0]):
        try:
            known = patchops.mask_to_known_set(
                m[i, 0], patch_size, stride, feature_scale=scale
            )
        except EmptyKnownRegionError:
            sims.append(None)
            continue
        grid = patchops.extract_patches(features[i], patch_size, stride)
        sims.append(patchops.cosine_similarity(grid, known_set=known))
    return sims


class AuxiliaryNetwork(nn.Module):
    """Encoder-decoder that rebuilds the image from borrowed patches.

    The encoder reads (u, m); at the 1/4-resolution bottleneck every
    patch is replaced by a softmax-weighted sum of known patches using
    externally supplied similarities; the decoder gets skip connections
    carrying known-region features only, so the missing region can only
    be explained by the borrowed patches.
    """

    def __init__(self, width: int = 16, patch_size: int = 3, stride: int = 1):
        super().__init__()
        w = width
        self.patch_size = patch_size
        self.stride = stride
        self.enc1 = nn.Sequential(nn.Conv2d(4, w, 3, padding=1), nn.ELU())
        self.enc2 = nn.Sequential(nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.ELU())
        self.enc3 = nn.Sequential(nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1), nn.ELU())
        self.enc4 = nn.Sequential(nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.ELU())
        self.dec1 = nn.Sequential(nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.ELU())
        self.dec2 = nn.Sequential(nn.Conv2d(4 * w, w, 3, padding=1), nn.ELU())
        self.to_image = nn.Conv2d(2 * w, 3, 3, padding=1)

    def forward(self, u, m, sims, sharpness: float = 10.0):
        """Auxiliary reconstruction Aux(u). ``sims`` is one SimilarityMap
        per sample (None entries fall back to the unreplaced features)."""
        _check_image_mask(u, m)
        x = torch.cat([u, m], dim=1)
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        f = self.enc4(self.enc3(e2))

        replaced = []
        for i in range(f.shape[0]):
            if sims[i] is None:
                replaced.append(f[i])
                continue
            grid = patchops.extract_patches(f[i], self.patch_size, self.stride)
            replaced.append(patchops.soft_replace(grid, sims[i], sharpness))
        d = self.dec1(torch.stack(replaced))

        m_half = F.max_pool2d(m, 2)
        d = F.interpolate(d, scale_factor=2, mode="nearest")
        d = self.dec2(torch.cat([d, e2 * (1.0 - m_half)], dim=1))
        d = F.interpolate(d, scale_factor=2, mode="nearest")
        d = torch.cat([d, e1 * (1.0 - m)], dim=1)
        return torch.tanh(self.to_image(d))


def auxiliary_reconstruct(aux_net, u, m, sims, sharpness: float = 10.0):
    """Functional wrapper around :class:`AuxiliaryNetwork`."""
    return aux_net(u, m, sims, sharpness)


def highres_inference(generator: InpaintGenerator, u, m):
    """Half-resolution coarse pass, full-resolution refinement.

    Side lengths must be divisible by 4 so the two scales line up.
    """
    _check_image_mask(u, m)
    h, w = u.shape[-2:]
    if h % 4 or w % 4:
        raise ValueError(f"side lengths must be divisible by 4, got ({h}, {w})")
    u_half = F.interpolate(u, scale_factor=0.5, mode="bilinear", align_corners=False)
    m_half = F.max_pool2d(m, 2)
    u_half = u_half * (1.0 - m_half)
    y1 = generator.coarse(u_half, m_half)
    y1_up = F.interpolate(y1, size=(h, w), mode="bilinear", align_corners=False)
    y2 = generator.refine(compose(y1_up, u, m), m)
    return compose(y2, u, m)


def save_networks(directory, networks: dict, *, config_hash: str, step: int, seed: int):
    """Write one parameter archive per network plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, net in networks.items():
        torch.save(net.state_dict(), directory / f"{name}.pt")
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config_hash": config_hash,
        "step": step,
        "seed": seed,
        "networks": sorted(networks),
        "torch_version": torch.__version__,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


class CheckpointError(RuntimeError):
    """Missing, malformed, or mismatching checkpoint contents."""


def load_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise CheckpointError(f"no manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"checkpoint format {manifest.get('format')} != {CHECKPOINT_FORMAT}"
        )
    return manifest


def load_networks(directory, networks: dict, *, expected_config_hash: str | None = None) -> dict:
    """Load parameter archives into the given modules; returns the manifest."""
    directory = Path(directory)
    manifest = load_manifest(directory)
    if expected_config_hash is not None and manifest["config_hash"] != expected_config_hash:
        raise CheckpointError(
            "checkpoint was produced under a different configuration "
            f"(hash {manifest['config_hash']} != {expected_config_hash})"
        )
    for name, net in networks.items():
        path = directory / f"{name}.pt"
        if not path.exists():
            raise CheckpointError(f"missing parameter archive {path}")
        net.load_state_dict(torch.load(path, weights_only=True))
    return manifest


def config_hash_of(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]
