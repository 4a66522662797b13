"""Image ingestion, procedural face synthesis, region masks, and pair streams.

All images inside the pipeline are float32 CHW arrays in [-1, 1]. Metric code
converts to [0, 1] at its own boundary; nothing else ever changes scale.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError

DOMAIN_SOURCE = "source"
DOMAIN_REFERENCE = "reference"

REGION_NAMES = ("lips", "eyes", "face")

# Sidecar mask files are channel coded: R=lips, G=eyes, B=face.
MASK_SIDECAR_SUFFIX = ".mask.png"


@dataclass
class FaceImage:
    """One face image: float32 pixels of shape (3, H, W) in [-1, 1]."""

    pixels: np.ndarray
    identity_id: int = -1
    style_domain: str = DOMAIN_SOURCE

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[0] != 3:
            raise ConfigError(f"expected (3, H, W) pixels, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ConfigError("pixels contain non-finite values")
        if p.min() < -1.0 or p.max() > 1.0:
            raise ConfigError("pixels outside [-1, 1]")
        if self.style_domain not in (DOMAIN_SOURCE, DOMAIN_REFERENCE):
            raise ConfigError(f"unknown style domain {self.style_domain!r}")

    @property
    def resolution(self) -> int:
        return self.pixels.shape[1]


@dataclass
class RegionMaskSet:
    """Binary masks for the lips / eyes / face-skin regions of one image.

    Masks are pairwise disjoint and each is nonempty for a valid face.
    """

    lips: np.ndarray
    eyes: np.ndarray
    face: np.ndarray

    def __post_init__(self):
        for name in REGION_NAMES:
            m = getattr(self, name)
            if m.dtype != np.bool_:
                setattr(self, name, m.astype(bool))
        if not (self.lips.shape == self.eyes.shape == self.face.shape):
            raise ConfigError("region masks have mismatched shapes")
        for name in REGION_NAMES:
            if not getattr(self, name).any():
                raise ConfigError(f"region mask {name!r} is empty")
        if (self.lips & self.eyes).any() or (self.lips & self.face).any() or (self.eyes & self.face).any():
            raise ConfigError("region masks overlap")

    def region(self, name: str) -> np.ndarray:
        if name not in REGION_NAMES:
            raise KeyError(name)
        return getattr(self, name)


def normalize_u8(u8: np.ndarray) -> np.ndarray:
    """Map 8-bit values [0, 255] linearly to float32 [-1, 1]."""
    return (u8.astype(np.float32) / 255.0) * 2.0 - 1.0


def denormalize_u8(pixels: np.ndarray) -> np.ndarray:
    """Invert :func:`normalize_u8`; exact for all 256 gray levels."""
    u8 = np.rint((np.clip(pixels, -1.0, 1.0) + 1.0) * 0.5 * 255.0)
    return u8.astype(np.uint8)


def load_images(directory, resolution: int, style_domain: str = DOMAIN_SOURCE) -> list[FaceImage]:
    """Load every decodable RGB image under ``directory``.

    Images are resized to ``resolution`` x ``resolution`` (bilinear) and mapped
    to [-1, 1]. Undecodable files are skipped with a warning; a missing
    directory or zero loadable images is fatal.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"image directory not found: {directory}")
    out: list[FaceImage] = []
    for path in sorted(directory.iterdir()):
        if not path.is_file() or path.name.endswith(MASK_SIDECAR_SUFFIX):
            continue
        try:
            with Image.open(path) as im:
                rgb = im.convert("RGB")
                if rgb.size != (resolution, resolution):
                    rgb = rgb.resize((resolution, resolution), Image.BILINEAR)
                arr = np.asarray(rgb, dtype=np.uint8)
        except (UnidentifiedImageError, OSError) as exc:
            warnings.warn(f"skipping undecodable image {path.name}: {exc}")
            continue
        pixels = normalize_u8(arr).transpose(2, 0, 1)
        out.append(FaceImage(pixels=pixels, identity_id=-1, style_domain=style_domain))
    if not out:
        raise ConfigError(f"no decodable images in {directory}")
    return out


def load_mask_sidecar(image_path, resolution: int) -> RegionMaskSet:
    """Read ``<image>.mask.png`` next to ``image_path`` (R=lips, G=eyes, B=face)."""
    image_path = Path(image_path)
    sidecar = image_path.with_name(image_path.name + MASK_SIDECAR_SUFFIX)
    if not sidecar.is_file():
        raise ConfigError(f"mask sidecar not found: {sidecar}")
    with Image.open(sidecar) as im:
        rgb = im.convert("RGB")
        if rgb.size != (resolution, resolution):
            rgb = rgb.resize((resolution, resolution), Image.NEAREST)
        arr = np.asarray(rgb, dtype=np.uint8)
    return RegionMaskSet(lips=arr[:, :, 0] > 127, eyes=arr[:, :, 1] > 127, face=arr[:, :, 2] > 127)


def save_mask_sidecar(image_path, masks: RegionMaskSet) -> Path:
    image_path = Path(image_path)
    sidecar = image_path.with_name(image_path.name + MASK_SIDECAR_SUFFIX)
    arr = np.stack([masks.lips, masks.eyes, masks.face], axis=-1).astype(np.uint8) * 255
    Image.fromarray(arr, mode="RGB").save(sidecar)
    return sidecar


def _identity_params(identity_id: int, resolution: int) -> dict:
    """Stable per-identity geometry/texture parameters (independent of sampling rng)."""
    rng = np.random.default_rng(np.random.SeedSequence([0x1DF, int(identity_id)]))
    p = {
        "face_rx": rng.uniform(0.34, 0.44),
        "face_ry": rng.uniform(0.40, 0.48),
        "eye_dx": rng.uniform(0.14, 0.20),
        "eye_y": rng.uniform(-0.18, -0.10),
        "eye_rx": rng.uniform(0.09, 0.13),
        "eye_ry": rng.uniform(0.06, 0.09),
        "mouth_y": rng.uniform(0.18, 0.26),
        "mouth_rx": rng.uniform(0.14, 0.20),
        "mouth_ry": rng.uniform(0.07, 0.10),
        "skin": rng.uniform(-0.15, 0.45, size=3),
        # 3 sinusoid components give each identity a distinctive texture
        "tex_freq": rng.uniform(1.5, 5.0, size=(3, 2)),
        "tex_phase": rng.uniform(0.0, 2 * np.pi, size=3),
        "tex_amp": rng.uniform(0.06, 0.14, size=3),
        "tex_color": rng.uniform(-1.0, 1.0, size=(3, 3)) * 0.5,
    }
    return p


def synth_face(
    identity_id: int,
    style_domain: str,
    rng: np.random.Generator,
    resolution: int = 64,
) -> tuple[FaceImage, RegionMaskSet]:
    """Procedural face: identity fixes geometry/texture, domain fixes the palette.

    Deterministic given (identity_id, style_domain, rng state). Region masks are
    placed at fixed geometric regions: a mouth ellipse, two eye ellipses, and
    the face oval minus those.
    """
    if identity_id < 0:
        raise ConfigError("identity_id must be nonnegative")
    if style_domain not in (DOMAIN_SOURCE, DOMAIN_REFERENCE):
        raise ConfigError(f"unknown style domain {style_domain!r}")
    p = _identity_params(identity_id, resolution)

    # per-sample jitter (shared shift keeps the masks aligned with the face)
    shift = rng.uniform(-0.03, 0.03, size=2)
    brightness = rng.uniform(-0.05, 0.05)
    noise = rng.normal(0.0, 0.02, size=(3, resolution, resolution))

    ys, xs = np.mgrid[0:resolution, 0:resolution]
    # normalized coordinates in [-1, 1], origin at (jittered) face center
    u = (xs + 0.5) / resolution * 2.0 - 1.0 - shift[0]
    v = (ys + 0.5) / resolution * 2.0 - 1.0 - shift[1]

    def ellipse(cx, cy, rx, ry):
        return ((u - cx) / rx) ** 2 + ((v - cy) / ry) ** 2 <= 1.0

    oval = ellipse(0.0, 0.0, p["face_rx"], p["face_ry"])
    eye_l = ellipse(-p["eye_dx"], p["eye_y"], p["eye_rx"], p["eye_ry"])
    eye_r = ellipse(+p["eye_dx"], p["eye_y"], p["eye_rx"], p["eye_ry"])
    eyes = eye_l | eye_r
    lips = ellipse(0.0, p["mouth_y"], p["mouth_rx"], p["mouth_ry"])
    face_skin = oval & ~eyes & ~lips

    texture = np.zeros((resolution, resolution))
    for k in range(3):
        fx, fy = p["tex_freq"][k]
        texture_k = np.sin(np.pi * (fx * u + fy * v) + p["tex_phase"][k])
        texture += p["tex_amp"][k] * texture_k

    img = np.full((3, resolution, resolution), -0.85)  # background
    skin = p["skin"][:, None, None] + brightness
    for c in range(3):
        img[c][oval] = (skin[c] + texture * (1.0 + p["tex_color"][c].mean()))[oval]

    if style_domain == DOMAIN_REFERENCE:
        lip_color = np.array([0.75, -0.55, -0.25]) + rng.uniform(-0.15, 0.15, size=3)
        shadow = np.array([-0.05, -0.35, 0.45]) + rng.uniform(-0.15, 0.15, size=3)
        tint = rng.uniform(-0.06, 0.06, size=3)
        for c in range(3):
            img[c][lips] = lip_color[c]
            img[c][eyes] = shadow[c]
            img[c][face_skin] += tint[c]
    else:
        lip_color = skin[:, 0, 0] + np.array([0.18, -0.08, -0.05])
        for c in range(3):
            img[c][lips] = lip_color[c]
            img[c][eyes] = -0.6

    img = np.clip(img + noise, -1.0, 1.0).astype(np.float32)
    face = FaceImage(pixels=img, identity_id=identity_id, style_domain=style_domain)
    masks = RegionMaskSet(lips=lips, eyes=eyes, face=face_skin)
    return face, masks


@dataclass
class MaskedFace:
    image: FaceImage
    masks: RegionMaskSet


@dataclass
class TargetIdentity:
    """The impersonation target: one image plus cached per-model embeddings."""

    image: FaceImage
    embeddings: dict = field(default_factory=dict)  # model_id -> (d,) float array


def synth_identity_set(
    num_identities: int,
    samples_per_identity: int,
    resolution: int,
    seed: int,
    style_domain: str = DOMAIN_SOURCE,
) -> list[MaskedFace]:
    """Deterministic bank of synthetic faces covering ``num_identities`` identities."""
    out = []
    for identity in range(num_identities):
        for sample in range(samples_per_identity):
            rng = np.random.default_rng(
                np.random.SeedSequence([int(seed), int(identity), int(sample), style_domain == DOMAIN_REFERENCE])
            )
            image, masks = synth_face(identity, style_domain, rng, resolution)
            out.append(MaskedFace(image=image, masks=masks))
    return out


@dataclass
class TrainingPair:
    x: FaceImage
    masks_x: RegionMaskSet
    y: FaceImage
    masks_y: RegionMaskSet


class PairStream:
    """Reproducible uniform (source, reference) pair sampler.

    Pair i is a pure function of (seed, i), so the stream supports random
    access; checkpoint resume replays from any step without rewinding.
    """

    def __init__(self, sources: list[MaskedFace], references: list[MaskedFace], seed: int):
        if not sources or not references:
            raise ConfigError("pair stream needs nonempty source and reference lists")
        self.sources = sources
        self.references = references
        self.seed = int(seed)

    def pair(self, index: int) -> TrainingPair:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, int(index)]))
        s = self.sources[int(rng.integers(len(self.sources)))]
        r = self.references[int(rng.integers(len(self.references)))]
        return TrainingPair(x=s.image, masks_x=s.masks, y=r.image, masks_y=r.masks)

    def take(self, n: int, start: int = 0) -> list[TrainingPair]:
        return [self.pair(i) for i in range(start, start + n)]

    def __iter__(self):
        i = 0
        while True:
            yield self.pair(i)
            i += 1
