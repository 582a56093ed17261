"""Deterministic synthetic multi-view shape dataset.

Each object instance is a flat textured shape; the viewpoint grid is an
in-plane rotation (the turntable axis) composed with a fixed shear/squash
affine (the camera azimuth axis), so neighboring grid cells look similar
and far-apart cells do not. Everything derives from per-shot seeds, so
regeneration is byte-identical.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DataError
from .images import float_chw_to_u8, read_ppm, u8_to_float_chw, write_ppm
from .pairs import TurntableShot, ViewpointGrid, write_shot_manifest, read_shot_manifest

__all__ = [
    "SHAPE_FAMILIES",
    "InstanceParams",
    "ShapeInstance",
    "RenderConfig",
    "make_instance",
    "render_shot",
    "render_canonical",
    "generate_dataset",
    "load_images",
]

SUPERSAMPLE = 4  # anti-aliasing factor; adjacent viewpoints then vary smoothly


def _triangle(u, v):
    return (v >= -1) & (v <= 1) & (np.abs(u) <= (1 - v) / 2)


def _rectangle(u, v):
    return (np.abs(u) <= 1) & (np.abs(v) <= 0.62)


def _ellipse(u, v):
    return u * u + v * v <= 1


def _cross(u, v):
    return ((np.abs(u) <= 0.32) & (np.abs(v) <= 1)) | ((np.abs(v) <= 0.32) & (np.abs(u) <= 1))


def _star(u, v):
    r = np.sqrt(u * u + v * v)
    theta = np.arctan2(v, u)
    return r <= 0.55 + 0.45 * np.cos(5 * theta)


def _annulus(u, v):
    r2 = u * u + v * v
    return (r2 <= 1) & (r2 >= 0.45 * 0.45)


def _diamond(u, v):
    return np.abs(u) + np.abs(v) <= 1


def _tee(u, v):
    return ((np.abs(v - 0.7) <= 0.3) & (np.abs(u) <= 1)) | (
        (np.abs(u) <= 0.3) & (v <= 0.7) & (v >= -1)
    )


def _lshape(u, v):
    return ((np.abs(u + 0.65) <= 0.35) & (np.abs(v) <= 1)) | (
        (np.abs(v + 0.65) <= 0.35) & (np.abs(u) <= 1)
    )


def _crescent(u, v):
    return (u * u + v * v <= 1) & ((u - 0.45) ** 2 + v * v >= 0.55 * 0.55)


def _bars(u, v):
    return (np.abs(u) <= 1) & ((np.abs(v - 0.55) <= 0.26) | (np.abs(v + 0.55) <= 0.26))


def _wedge(u, v):
    r = np.sqrt(u * u + v * v)
    return (r <= 1) & (np.abs(np.arctan2(v, u)) <= 0.9)


SHAPE_FAMILIES = (
    ("triangle", _triangle),
    ("rectangle", _rectangle),
    ("ellipse", _ellipse),
    ("cross", _cross),
    ("star", _star),
    ("annulus", _annulus),
    ("diamond", _diamond),
    ("tee", _tee),
    ("lshape", _lshape),
    ("crescent", _crescent),
    ("bars", _bars),
    ("wedge", _wedge),
)


@dataclass(frozen=True)
class InstanceParams:
    """Per-instance appearance, drawn once and fixed for the instance's lifetime."""

    size: float
    aspect: float
    fill_rgb: tuple[float, float, float]
    stripe_freq: float
    stripe_angle: float
    stripe_phase: float


@dataclass(frozen=True)
class ShapeInstance:
    category_id: int
    instance_id: str
    family: str
    params: InstanceParams


@dataclass(frozen=True)
class RenderConfig:
    image_size: int = 32
    grid: ViewpointGrid = field(default_factory=lambda: ViewpointGrid(8, 8))
    azimuth_arc_degrees: float = 75.0
    rotation_arc_degrees: float = 135.0
    background_mode: str = "noise"  # flat | noise
    background_level: float = 0.1
    noise_std: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 8:
            raise ValueError(f"image_size must be >= 8, got {self.image_size}")
        if self.azimuth_arc_degrees <= 0 or self.rotation_arc_degrees <= 0:
            raise ValueError("viewpoint arcs must be positive")
        if self.background_mode not in ("flat", "noise"):
            raise ValueError(f"background_mode must be flat|noise, got {self.background_mode!r}")


def make_instance(category_id: int, instance_index: int, config: RenderConfig,
                  family_offset: int = 0) -> ShapeInstance:
    """Draw instance parameters from the instance's own seed key."""
    family_idx = (category_id + family_offset) % len(SHAPE_FAMILIES)
    rng = np.random.default_rng([config.seed, 101, family_idx, instance_index])
    # Stripe orientation stays in a narrow band so in-plane rotation reads
    # out of the texture; a free angle would leave orientation ambiguous.
    params = InstanceParams(
        size=float(rng.uniform(0.42, 0.75)),
        aspect=float(rng.uniform(1.15, 2.1)),
        fill_rgb=tuple(float(x) for x in rng.uniform(0.35, 1.0, size=3)),
        stripe_freq=float(rng.uniform(4.0, 10.0)),
        stripe_angle=float(rng.uniform(-0.2, 0.2)),
        stripe_phase=float(rng.uniform(0.0, 2 * np.pi)),
    )
    name, _ = SHAPE_FAMILIES[family_idx]
    return ShapeInstance(
        category_id=category_id,
        instance_id=f"c{category_id}i{instance_index:02d}",
        family=name,
        params=params,
    )


def _view_matrix(theta: float, phi: float) -> np.ndarray:
    """World = shear(phi) @ rotate(theta) @ shape coordinates."""
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    shear = np.array([[1.0, 0.55 * np.sin(phi)], [0.0, 1.0 - 0.45 * (1.0 - np.cos(phi))]])
    return shear @ rot


def _angles(camera_index: int, rotation_index: int, config: RenderConfig) -> tuple[float, float]:
    grid = config.grid
    if not (0 <= camera_index < grid.num_cameras and 0 <= rotation_index < grid.num_rotations):
        raise ValueError(
            f"viewpoint ({camera_index}, {rotation_index}) outside the "
            f"{grid.num_cameras}x{grid.num_rotations} grid"
        )
    theta = (
        np.deg2rad(config.rotation_arc_degrees) * rotation_index / (grid.num_rotations - 1)
        if grid.num_rotations > 1
        else 0.0
    )
    phi = (
        np.deg2rad(config.azimuth_arc_degrees) * camera_index / (grid.num_cameras - 1)
        if grid.num_cameras > 1
        else 0.0
    )
    return theta, phi


def _render(instance: ShapeInstance, theta: float, phi: float, config: RenderConfig,
            bg_rng: Optional[np.random.Generator]) -> np.ndarray:
    n = config.image_size * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    wx = np.broadcast_to(coords[None, :], (n, n))
    wy = np.broadcast_to(coords[:, None], (n, n))
    inv = np.linalg.inv(_view_matrix(theta, phi))
    sx = inv[0, 0] * wx + inv[0, 1] * wy
    sy = inv[1, 0] * wx + inv[1, 1] * wy

    p = instance.params
    u = sx / (p.size * p.aspect)
    v = sy / p.size
    _, member = SHAPE_FAMILIES[
        [name for name, _ in SHAPE_FAMILIES].index(instance.family)
    ]
    mask = member(u, v).astype(np.float64)
    stripes = 0.78 + 0.22 * np.sin(
        p.stripe_freq * (u * np.cos(p.stripe_angle) + v * np.sin(p.stripe_angle)) + p.stripe_phase
    )
    textured = mask * stripes

    # Box-average the supersampled foreground down to the output resolution.
    s = SUPERSAMPLE
    out = config.image_size
    alpha = mask.reshape(out, s, out, s).mean(axis=(1, 3))
    tex = textured.reshape(out, s, out, s).mean(axis=(1, 3))

    if config.background_mode == "noise":
        assert bg_rng is not None
        bg = config.background_level + config.noise_std * bg_rng.standard_normal((out, out))
    else:
        bg = np.full((out, out), config.background_level)
    img = np.empty((3, out, out), dtype=np.float64)
    for c in range(3):
        img[c] = p.fill_rgb[c] * tex + (1.0 - alpha) * bg
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_shot(
    instance: ShapeInstance, camera_index: int, rotation_index: int, config: RenderConfig
) -> tuple[np.ndarray, TurntableShot]:
    """One [3, H, W] image in [0, 1] plus its metadata record."""
    theta, phi = _angles(camera_index, rotation_index, config)
    family_idx = [name for name, _ in SHAPE_FAMILIES].index(instance.family)
    bg_rng = np.random.default_rng(
        [config.seed, 202, family_idx, instance.category_id, camera_index, rotation_index]
    )
    image = _render(instance, theta, phi, config, bg_rng)
    shot = TurntableShot(
        instance_id=instance.instance_id,
        category_id=instance.category_id,
        camera_index=camera_index,
        rotation_index=rotation_index,
        image_path=f"images/{instance.instance_id}_cam{camera_index}_rot{rotation_index}.ppm",
    )
    return image, shot


def render_canonical(instance: ShapeInstance, config: RenderConfig) -> np.ndarray:
    """The un-transformed view (both angles zero)."""
    return _render(instance, 0.0, 0.0, config, np.random.default_rng([config.seed, 202, 0]))


def generate_dataset(
    num_categories: int,
    instances_per_category: int,
    config: RenderConfig,
    out_dir,
    overwrite: bool = False,
    family_offset: int = 0,
) -> list[TurntableShot]:
    """Render categories x instances x cameras x rotations shots to
    ``out_dir/images`` and write ``out_dir/manifest.tsv``."""
    if num_categories < 2:
        raise ValueError(f"need at least 2 categories, got {num_categories}")
    if instances_per_category < 1:
        raise ValueError("need at least 1 instance per category")
    out_dir = os.fspath(out_dir)
    manifest_path = os.path.join(out_dir, "manifest.tsv")
    if os.path.exists(manifest_path) and not overwrite:
        raise DataError(f"{manifest_path} exists; pass overwrite to replace it")
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)

    # One background-noise rng per dataset would couple shots to render order;
    # each shot reseeds from its own key inside render_shot instead.
    shots: list[TurntableShot] = []
    for category in range(num_categories):
        for index in range(instances_per_category):
            instance = make_instance(category, index, config, family_offset)
            for cam in range(config.grid.num_cameras):
                for rot in range(config.grid.num_rotations):
                    image, shot = render_shot(instance, cam, rot, config)
                    write_ppm(os.path.join(out_dir, shot.image_path), float_chw_to_u8(image))
                    shots.append(shot)
    write_shot_manifest(manifest_path, shots)
    return shots


def load_images(out_dir, shots: Sequence[TurntableShot]) -> dict[str, np.ndarray]:
    """Image arrays keyed by manifest path, [3, H, W] float32 in [0, 1]."""
    out_dir = os.fspath(out_dir)
    return {
        shot.image_path: u8_to_float_chw(read_ppm(os.path.join(out_dir, shot.image_path)))
        for shot in dict.fromkeys(shots)
    }
