"""Procedural face-crop generator for desk-scale experiments.

Each identity is a point in a parametric appearance space (skin tone, face
shape, hair, eye/brow/nose/mouth geometry and color); each image of that
identity re-renders the same parameters under small pose, lighting, and
expression jitter. The renders are smooth and identity-consistent, which is
what the recognition / reconstruction pipeline needs from a stand-in for an
aligned face dataset.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass
class IdentityParams:
    skin: np.ndarray          # RGB in [0,1]
    hair: np.ndarray
    background: np.ndarray
    iris: np.ndarray
    lip: np.ndarray
    face_rx: float            # face half-axes in normalized coords
    face_ry: float
    hair_top: float           # hairline height (y of bang bottom)
    hair_side: float          # hair width beyond the face oval
    eye_y: float
    eye_dx: float             # half distance between eye centers
    eye_r: float
    brow_y: float
    brow_tilt: float
    brow_thick: float
    nose_len: float
    nose_w: float
    mouth_y: float
    mouth_w: float
    mouth_h: float
    mouth_curve: float


def sample_identity(seed: int, index: int) -> IdentityParams:
    rng = np.random.default_rng(np.random.SeedSequence((seed, index)))
    u = rng.uniform
    skin_base = np.array([0.98, 0.80, 0.62])
    skin = np.clip(skin_base * u(0.45, 1.05) + rng.normal(0, 0.02, 3), 0.15, 1.0)
    hair = np.clip(rng.choice([
        np.array([0.08, 0.06, 0.05]), np.array([0.35, 0.2, 0.08]),
        np.array([0.65, 0.45, 0.2]), np.array([0.8, 0.75, 0.7]),
        np.array([0.45, 0.1, 0.08]),
    ]) + rng.normal(0, 0.03, 3), 0.0, 1.0)
    background = np.clip(u(0.2, 0.9, 3), 0, 1)
    iris = np.clip(rng.choice([
        np.array([0.25, 0.15, 0.08]), np.array([0.1, 0.3, 0.5]),
        np.array([0.15, 0.35, 0.2]), np.array([0.3, 0.3, 0.3]),
    ]) + rng.normal(0, 0.02, 3), 0, 1)
    lip = np.clip(np.array([u(0.5, 0.85), u(0.15, 0.4), u(0.2, 0.4)]), 0, 1)
    return IdentityParams(
        skin=skin, hair=hair, background=background, iris=iris, lip=lip,
        face_rx=u(0.48, 0.62), face_ry=u(0.68, 0.82),
        hair_top=u(-0.78, -0.5), hair_side=u(0.02, 0.16),
        eye_y=u(-0.3, -0.12), eye_dx=u(0.2, 0.3), eye_r=u(0.07, 0.12),
        brow_y=u(-0.5, -0.36), brow_tilt=u(-0.25, 0.25), brow_thick=u(0.025, 0.05),
        nose_len=u(0.18, 0.34), nose_w=u(0.05, 0.1),
        mouth_y=u(0.38, 0.52), mouth_w=u(0.14, 0.26), mouth_h=u(0.035, 0.07),
        mouth_curve=u(-0.08, 0.1),
    )


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _ellipse(x, y, cx, cy, rx, ry, soft):
    d = np.sqrt(((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2)
    return _smoothstep((1.0 - d) / soft + 0.5)


def _box(x, y, cx, cy, hx, hy, angle, soft):
    ca, sa = np.cos(angle), np.sin(angle)
    xr = (x - cx) * ca + (y - cy) * sa
    yr = -(x - cx) * sa + (y - cy) * ca
    mx = _smoothstep((hx - np.abs(xr)) / (soft * hx) + 0.5)
    my = _smoothstep((hy - np.abs(yr)) / (soft * hy) + 0.5)
    return mx * my


def _paint(img, mask, color):
    img += mask[..., None] * (np.asarray(color)[None, None, :] - img)


def render_face(params: IdentityParams, size: int, rng: np.random.Generator) -> np.ndarray:
    """Render one image of an identity with per-image jitter; float32 (S, S, 3) in [0,1]."""
    shift = rng.uniform(-0.05, 0.05, 2)
    scale = rng.uniform(0.95, 1.05)
    brightness = rng.uniform(0.88, 1.12)
    curve = params.mouth_curve + rng.uniform(-0.04, 0.04)
    mouth_h = params.mouth_h * rng.uniform(0.8, 1.25)
    tilt = rng.uniform(-0.05, 0.05)

    lin = np.linspace(-1.0, 1.0, size, dtype=np.float64)
    xg, yg = np.meshgrid(lin, lin)
    # inverse view transform: translate, scale, slight rotation
    x = (xg * np.cos(tilt) + yg * np.sin(tilt)) / scale - shift[0]
    y = (-xg * np.sin(tilt) + yg * np.cos(tilt)) / scale - shift[1]
    soft = 3.0 / size

    img = np.empty((size, size, 3), dtype=np.float64)
    grad = 1.0 + 0.15 * (yg + xg * rng.uniform(-0.5, 0.5)) / 2.0
    img[:] = params.background[None, None, :]
    img *= grad[..., None]

    p = params
    # hair mass behind the face, then the face oval, then bangs on top
    _paint(img, _ellipse(x, y, 0.0, -0.15, p.face_rx + p.hair_side, p.face_ry + p.hair_side, soft), p.hair)
    _paint(img, _ellipse(x, y, 0.0, 0.0, p.face_rx, p.face_ry, soft), p.skin)
    bang = _ellipse(x, y, 0.0, 0.0, p.face_rx * 1.02, p.face_ry * 1.02, soft)
    bang *= _smoothstep((p.hair_top - y) / (4 * soft) + 0.5)
    _paint(img, bang, p.hair)

    shade = np.clip(p.skin * 0.75, 0, 1)
    for sx in (-1.0, 1.0):
        ex = sx * p.eye_dx
        _paint(img, _ellipse(x, y, ex, p.eye_y, p.eye_r * 1.45, p.eye_r, soft), [0.97, 0.97, 0.97])
        _paint(img, _ellipse(x, y, ex, p.eye_y, p.eye_r * 0.62, p.eye_r * 0.62, soft), p.iris)
        _paint(img, _ellipse(x, y, ex, p.eye_y, p.eye_r * 0.25, p.eye_r * 0.25, soft), [0.05, 0.05, 0.05])
        _paint(img, _box(x, y, ex, p.brow_y, p.eye_r * 1.6, p.brow_thick, sx * p.brow_tilt, 0.35),
               np.clip(p.hair * 0.8, 0, 1))
    _paint(img, _box(x, y, 0.0, p.eye_y + p.nose_len / 2, p.nose_w / 2, p.nose_len / 2, 0.0, 0.5), shade)
    _paint(img, _ellipse(x, y, 0.0, p.eye_y + p.nose_len, p.nose_w, p.nose_w * 0.6, soft), shade)
    mouth = _ellipse(x, y + curve * (x / max(p.mouth_w, 1e-6)) ** 2, 0.0, p.mouth_y, p.mouth_w, mouth_h, soft)
    _paint(img, mouth, p.lip)

    img *= brightness
    img += rng.normal(0.0, 0.008, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_dataset(root: str | Path, n_identities: int, images_per_identity: int,
                     image_size: int, seed: int) -> Path:
    """Write a `root/<identity>/<k>.png` dataset; deterministic per seed."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for idx in range(n_identities):
        params = sample_identity(seed, idx)
        ident_dir = root / f"id{idx:04d}"
        ident_dir.mkdir(exist_ok=True)
        for k in range(images_per_identity):
            rng = np.random.default_rng(np.random.SeedSequence((seed, idx, k)))
            img = render_face(params, image_size, rng)
            Image.fromarray((img * 255.0 + 0.5).astype(np.uint8)).save(ident_dir / f"{k:03d}.png")
    return root
