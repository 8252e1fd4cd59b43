"""Synthetic paired real/fake face dataset.

Real faces are smooth compositions (Gaussian blobs for face, eyes and mouth
over a low-order cosine background). A fake is its paired real face plus a
localized high-frequency artifact inside the face region.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

REAL = 0
FAKE = 1
FORGERY_KINDS = ("patch_noise", "checker_blend")


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_identities: int = 50
    images_per_identity: int = 4
    size: tuple = (64, 64, 3)
    forgery_kind: str = "patch_noise"
    artifact_strength: float = 0.04
    seed: int = 0
    # identities depend on ``seed`` only; ``split`` varies the per-image draws
    split: int = 0
    # pose/lighting offset between a fake and its paired real (0 = same frame)
    reenact_jitter: float = 0.0

    def __post_init__(self):
        if self.num_identities < 1 or self.images_per_identity < 1:
            raise ValueError("need at least one identity and one image per identity")
        if self.forgery_kind not in FORGERY_KINDS + ("mixed",):
            raise ValueError(f"unknown forgery_kind {self.forgery_kind!r}")
        if len(self.size) != 3 or self.size[2] not in (1, 3):
            raise ValueError("size must be (H, W, 1|3)")
        if self.artifact_strength <= 0:
            raise ValueError("artifact_strength must be positive")
        if self.reenact_jitter < 0:
            raise ValueError("reenact_jitter must be non-negative")


@dataclass
class Sample:
    image: np.ndarray
    label: int
    identity_id: int
    pair_id: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.label == FAKE and self.pair_id is None:
            raise ValueError("fake samples must reference their paired real sample")


def _blob(yy, xx, cy, cx, sy, sx):
    return np.exp(-(((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2) / 2.0)


def _identity_params(identity, seed):
    rng = np.random.default_rng([seed, 7919, identity])
    return {
        "skin": rng.uniform([0.55, 0.38, 0.30], [0.85, 0.68, 0.58]),
        "bg": rng.uniform(0.15, 0.75, 3),
        "bg_coef": rng.normal(0.0, 0.06, (3, 3, 3)),
        "face_ax": rng.uniform([0.30, 0.22], [0.38, 0.30]),
        "eye_dx": rng.uniform(0.13, 0.20),
        "eye_y": rng.uniform(-0.14, -0.06),
        "eye_size": rng.uniform(0.035, 0.06),
        "eye_color": rng.uniform(0.05, 0.35, 3),
        "mouth_y": rng.uniform(0.12, 0.20),
        "mouth_w": rng.uniform(0.08, 0.15),
        "mouth_color": rng.uniform([0.45, 0.12, 0.12], [0.75, 0.35, 0.35]),
        "hair": rng.uniform(0.05, 0.55, 3),
    }


def sample_jitter(rng, scale=1.0):
    """Per-image pose, lighting and expression offsets."""
    dy, dx = rng.normal(0.0, 0.02 * scale, 2)
    return {"dy": dy, "dx": dx, "light": rng.normal(0.0, 0.03 * scale), "smile": rng.normal(0.0, 0.01 * scale)}


def render_face(identity, size, seed, rng=None, jitter=None):
    """Render one real face of ``identity``.

    ``jitter`` fixes the per-image offsets; otherwise they are drawn from ``rng``.
    """
    h, w, c = size
    p = _identity_params(identity, seed)
    yy, xx = np.meshgrid(np.linspace(-0.5, 0.5, h), np.linspace(-0.5, 0.5, w), indexing="ij")
    if jitter is None:
        jitter = sample_jitter(rng)
    dy, dx, light, smile = jitter["dy"], jitter["dx"], jitter["light"], jitter["smile"]
    img = np.empty((h, w, 3))
    for ch in range(3):
        bg = p["bg"][ch]
        for a in range(3):
            for b in range(3):
                if a or b:
                    bg = bg + p["bg_coef"][ch, a, b] * np.cos(np.pi * a * (yy + 0.5)) * np.cos(np.pi * b * (xx + 0.5))
        img[:, :, ch] = bg
    cy, cx = dy, dx
    face = _blob(yy, xx, cy, cx, p["face_ax"][0] / 1.6, p["face_ax"][1] / 1.6)
    face = np.clip(face * 1.8, 0.0, 1.0)
    hair = _blob(yy, xx, cy - 0.26, cx, 0.10, p["face_ax"][1] / 1.3)
    hair = np.clip(hair * 1.5, 0.0, 1.0) * (1.0 - face * 0.6)
    shade = 1.0 + 0.15 * (-(yy - cy))  # top-lit
    for ch in range(3):
        img[:, :, ch] = img[:, :, ch] * (1 - face) + p["skin"][ch] * shade * face
        img[:, :, ch] = img[:, :, ch] * (1 - hair) + p["hair"][ch] * hair
    for sgn in (-1, 1):
        eye = _blob(yy, xx, cy + p["eye_y"], cx + sgn * p["eye_dx"], p["eye_size"] * 0.7, p["eye_size"])
        for ch in range(3):
            img[:, :, ch] = img[:, :, ch] * (1 - eye) + p["eye_color"][ch] * eye
    mouth = _blob(yy, xx, cy + p["mouth_y"], cx, 0.025, p["mouth_w"] * (1 + 5 * smile))
    for ch in range(3):
        img[:, :, ch] = img[:, :, ch] * (1 - mouth) + p["mouth_color"][ch] * mouth
    img = img + light
    if c == 1:
        img = img.mean(axis=2, keepdims=True)
    return np.clip(img, 0.0, 1.0)


def face_mask(size, rng, radius=(0.16, 0.22)):
    """Soft elliptical region inside the face where the artifact is placed."""
    h, w = size[:2]
    yy, xx = np.meshgrid(np.linspace(-0.5, 0.5, h), np.linspace(-0.5, 0.5, w), indexing="ij")
    cy, cx = rng.normal(0.0, 0.04, 2)
    ry, rx = rng.uniform(*radius, 2)
    d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    return np.clip((1.2 - d) / 0.4, 0.0, 1.0)


def make_artifact(kind, size, strength, rng):
    """Zero-mean high-frequency pattern with peak magnitude ``strength``."""
    h, w, c = size
    mask = face_mask(size, rng)[:, :, None]
    if kind == "patch_noise":
        pattern = rng.uniform(-1.0, 1.0, (h, w, c))
    elif kind == "checker_blend":
        period = int(rng.integers(1, 3))
        yy, xx = np.indices((h, w))
        checker = np.where(((yy // period) + (xx // period)) % 2 == 0, 1.0, -1.0)
        phase = rng.uniform(0.7, 1.0, c)
        pattern = checker[:, :, None] * phase[None, None, :]
    else:
        raise ValueError(f"unknown forgery kind {kind!r}")
    return strength * mask * pattern


def gen_dataset(spec):
    """Generate interleaved (real, fake) samples; fake ``i`` pairs with real ``i - 1``.

    Deterministic in ``spec.seed``.
    """
    rng = np.random.default_rng([spec.seed, 1, spec.split, int(round(spec.artifact_strength * 1e6))])
    samples = []
    for ident in range(spec.num_identities):
        for k in range(spec.images_per_identity):
            jit = sample_jitter(rng)
            real = render_face(ident, spec.size, spec.seed, jitter=jit)
            if spec.reenact_jitter > 0:
                off = sample_jitter(rng, spec.reenact_jitter)
                source = render_face(ident, spec.size, spec.seed, jitter={k: jit[k] + off[k] for k in jit})
            else:
                source = real
            kind = spec.forgery_kind
            if kind == "mixed":
                kind = FORGERY_KINDS[int(rng.integers(0, 2))]
            art = make_artifact(kind, spec.size, spec.artifact_strength, rng)
            fake = np.clip(source + art, 0.0, 1.0)
            real_idx = len(samples)
            samples.append(Sample(real, REAL, ident, None, {"index": k}))
            samples.append(Sample(fake, FAKE, ident, real_idx, {"index": k, "kind": kind}))
    return samples


def as_arrays(samples):
    """Stack samples into ``(X, labels, identities)`` arrays."""
    X = np.stack([s.image for s in samples])
    y = np.array([s.label for s in samples], dtype=np.int64)
    ids = np.array([s.identity_id for s in samples], dtype=np.int64)
    return X, y, ids


def fake_pairs(samples):
    """``(fake_sample, real_sample)`` tuples in dataset order."""
    return [(s, samples[s.pair_id]) for s in samples if s.label == FAKE]
