"""Deterministic synthetic segmentation scenes.

Each scene is a textured background with a few colored geometric shapes.
The class id fixes a shape's palette color (and its outline family), so the
task is learnable at desk scale.  Shape geometry and colors derive from an
rng stream independent of the domain id; the domain only perturbs background
statistics, so two domains share masks bit for bit at equal indices.
"""

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

CACHE_FORMAT_VERSION = 1

# distinct, saturated colors; class c uses PALETTE[(c-1) % 10]
PALETTE = np.array([
    [0.90, 0.10, 0.10],
    [0.10, 0.75, 0.10],
    [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.10],
    [0.80, 0.15, 0.80],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.55, 0.30, 0.10],
    [0.95, 0.45, 0.65],
    [0.45, 0.95, 0.35],
])

DOMAIN_TINTS = np.array([
    [0.50, 0.50, 0.50],
    [0.65, 0.55, 0.40],
    [0.40, 0.55, 0.65],
    [0.55, 0.65, 0.45],
    [0.60, 0.45, 0.60],
])


@dataclass(frozen=True)
class SynthSceneSpec:
    seed: int
    image_size: tuple = (64, 64)
    n_classes: int = 10
    shapes_min: int = 1
    shapes_max: int = 3
    domain_id: int = 0

    def content_hash(self):
        payload = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _coarse_noise(rng, h, w, cells=4):
    """Smooth low-frequency field from a coarse grid, bilinearly upsampled."""
    from .ops import _interp_matrix

    g = rng.standard_normal((cells, cells))
    return _interp_matrix(cells, h) @ g @ _interp_matrix(cells, w).T


def _shape_mask(kind, h, w, cy, cx, r, rng):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == 0:  # disc
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == 1:  # axis-aligned box
        return (np.abs(dy) <= r * 0.9) & (np.abs(dx) <= r * 0.9)
    if kind == 2:  # upward triangle
        return (dy >= -r) & (dy <= r * 0.8) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == 3:  # ring
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (0.45 * r) ** 2)
    # diamond
    return np.abs(dy) + np.abs(dx) <= r * 1.1


def generate_scene(spec, index):
    """Deterministic (image, mask) pair for a pool slot.

    image: (3, H, W) float64 in [0, 1]; mask: (H, W) int64 with background 0.
    """
    h, w = spec.image_size
    geom = np.random.default_rng([spec.seed, index, 0x5CE])
    dom = np.random.default_rng([spec.seed, index, spec.domain_id, 0xD03])

    tint = DOMAIN_TINTS[spec.domain_id % len(DOMAIN_TINTS)]
    image = np.empty((3, h, w))
    low = _coarse_noise(dom, h, w)
    for ch in range(3):
        image[ch] = tint[ch] + 0.10 * low + 0.02 * dom.standard_normal((h, w))

    mask = np.zeros((h, w), dtype=np.int64)
    n_shapes = int(geom.integers(spec.shapes_min, spec.shapes_max + 1))
    for _ in range(n_shapes):
        cls = int(geom.integers(1, spec.n_classes + 1))
        kind = (cls - 1) % 5
        r = float(geom.uniform(h / 8, h / 4))
        cy = float(geom.uniform(r, h - r))
        cx = float(geom.uniform(r, w - r))
        inside = _shape_mask(kind, h, w, cy, cx, r, geom)
        color = np.clip(PALETTE[(cls - 1) % len(PALETTE)] + geom.uniform(-0.06, 0.06, 3), 0, 1)
        image[:, inside] = color[:, None]
        mask[inside] = cls
    return np.clip(image, 0.0, 1.0), mask


@dataclass
class ScenePool:
    images: np.ndarray  # (n, 3, h, w)
    masks: np.ndarray  # (n, h, w)
    domains: np.ndarray  # (n,)

    def __len__(self):
        return self.images.shape[0]


def build_pool(spec, n_scenes, salt=0, domains=(0,)):
    """Materialize ``n_scenes`` per domain; scene indices never repeat across
    domains so the pool holds distinct scenes, while (spec, index) stays the
    sole source of content."""
    images, masks, doms = [], [], []
    for d_pos, domain in enumerate(domains):
        dspec = SynthSceneSpec(
            seed=spec.seed + 1_000_003 * salt, image_size=spec.image_size,
            n_classes=spec.n_classes, shapes_min=spec.shapes_min,
            shapes_max=spec.shapes_max, domain_id=domain)
        for i in range(n_scenes):
            img, m = generate_scene(dspec, d_pos * n_scenes + i)
            images.append(img)
            masks.append(m)
            doms.append(domain)
    return ScenePool(images=np.stack(images), masks=np.stack(masks),
                     domains=np.asarray(doms, dtype=np.int64))


def save_pool(directory, pool, spec_hash):
    """Flat binary arrays plus a manifest carrying format version and hash."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / "images.npy", pool.images)
    np.save(directory / "masks.npy", pool.masks)
    np.save(directory / "domains.npy", pool.domains)
    manifest = {
        "format_version": CACHE_FORMAT_VERSION,
        "spec_hash": spec_hash,
        "n_scenes": len(pool),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_pool(directory, spec_hash=None):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest["format_version"] != CACHE_FORMAT_VERSION:
        raise ValueError(f"cache format {manifest['format_version']} unsupported")
    if spec_hash is not None and manifest["spec_hash"] != spec_hash:
        raise ValueError("cache was built from a different dataset spec")
    return ScenePool(
        images=np.load(directory / "images.npy"),
        masks=np.load(directory / "masks.npy"),
        domains=np.load(directory / "domains.npy"),
    )
