"""Synthetic scenes and image/label file I/O.

Scenes are procedurally drawn: 2 to 5 filled shapes (disks, axis-aligned
rectangles, triangles — the shape kind determines the class) over a textured
background.  Shape edges are rendered with 4x4 supersampled coverage, while
labels rasterize the exact analytic region at pixel centers, so near every
boundary the color evidence is deliberately ambiguous about which side a
pixel belongs to.  Generation is a pure function of (seed, index).

Files use binary PPM (P6) for images and binary PGM (P5) for label maps,
maxval 255, label value 255 meaning ignore.
"""

import numpy as np

from .errors import ConfigError, FormatError, IoError

# base colors per shape class (classes 1..9 cycle through kinds)
_PALETTE = [
    (0.80, 0.32, 0.30), (0.30, 0.72, 0.35), (0.32, 0.38, 0.85),
    (0.82, 0.75, 0.30), (0.75, 0.33, 0.78), (0.32, 0.75, 0.75),
    (0.62, 0.47, 0.30), (0.48, 0.60, 0.72), (0.70, 0.55, 0.55),
]


class SceneSpec:
    """Parameters of the synthetic corpus."""

    def __init__(self, size=(64, 64), num_classes=4, shapes=(2, 5), noise_std=0.14, seed=0):
        h, w = int(size[0]), int(size[1])
        if h % 32 or w % 32:
            raise ConfigError(f"scene size must be divisible by 32, got {(h, w)}")
        if num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
        lo, hi = int(shapes[0]), int(shapes[1])
        if lo < 0 or hi < lo:
            raise ConfigError(f"invalid shape count range {(lo, hi)}")
        if noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {noise_std}")
        self.size = (h, w)
        self.num_classes = int(num_classes)
        self.shapes = (lo, hi)
        self.noise_std = float(noise_std)
        self.seed = int(seed)

    def to_dict(self):
        return {"size": list(self.size), "num_classes": self.num_classes,
                "shapes": list(self.shapes), "noise_std": self.noise_std, "seed": self.seed}


def _coverage_and_mask(kind, params, h, w):
    """4x4-supersampled coverage in [0,1] and the exact center-hit mask."""
    ss = 4
    yy = (np.arange(h * ss) + 0.5) / ss - 0.5    # supersample coordinates
    xx = (np.arange(w * ss) + 0.5) / ss - 0.5
    ys, xs = np.meshgrid(yy, xx, indexing="ij")
    yc, xc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")

    def inside(py, px):
        if kind == "disk":
            cy, cx, r = params
            return (py - cy) ** 2 + (px - cx) ** 2 <= r * r
        if kind == "rect":
            cy, cx, hy, hx = params
            return (np.abs(py - cy) <= hy) & (np.abs(px - cx) <= hx)
        # triangle: all half-plane tests on the same side (vertices CCW)
        (ay, ax), (by, bx), (cy2, cx2) = params
        d1 = (px - bx) * (ay - by) - (ax - bx) * (py - by)
        d2 = (px - cx2) * (by - cy2) - (bx - cx2) * (py - cy2)
        d3 = (px - ax) * (cy2 - ay) - (cx2 - ax) * (py - ay)
        return ((d1 <= 0) & (d2 <= 0) & (d3 <= 0)) | ((d1 >= 0) & (d2 >= 0) & (d3 >= 0))

    sub = inside(ys, xs).astype(np.float64)
    coverage = sub.reshape(h, ss, w, ss).mean(axis=(1, 3))
    mask = inside(yc, xc)
    return coverage, mask


def generate_scene(spec, index):
    """One (image [3,H,W] float in [0,1], labels [H,W] uint8) pair."""
    h, w = spec.size
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, int(index)]))

    base = rng.uniform(0.25, 0.75)
    tint = rng.uniform(-0.06, 0.06, size=3)
    image = np.empty((3, h, w), dtype=np.float64)
    image[:] = (base + tint)[:, None, None]
    if spec.noise_std > 0:
        # low-frequency texture: coarse noise blown up to full size
        coarse = rng.normal(0.0, 1.0, size=(3, h // 8, w // 8))
        texture = coarse.repeat(8, axis=1).repeat(8, axis=2)
        image += spec.noise_std * 0.5 * texture
    else:
        rng.normal(0.0, 1.0, size=(3, h // 8, w // 8))       # keep the stream aligned

    labels = np.zeros((h, w), dtype=np.uint8)
    count = int(rng.integers(spec.shapes[0], spec.shapes[1] + 1))
    min_side = min(h, w)
    for _ in range(count):
        cls = int(rng.integers(1, spec.num_classes))
        kind = ("disk", "rect", "triangle")[(cls - 1) % 3]
        cy = rng.uniform(0.15 * h, 0.85 * h)
        cx = rng.uniform(0.15 * w, 0.85 * w)
        scale = rng.uniform(0.08, 0.16) * min_side
        if kind == "disk":
            params = (cy, cx, scale)
        elif kind == "rect":
            params = (cy, cx, scale * rng.uniform(0.6, 1.4), scale * rng.uniform(0.6, 1.4))
        else:
            angles = rng.uniform(0, 2 * np.pi) + np.array([0.0, 2.1, 4.2]) + rng.uniform(-0.3, 0.3, 3)
            radii = scale * rng.uniform(0.8, 1.3, 3)
            params = tuple((cy + r * np.sin(a), cx + r * np.cos(a)) for r, a in zip(radii, angles))
        coverage, mask = _coverage_and_mask(kind, params, h, w)
        color = np.array(_PALETTE[(cls - 1) % len(_PALETTE)]) + rng.uniform(-0.08, 0.08, 3)
        image = image * (1.0 - coverage) + color[:, None, None] * coverage
        labels[mask] = cls

    if spec.noise_std > 0:
        image += rng.normal(0.0, spec.noise_std, size=(3, h, w))
    else:
        rng.normal(0.0, 1.0, size=(3, h, w))
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return image, labels


# ---------------------------------------------------------------------------
# PPM / PGM


def _parse_header(raw, magic, path):
    if raw[:2] != magic:
        raise FormatError(f"bad magic at byte 0 in {path} (expected {magic.decode()})")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":      # comment to end of line
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise FormatError(f"expected integer at byte {start} in {path}")
        fields.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise FormatError(f"expected whitespace after maxval at byte {pos} in {path}")
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} in {path}")
    return width, height, pos


def write_image(path, image):
    """Float [3,H,W] in [0,1] (or uint8 [3,H,W]) -> binary PPM."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise FormatError(f"image must be [3,H,W], got shape {image.shape}")
    if image.dtype != np.uint8:
        image = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    _, h, w = image.shape
    try:
        with open(path, "wb") as fh:
            fh.write(b"P6\n%d %d\n255\n" % (w, h))
            fh.write(image.transpose(1, 2, 0).tobytes())
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def read_image(path):
    """Binary PPM -> float64 [3,H,W] in [0,1]."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    w, h, pos = _parse_header(raw, b"P6", path)
    need = w * h * 3
    if len(raw) - pos < need:
        raise FormatError(f"truncated pixel data at byte {pos} in {path}")
    if len(raw) - pos > need:
        raise FormatError(f"{len(raw) - pos - need} trailing bytes at byte {pos + need} in {path}")
    pix = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    return pix.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_labels(path, labels):
    """Uint8 [H,W] label map -> binary PGM (255 = ignore)."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise FormatError(f"labels must be [H,W], got shape {labels.shape}")
    labels = labels.astype(np.uint8)
    h, w = labels.shape
    try:
        with open(path, "wb") as fh:
            fh.write(b"P5\n%d %d\n255\n" % (w, h))
            fh.write(labels.tobytes())
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def read_labels(path):
    """Binary PGM -> uint8 [H,W]."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    w, h, pos = _parse_header(raw, b"P5", path)
    need = w * h
    if len(raw) - pos < need:
        raise FormatError(f"truncated pixel data at byte {pos} in {path}")
    if len(raw) - pos > need:
        raise FormatError(f"{len(raw) - pos - need} trailing bytes at byte {pos + need} in {path}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos).reshape(h, w).copy()
