"""Procedural chair shapes, an orthographic z-buffer rasterizer and dataset writer.

Chairs are assemblies of cuboids (four legs, two side stretchers, a seat slab
and a tilted back slab). Each image is rendered from one of 16 azimuths on a
circle at a fixed 15 degree camera elevation, with flat Lambertian shading.
"""

import csv
import os
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import N_VIEWS, InvalidArgument, InvalidShape, check_distribution, derive_seed

ELEVATION_DEG = 15.0
BACKGROUND = 1.0
FILL = 0.9
SEAT_THICKNESS = 0.15
BACK_THICKNESS = 0.13
LIGHT_DIR = np.array([0.45, 0.8, 0.4]) / np.linalg.norm([0.45, 0.8, 0.4])
AMBIENT = 0.2
DIFFUSE = 0.65

# unit cube corners and its six faces as counter-clockwise quads seen from outside
_CUBE = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=np.float64)
_FACES = np.array([
    [0, 1, 3, 2],  # x = 0
    [4, 6, 7, 5],  # x = 1
    [0, 4, 5, 1],  # y = 0
    [2, 3, 7, 6],  # y = 1
    [0, 2, 6, 4],  # z = 0
    [1, 5, 7, 3],  # z = 1
])


@dataclass(frozen=True)
class ShapeParams:
    seat_width: float
    seat_depth: float
    seat_height: float
    back_height: float
    back_tilt_deg: float
    leg_thickness: float
    style_seed: int

    def validate(self):
        dims = (self.seat_width, self.seat_depth, self.seat_height,
                self.back_height, self.leg_thickness)
        if not all(np.isfinite(d) and d > 0 for d in dims):
            raise InvalidShape(f"all chair dimensions must be positive: {self}")
        if not 0.0 <= self.back_tilt_deg <= 30.0:
            raise InvalidShape(f"back_tilt_deg must lie in [0, 30], got {self.back_tilt_deg}")


@dataclass(frozen=True)
class RenderOptions:
    image_size: int = 112
    clutter_level: float = 0.0
    lighting_jitter: float = 0.0
    rng_seed: int = 0
    crop_jitter: float = 0.0
    azimuth_jitter: float = 0.0  # 1 spreads poses uniformly over the whole bin


@dataclass
class DatasetManifest:
    entries: list  # (relative image path, view label 1..16, model id)
    prior_used: np.ndarray
    root: Path = None

    @property
    def labels(self):
        return np.array([e[1] for e in self.entries], dtype=np.int64)

    def image_paths(self):
        return [self.root / e[0] for e in self.entries]


def azimuth_deg(view):
    if not 1 <= view <= N_VIEWS:
        raise InvalidArgument(f"view must lie in 1..{N_VIEWS}, got {view}")
    return (view - 1) * 360.0 / N_VIEWS


def sample_shape(rng_seed):
    """Draw chair proportions; a pure function of ``rng_seed``."""
    rng = np.random.default_rng(int(rng_seed) & 0xFFFFFFFFFFFFFFFF)
    return ShapeParams(
        seat_width=float(rng.uniform(0.8, 1.3)),
        seat_depth=float(rng.uniform(0.75, 1.2)),
        seat_height=float(rng.uniform(0.7, 1.15)),
        back_height=float(rng.uniform(0.75, 1.3)),
        back_tilt_deg=float(rng.uniform(0.0, 25.0)),
        leg_thickness=float(rng.uniform(0.09, 0.17)),
        style_seed=int(rng_seed),
    )


def _box(lo, size):
    return lo + _CUBE * size


def chair_boxes(shape):
    """Corner arrays (k, 8, 3) of every cuboid; +z is the chair's front."""
    shape.validate()
    w, d, h, t = shape.seat_width, shape.seat_depth, shape.seat_height, shape.leg_thickness
    boxes = []
    for sx in (-1, 1):
        for sz in (-1, 1):
            x0 = -w / 2 if sx < 0 else w / 2 - t
            z0 = -d / 2 if sz < 0 else d / 2 - t
            boxes.append(_box(np.array([x0, 0.0, z0]), np.array([t, h, t])))
        # side stretcher joining the front and rear leg
        boxes.append(_box(np.array([x0, 0.35 * h, -d / 2]), np.array([t, t, d])))
    boxes.append(_box(np.array([-w / 2, h, -d / 2]), np.array([w, SEAT_THICKNESS, d])))
    back = _box(np.array([-w / 2, 0.0, 0.0]), np.array([w, shape.back_height, BACK_THICKNESS]))
    tilt = np.deg2rad(shape.back_tilt_deg)
    # lean the top of the back towards -z, hinged at the rear edge of the seat
    c, s = np.cos(tilt), np.sin(tilt)
    y, z = back[:, 1].copy(), back[:, 2].copy()
    back[:, 1] = y * c + z * s
    back[:, 2] = -y * s + z * c
    back += np.array([0.0, h + SEAT_THICKNESS, -d / 2])
    boxes.append(back)
    return np.stack(boxes)


def camera_basis(view, offset_deg=0.0):
    az = np.deg2rad(azimuth_deg(view) + offset_deg)
    el = np.deg2rad(ELEVATION_DEG)
    toward = np.array([np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)])
    right = np.array([np.cos(az), 0.0, -np.sin(az)])
    up = np.cross(toward, right)
    return right, up, toward


def _draw_clutter(img, rng, level):
    size = img.shape[0]
    n = int(round(level * 40))
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(n):
        value = rng.uniform(0.0, 1.0)
        if rng.random() < 0.5:
            w, h = rng.uniform(0.05, 0.4, size=2) * size
            x0, y0 = rng.uniform(-0.1, 1.0, size=2) * size
            img[(xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)] = value
        else:
            p0 = rng.uniform(0, size, size=2)
            p1 = rng.uniform(0, size, size=2)
            width = rng.uniform(0.6, 2.0)
            seg = p1 - p0
            tt = ((xx - p0[0]) * seg[0] + (yy - p0[1]) * seg[1]) / max(seg @ seg, 1e-9)
            tt = np.clip(tt, 0.0, 1.0)
            dist = np.hypot(xx - p0[0] - tt * seg[0], yy - p0[1] - tt * seg[1])
            img[dist <= width] = value


def render(shape, view, opts=RenderOptions()):
    """Rasterize ``shape`` seen from ``view`` into a float image in [0, 1].

    The projected bounding box is scaled to 90% of the frame and centred, as
    if the object had been cropped to a tight box, so the silhouette size
    does not depend on the camera azimuth.
    """
    if opts.image_size < 32:
        raise InvalidArgument(f"image_size must be >= 32, got {opts.image_size}")
    size = int(opts.image_size)
    boxes = chair_boxes(shape)
    rng = np.random.default_rng(int(opts.rng_seed) & 0xFFFFFFFFFFFFFFFF)
    offset = 0.0
    if opts.azimuth_jitter > 0:
        # continuous pose inside the bin, as for photographs labeled to the nearest view
        offset = opts.azimuth_jitter * rng.uniform(-0.5, 0.5) * 360.0 / N_VIEWS
    right, up, toward = camera_basis(view, offset)

    pts = boxes.reshape(-1, 3)
    sx, sy, depth = pts @ right, pts @ up, pts @ toward
    lo_x, hi_x, lo_y, hi_y = sx.min(), sx.max(), sy.min(), sy.max()
    fill, shift = FILL, np.zeros(2)
    if opts.crop_jitter > 0:
        # loose, off-centre bounding box as from a hand-drawn annotation
        fill *= 1.0 - opts.crop_jitter * rng.uniform(0.0, 0.5)
        shift = opts.crop_jitter * rng.uniform(-0.1, 0.1, size=2) * size
    scale = fill * size / max(hi_x - lo_x, hi_y - lo_y)
    col = (sx - (lo_x + hi_x) / 2) * scale + size / 2 + shift[0]
    row = -(sy - (lo_y + hi_y) / 2) * scale + size / 2 + shift[1]
    screen = np.stack([col, row, depth], axis=1).reshape(boxes.shape)

    img = np.full((size, size), BACKGROUND)
    if opts.clutter_level > 0:
        _draw_clutter(img, rng, opts.clutter_level)
    zbuf = np.full((size, size), -np.inf)

    for b, corners in enumerate(boxes):
        for f, quad in enumerate(_FACES):
            world = corners[quad]
            normal = np.cross(world[1] - world[0], world[2] - world[0])
            normal /= np.linalg.norm(normal)
            if normal @ toward <= 1e-12:
                continue
            shade = AMBIENT + DIFFUSE * max(0.0, float(normal @ LIGHT_DIR))
            if opts.lighting_jitter > 0:
                shade *= 1.0 + opts.lighting_jitter * rng.uniform(-1.0, 1.0)
            _fill_quad(img, zbuf, screen[b][quad], min(max(shade, 0.0), 1.0))
    return img


def _fill_quad(img, zbuf, quad, value):
    size = img.shape[0]
    c0 = max(int(np.floor(quad[:, 0].min())), 0)
    c1 = min(int(np.ceil(quad[:, 0].max())), size)
    r0 = max(int(np.floor(quad[:, 1].min())), 0)
    r1 = min(int(np.ceil(quad[:, 1].max())), size)
    if c0 >= c1 or r0 >= r1:
        return
    yy, xx = np.mgrid[r0:r1, c0:c1] + 0.5
    # accept either winding; back faces were already culled in 3D
    pos = np.ones(xx.shape, dtype=bool)
    neg = np.ones(xx.shape, dtype=bool)
    for k in range(4):
        a, b = quad[k], quad[(k + 1) % 4]
        cross = (b[0] - a[0]) * (yy - a[1]) - (b[1] - a[1]) * (xx - a[0])
        pos &= cross >= 0
        neg &= cross <= 0
    inside = pos | neg
    if not inside.any():
        return
    # depth from the plane through three corners
    p0, p1, p2 = quad[0], quad[1], quad[2]
    n = np.cross(p1 - p0, p2 - p0)
    if abs(n[2]) < 1e-12:
        return
    z = p0[2] - (n[0] * (xx - p0[0]) + n[1] * (yy - p0[1])) / n[2]
    win = inside & (z > zbuf[r0:r1, c0:c1])
    zbuf[r0:r1, c0:c1][win] = z[win]
    img[r0:r1, c0:c1][win] = value


def write_pgm(path, img):
    """Write a float image in [0, 1] as binary 8-bit PGM (P5)."""
    img = np.asarray(img)
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise InvalidArgument(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return data.astype(np.float64) / maxval


def read_prior_csv(path):
    """Read a ``view,prob`` CSV into a normalized pose distribution."""
    p = np.zeros(N_VIEWS)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"view", "prob"} <= set(reader.fieldnames):
            raise InvalidArgument(f"{path}: expected a view,prob header")
        for rec in reader:
            try:
                v, prob = int(rec["view"]), float(rec["prob"])
            except (TypeError, ValueError):
                raise InvalidArgument(f"{path}: bad row {rec}") from None
            if not 1 <= v <= N_VIEWS:
                raise InvalidArgument(f"{path}: view {v} outside 1..{N_VIEWS}")
            p[v - 1] = prob
    if not p.sum() > 0:
        raise InvalidArgument(f"{path}: prior has no mass")
    return check_distribution(p / p.sum())


def write_prior_csv(path, prior):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["view", "prob"])
        for v, p in enumerate(prior, start=1):
            w.writerow([v, repr(float(p))])


def generate_dataset(n_models, views_per_model, pose_prior, opts, out_dir, model_offset=0):
    """Render a labeled dataset into ``out_dir``.

    A uniform prior with 16 views per model enumerates every view of every
    model. Otherwise each model gets ``views_per_model`` labels drawn i.i.d.
    from ``pose_prior``; a repeated (model, view) pair reuses the same file.
    """
    prior = check_distribution(pose_prior)
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)

    exhaustive = views_per_model == N_VIEWS and np.allclose(prior, 1.0 / N_VIEWS, atol=1e-12)
    label_rng = np.random.default_rng(derive_seed(opts.rng_seed, 0x1ABE1))
    entries = []
    rendered = set()
    for m in range(model_offset, model_offset + n_models):
        shape = sample_shape(derive_seed(opts.rng_seed, m, 0x5A4E))
        if exhaustive:
            views = range(1, N_VIEWS + 1)
        else:
            views = label_rng.choice(N_VIEWS, size=views_per_model, p=prior) + 1
        for v in views:
            v = int(v)
            rel = f"images/m{m}_v{v}.pgm"
            if rel not in rendered:
                rendered.add(rel)
                img_opts = replace(opts, rng_seed=derive_seed(opts.rng_seed, m, v))
                write_pgm(out_dir / rel, render(shape, v, img_opts))
            entries.append((rel, v, m))

    manifest = DatasetManifest(entries, prior, out_dir)
    write_manifest(manifest, out_dir)
    return manifest


def write_manifest(manifest, out_dir):
    out_dir = Path(out_dir)
    fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".manifest", suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "view", "model_id"])
        w.writerows(manifest.entries)
    os.replace(tmp, out_dir / "manifest.csv")
    write_prior_csv(out_dir / "prior.csv", manifest.prior_used)


def load_manifest(data_dir):
    data_dir = Path(data_dir)
    with open(data_dir / "manifest.csv", newline="") as fh:
        entries = [(r["path"], int(r["view"]), int(r["model_id"])) for r in csv.DictReader(fh)]
    prior_path = data_dir / "prior.csv"
    if prior_path.exists():
        prior = read_prior_csv(prior_path)
    else:
        prior = np.bincount([e[1] - 1 for e in entries], minlength=N_VIEWS) / len(entries)
    return DatasetManifest(entries, prior, data_dir)
