"""Synthetic multi-timestep scenes, an analytic reference renderer, dataset files.

A scene is a handful of soft-edged spheres and boxes inside a bounding box.
Each timestep applies a change set (lighting multipliers, geometry edits) and
reveals a new arc of orbit cameras. The reference renderer evaluates the
analytic density/color fields and composites them with its own loop, which
makes it an independent check on the engine's compositing.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from nerfcl.errors import ConfigError, DatasetError, DomainError
from nerfcl.render import CameraParams, camera_rays, look_at_pose, pixel_directions, ray_box

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = "1.0"
TEST_STRIDE = 8
MASK_THRESHOLD = 0.01
CAMERA_CONVENTION = (
    "camera-to-world pose = [axis-angle (3), camera center (3)]; camera looks down -z, +y up, "
    "+x right; pixel (row, col) center sits at image coordinates (x=col, y=row); "
    "intrinsics fx, fy, cx, cy, skew in pixels"
)


@dataclass
class Primitive:
    id: int
    kind: str
    center: np.ndarray
    size: np.ndarray  # radius (sphere) or half extents (box)
    color: np.ndarray
    density: float

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise ConfigError(f"primitive {self.id}: unknown kind {self.kind!r}")
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.broadcast_to(np.asarray(self.size, dtype=np.float64), (3,)).copy()
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        if self.density < 0:
            raise ConfigError(f"primitive {self.id}: density must be >= 0")
        if np.any(self.size <= 0):
            raise ConfigError(f"primitive {self.id}: size must be positive")

    def signed_distance(self, pts):
        d = pts - self.center
        if self.kind == "sphere":
            return np.linalg.norm(d, axis=-1) - self.size[0]
        q = np.abs(d) - self.size
        outside = np.linalg.norm(np.maximum(q, 0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0)

    def to_dict(self):
        return {"id": self.id, "kind": self.kind, "center": self.center.tolist(),
                "size": self.size[0] if self.kind == "sphere" else self.size.tolist(),
                "color": self.color.tolist(), "density": self.density}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["id"]), d["kind"], d["center"], d["size"], d["color"], float(d["density"]))


@dataclass
class ChangeSet:
    appearance: dict = field(default_factory=dict)  # id or "*" -> rgb multiplier
    add: list = field(default_factory=list)
    remove: list = field(default_factory=list)
    translate: dict = field(default_factory=dict)

    def to_dict(self):
        return {"appearance": {str(k): list(v) for k, v in self.appearance.items()},
                "add": [p.to_dict() for p in self.add], "remove": list(self.remove),
                "translate": {str(k): list(v) for k, v in self.translate.items()}}

    @classmethod
    def from_dict(cls, d):
        def key(k):
            return k if k == "*" else int(k)
        return cls({key(k): list(v) for k, v in d.get("appearance", {}).items()},
                   [Primitive.from_dict(p) for p in d.get("add", [])],
                   [int(i) for i in d.get("remove", [])],
                   {int(k): list(v) for k, v in d.get("translate", {}).items()})


@dataclass
class Transient:
    timestep: int
    primitive: Primitive
    start: np.ndarray
    end: np.ndarray

    def to_dict(self):
        return {"timestep": self.timestep, "primitive": self.primitive.to_dict(),
                "start": list(self.start), "end": list(self.end)}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["timestep"]), Primitive.from_dict(d["primitive"]),
                   np.asarray(d["start"], float), np.asarray(d["end"], float))


@dataclass
class CameraLayout:
    width: int = 64
    height: int = 64
    focal: float = 90.0
    radius: float = 3.2
    elevation_deg: float = 25.0
    elevation_jitter_deg: float = 8.0
    target: tuple = (0.0, -0.2, 0.0)
    arcs: list | None = None  # per-timestep [start_deg, end_deg]; default splits 360 evenly

    def arc(self, t, n_steps):
        if self.arcs is not None:
            return tuple(self.arcs[t])
        span = 360.0 / n_steps
        return (t * span, (t + 1) * span)


@dataclass
class SceneSpec:
    primitives: list
    timesteps: list
    bbox_min: tuple = (-1.0, -1.0, -1.0)
    bbox_max: tuple = (1.0, 1.0, 1.0)
    background: tuple = (0.0, 0.0, 0.0)
    transients: list = field(default_factory=list)
    cameras: CameraLayout = field(default_factory=CameraLayout)
    name: str = "scene"

    def __post_init__(self):
        if len(self.timesteps) < 1:
            raise ConfigError("timesteps: need at least one timestep")
        lo, hi = np.asarray(self.bbox_min), np.asarray(self.bbox_max)
        if np.any(hi <= lo):
            raise ConfigError("bbox_max must exceed bbox_min")
        ids = {p.id for p in self.primitives}
        if len(ids) != len(self.primitives):
            raise ConfigError("primitives: ids must be unique")
        for t, cs in enumerate(self.timesteps):
            for p in cs.add:
                if p.id in ids:
                    raise ConfigError(f"timesteps[{t}].add: id {p.id} already used")
                ids.add(p.id)
            for ref in list(cs.remove) + list(cs.translate) + [k for k in cs.appearance if k != "*"]:
                if ref not in ids:
                    raise ConfigError(f"timesteps[{t}]: unknown primitive id {ref}")
        for i, p in enumerate(self.primitives):
            if np.any(p.center < lo) or np.any(p.center > hi):
                raise ConfigError(f"primitives[{i}]: center outside the bounding box")
        for i, tr in enumerate(self.transients):
            if not 0 <= tr.timestep < len(self.timesteps):
                raise ConfigError(f"transients[{i}]: timestep out of range")

    @property
    def n_timesteps(self):
        return len(self.timesteps)

    @property
    def band(self):
        """Width of the soft boundary: two voxels of a 64^3 lattice over the box."""
        return 2.0 * float(np.max(np.asarray(self.bbox_max) - np.asarray(self.bbox_min))) / 64.0

    def to_dict(self):
        c = self.cameras
        return {
            "name": self.name, "bbox_min": list(self.bbox_min), "bbox_max": list(self.bbox_max),
            "background": list(self.background),
            "primitives": [p.to_dict() for p in self.primitives],
            "timesteps": [cs.to_dict() for cs in self.timesteps],
            "transients": [tr.to_dict() for tr in self.transients],
            "cameras": {"width": c.width, "height": c.height, "focal": c.focal, "radius": c.radius,
                        "elevation_deg": c.elevation_deg, "elevation_jitter_deg": c.elevation_jitter_deg,
                        "target": list(c.target), "arcs": c.arcs},
        }

    @classmethod
    def from_dict(cls, d):
        try:
            prims = [Primitive.from_dict(p) for p in d["primitives"]]
            steps = [ChangeSet.from_dict(cs) for cs in d["timesteps"]]
            trans = [Transient.from_dict(tr) for tr in d.get("transients", [])]
            cam = d.get("cameras", {})
            layout = CameraLayout(**{**cam, "target": tuple(cam.get("target", (0.0, -0.2, 0.0)))})
        except KeyError as exc:
            raise ConfigError(f"scene spec: missing field {exc}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"scene spec: {exc}") from None
        return cls(prims, steps, tuple(d.get("bbox_min", (-1, -1, -1))), tuple(d.get("bbox_max", (1, 1, 1))),
                   tuple(d.get("background", (0, 0, 0))), trans, layout, d.get("name", "scene"))


def load_scene_spec(path) -> SceneSpec:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"scene spec not found: {path}")
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    try:
        return SceneSpec.from_dict(data)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def primitives_at(spec: SceneSpec, t: int) -> list:
    """Active primitives at timestep ``t``: geometry edits accumulate, lighting does not."""
    if not 0 <= t < spec.n_timesteps:
        raise DomainError(f"timestep {t} out of range")
    prims = {p.id: copy.deepcopy(p) for p in spec.primitives}
    for cs in spec.timesteps[: t + 1]:
        for i in cs.remove:
            prims.pop(i, None)
        for p in cs.add:
            prims[p.id] = copy.deepcopy(p)
        for i, delta in cs.translate.items():
            if i in prims:
                prims[i].center = prims[i].center + np.asarray(delta)
    light = spec.timesteps[t].appearance
    for p in prims.values():
        mult = np.asarray(light.get(p.id, light.get("*", (1.0, 1.0, 1.0))), dtype=np.float64)
        p.color = np.clip(p.color * mult, 0.0, 1.0)
    return list(prims.values())


def transients_at(spec: SceneSpec, t: int, frame: float) -> list:
    out = []
    for tr in spec.transients:
        if tr.timestep == t:
            p = copy.deepcopy(tr.primitive)
            p.center = tr.start + frame * (tr.end - tr.start)
            out.append(p)
    return out


def analytic_field(prims, pts, band):
    """Summed density and density-weighted color at ``pts`` (..., 3)."""
    sigma = np.zeros(pts.shape[:-1])
    weighted = np.zeros(pts.shape)
    for p in prims:
        s = np.clip(0.5 - p.signed_distance(pts) / band, 0.0, 1.0)
        sk = p.density * s * s * (3 - 2 * s)
        sigma += sk
        weighted += sk[..., None] * p.color
    with np.errstate(invalid="ignore", divide="ignore"):
        color = np.where(sigma[..., None] > 0, weighted / sigma[..., None], 0.0)
    return sigma, color


def oracle_samples(spec: SceneSpec, t: int, cam: CameraParams, n_samples: int, rows=None, cols=None,
                   frame=None):
    """Per-sample analytic (depths, deltas, sigma, color) along pixel rays."""
    if rows is None:
        rows, cols, origins, dirs = camera_rays(cam)
    else:
        dirs = pixel_directions(cam, rows, cols)
        origins = np.broadcast_to(cam.center, dirs.shape)
    near, far, _ = ray_box(origins, dirs, spec.bbox_min, spec.bbox_max)
    step = (far - near)[:, None] / n_samples
    depths = near[:, None] + (np.arange(n_samples)[None, :] + 0.5) * step
    ends = np.concatenate([depths[:, 1:], far[:, None] + step], axis=1)
    deltas = ends - depths
    pts = origins[:, None, :] + depths[..., None] * dirs[:, None, :]
    prims = primitives_at(spec, t)
    if frame is not None:
        prims = prims + transients_at(spec, t, frame)
    sigma, color = analytic_field(prims, pts, spec.band)
    return depths, deltas, sigma, color


def _weights_by_product(sigma, deltas):
    """w_i = prod_{j<i} exp(-s_j d_j) * (1 - exp(-s_i d_i)), evaluated term by term."""
    att = np.exp(-sigma * deltas)
    trans = np.ones_like(sigma)
    for i in range(1, sigma.shape[1]):
        trans[:, i] = trans[:, i - 1] * att[:, i - 1]
    residual = trans[:, -1] * att[:, -1]
    return trans * (1.0 - att), residual


def oracle_render(spec: SceneSpec, t: int, cam: CameraParams, n_samples: int = 256, frame=None):
    """Ground-truth image in [0,1], composited from the analytic fields."""
    if n_samples < 256:
        raise DomainError("the reference renderer needs at least 256 samples per ray")
    _, deltas, sigma, color = oracle_samples(spec, t, cam, n_samples, frame=frame)
    w, residual = _weights_by_product(sigma, deltas)
    rgb = (w[..., None] * color).sum(axis=1) + residual[:, None] * np.asarray(spec.background)
    return np.clip(rgb, 0.0, 1.0).reshape(cam.height, cam.width, 3)


def oracle_opacity(spec: SceneSpec, t: int, cam: CameraParams, n_samples: int = 256):
    _, deltas, sigma, _ = oracle_samples(spec, t, cam, n_samples)
    w, _ = _weights_by_product(sigma, deltas)
    return w.sum(axis=1).reshape(cam.height, cam.width)


def make_transient_masks(spec: SceneSpec, t: int, cam: CameraParams, frame: float = 0.5,
                         n_samples: int = 256) -> np.ndarray:
    """1 where transient primitives contribute more than 0.01 opacity to a pixel."""
    moving = transients_at(spec, t, frame)
    if not moving:
        return np.zeros((cam.height, cam.width), dtype=np.uint8)
    rows, cols, origins, dirs = camera_rays(cam)
    near, far, _ = ray_box(origins, dirs, spec.bbox_min, spec.bbox_max)
    step = (far - near)[:, None] / n_samples
    depths = near[:, None] + (np.arange(n_samples)[None, :] + 0.5) * step
    ends = np.concatenate([depths[:, 1:], far[:, None] + step], axis=1)
    pts = origins[:, None, :] + depths[..., None] * dirs[:, None, :]
    sig_static, _ = analytic_field(primitives_at(spec, t), pts, spec.band)
    sig_moving, _ = analytic_field(moving, pts, spec.band)
    total = sig_static + sig_moving
    w, _ = _weights_by_product(total, ends - depths)
    with np.errstate(invalid="ignore", divide="ignore"):
        share = np.where(total > 0, sig_moving / total, 0.0)
    contribution = (w * share).sum(axis=1)
    return (contribution > MASK_THRESHOLD).astype(np.uint8).reshape(cam.height, cam.width)


# ---------------------------------------------------------------------------
# Built-in scenes


def default_scene(name="default") -> SceneSpec:
    """Five primitives over three scans with lighting and geometry changes."""
    prims = [
        Primitive(0, "box", (0.0, -0.75, 0.0), (0.9, 0.08, 0.9), (0.55, 0.5, 0.45), 40.0),
        Primitive(1, "sphere", (-0.35, -0.37, 0.25), 0.3, (0.85, 0.2, 0.15), 40.0),
        Primitive(2, "box", (0.38, -0.42, -0.25), (0.22, 0.25, 0.22), (0.2, 0.7, 0.3), 40.0),
        Primitive(3, "sphere", (0.35, -0.45, 0.42), 0.22, (0.2, 0.35, 0.85), 40.0),
        Primitive(4, "box", (-0.3, -0.2, -0.45), (0.12, 0.45, 0.12), (0.9, 0.8, 0.2), 40.0),
    ]
    steps = [
        ChangeSet(),
        ChangeSet(appearance={"*": (1.0, 0.8, 0.6)}, translate={3: (-0.15, 0.0, -0.2)}),
        ChangeSet(appearance={"*": (0.7, 0.85, 1.15)}, remove=[4],
                  add=[Primitive(5, "sphere", (0.0, 0.05, 0.0), 0.2, (0.8, 0.3, 0.7), 40.0)]),
    ]
    transients = [Transient(1, Primitive(100, "sphere", (0, 0, 0), 0.12, (0.95, 0.95, 0.95), 40.0),
                            np.array([-0.6, -0.55, 0.65]), np.array([0.65, -0.55, 0.65]))]
    return SceneSpec(prims, steps, transients=transients, name=name)


def appearance_only_scene(name="appearance") -> SceneSpec:
    """Static geometry under three lighting conditions, every scan orbiting fully."""
    base = default_scene()
    steps = [
        ChangeSet(),
        ChangeSet(appearance={"*": (1.0, 0.65, 0.4)}),
        ChangeSet(appearance={"*": (0.45, 0.7, 1.2)}),
    ]
    layout = CameraLayout(arcs=[[0.0, 360.0], [15.0, 375.0], [30.0, 390.0]])
    return SceneSpec(base.primitives, steps, cameras=layout, name=name)


# ---------------------------------------------------------------------------
# Dataset files


@dataclass
class ImageRecord:
    image_id: int
    timestep: int
    pixels: np.ndarray  # float (H, W, 3) in [0, 1]
    mask: np.ndarray  # uint8 (H, W), 1 = transient
    camera: CameraParams
    split: str


@dataclass
class TimestepData:
    timestep: int
    images: list

    @property
    def cameras(self):
        return [im.camera for im in self.images]

    @property
    def masks(self):
        return [im.mask for im in self.images]


@dataclass
class Dataset:
    root: Path
    timesteps: list
    bbox_min: tuple
    bbox_max: tuple
    background: tuple
    digest: str
    manifest: dict

    @property
    def n_timesteps(self):
        return len(self.timesteps)

    def train(self, t) -> TimestepData:
        return TimestepData(t, [im for im in self.timesteps[t].images if im.split == "train"])

    def test(self, t) -> TimestepData:
        return TimestepData(t, [im for im in self.timesteps[t].images if im.split == "test"])

    def all_images(self):
        return [im for ts in self.timesteps for im in ts.images]


@dataclass
class DatasetManifest:
    path: Path
    data: dict


def _to_u8(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def orbit_cameras(spec: SceneSpec, t: int, count: int, first_id: int, seed: int) -> list:
    layout = spec.cameras
    a0, a1 = layout.arc(t, spec.n_timesteps)
    rng = np.random.default_rng([seed, t])
    cams = []
    for i in range(count):
        az = np.deg2rad(a0 + (i + 0.5) * (a1 - a0) / count)
        el = np.deg2rad(layout.elevation_deg + rng.uniform(-1, 1) * layout.elevation_jitter_deg)
        eye = np.asarray(layout.target) + layout.radius * np.array(
            [np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        cams.append(CameraParams(look_at_pose(eye, layout.target), layout.focal, layout.focal,
                                 (layout.width - 1) / 2, (layout.height - 1) / 2, layout.width,
                                 layout.height, image_id=first_id + i, timestep=t))
    return cams


def _atomic_write_text(path: Path, text: str):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp_")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def generate_dataset(spec: SceneSpec, cameras_per_step: int, seed: int, out_dir,
                     n_samples: int = 256) -> DatasetManifest:
    """Render every timestep's orbit arc and write images, masks and the manifest.

    Every 8th image of the scene (global index 7, 15, ...) is held out for
    testing, or the last one when there are fewer than 8. Held-out views are
    rendered without transient objects.
    """
    if cameras_per_step < 2:
        raise ConfigError("cameras_per_step must be >= 2")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise DatasetError(f"cannot write to {out}: {exc}") from None
    steps = []
    next_id = 0
    n_total = spec.n_timesteps * cameras_per_step
    for t in range(spec.n_timesteps):
        (out / f"t{t}").mkdir(exist_ok=True)
        cams = orbit_cameras(spec, t, cameras_per_step, next_id, seed)
        entries = []
        for i, cam in enumerate(cams):
            held_out = cam.image_id % TEST_STRIDE == TEST_STRIDE - 1
            if n_total < TEST_STRIDE:  # tiny scenes still get one test view
                held_out = cam.image_id == n_total - 1
            split = "test" if held_out else "train"
            frame = None if split == "test" else (i + 0.5) / len(cams)
            img = oracle_render(spec, t, cam, n_samples, frame=frame)
            if frame is None:
                mask = np.zeros((cam.height, cam.width), dtype=np.uint8)
            else:
                mask = make_transient_masks(spec, t, cam, frame, n_samples)
            img_rel = f"t{t}/img_{cam.image_id}.png"
            mask_rel = f"t{t}/mask_{cam.image_id}.png"
            Image.fromarray(_to_u8(img)).save(out / img_rel, optimize=False)
            Image.fromarray(mask * 255).save(out / mask_rel, optimize=False)
            entries.append({"image_id": cam.image_id, "file": img_rel, "mask": mask_rel, "split": split,
                            "camera": cam.to_dict()})
        steps.append({"timestep": t, "images": entries})
        next_id += cameras_per_step
    manifest = {
        "format_version": MANIFEST_VERSION,
        "camera_convention": CAMERA_CONVENTION,
        "bbox_min": list(spec.bbox_min), "bbox_max": list(spec.bbox_max),
        "background": list(spec.background),
        "test_fraction": f"every {TEST_STRIDE}th image ({n_total // TEST_STRIDE} of {n_total})",
        "seed": seed,
        "scene": spec.to_dict(),
        "timesteps": steps,
    }
    path = out / MANIFEST_NAME
    _atomic_write_text(path, json.dumps(manifest, indent=1, sort_keys=True))
    return DatasetManifest(path, manifest)


def dataset_digest(root) -> str:
    """SHA-256 over the manifest and every file it references."""
    root = Path(root)
    h = hashlib.sha256()
    manifest_bytes = (root / MANIFEST_NAME).read_bytes()
    h.update(manifest_bytes)
    manifest = json.loads(manifest_bytes)
    for step in manifest["timesteps"]:
        for im in step["images"]:
            for key in ("file", "mask"):
                h.update((root / im[key]).read_bytes())
    return h.hexdigest()


def load_dataset(path) -> Dataset:
    """Load a dataset directory (or its manifest file) and validate it."""
    path = Path(path)
    root = path if path.is_dir() else path.parent
    mpath = root / MANIFEST_NAME if path.is_dir() else path
    if not mpath.exists():
        raise DatasetError(f"manifest not found: {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{mpath}:{exc.lineno}: malformed manifest ({exc.msg})") from None
    version = str(manifest.get("format_version", ""))
    if version.split(".")[0] != MANIFEST_VERSION.split(".")[0]:
        raise DatasetError(f"{mpath}: unsupported manifest version {version!r} (reader is {MANIFEST_VERSION})")
    steps = manifest.get("timesteps") or []
    if not steps:
        raise DatasetError(f"{mpath}: manifest has zero timesteps")
    timesteps = []
    n_images = n_test = 0
    for step in steps:
        t = int(step["timestep"])
        images = []
        for entry in step["images"]:
            image_id = entry.get("image_id")
            try:
                cam = CameraParams.from_dict(entry["camera"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{mpath}: image {image_id}: invalid camera ({exc})") from None
            if cam.image_id != image_id or cam.timestep != t:
                raise DatasetError(f"{mpath}: image {image_id}: camera ids do not match the entry")
            ipath, kpath = root / entry["file"], root / entry["mask"]
            for p in (ipath, kpath):
                if not p.exists():
                    raise DatasetError(f"{mpath}: image {image_id}: missing file {p}")
            pixels = np.asarray(Image.open(ipath).convert("RGB"), dtype=np.float64) / 255.0
            mask = (np.asarray(Image.open(kpath)) > 127).astype(np.uint8)
            if pixels.shape[:2] != (cam.height, cam.width) or mask.shape != pixels.shape[:2]:
                raise DatasetError(f"{mpath}: image {image_id}: dimensions do not match the camera")
            images.append(ImageRecord(int(image_id), t, pixels, mask, cam, entry["split"]))
            n_images += 1
            n_test += entry["split"] == "test"
        timesteps.append(TimestepData(t, images))
    expected = max(1, n_images // TEST_STRIDE)
    if n_test != expected:
        raise DatasetError(f"{mpath}: {n_test} test images, expected {expected} (1/{TEST_STRIDE})")
    return Dataset(root, timesteps, tuple(manifest["bbox_min"]), tuple(manifest["bbox_max"]),
                   tuple(manifest["background"]), dataset_digest(root), manifest)
