"""Synthetic battery-station samples and manifest-based dataset I/O.

A scene is a 2x3 housing with six battery slots, one or two of them
occupied. The optical channel renders the housing, batteries and (for
runaway scenes) a semi-transparent smoke plume; the infrared channel is a
temperature map in Celsius: ambient, mild per-battery warmth, and for
runaway scenes a radial heat blob whose peak exceeds the 35 degree alarm
threshold. Rendering is a pure function of (config, image size), so one
root seed reproduces a dataset byte for byte.

On disk a dataset is a JSON manifest plus one 8-bit PNG (optical) and one
float32 .npy (infrared, Celsius) per sample. Optical pixels are quantized
to 1/255 steps at render time, which makes the PNG round trip exact.
"""

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ManifestError, MissingFileError, SizeMismatchError
from .imaging import nearest_resize
from .seeding import spawn_rng

SCHEMA_VERSION = 1
GENERATOR_VERSION = "1"

DEFAULT_IMAGE_SIZE = 128
NUM_POSITIONS = 6
MAX_BATTERIES = 2

AMBIENT_C = 22.0
WARMTH_MAX_C = 8.0
RUNAWAY_THRESHOLD_C = 35.0
TEMP_CLAMP_C = (15.0, 120.0)
PEAK_TEMP_RANGE_C = (40.0, 90.0)
HEAT_RADIUS_FRAC = (0.05, 0.15)
SMOKE_INTENSITY_RANGE = (0.4, 1.0)
SMOKE_EXTENT_FRAC = (0.18, 0.38)


@dataclass
class HeatSource:
    position: int
    radius: float
    peak_temp: float


@dataclass
class SmokeSource:
    position: int
    intensity: float
    extent: float


@dataclass
class SceneConfig:
    occupied: tuple
    runaway: bool
    heat: HeatSource = None
    smoke: SmokeSource = None
    seed: int = 0

    def validate(self):
        occ = tuple(self.occupied)
        if not 1 <= len(occ) <= MAX_BATTERIES:
            raise ValueError(f"occupied positions must number 1..{MAX_BATTERIES}, got {occ}")
        if len(set(occ)) != len(occ):
            raise ValueError(f"duplicate occupied positions: {occ}")
        if any(not 0 <= p < NUM_POSITIONS for p in occ):
            raise ValueError(f"positions must lie in 0..{NUM_POSITIONS - 1}, got {occ}")
        if self.runaway:
            if self.heat is None or self.smoke is None:
                raise ValueError("runaway scenes need both a heat and a smoke source")
            if self.heat.position not in occ:
                raise ValueError(
                    f"heat source at position {self.heat.position} but occupied = {occ}"
                )
            if self.heat.peak_temp <= RUNAWAY_THRESHOLD_C:
                raise ValueError(
                    f"runaway peak {self.heat.peak_temp} must exceed {RUNAWAY_THRESHOLD_C}"
                )
            if not 0.0 <= self.smoke.intensity <= 1.0:
                raise ValueError(f"smoke intensity {self.smoke.intensity} outside [0, 1]")
        else:
            if self.heat is not None or self.smoke is not None:
                raise ValueError("baseline scenes must not carry heat or smoke sources")
        return self

    def to_dict(self):
        d = {"occupied": list(self.occupied), "runaway": self.runaway, "seed": self.seed}
        if self.heat is not None:
            d["heat"] = {
                "position": self.heat.position,
                "radius": self.heat.radius,
                "peak_temp": self.heat.peak_temp,
            }
        if self.smoke is not None:
            d["smoke"] = {
                "position": self.smoke.position,
                "intensity": self.smoke.intensity,
                "extent": self.smoke.extent,
            }
        return d

    @staticmethod
    def from_dict(d):
        heat = HeatSource(**d["heat"]) if "heat" in d else None
        smoke = SmokeSource(**d["smoke"]) if "smoke" in d else None
        return SceneConfig(
            occupied=tuple(d["occupied"]),
            runaway=d["runaway"],
            heat=heat,
            smoke=smoke,
            seed=d["seed"],
        )


@dataclass
class Sample:
    sample_id: str
    optical: np.ndarray  # (3, H, W) float32 in [0, 1]
    infrared: np.ndarray  # (H, W) float32 Celsius
    label: int
    split: str = "unassigned"
    provenance: dict = field(default_factory=dict)


@dataclass
class Dataset:
    samples: list
    image_size: int
    root_seed: int = None
    generator_version: str = GENERATOR_VERSION

    def __len__(self):
        return len(self.samples)

    def by_id(self, sample_id):
        for s in self.samples:
            if s.sample_id == sample_id:
                return s
        raise KeyError(sample_id)

    def subset(self, ids):
        ids = set(ids)
        return Dataset(
            samples=[s for s in self.samples if s.sample_id in ids],
            image_size=self.image_size,
            root_seed=self.root_seed,
            generator_version=self.generator_version,
        )


# ---------------------------------------------------------------------------
# configuration enumeration and scene geometry
# ---------------------------------------------------------------------------


def enumerate_configurations(n_positions=NUM_POSITIONS, max_batteries=MAX_BATTERIES):
    """All occupied-position subsets of size 1..max_batteries, size-major
    then lexicographic. (6, 2) yields the 21 housing configurations."""
    if not 1 <= max_batteries <= n_positions:
        raise ValueError(f"need 1 <= max_batteries <= n_positions, got {max_batteries}, {n_positions}")
    subsets = []
    for k in range(1, max_batteries + 1):
        subsets.extend(itertools.combinations(range(n_positions), k))
    return subsets


def position_centers(image_size):
    """Pixel centers (row, col) of the six battery slots, plus cell size."""
    h = w = int(image_size)
    my, mx = round(0.08 * h), round(0.08 * w)
    cell_h = (h - 2 * my) / 2.0
    cell_w = (w - 2 * mx) / 3.0
    centers = []
    for r in range(2):
        for c in range(3):
            cy = int(round(my + (r + 0.5) * cell_h))
            cx = int(round(mx + (c + 0.5) * cell_w))
            centers.append((cy, cx))
    return centers, (cell_h, cell_w)


def unit_to_u8(x):
    return np.clip(np.round(x * 255.0), 0, 255).astype(np.uint8)


def u8_to_unit(q):
    return q.astype(np.float32) / np.float32(255.0)


def render_scene(config, image_size):
    """Render one aligned optical/infrared pair from a scene description."""
    config.validate()
    h = w = int(image_size)
    if h <= 0:
        raise ValueError("image size must be positive")
    centers, (cell_h, cell_w) = position_centers(image_size)
    rng = spawn_rng(config.seed, "texture")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    # -- optical ---------------------------------------------------------
    opt = np.empty((3, h, w), dtype=np.float64)
    opt[:] = 0.22
    opt += 0.03 * (yy / max(h - 1, 1))[None, :, :]  # fixed soft lighting gradient

    bh, bw = 0.72 * cell_h, 0.72 * cell_w
    for pos in range(NUM_POSITIONS):
        cy, cx = centers[pos]
        y0, y1 = int(round(cy - cell_h * 0.44)), int(round(cy + cell_h * 0.44))
        x0, x1 = int(round(cx - cell_w * 0.44)), int(round(cx + cell_w * 0.44))
        opt[:, y0:y1, x0:x1] = 0.18  # empty slot recess

    for pos in sorted(config.occupied):
        cy, cx = centers[pos]
        jitter = rng.uniform(-0.05, 0.05)
        y0, y1 = int(round(cy - bh / 2)), int(round(cy + bh / 2))
        x0, x1 = int(round(cx - bw / 2)), int(round(cx + bw / 2))
        body = np.array([0.50, 0.53, 0.58]) + jitter
        opt[:, y0:y1, x0:x1] = body[:, None, None]
        opt[:, y0:y1, x0 : x0 + 1] = 0.10
        opt[:, y0:y1, x1 - 1 : x1] = 0.10
        ty = max(y0 + 1, y0 + int(0.12 * (y1 - y0)))
        opt[:, y0 + 1 : ty + 1, x0 + 1 : x1 - 1] = 0.82  # terminal stripe

    if config.runaway:
        sm = config.smoke
        cy, cx = centers[sm.position]
        alpha_max = 0.2 + 0.6 * sm.intensity
        sy = max(sm.extent / 2.0, 1.0)
        sx = max(sm.extent / 4.0, 1.0)
        py = cy - sm.extent / 2.0  # plume drifts upward from the source
        alpha = alpha_max * np.exp(-(((xx - cx) / sx) ** 2 + ((yy - py) / sy) ** 2) / 2.0)
        opt = opt * (1.0 - alpha[None]) + 0.75 * alpha[None]

    opt = np.clip(opt, 0.0, 1.0)
    optical = u8_to_unit(unit_to_u8(opt))  # lock to PNG-representable values

    # -- infrared --------------------------------------------------------
    warmth = np.zeros((h, w), dtype=np.float64)
    sigma = 0.30 * min(cell_h, cell_w)
    for pos in sorted(config.occupied):
        cy, cx = centers[pos]
        amp = rng.uniform(3.0, WARMTH_MAX_C)
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        warmth = np.maximum(warmth, amp * np.exp(-d2 / (2.0 * sigma * sigma)))
    temp = AMBIENT_C + warmth

    if config.runaway:
        ht = config.heat
        cy, cx = centers[ht.position]
        if not (0 <= cy < h and 0 <= cx < w):
            raise ValueError(f"heat center {(cy, cx)} outside {h}x{w} image")
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        blob = AMBIENT_C + (ht.peak_temp - AMBIENT_C) * np.exp(-d2 / (ht.radius**2))
        temp = np.maximum(temp, blob)

    temp = np.clip(temp, *TEMP_CLAMP_C)
    infrared = temp.astype(np.float32)

    label = int(config.runaway)
    return Sample(
        sample_id="",
        optical=optical,
        infrared=infrared,
        label=label,
        provenance={"kind": "synthetic", "scene": config.to_dict()},
    )


def build_scene_configs(root_seed, n_baseline, n_runaway, image_size):
    """Scene configs for a full dataset: baselines cycle the 21 housing
    configurations evenly; runaway scenes additionally draw heat-source
    size/temperature and smoke parameters per sample."""
    if n_baseline < 0 or n_runaway < 0 or n_baseline + n_runaway == 0:
        raise ValueError("sample counts must be non-negative and not both zero")
    h = int(image_size)
    if h <= 0:
        raise ValueError("image size must be positive")
    combos = enumerate_configurations()
    configs = []
    for i in range(n_baseline + n_runaway):
        rng = spawn_rng(root_seed, "sample", i)
        seed = int(rng.integers(0, 2**63))
        if i < n_baseline:
            occ = combos[i % len(combos)]
            configs.append(SceneConfig(occupied=occ, runaway=False, seed=seed))
        else:
            j = i - n_baseline
            occ = combos[j % len(combos)]
            pos = int(occ[rng.integers(0, len(occ))])
            heat = HeatSource(
                position=pos,
                radius=float(rng.uniform(*HEAT_RADIUS_FRAC) * h),
                peak_temp=float(rng.uniform(*PEAK_TEMP_RANGE_C)),
            )
            smoke = SmokeSource(
                position=pos,
                intensity=float(rng.uniform(*SMOKE_INTENSITY_RANGE)),
                extent=float(rng.uniform(*SMOKE_EXTENT_FRAC) * h),
            )
            configs.append(
                SceneConfig(occupied=occ, runaway=True, heat=heat, smoke=smoke, seed=seed)
            )
    return configs


def generate_dataset(root_seed, n_baseline, n_runaway, image_size):
    """Render the full synthetic dataset in memory (baselines first)."""
    configs = build_scene_configs(root_seed, n_baseline, n_runaway, image_size)
    samples = []
    for i, config in enumerate(configs):
        s = render_scene(config, image_size)
        s.sample_id = f"syn-{i:06d}"
        samples.append(s)
    return Dataset(samples=samples, image_size=int(image_size), root_seed=int(root_seed))


# ---------------------------------------------------------------------------
# manifest I/O
# ---------------------------------------------------------------------------


def save_dataset(dataset, out_dir):
    """Write images plus manifest.json; returns the manifest path."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in dataset.samples:
        opt_rel = f"images/{s.sample_id}_opt.png"
        ir_rel = f"images/{s.sample_id}_ir.npy"
        arr = unit_to_u8(s.optical).transpose(1, 2, 0)
        Image.fromarray(arr, mode="RGB").save(out_dir / opt_rel)
        np.save(out_dir / ir_rel, s.infrared.astype(np.float32))
        entries.append(
            {
                "id": s.sample_id,
                "label": int(s.label),
                "split": s.split,
                "optical": opt_rel,
                "infrared": ir_rel,
                "provenance": s.provenance,
            }
        )
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "image_size": dataset.image_size,
        "generator_version": dataset.generator_version,
        "root_seed": dataset.root_seed,
        "entries": entries,
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def load_manifest(path):
    """Load a manifest and all referenced images into a Dataset."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(path)
    try:
        with open(path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise ManifestError(f"malformed manifest {path}: {e}") from e
    if not isinstance(manifest, dict) or "schema_version" not in manifest:
        raise ManifestError(f"manifest {path} lacks a schema_version")
    if manifest["schema_version"] != SCHEMA_VERSION:
        raise ManifestError(
            f"unsupported manifest schema {manifest['schema_version']} (reader supports {SCHEMA_VERSION})"
        )
    for key in ("image_size", "entries"):
        if key not in manifest:
            raise ManifestError(f"manifest {path} missing field {key!r}")

    base = path.parent
    size = int(manifest["image_size"])
    samples = []
    seen = set()
    for e in manifest["entries"]:
        if e["id"] in seen:
            raise ManifestError(f"duplicate sample id {e['id']!r}")
        seen.add(e["id"])
        opt_path = base / e["optical"]
        ir_path = base / e["infrared"]
        if not opt_path.exists():
            raise MissingFileError(opt_path)
        if not ir_path.exists():
            raise MissingFileError(ir_path)
        q = np.asarray(Image.open(opt_path).convert("RGB")).transpose(2, 0, 1)
        optical = u8_to_unit(q)
        infrared = np.load(ir_path).astype(np.float32)
        if optical.shape[1:] != (size, size):
            raise SizeMismatchError(
                f"{opt_path}: optical is {optical.shape[1:]}, manifest says {(size, size)}"
            )
        if infrared.shape != optical.shape[1:]:
            raise SizeMismatchError(
                f"{e['id']}: infrared {infrared.shape} does not match optical {optical.shape[1:]}"
            )
        samples.append(
            Sample(
                sample_id=e["id"],
                optical=optical,
                infrared=infrared,
                label=int(e["label"]),
                split=e.get("split", "unassigned"),
                provenance=e.get("provenance", {}),
            )
        )
    return Dataset(
        samples=samples,
        image_size=size,
        root_seed=manifest.get("root_seed"),
        generator_version=manifest.get("generator_version", GENERATOR_VERSION),
    )


def ingest_pair(optical_path, infrared_path, label, ir_range=None):
    """Build a Sample from an externally captured optical/infrared file pair.

    The infrared file is either a float .npy already in Celsius or a
    grayscale image mapped onto ``ir_range = (t_min, t_max)``. An infrared
    map smaller or larger than the optical frame is resampled to it by
    nearest neighbour, and the original size is recorded in provenance.
    """
    optical_path, infrared_path = Path(optical_path), Path(infrared_path)
    if not optical_path.exists():
        raise MissingFileError(optical_path)
    if not infrared_path.exists():
        raise MissingFileError(infrared_path)
    q = np.asarray(Image.open(optical_path).convert("RGB")).transpose(2, 0, 1)
    optical = u8_to_unit(q)
    if infrared_path.suffix == ".npy":
        infrared = np.load(infrared_path).astype(np.float32)
    else:
        gray = np.asarray(Image.open(infrared_path).convert("L")).astype(np.float32) / 255.0
        if ir_range is None:
            raise ValueError("ir_range=(t_min, t_max) required for image-format infrared files")
        t_min, t_max = ir_range
        infrared = (t_min + gray * (t_max - t_min)).astype(np.float32)
    provenance = {
        "kind": "external",
        "optical_path": str(optical_path),
        "infrared_path": str(infrared_path),
    }
    if infrared.shape != optical.shape[1:]:
        provenance["ir_resampled_from"] = list(infrared.shape)
        infrared = nearest_resize(infrared, optical.shape[1], optical.shape[2])
    return Sample(
        sample_id="",
        optical=optical,
        infrared=np.ascontiguousarray(infrared, dtype=np.float32),
        label=int(label),
        provenance=provenance,
    )


def ingest_pairs(pairs, ir_range=None):
    """Ingest a list of (optical_path, infrared_path, label) triples."""
    samples = []
    size = None
    for i, (opt, ir, label) in enumerate(pairs):
        s = ingest_pair(opt, ir, label, ir_range=ir_range)
        s.sample_id = f"ext-{i:06d}"
        if size is None:
            size = s.optical.shape[1]
        elif s.optical.shape[1:] != (size, size):
            raise SizeMismatchError(
                f"{opt}: optical {s.optical.shape[1:]} differs from dataset size {(size, size)}"
            )
        samples.append(s)
    return Dataset(samples=samples, image_size=size, root_seed=None)


def heat_blob_box(sample, dilate=None):
    """Bounding box (y0, y1, x0, x1) of a synthetic runaway sample's heat
    blob, dilated by ``dilate`` pixels (defaults to the blob radius)."""
    scene = sample.provenance.get("scene")
    if scene is None or "heat" not in scene:
        raise ValueError(f"sample {sample.sample_id} has no synthetic heat source")
    h, w = sample.infrared.shape
    centers, _ = position_centers(h)
    cy, cx = centers[scene["heat"]["position"]]
    r = scene["heat"]["radius"]
    d = r if dilate is None else dilate
    y0, y1 = max(0, int(np.floor(cy - r - d))), min(h, int(np.ceil(cy + r + d)) + 1)
    x0, x1 = max(0, int(np.floor(cx - r - d))), min(w, int(np.ceil(cx + r + d)) + 1)
    return y0, y1, x0, x1
