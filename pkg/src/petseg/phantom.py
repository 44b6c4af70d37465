"""Procedural brain phantoms: label maps, simulated amyloid PET, cohorts.

Geometry lives in a normalised template frame ``u in [-1, 1]^3`` with axes
(z: inferior->superior, y: posterior->anterior, x: right->left). Each
subject's voxel grid is mapped into that frame through a small random
affine, so anatomy shifts slightly between subjects while the layout of
regions stays the same.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .regions import NUM_REGIONS, RegionTable, default_table
from .volume_io import LabelMap, Volume, read_nifti, validate_pair, write_nifti

FWHM_TO_SIGMA = 1.0 / 2.3548
MIN_EXTENT = 32

# SUV per region id 1..30 for an amyloid-negative subject. All cortical
# sectors and cerebellar grey share 1.0, so they can only be told apart by
# position, and both white matters share 1.6. The deep structures sit at
# least 0.3 SUV away from white matter and from their neighbours, so with
# the default noise (0.1) and blur their outlines remain visible.
DEFAULT_UPTAKE = (
    1.6, 1.6, 2.1, 2.5, 2.2, 0.7, 2.4, 0.6, 0.55, 2.0,
    1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0,
    1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.3,
)

CORTICAL_IDS = tuple(range(12, 30))

# (region id, centre z/y/x, radii z/y/x, bilateral) in template units,
# painted in order after cortex and white matter.
_DEEP_STRUCTURES = (
    (3, (-0.50, -0.10, 0.00), (0.38, 0.16, 0.15), False),  # brain stem
    (5, (0.02, -0.12, 0.14), (0.14, 0.17, 0.11), True),  # thalamus
    (6, (0.18, 0.22, 0.17), (0.13, 0.16, 0.08), True),  # caudate + accumbens
    (7, (0.00, 0.12, 0.34), (0.18, 0.20, 0.09), True),  # putamen
    (8, (0.00, 0.08, 0.21), (0.13, 0.14, 0.07), True),  # pallidum
    (9, (-0.22, -0.18, 0.38), (0.10, 0.24, 0.09), True),  # hippocampus
    (10, (-0.22, 0.16, 0.36), (0.13, 0.13, 0.11), True),  # amygdala
    (30, (0.22, 0.00, 0.07), (0.12, 0.32, 0.06), True),  # lateral ventricles
    (4, (0.40, 0.00, 0.00), (0.06, 0.45, 0.28), False),  # corpus callosum
)

_HEAD_RADII = (0.94, 0.96, 0.88)
_BRAIN_CENTRE = (0.06, 0.0, 0.0)
_BRAIN_RADII = (0.78, 0.86, 0.74)
_CORTEX_INNER = 0.62  # normalised radius where cortex begins
_CEREBELLUM_CENTRE = (-0.50, -0.50, 0.0)
_CEREBELLUM_RADII = (0.26, 0.30, 0.52)
_CEREBELLUM_CORE = 0.62


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    n_regions: int = NUM_REGIONS
    uptake_mean: tuple[float, ...] = DEFAULT_UPTAKE
    scalp_uptake: float = 0.4
    cortical_uplift: float = 0.6
    noise_sigma: float = 0.1
    smooth_fwhm_vox: float = 2.0
    jitter_rotation_deg: float = 4.0
    jitter_scale: float = 0.04
    jitter_shift_vox: float = 1.5
    jitter_sector_deg: float = 6.0
    seed: int = 0
    region_table: RegionTable = field(default_factory=default_table, compare=False, repr=False)

    def __post_init__(self):
        if len(self.dims) != 3 or any(d % 8 for d in self.dims):
            raise ValueError(f"phantom dims must be three multiples of 8, got {self.dims}")
        if self.n_regions != NUM_REGIONS or len(self.uptake_mean) != NUM_REGIONS:
            raise ValueError(f"phantom needs exactly {NUM_REGIONS} regions and uptake means")
        if min(self.uptake_mean) <= 0:
            raise ValueError("uptake means must be positive")
        if self.cortical_uplift < 0 or self.noise_sigma < 0 or self.smooth_fwhm_vox < 0:
            raise ValueError("cortical_uplift, noise_sigma and smooth_fwhm_vox must be >= 0")
        if self.jitter_sector_deg < 0:
            raise ValueError("jitter_sector_deg must be >= 0")


@dataclass
class SubjectRecord:
    id: str
    pet: Volume
    labels: LabelMap
    amyloid_positive: bool

    def __post_init__(self):
        validate_pair(self.pet, self.labels)


def _sector_directions(seed: int, target_ids) -> tuple[np.ndarray, tuple[int, ...]]:
    """Evenly spread unit vectors on the x >= 0 hemisphere, one per cortical id.

    Target-composite ids take the directions closest to the anterior pole so
    that they form one contiguous cap; a compact union keeps blur from
    bleeding much of the positive-subject uplift into neighbouring sectors.
    Ids are shuffled within the target and non-target groups.
    """
    n = len(CORTICAL_IDS)
    golden = math.pi * (3.0 - math.sqrt(5.0))
    i = np.arange(n)
    x = (i + 0.5) / n
    r = np.sqrt(1.0 - x * x)
    theta = i * golden
    dirs = np.stack([r * np.cos(theta), r * np.sin(theta), x], axis=1)  # z, y, x
    by_anterior = np.argsort(-dirs[:, 1], kind="stable")
    rng = np.random.default_rng([seed, 7])
    targets = [c for c in CORTICAL_IDS if c in target_ids]
    others = [c for c in CORTICAL_IDS if c not in target_ids]
    ranked = [targets[j] for j in rng.permutation(len(targets))] + [others[j] for j in rng.permutation(len(others))]
    ids = [0] * n
    for rank, d in enumerate(by_anterior):
        ids[d] = ranked[rank]
    return dirs, tuple(ids)


def _template_coords(spec: PhantomSpec, subject_seed: int) -> np.ndarray:
    """Template-frame coordinates of every voxel, shape (3, D, H, W)."""
    rng = np.random.default_rng([spec.seed, subject_seed, 0])
    dims = np.asarray(spec.dims, dtype=np.float64)
    half = dims / 2.0
    angles = np.deg2rad(rng.uniform(-1, 1, 3) * spec.jitter_rotation_deg)
    scale = 1.0 + rng.uniform(-1, 1, 3) * spec.jitter_scale
    shift = rng.uniform(-1, 1, 3) * spec.jitter_shift_vox / half

    cz, sz = math.cos(angles[0]), math.sin(angles[0])
    cy, sy = math.cos(angles[1]), math.sin(angles[1])
    cx, sx = math.cos(angles[2]), math.sin(angles[2])
    rz = np.array([[1, 0, 0], [0, cz, -sz], [0, sz, cz]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[cx, -sx, 0], [sx, cx, 0], [0, 0, 1]])
    # subject = R @ diag(scale) @ template + shift  =>  template = inverse map
    fwd = rz @ ry @ rx @ np.diag(scale)
    inv = np.linalg.inv(fwd)

    grid = np.stack(
        np.meshgrid(*[(np.arange(n) + 0.5 - h) / h for n, h in zip(spec.dims, half)], indexing="ij")
    )
    pts = grid.reshape(3, -1) - shift[:, None]
    return (inv @ pts).reshape(3, *spec.dims)


def _ellipsoid_radius(u: np.ndarray, centre, radii) -> np.ndarray:
    return np.sqrt(sum(((u[i] - centre[i]) / radii[i]) ** 2 for i in range(3)))


def generate_labelmap(spec: PhantomSpec, subject_seed: int) -> LabelMap:
    """Nested ellipsoids: head, cortical shell split into angular sectors,
    white matter core, cerebellum, deep grey nuclei, ventricles."""
    if min(spec.dims) < MIN_EXTENT:
        raise ValueError(
            f"dims {spec.dims} too small to fit all {NUM_REGIONS} regions; "
            f"minimum is {MIN_EXTENT}x{MIN_EXTENT}x{MIN_EXTENT}"
        )
    u = _template_coords(spec, subject_seed)
    labels = np.zeros(spec.dims, dtype=np.uint8)

    brain_r = _ellipsoid_radius(u, _BRAIN_CENTRE, _BRAIN_RADII)
    brain = brain_r <= 1.0
    labels[brain] = 1

    dirs, ids = _sector_directions(spec.seed, set(spec.region_table.target_cortical))
    # parcel boundaries vary between subjects independently of the head pose
    rng = np.random.default_rng([spec.seed, subject_seed, 2])
    dirs = dirs + rng.normal(0.0, np.deg2rad(spec.jitter_sector_deg), dirs.shape)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rel = np.stack([(u[i] - _BRAIN_CENTRE[i]) / _BRAIN_RADII[i] for i in range(3)])
    rel[2] = np.abs(rel[2])  # hemispheres mirror each other
    cortex = brain & (brain_r > _CORTEX_INNER)
    v = rel[:, cortex]
    sector = np.argmax(dirs @ (v / np.linalg.norm(v, axis=0)), axis=0)
    labels[cortex] = np.asarray(ids, dtype=np.uint8)[sector]

    cb_r = _ellipsoid_radius(u, _CEREBELLUM_CENTRE, _CEREBELLUM_RADII)
    labels[cb_r <= 1.0] = 11
    labels[cb_r <= _CEREBELLUM_CORE] = 2

    for rid, centre, radii, bilateral in _DEEP_STRUCTURES:
        sides = (1.0, -1.0) if bilateral else (1.0,)
        for s in sides:
            c = (centre[0], centre[1], s * centre[2])
            labels[_ellipsoid_radius(u, c, radii) <= 1.0] = rid

    return LabelMap(labels)


def _blur(x: np.ndarray, fwhm: float) -> np.ndarray:
    if fwhm <= 0:
        return x
    sigma = fwhm * FWHM_TO_SIGMA
    for axis in range(3):
        x = gaussian_filter1d(x, sigma, axis=axis, mode="reflect", truncate=4.0)
    return x


def simulate_pet(labels: LabelMap, spec: PhantomSpec, positive: bool, subject_seed: int) -> Volume:
    """Piecewise-constant uptake, Gaussian blur, additive Gaussian noise, clamp at 0."""
    lut = np.zeros(NUM_REGIONS + 1, dtype=np.float64)
    lut[1:] = spec.uptake_mean
    if positive:
        for rid in spec.region_table.target_cortical:
            lut[rid] += spec.cortical_uplift
    lab = labels.data
    head = _ellipsoid_radius(_template_coords(spec, subject_seed), (0, 0, 0), _HEAD_RADII) <= 1.0
    vol = lut[lab]
    vol[(lab == 0) & head] = spec.scalp_uptake
    vol = _blur(vol, spec.smooth_fwhm_vox)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng([spec.seed, subject_seed, 1])
        vol = vol + rng.normal(0.0, spec.noise_sigma, vol.shape)
    np.maximum(vol, 0.0, out=vol)
    return Volume(vol.astype(np.float32), labels.spacing_mm)


def count_positives(n: int, prevalence: float) -> int:
    """``round(n * prevalence)`` with halves rounded up."""
    return int(math.floor(n * prevalence + 0.5))


def generate_cohort(n: int, prevalence: float, spec: PhantomSpec, seed: int) -> list[SubjectRecord]:
    if n < 1:
        raise ValueError(f"cohort size must be >= 1, got {n}")
    if not 0.0 <= prevalence <= 1.0:
        raise ValueError(f"prevalence must lie in [0, 1], got {prevalence}")
    rng = np.random.default_rng(seed)
    subject_seeds = rng.integers(0, 2**31 - 1, size=n)
    positive = np.zeros(n, dtype=bool)
    positive[rng.permutation(n)[: count_positives(n, prevalence)]] = True
    cohort = []
    for i in range(n):
        s = int(subject_seeds[i])
        labels = generate_labelmap(spec, s)
        pet = simulate_pet(labels, spec, bool(positive[i]), s)
        cohort.append(SubjectRecord(f"sub-{i + 1:04d}", pet, labels, bool(positive[i])))
    return cohort


# manifest: one subject per line, tab-separated
#   id  pet-path  label-path  positive-flag(0|1)
# paths are relative to the manifest's directory unless absolute


def save_cohort(cohort: list[SubjectRecord], out_dir, manifest_name: str = "manifest.tsv") -> Path:
    """Write ``<id>_pet.nii`` / ``<id>_seg.nii`` per subject plus the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in cohort:
        pet_name, seg_name = f"{s.id}_pet.nii", f"{s.id}_seg.nii"
        write_nifti(s.pet, out / pet_name)
        write_nifti(s.labels, out / seg_name)
        lines.append(f"{s.id}\t{pet_name}\t{seg_name}\t{int(s.amyloid_positive)}")
    path = out / manifest_name
    path.write_text("\n".join(lines) + "\n")
    return path


def load_manifest(path) -> list[SubjectRecord]:
    path = Path(path)
    base = path.parent
    subjects = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4 or parts[3] not in ("0", "1"):
            raise ValueError(f"{path}:{lineno}: expected 'id<TAB>pet<TAB>labels<TAB>0|1'")
        sid, pet_path, seg_path, flag = parts
        pet = read_nifti(base / pet_path)
        labels = read_nifti(base / seg_path)
        if not isinstance(pet, Volume):
            pet = Volume(pet.data.astype(np.float32), pet.spacing_mm, pet.orientation)
        if not isinstance(labels, LabelMap):
            raise ValueError(f"{path}:{lineno}: {seg_path} is not a label map")
        subjects.append(SubjectRecord(sid, pet, labels, flag == "1"))
    return subjects
