"""Volume I/O, preprocessing, the synthetic phantom cohort, and K-fold splits.

Volumes travel as `<name>.vol` (raw little-endian float32 voxels) next to a
`<name>.json` sidecar holding {side, version}. A labeled cohort is a manifest
JSON listing subjects and an optional per-region scalar table (CSV).
"""

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VOLUME_FORMAT_VERSION = 1
MANIFEST_VERSION = 1

POSITIVE = "positive"
CONTROL = "control"

# 34-column cortical parcellation naming scheme for the region table
REGION_NAMES = (
    "temporalpole",
    "bankssts",
    "rostralanteriorcingulate",
    "supramarginal",
    "inferiorparietal",
    "posteriorcingulate",
    "parsopercularis",
    "lateralorbitofrontal",
    "middletemporal",
    "entorhinal",
    "frontalpole",
    "parstriangularis",
    "paracentral",
    "lateraloccipital",
    "parahippocampal",
    "inferiortemporal",
    "pericalcarine",
    "caudalmiddlefrontal",
    "cuneus",
    "lingual",
    "fusiform",
    "superiorfrontal",
    "transversetemporal",
    "superiortemporal",
    "medialorbitofrontal",
    "isthmuscingulate",
    "precuneus",
    "caudalanteriorcingulate",
    "precentral",
    "parsorbitalis",
    "rostralmiddlefrontal",
    "postcentral",
    "insula",
    "superiorparietal",
)

DEFAULT_SALIENT_REGIONS = (3, 15)  # supramarginal, inferiortemporal

# phantom shape constants (relative to volume side)
_BUMP_CENTER = (0.36, 0.62, 0.56)
_BUMP_WIDTH = 0.06
_BUMP_JITTER = 0.025          # per-subject perturbation-site scatter, rel. side
_REGION_NOISE_REL = 0.03     # per-subject area jitter relative to region mean
_REGION_COUPLING = 0.25      # salient-column gain on the subject's bump magnitude
_MULTIPLIER_LOW, _MULTIPLIER_HIGH = 0.5, 1.5
_MULTIPLIER_STD = (_MULTIPLIER_HIGH - _MULTIPLIER_LOW) / math.sqrt(12.0)


class VolumeFormatError(ValueError):
    """Header/payload disagreement in a stored volume."""


class VolumeDataError(ValueError):
    """Non-finite or otherwise unusable voxel data."""


@dataclass
class Volume:
    side: int
    voxels: np.ndarray
    # (original_min, original_max) recorded by preprocess; None before
    value_range: tuple = None

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.shape != (self.side,) * 3:
            raise VolumeFormatError(
                f"volume side {self.side} but voxel block {self.voxels.shape}"
            )


@dataclass
class Subject:
    id: str
    volume: Volume
    label: str

    def __post_init__(self):
        if self.label not in (POSITIVE, CONTROL):
            raise ValueError(f"label must be positive/control, got {self.label!r}")


@dataclass
class LabeledDataset:
    subjects: list
    region_table: np.ndarray = None
    region_names: tuple = REGION_NAMES

    def __post_init__(self):
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise ValueError("subject ids must be unique")
        if self.region_table is not None:
            self.region_table = np.asarray(self.region_table, dtype=np.float64)
            if self.region_table.shape != (len(self.subjects), len(self.region_names)):
                raise ValueError(
                    f"region table {self.region_table.shape} does not match "
                    f"{len(self.subjects)} subjects x {len(self.region_names)} regions"
                )

    @property
    def ids(self):
        return [s.id for s in self.subjects]

    @property
    def labels(self):
        return [s.label for s in self.subjects]

    def volumes(self, label=None):
        return [s.volume for s in self.subjects if label is None or s.label == label]

    def subset(self, indices) -> "LabeledDataset":
        table = self.region_table[list(indices)] if self.region_table is not None else None
        return LabeledDataset(
            [self.subjects[i] for i in indices], table, self.region_names
        )


# ---------------------------------------------------------------------------
# volume files
# ---------------------------------------------------------------------------

def _vol_paths(path):
    p = Path(path)
    if p.suffix == ".vol":
        p = p.with_suffix("")
    return p.with_suffix(".vol"), p.with_suffix(".json")


def save_volume(volume: Volume, path) -> Path:
    vol_path, hdr_path = _vol_paths(path)
    data = np.ascontiguousarray(volume.voxels, dtype="<f4")
    vol_path.write_bytes(data.tobytes())
    hdr_path.write_text(
        json.dumps({"side": volume.side, "version": VOLUME_FORMAT_VERSION}) + "\n"
    )
    return vol_path


def load_volume(path) -> Volume:
    vol_path, hdr_path = _vol_paths(path)
    if not hdr_path.exists():
        raise VolumeFormatError(f"missing sidecar header {hdr_path}")
    header = json.loads(hdr_path.read_text())
    side = int(header["side"])
    raw = vol_path.read_bytes()
    expected = side**3 * 4
    if len(raw) != expected:
        raise VolumeFormatError(
            f"{vol_path}: header side {side} implies {expected} bytes, found {len(raw)}"
        )
    voxels = np.frombuffer(raw, dtype="<f4").reshape(side, side, side).copy()
    if not np.isfinite(voxels).all():
        raise VolumeDataError(f"{vol_path}: non-finite voxels")
    return Volume(side=side, voxels=voxels)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def _resample_axis(arr, axis, src, target):
    if target == src:
        return arr
    if src == 1:
        reps = [1] * arr.ndim
        reps[axis] = target
        return np.tile(arr, reps)
    c = np.linspace(0.0, src - 1.0, target)
    i0 = np.clip(np.floor(c).astype(int), 0, src - 2)
    frac = c - i0
    lo = np.take(arr, i0, axis=axis)
    hi = np.take(arr, i0 + 1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = target
    w = frac.reshape(shape)
    return lo * (1.0 - w) + hi * w


def preprocess(volume: Volume, target_side: int) -> Volume:
    """Min-max normalize to [0,1], then trilinear-resample to target_side.

    Sample points are corner-aligned, so same-size resampling is exact
    identity. A constant volume maps to all zeros.
    """
    if target_side < 2:
        raise ValueError(f"target_side must be >= 2, got {target_side}")
    v = volume.voxels.astype(np.float64)
    vmin, vmax = float(v.min()), float(v.max())
    if vmax > vmin:
        v = (v - vmin) / (vmax - vmin)
    else:
        v = np.zeros_like(v)
    for axis in range(3):
        v = _resample_axis(v, axis, v.shape[axis], target_side)
    return Volume(
        side=target_side,
        voxels=v.astype(np.float32),
        value_range=(vmin, vmax),
    )


def preprocess_dataset(dataset: "LabeledDataset", target_side: int) -> "LabeledDataset":
    """Apply preprocess to every subject; region table rides along."""
    subjects = [
        Subject(id=s.id, volume=preprocess(s.volume, target_side), label=s.label)
        for s in dataset.subjects
    ]
    return LabeledDataset(subjects, dataset.region_table, dataset.region_names)


# ---------------------------------------------------------------------------
# phantom cohort
# ---------------------------------------------------------------------------

@dataclass
class PhantomConfig:
    n_positive: int = 42
    n_control: int = 36
    side: int = 64
    shared_structure_scale: float = 1.0
    salient_amplitude: float = 0.6
    salient_region_indices: tuple = DEFAULT_SALIENT_REGIONS
    noise_sigma: float = 0.05
    site_scatter: float = _BUMP_JITTER
    site_width: float = _BUMP_WIDTH
    seed: int = 0


def generate_phantoms(config: PhantomConfig) -> LabeledDataset:
    """Deterministic synthetic cohort.

    Every subject is a jittered ellipsoidal blob plus voxel noise; positive
    subjects additionally carry a localized Gaussian thinning, anchored to
    the subject's anatomy with a small per-subject scatter, whose depth is
    salient_amplitude times a per-subject multiplier. Region
    columns listed in salient_region_indices receive an additive component
    proportional to that same thinning magnitude for positives, and
    zero-centered noise of matched scale for controls. salient_amplitude == 0
    makes the two classes identical in law.
    """
    if config.n_positive < 1 or config.n_control < 1:
        raise ValueError(
            f"need at least one subject per class, got "
            f"{config.n_positive}/{config.n_control}"
        )
    bad = [r for r in config.salient_region_indices if not 0 <= r < len(REGION_NAMES)]
    if bad:
        raise ValueError(f"salient region indices out of range: {bad}")
    side = config.side
    sss = config.shared_structure_scale
    rng = np.random.default_rng(config.seed)
    region_base = rng.uniform(1500.0, 3500.0, len(REGION_NAMES))

    grid = np.arange(side, dtype=np.float64)
    gx = grid[:, None, None]
    gy = grid[None, :, None]
    gz = grid[None, None, :]
    bump_nominal = np.array(_BUMP_CENTER) * side

    subjects = []
    rows = []
    n_total = config.n_positive + config.n_control
    for i in range(n_total):
        label = POSITIVE if i < config.n_positive else CONTROL
        center = side / 2.0 + rng.normal(0.0, 0.02 * side * sss, 3)
        radii = side * (0.33 + 0.04 * sss * rng.uniform(-1.0, 1.0, 3))
        gain = 0.8 + 0.12 * sss * rng.uniform(-1.0, 1.0)
        multiplier = rng.uniform(_MULTIPLIER_LOW, _MULTIPLIER_HIGH)
        q = (
            ((gx - center[0]) / radii[0]) ** 2
            + ((gy - center[1]) / radii[1]) ** 2
            + ((gz - center[2]) / radii[2]) ** 2
        )
        # soft ellipsoid shell with a mild radial falloff inside
        vox = gain / (1.0 + np.exp((q - 1.0) / 0.1)) * (1.0 - 0.2 * np.minimum(q, 1.0))
        magnitude = config.salient_amplitude * multiplier
        # the perturbation site rides the subject's anatomy and scatters a
        # little on top; controls draw the same variates so the two classes
        # share one sampling law whenever the amplitude is zero
        site = bump_nominal + (center - side / 2.0) + rng.normal(
            0.0, config.site_scatter * side, 3
        )
        if label == POSITIVE:
            bump_r2 = (
                (gx - site[0]) ** 2
                + (gy - site[1]) ** 2
                + (gz - site[2]) ** 2
            )
            bump_profile = np.exp(-bump_r2 / (2.0 * (config.site_width * side) ** 2))
            # thinning is multiplicative: an additive bump would raise the
            # volume maximum for positives only, and min-max scaling would
            # then leak class membership into every voxel
            vox = vox * np.clip(1.0 - magnitude * bump_profile, 0.0, None)
        vox = vox + config.noise_sigma * rng.standard_normal((side, side, side))

        row = region_base + _REGION_NOISE_REL * region_base * rng.standard_normal(
            len(REGION_NAMES)
        )
        for r in config.salient_region_indices:
            if label == POSITIVE:
                row[r] += _REGION_COUPLING * region_base[r] * magnitude
            else:
                row[r] += (
                    _REGION_COUPLING
                    * region_base[r]
                    * config.salient_amplitude
                    * _MULTIPLIER_STD
                    * rng.standard_normal()
                )
        rows.append(row)

        tag = "pos" if label == POSITIVE else "ctl"
        idx = i if label == POSITIVE else i - config.n_positive
        subjects.append(
            Subject(
                id=f"{tag}{idx:03d}",
                volume=Volume(side=side, voxels=vox.astype(np.float32)),
                label=label,
            )
        )
    return LabeledDataset(subjects, np.array(rows))


# ---------------------------------------------------------------------------
# K-fold splits
# ---------------------------------------------------------------------------

def split_kfold(n: int, k: int, labels, seed: int):
    """Stratified K-fold: list of (train_indices, test_indices) pairs."""
    if not 2 <= k <= n:
        raise ValueError(f"need 2 <= k <= n, got k={k}, n={n}")
    if len(labels) != n:
        raise ValueError(f"{len(labels)} labels for n={n}")
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    for cls in sorted(set(labels)):
        idx = np.array([i for i, lab in enumerate(labels) if lab == cls])
        if len(idx) < k:
            warnings.warn(
                f"class {cls!r} has {len(idx)} members for {k} folds; "
                "some folds will lack it"
            )
        rng.shuffle(idx)
        base, extra = divmod(len(idx), k)
        start = 0
        for f in range(k):
            size = base + (1 if f < extra else 0)
            folds[f].extend(idx[start : start + size])
            start += size
    splits = []
    for f in range(k):
        held = set(folds[f])
        test = np.sort(np.array(folds[f], dtype=int))
        train = np.array([i for i in range(n) if i not in held], dtype=int)
        splits.append((train, test))
    return splits


# ---------------------------------------------------------------------------
# dataset persistence
# ---------------------------------------------------------------------------

def write_region_csv(path, ids, table, region_names=REGION_NAMES):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id"] + list(region_names))
        for sid, row in zip(ids, np.asarray(table)):
            writer.writerow([sid] + [repr(float(v)) for v in row])


def read_region_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != "subject_id":
            raise ValueError(f"{path}: first column must be subject_id")
        names = tuple(header[1:])
        ids, rows = [], []
        for record in reader:
            ids.append(record[0])
            rows.append([float(v) for v in record[1:]])
    return ids, np.array(rows), names


def save_dataset(dataset: LabeledDataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in dataset.subjects:
        rel = f"volumes/{s.id}.vol"
        save_volume(s.volume, out / rel)
        entries.append({"id": s.id, "label": s.label, "volume": rel})
    manifest = {"version": MANIFEST_VERSION, "subjects": entries, "region_table": None}
    if dataset.region_table is not None:
        write_region_csv(
            out / "regions.csv", dataset.ids, dataset.region_table, dataset.region_names
        )
        manifest["region_table"] = "regions.csv"
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_dataset(path) -> LabeledDataset:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    root = p.parent
    manifest = json.loads(p.read_text())
    subjects = [
        Subject(
            id=e["id"],
            volume=load_volume(root / e["volume"]),
            label=e["label"],
        )
        for e in manifest["subjects"]
    ]
    table = None
    names = REGION_NAMES
    if manifest.get("region_table"):
        ids, table, names = read_region_csv(root / manifest["region_table"])
        if ids != [s.id for s in subjects]:
            raise ValueError("region table subject order does not match manifest")
    return LabeledDataset(subjects, table, names)
