"""Deterministic synthetic 2-D segmentation tasks.

Two task families, both disk-based so ground truth is exact:

* binary: every image holds one disk; "grade-a" disks are bright and large,
  "grade-b" disks dimmer and smaller, so a per-pixel model can tell the two
  cohorts apart by intensity alone.
* multiclass: a core disk, a shell ring around it, and a separate satellite
  disk, each with its own intensity band; "phase-b" samples shrink all radii
  by a fixed factor.

Partial-labeling corruption zeroes ground-truth maps for a targeted tag or
class, either leaving availability untouched (empty-label regime) or marking
the class unavailable (missing-label regime).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import InvalidConfigError, InvalidParamsError, ShapeMismatchError, TargetNotFoundError
from .tensor import Shape, _wrap, read_tensor, write_tensor

GRADE_A = "grade-a"
GRADE_B = "grade-b"
PHASE_A = "phase-a"
PHASE_B = "phase-b"

MANIFEST_NAME = "manifest.json"
MANIFEST_SCHEMA = 1


class PartialAction(Enum):
    """How a targeted ground-truth map is corrupted."""

    EMPTY_MAP = "empty-map"            # zero the map, availability stays true
    MARK_UNAVAILABLE = "mark-unavailable"  # zero the map and flag it unavailable


@dataclass(frozen=True)
class PartialPolicy:
    """Selects samples by tag and/or a class column, and says how to corrupt them."""

    action: PartialAction
    tag: str | None = None
    class_index: int | None = None


@dataclass(frozen=True)
class SyntheticSample:
    subject_id: int
    tag: str
    image: np.ndarray        # (N, N) intensities in [0, 1]
    gt: np.ndarray           # (C, N, N) binary maps, disjoint across classes
    availability: np.ndarray  # (C,) bool

    def __post_init__(self):
        if self.image.ndim != 2 or self.gt.ndim != 3:
            raise ShapeMismatchError("image must be 2-D and gt 3-D")
        if self.gt.shape[1:] != self.image.shape:
            raise ShapeMismatchError(
                f"gt maps {self.gt.shape[1:]} do not match image {self.image.shape}"
            )
        if self.availability.shape != (self.gt.shape[0],):
            raise ShapeMismatchError("availability must have one flag per class")
        for name in ("image", "gt", "availability"):
            arr = np.ascontiguousarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_classes(self) -> int:
        return self.gt.shape[0]


@dataclass(frozen=True)
class SyntheticDataset:
    task: str
    class_names: tuple[str, ...]
    image_size: int
    samples: tuple[SyntheticSample, ...]
    origin: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def tags(self) -> set[str]:
        return {s.tag for s in self.samples}


@dataclass(frozen=True)
class BinaryTaskParams:
    image_size: int = 32
    n_grade_a: int = 30
    n_grade_b: int = 10
    intensity_a: tuple[float, float] = (0.72, 0.9)
    intensity_b: tuple[float, float] = (0.5, 0.6)
    radius_a: tuple[float, float] = (4.0, 7.0)
    radius_b: tuple[float, float] = (3.0, 5.0)
    background_level: float = 0.05
    noise_sigma: float = 0.02


@dataclass(frozen=True)
class MulticlassTaskParams:
    image_size: int = 48
    n_phase_a: int = 30
    n_phase_b: int = 10
    core_radius: tuple[float, float] = (4.0, 7.0)
    shell_width: tuple[float, float] = (2.0, 3.5)
    satellite_radius: tuple[float, float] = (3.0, 5.0)
    phase_b_shrink: float = 0.8
    core_intensity: tuple[float, float] = (0.75, 0.9)
    shell_intensity: tuple[float, float] = (0.5, 0.65)
    satellite_intensity: tuple[float, float] = (0.3, 0.45)
    background_level: float = 0.1
    noise_sigma: float = 0.03
    center_jitter: float = 1.5


def _check_range(name: str, rng: tuple[float, float], lo: float = 0.0, hi: float = 1.0):
    a, b = rng
    if not (lo <= a <= b <= hi):
        raise InvalidParamsError(f"{name} must satisfy {lo} <= low <= high <= {hi}, got {rng}")


def _check_common(p) -> None:
    if p.image_size < 16:
        raise InvalidParamsError(f"image_size must be >= 16, got {p.image_size}")
    if p.noise_sigma < 0:
        raise InvalidParamsError(f"noise_sigma must be >= 0, got {p.noise_sigma}")
    if not 0.0 <= p.background_level <= 1.0:
        raise InvalidParamsError(f"background_level must be in [0, 1], got {p.background_level}")


def _validate_binary(p: BinaryTaskParams) -> None:
    _check_common(p)
    if p.n_grade_a < 1 or p.n_grade_b < 1:
        raise InvalidParamsError("need at least one sample per grade")
    _check_range("intensity_a", p.intensity_a)
    _check_range("intensity_b", p.intensity_b)
    for name, rng in (("radius_a", p.radius_a), ("radius_b", p.radius_b)):
        _check_range(name, rng, lo=1.0, hi=p.image_size / 2.0 - 2.0)


def _validate_multiclass(p: MulticlassTaskParams) -> None:
    _check_common(p)
    if p.n_phase_a < 1 or p.n_phase_b < 1:
        raise InvalidParamsError("need at least one sample per phase")
    if not 0.0 < p.phase_b_shrink <= 1.0:
        raise InvalidParamsError(f"phase_b_shrink must be in (0, 1], got {p.phase_b_shrink}")
    for name, rng in (("core_intensity", p.core_intensity),
                      ("shell_intensity", p.shell_intensity),
                      ("satellite_intensity", p.satellite_intensity)):
        _check_range(name, rng)
    n = p.image_size
    j = p.center_jitter
    outer_hi = p.core_radius[1] + p.shell_width[1]
    sat_hi = p.satellite_radius[1]
    # worst-case extents: structures must fit inside the frame and never touch
    core_right = 0.30 * n + j + outer_hi
    sat_left = 0.75 * n - j - sat_hi
    if core_right + 1.0 > sat_left:
        raise InvalidParamsError("core/shell and satellite ranges may overlap; "
                                 "reduce radii or enlarge image_size")
    if 0.30 * n - j - outer_hi < 1.0 or 0.75 * n + j + sat_hi > n - 2.0:
        raise InvalidParamsError("structures may leave the frame; "
                                 "reduce radii or enlarge image_size")
    if 0.50 * n - j - outer_hi < 1.0 or 0.50 * n + j + outer_hi > n - 2.0:
        raise InvalidParamsError("structures may leave the frame vertically")


def _disk(n: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def _shuffled_tags(counts: list[tuple[str, int]], rng: np.random.Generator) -> list[str]:
    tags = [t for t, k in counts for _ in range(k)]
    rng.shuffle(tags)
    return tags


def generate_binary(params: BinaryTaskParams, seed: int) -> SyntheticDataset:
    """One disk per image; grade decides its intensity band and radius range."""
    _validate_binary(params)
    rng = np.random.default_rng(seed)
    n = params.image_size
    tags = _shuffled_tags([(GRADE_A, params.n_grade_a), (GRADE_B, params.n_grade_b)], rng)
    samples = []
    for sid, tag in enumerate(tags):
        if tag == GRADE_A:
            r = rng.uniform(*params.radius_a)
            level = rng.uniform(*params.intensity_a)
        else:
            r = rng.uniform(*params.radius_b)
            level = rng.uniform(*params.intensity_b)
        margin = r + 1.0
        cx = rng.uniform(margin, n - 1 - margin)
        cy = rng.uniform(margin, n - 1 - margin)
        mask = _disk(n, cx, cy, r)
        image = np.full((n, n), params.background_level)
        image[mask] = level
        image = np.clip(image + params.noise_sigma * rng.standard_normal((n, n)), 0.0, 1.0)
        samples.append(SyntheticSample(
            subject_id=sid,
            tag=tag,
            image=image,
            gt=mask[None, :, :].astype(np.float64),
            availability=np.ones(1, dtype=bool),
        ))
    origin = {"generator": "binary", "seed": int(seed), "params": asdict(params)}
    return SyntheticDataset("binary", ("lesion",), n, tuple(samples), origin)


def generate_multiclass(params: MulticlassTaskParams, seed: int) -> SyntheticDataset:
    """Core disk + shell ring + satellite disk; phase-b shrinks all radii."""
    _validate_multiclass(params)
    rng = np.random.default_rng(seed)
    n = params.image_size
    tags = _shuffled_tags([(PHASE_A, params.n_phase_a), (PHASE_B, params.n_phase_b)], rng)
    j = params.center_jitter
    samples = []
    for sid, tag in enumerate(tags):
        scale = params.phase_b_shrink if tag == PHASE_B else 1.0
        r_core = rng.uniform(*params.core_radius) * scale
        width = rng.uniform(*params.shell_width) * scale
        r_sat = rng.uniform(*params.satellite_radius) * scale
        ccx = 0.30 * n + rng.uniform(-j, j)
        ccy = 0.50 * n + rng.uniform(-j, j)
        scx = 0.75 * n + rng.uniform(-j, j)
        scy = 0.50 * n + rng.uniform(-j, j)
        core = _disk(n, ccx, ccy, r_core)
        shell = _disk(n, ccx, ccy, r_core + width) & ~core
        satellite = _disk(n, scx, scy, r_sat)
        image = np.full((n, n), params.background_level)
        image[core] = rng.uniform(*params.core_intensity)
        image[shell] = rng.uniform(*params.shell_intensity)
        image[satellite] = rng.uniform(*params.satellite_intensity)
        image = np.clip(image + params.noise_sigma * rng.standard_normal((n, n)), 0.0, 1.0)
        samples.append(SyntheticSample(
            subject_id=sid,
            tag=tag,
            image=image,
            gt=np.stack([core, shell, satellite]).astype(np.float64),
            availability=np.ones(3, dtype=bool),
        ))
    origin = {"generator": "multiclass", "seed": int(seed), "params": asdict(params)}
    return SyntheticDataset("multiclass", ("core", "shell", "satellite"), n,
                            tuple(samples), origin)


def apply_partial(dataset: SyntheticDataset, policy: PartialPolicy) -> SyntheticDataset:
    """Corrupt targeted samples' ground truth; untouched samples are shared as-is."""
    if policy.tag is None and policy.class_index is None:
        raise TargetNotFoundError("policy must select a tag, a class index, or both")
    if policy.tag is not None and policy.tag not in dataset.tags():
        raise TargetNotFoundError(f"tag {policy.tag!r} not present in dataset")
    if policy.class_index is not None and not 0 <= policy.class_index < dataset.n_classes:
        raise TargetNotFoundError(
            f"class index {policy.class_index} out of range for {dataset.n_classes} classes"
        )
    columns = ([policy.class_index] if policy.class_index is not None
               else list(range(dataset.n_classes)))
    out = []
    for s in dataset.samples:
        if policy.tag is not None and s.tag != policy.tag:
            out.append(s)
            continue
        gt = s.gt.copy()
        gt[columns] = 0.0
        availability = s.availability.copy()
        if policy.action is PartialAction.MARK_UNAVAILABLE:
            availability[columns] = False
        out.append(SyntheticSample(s.subject_id, s.tag, s.image, gt, availability))
    origin = dict(dataset.origin)
    origin.setdefault("policies", [])
    origin["policies"] = list(origin["policies"]) + [{
        "action": policy.action.value,
        "tag": policy.tag,
        "class_index": policy.class_index,
    }]
    return SyntheticDataset(dataset.task, dataset.class_names, dataset.image_size,
                            tuple(out), origin)


def _sample_filename(subject_id: int) -> str:
    return f"sample_{subject_id:04d}.drt"


def save_dataset(dataset: SyntheticDataset, out_dir) -> Path:
    """Write a manifest plus one tensor file per sample (image row + gt rows)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = dataset.image_size
    entries = []
    for s in dataset.samples:
        packed = np.concatenate([s.image[None, :, :], s.gt], axis=0)
        tensor = _wrap(Shape(1, s.n_classes + 1, n * n), packed.reshape(-1))
        name = _sample_filename(s.subject_id)
        write_tensor(out / name, tensor)
        entries.append({
            "subject_id": s.subject_id,
            "tag": s.tag,
            "availability": [bool(a) for a in s.availability],
            "file": name,
        })
    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "task": dataset.task,
        "class_names": list(dataset.class_names),
        "image_size": n,
        "origin": dataset.origin,
        "samples": entries,
    }
    with open(out / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def load_dataset(path) -> SyntheticDataset:
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise InvalidConfigError(f"no {MANIFEST_NAME} in {root}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != MANIFEST_SCHEMA:
        raise InvalidConfigError(
            f"unsupported dataset schema {manifest.get('schema_version')!r}"
        )
    n = int(manifest["image_size"])
    class_names = tuple(manifest["class_names"])
    samples = []
    for entry in manifest["samples"]:
        tensor = read_tensor(root / entry["file"])
        rows = tensor.data.reshape(tensor.shape.classes, n, n)
        if rows.shape[0] != len(class_names) + 1:
            raise InvalidConfigError(
                f"{entry['file']}: expected {len(class_names) + 1} rows, got {rows.shape[0]}"
            )
        samples.append(SyntheticSample(
            subject_id=int(entry["subject_id"]),
            tag=entry["tag"],
            image=rows[0].copy(),
            gt=rows[1:].copy(),
            availability=np.asarray(entry["availability"], dtype=bool),
        ))
    return SyntheticDataset(manifest["task"], class_names, n, tuple(samples),
                            dict(manifest.get("origin", {})))
