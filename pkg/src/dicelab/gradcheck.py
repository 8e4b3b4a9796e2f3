"""Independent verification of the analytic Dice gradient.

The oracle is a central finite difference of the forward loss, two full
evaluations per element, kept deliberately ignorant of the analytic formula.
A second checker verifies the structural claim that within one reduction
subset the gradient takes at most two distinct values, keyed by the ground
truth bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .epsilon import calibrate_epsilon
from .errors import ShapeMismatchError, StepOutOfRangeError
from .loss import AvailabilityMask, DiceLossConfig, dice_backward, dice_forward
from .tensor import BatchTensor, ReductionScheme, Shape, SubsetSpec, _wrap, enumerate_subsets

DEFAULT_STEP = 1e-5
DEFAULT_RTOL = 1e-5
DEFAULT_ATOL = 1e-9
CLUSTER_TOL = 1e-12


@dataclass(frozen=True)
class GradCheckReport:
    max_abs_err: float
    max_rel_err: float
    worst_index: tuple[int, int, int]
    n_checked: int
    passed: bool


class SubsetClusters(NamedTuple):
    subset_id: int
    n_clusters: int
    values_by_key: dict[int, float]
    passed: bool


@dataclass(frozen=True)
class TwoValueReport:
    subsets: list[SubsetClusters]
    passed: bool


def finite_diff_grad(
    gt: BatchTensor,
    pred: BatchTensor,
    cfg: DiceLossConfig,
    h: float = DEFAULT_STEP,
    mask: AvailabilityMask | None = None,
) -> BatchTensor:
    """Central-difference gradient: (loss(p + h*e) - loss(p - h*e)) / 2h per element."""
    if h <= 0.0:
        raise StepOutOfRangeError(f"step size must be positive, got {h}")
    flat = pred.flat()
    if np.any(flat < h) or np.any(flat > 1.0 - h):
        raise StepOutOfRangeError(
            f"predictions must lie in [{h}, {1.0 - h}] so the stencil stays in range"
        )
    work = pred.data.copy()
    probe = _wrap(pred.shape, work, freeze=False)
    view = probe.data.reshape(-1)
    grad = np.empty(flat.size)
    inv = 1.0 / (2.0 * h)
    for w in range(flat.size):
        origin = view[w]
        view[w] = origin + h
        up = dice_forward(gt, probe, cfg, mask).value
        view[w] = origin - h
        down = dice_forward(gt, probe, cfg, mask).value
        view[w] = origin
        grad[w] = (up - down) * inv
    return _wrap(pred.shape, grad)


def compare_grads(
    analytic: BatchTensor,
    numeric: BatchTensor,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
) -> GradCheckReport:
    """Elementwise comparison; an element passes on either tolerance.

    Relative error uses max(|analytic|, |numeric|, 1e-12) as denominator.
    """
    if analytic.shape != numeric.shape:
        raise ShapeMismatchError(f"shape {analytic.shape} != {numeric.shape}")
    a = analytic.flat()
    n = numeric.flat()
    abs_err = np.abs(a - n)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)
    rel_err = abs_err / denom
    violation = np.minimum(abs_err / atol, rel_err / rtol)
    worst = int(np.argmax(violation))
    passed = bool(violation[worst] <= 1.0)
    b, c, i = np.unravel_index(worst, analytic.shape.as_tuple())
    return GradCheckReport(
        max_abs_err=float(abs_err.max()),
        max_rel_err=float(rel_err.max()),
        worst_index=(int(b), int(c), int(i)),
        n_checked=int(a.size),
        passed=passed,
    )


def check_two_value(
    gt: BatchTensor,
    grad: BatchTensor,
    subsets: Sequence[SubsetSpec],
    tol: float = CLUSTER_TOL,
) -> TwoValueReport:
    """Verify each subset's gradient values form at most two clusters keyed by y."""
    y = gt.flat()
    g = grad.flat()
    entries: list[SubsetClusters] = []
    for s in subsets:
        vals = g[s.members]
        keys = y[s.members]
        values_by_key: dict[int, float] = {}
        keyed_ok = True
        for key in (0, 1):
            kv = vals[keys == float(key)]
            if kv.size:
                if float(kv.max() - kv.min()) > tol:
                    keyed_ok = False
                values_by_key[key] = float(kv[0])
        ordered = np.sort(vals)
        n_clusters = 1 + int(np.count_nonzero(np.diff(ordered) > tol)) if ordered.size else 0
        entries.append(SubsetClusters(
            subset_id=s.id,
            n_clusters=n_clusters,
            values_by_key=values_by_key,
            passed=keyed_ok and n_clusters <= 2,
        ))
    return TwoValueReport(subsets=entries, passed=all(e.passed for e in entries))


ALL_SCHEMES = (
    ReductionScheme.IMAGE_WISE,
    ReductionScheme.CLASS_WISE,
    ReductionScheme.BATCH_WISE,
    ReductionScheme.ALL_WISE,
)
DEFAULT_SHAPES = ((1, 1, 8), (2, 1, 8), (2, 3, 8), (4, 3, 16))
DEFAULT_EPSILONS = ("1e-7", "1", "calibrated")


@dataclass(frozen=True)
class MatrixRecord:
    seed: int
    scheme: ReductionScheme
    epsilon_label: str
    shape: tuple[int, int, int]
    grad_report: GradCheckReport
    two_value_passed: bool


def random_instance(shape: Shape, rng: np.random.Generator,
                    nonempty_subsets: bool = False) -> tuple[BatchTensor, BatchTensor]:
    """Random binary ground truth and predictions in (0.01, 0.99)."""
    y = rng.integers(0, 2, size=shape.size).astype(np.float64)
    if nonempty_subsets:
        cells = y.reshape(shape.batch * shape.classes, shape.voxels)
        for row in cells:
            if not row.any():
                row[rng.integers(0, shape.voxels)] = 1.0
        y = cells.reshape(-1)
    p = rng.uniform(0.01, 0.99, size=shape.size)
    gt = _wrap(shape, y)
    pred = _wrap(shape, p)
    return gt, pred


def resolve_epsilon(label: str, gt: BatchTensor, scheme: ReductionScheme):
    """Turn an epsilon spec into a value: a float literal or 'calibrated' from this gt."""
    if label == "calibrated":
        return calibrate_epsilon([gt], scheme).as_loss_epsilon()
    return float(label)


def run_check_matrix(
    shapes: Sequence[tuple[int, int, int]] = DEFAULT_SHAPES,
    schemes: Sequence[ReductionScheme] = ALL_SCHEMES,
    epsilons: Sequence[str] = DEFAULT_EPSILONS,
    n_instances: int = 100,
    base_seed: int = 0,
    h: float = DEFAULT_STEP,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    perturb: float = 0.0,
) -> list[MatrixRecord]:
    """Run the full analytic-vs-numeric matrix and the two-value check per instance."""
    records: list[MatrixRecord] = []
    case = 0
    for scheme in schemes:
        for dims in shapes:
            shape = Shape(*dims)
            subsets = enumerate_subsets(scheme, shape)
            for eps_label in epsilons:
                for k in range(n_instances):
                    seed = base_seed + 100_000 * case + k
                    rng = np.random.default_rng(seed)
                    # epsilon 0 is only smooth when no subset is entirely empty
                    gt, pred = random_instance(shape, rng,
                                               nonempty_subsets=(eps_label == "0"))
                    cfg = DiceLossConfig(scheme=scheme,
                                         epsilon=resolve_epsilon(eps_label, gt, scheme))
                    analytic = dice_backward(gt, pred, cfg)
                    if perturb != 0.0:
                        bumped = analytic.data.copy()
                        bumped.reshape(-1)[0] += perturb
                        analytic = _wrap(shape, bumped)
                    numeric = finite_diff_grad(gt, pred, cfg, h=h)
                    report = compare_grads(analytic, numeric, rtol=rtol, atol=atol)
                    twoval = check_two_value(gt, analytic, subsets)
                    records.append(MatrixRecord(
                        seed=seed,
                        scheme=scheme,
                        epsilon_label=eps_label,
                        shape=dims,
                        grad_report=report,
                        two_value_passed=twoval.passed,
                    ))
                case += 1
    return records


def format_record(r: MatrixRecord) -> str:
    """One structured text line per instance for the CLI report."""
    return (
        f"seed={r.seed} scheme={r.scheme.value} eps={r.epsilon_label} "
        f"shape={r.shape[0]}x{r.shape[1]}x{r.shape[2]} "
        f"max_abs={r.grad_report.max_abs_err:.3e} max_rel={r.grad_report.max_rel_err:.3e} "
        f"grad={'pass' if r.grad_report.passed else 'FAIL'} "
        f"two_value={'pass' if r.two_value_passed else 'FAIL'}"
    )
