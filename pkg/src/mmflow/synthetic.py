"""Synthetic datasets, sample-quality metrics and the two desk-scale studies.

The tetrahedron study trains the same MLP on full triplets, on coordinate
pairs and on single coordinates, then compares joint samples against the
surface. The variant bench trains one 2-D model per forward-process variant
and compares samples to held-out data by energy distance.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from . import schedules as S
from .errors import ConfigError
from .models import MLPVelocityNet
from .paths import ModalitySpec, TaskPath, subset_path
from .sampler import SamplerConfig, sample_chunked
from .tensor import DTYPE
from .training import Batch, FlowModel, Trainer, TrainerConfig

TETRA_VERTICES = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64) / math.sqrt(3.0)
TETRA_FACES = ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2))
COORDS = ("x1", "x2", "x3")

GAUSSIAN_MIXTURE_8 = "gaussian-mixture-8"
CHECKERBOARD = "checkerboard"
TOY_KINDS = (GAUSSIAN_MIXTURE_8, CHECKERBOARD)


# --- datasets -----------------------------------------------------------


@dataclass
class TetrahedronDataset:
    vertices: np.ndarray
    epsilon: float
    samples: np.ndarray
    faces: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.faces = np.stack([self.vertices[list(f)] for f in TETRA_FACES])

    @property
    def normals(self) -> np.ndarray:
        """Outward unit normals, one per face."""
        a, b, c = self.faces[:, 0], self.faces[:, 1], self.faces[:, 2]
        n = np.cross(b - a, c - a)
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        centre = self.vertices.mean(axis=0)
        flip = np.einsum("ij,ij->i", n, a - centre) < 0
        n[flip] *= -1
        return n

    def specs(self) -> list[ModalitySpec]:
        return [ModalitySpec(n, (1,)) for n in COORDS]

    def modalities(self, samples: np.ndarray | None = None) -> dict[str, np.ndarray]:
        x = self.samples if samples is None else samples
        return {name: x[:, k:k + 1].astype(DTYPE) for k, name in enumerate(COORDS)}

    def points(self, latents: Mapping[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(latents[n]).reshape(-1, 1) for n in COORDS], axis=1)


def _face_areas(faces: np.ndarray) -> np.ndarray:
    return 0.5 * np.linalg.norm(np.cross(faces[:, 1] - faces[:, 0], faces[:, 2] - faces[:, 0]), axis=1)


def make_tetrahedron(n: int, epsilon: float = 0.05, rng: np.random.Generator | None = None) -> TetrahedronDataset:
    """Uniform points on the faces, pushed off each face along its normal by ``U(-eps, eps)``."""
    if n < 1:
        raise ConfigError(f"need at least one sample, got {n}")
    if not epsilon > 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    rng = rng if rng is not None else np.random.default_rng()
    ds = TetrahedronDataset(TETRA_VERTICES.copy(), float(epsilon), np.zeros((0, 3)))
    areas = _face_areas(ds.faces)
    face = rng.choice(4, size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    u, v, w = 1.0 - r1, r1 * (1.0 - r2), r1 * r2
    f = ds.faces[face]
    pts = u[:, None] * f[:, 0] + v[:, None] * f[:, 1] + w[:, None] * f[:, 2]
    offset = rng.uniform(-epsilon, epsilon, size=n)
    ds.samples = pts + offset[:, None] * ds.normals[face]
    return ds


@dataclass
class Toy2DDataset:
    kind: str
    samples: np.ndarray
    split: bool = False

    def specs(self) -> list[ModalitySpec]:
        if self.split:
            return [ModalitySpec("x", (1,)), ModalitySpec("y", (1,))]
        return [ModalitySpec("xy", (2,))]

    def modalities(self, samples: np.ndarray | None = None) -> dict[str, np.ndarray]:
        x = (self.samples if samples is None else samples).astype(DTYPE)
        if self.split:
            return {"x": x[:, :1], "y": x[:, 1:]}
        return {"xy": x}

    def points(self, latents: Mapping[str, np.ndarray]) -> np.ndarray:
        if self.split:
            return np.concatenate([latents["x"], latents["y"]], axis=1)
        return np.asarray(latents["xy"])


def mixture_means(k: int = 8, radius: float = 1.0) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(k) / k
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def checkerboard_cells() -> np.ndarray:
    """Lower-left corners of the 8 included unit squares in ``[-2, 2]^2``."""
    return np.array([(i, j) for i in range(-2, 2) for j in range(-2, 2) if (i + j) % 2 == 0], dtype=np.float64)


def make_toy2d(kind: str, n: int, rng: np.random.Generator | None = None, split: bool = False) -> Toy2DDataset:
    if kind not in TOY_KINDS:
        raise ConfigError(f"unknown toy density {kind!r}; expected one of {TOY_KINDS}")
    if n < 1:
        raise ConfigError(f"need at least one sample, got {n}")
    rng = rng if rng is not None else np.random.default_rng()
    if kind == GAUSSIAN_MIXTURE_8:
        comp = rng.integers(0, 8, size=n)
        x = mixture_means()[comp] + 0.05 * rng.standard_normal((n, 2))
    else:
        cells = checkerboard_cells()
        x = cells[rng.integers(0, len(cells), size=n)] + rng.random((n, 2))
    return Toy2DDataset(kind, x, split)


TOY_TRIPLET = "toy-triplet"
TETRAHEDRON = "tetrahedron"
TOY_TRIPLET_SHAPES = {"image": (16, 4), "text": (8, 4), "audio": (16, 4)}


@dataclass
class ToyTripletDataset:
    """Token-shaped image/text/audio latents driven by one shared 4-d factor.

    Each modality is ``tanh`` of a fixed random linear map of the factor plus
    a little noise, so the three are strongly coupled. The maps come from a
    fixed seed and do not depend on the sampling generator.
    """

    samples: dict[str, np.ndarray]

    def specs(self) -> list[ModalitySpec]:
        return [ModalitySpec(n, TOY_TRIPLET_SHAPES[n]) for n in self.samples]

    def modalities(self, samples=None) -> dict[str, np.ndarray]:
        return dict(self.samples if samples is None else samples)


def make_toy_triplet(n: int, rng: np.random.Generator | None = None) -> ToyTripletDataset:
    if n < 1:
        raise ConfigError(f"need at least one sample, got {n}")
    rng = rng if rng is not None else np.random.default_rng()
    maps = np.random.default_rng(1234)
    z = rng.standard_normal((n, 4))
    out = {}
    for name, shape in TOY_TRIPLET_SHAPES.items():
        w = maps.standard_normal((4, shape[0] * shape[1])) / 2.0
        x = np.tanh(z @ w) + 0.05 * rng.standard_normal((n, shape[0] * shape[1]))
        out[name] = x.reshape((n,) + shape).astype(DTYPE)
    return ToyTripletDataset(out)


DATASET_KINDS = TOY_KINDS + (TETRAHEDRON, TOY_TRIPLET)


def make_dataset(kind: str, n: int, rng: np.random.Generator, epsilon: float = 0.05, split: bool = False):
    """Any of the named datasets; each exposes ``specs()`` and ``modalities()``."""
    if kind in TOY_KINDS:
        return make_toy2d(kind, n, rng, split=split)
    if kind == TETRAHEDRON:
        return make_tetrahedron(n, epsilon, rng)
    if kind == TOY_TRIPLET:
        return make_toy_triplet(n, rng)
    raise ConfigError(f"unknown dataset {kind!r}; expected one of {DATASET_KINDS}")


class ArraySource:
    """Batches drawn with replacement from fixed arrays, one presence pattern per batch.

    Draw order per batch: the pattern index (only with several patterns),
    then the row indices.
    """

    def __init__(self, data: Mapping[str, np.ndarray], patterns: Sequence[Sequence[str]] | None = None):
        self.data = {k: np.asarray(v, dtype=DTYPE) for k, v in data.items()}
        sizes = {len(v) for v in self.data.values()}
        if len(sizes) != 1:
            raise ConfigError("all modalities need the same number of rows")
        self.rows = sizes.pop()
        self.patterns = [tuple(p) for p in (patterns or [tuple(self.data)])]
        for p in self.patterns:
            if not p or set(p) - set(self.data):
                raise ConfigError(f"bad presence pattern {p}")

    def batch(self, rng: np.random.Generator, size: int) -> Batch:
        pattern = self.patterns[0] if len(self.patterns) == 1 else self.patterns[int(rng.integers(len(self.patterns)))]
        idx = rng.integers(0, self.rows, size=size)
        return Batch({k: self.data[k][idx] for k in pattern})


# --- metrics ------------------------------------------------------------


def support_distance(points, dataset: TetrahedronDataset) -> float:
    """Mean exact distance from each point to the nearest tetrahedron face."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ConfigError("support_distance needs at least one point")
    return float(kernels.point_triangle_distances(pts, dataset.faces).mean())


def face_cells(dataset: TetrahedronDataset, grid: int = 10) -> np.ndarray:
    """Centroids of the ``grid**2`` sub-triangles of each face, shape ``(4 * grid**2, 3)``."""
    bary = []
    for i in range(grid):
        for j in range(grid - i):
            bary.append(((i + 1 / 3) / grid, (j + 1 / 3) / grid))
            if i + j <= grid - 2:
                bary.append(((i + 2 / 3) / grid, (j + 2 / 3) / grid))
    b = np.array(bary)
    out = []
    for a, p, q in dataset.faces:
        out.append(a + b[:, :1] * (p - a) + b[:, 1:] * (q - a))
    return np.concatenate(out)


def face_coverage(points, dataset: TetrahedronDataset, threshold: float, grid: int = 10) -> float:
    """Fraction of face cells whose centre has a generated point within ``threshold``."""
    if not threshold > 0:
        raise ConfigError(f"threshold must be positive, got {threshold}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return 0.0
    d = kernels.min_distances(face_cells(dataset, grid), pts)
    return float(np.mean(d <= threshold))


def energy_distance(a, b) -> float:
    """``2 E|A-B| - E|A-A'| - E|B-B'|`` with every pair included (V-statistic)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ConfigError("energy_distance needs two non-empty samples")
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    ab = kernels.mean_pairwise_distance(a, b)
    aa = kernels.mean_pairwise_distance(a, a)
    bb = kernels.mean_pairwise_distance(b, b)
    return max(0.0, 2.0 * ab - aa - bb)


@dataclass
class MetricsReport:
    name: str
    samples: int = 0
    parameters: int = 0
    support_distance: float = float("nan")
    face_coverage: float = float("nan")
    energy_distance: float = float("nan")
    baseline: float = float("nan")
    loss_head: float = float("nan")
    loss_tail: float = float("nan")
    seconds: float = 0.0
    losses: list[float] = field(default_factory=list, repr=False)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("losses")
        d.pop("seconds")
        return d


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def reports_csv(reports: Sequence[MetricsReport]) -> str:
    """Metrics table, one row per report; wall time is left out so reruns compare byte-equal."""
    buf = io.StringIO()
    rows = [r.row() for r in reports]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(rows[0]) if rows else list(MetricsReport("").row()))
    for r in rows:
        w.writerow([_fmt(v) for v in r.values()])
    return buf.getvalue()


def _loss_trend(losses: Sequence[float], window: int = 100) -> tuple[float, float]:
    if not losses:
        return float("nan"), float("nan")
    w = min(window, len(losses))
    return float(np.mean(losses[:w])), float(np.mean(losses[-w:]))


# --- tetrahedron study --------------------------------------------------


@dataclass
class TripletStudyConfig:
    data_size: int = 100_000
    epsilon: float = 0.05
    width: int = 256
    depth: int = 8
    time_dim: int = 16
    steps: int = 20_000
    batch_size: int = 256
    lr: float = 1e-3
    warmup: int = 1000
    ema_decay: float = 0.999
    time_sampler: str = "uniform"
    sample_count: int = 50_000
    sample_steps: int = 100
    sample_shift: float = 1.0
    coverage_threshold: float = 0.1

    def trainer(self, seed: int) -> TrainerConfig:
        return TrainerConfig(lr=self.lr, warmup=min(self.warmup, self.steps), total_steps=self.steps,
                             batch_size=self.batch_size, ema_decay=self.ema_decay, seed=seed,
                             time_sampler=S.parse_sampler(self.time_sampler))


TRIPLETS, PAIRS, SINGLES = "triplets", "pairs", "singles"
ARMS = (TRIPLETS, PAIRS, SINGLES)


def arm_tasks(arm: str) -> tuple[list[tuple[str, ...]], list[TaskPath]]:
    """Presence patterns and training paths for one study arm.

    Each pattern has exactly one compatible path: the joint path over its
    present coordinates, with absent coordinates held at pure noise.
    """
    if arm == TRIPLETS:
        groups = [(0, 1, 2)]
    elif arm == PAIRS:
        groups = [(0, 1), (0, 2), (1, 2)]
    elif arm == SINGLES:
        groups = [(0,), (1,), (2,)]
    else:
        raise ConfigError(f"unknown study arm {arm!r}")
    patterns = [tuple(COORDS[k] for k in g) for g in groups]
    paths = [subset_path(3, [], list(g), name="joint-" + "".join(str(k + 1) for k in g)) for g in groups]
    return patterns, paths


def train_arm(arm: str, dataset: TetrahedronDataset, cfg: TripletStudyConfig, seed: int) -> tuple[FlowModel, list[float]]:
    patterns, paths = arm_tasks(arm)
    rng = np.random.default_rng(seed)
    specs = [ModalitySpec(n, (1,)) for n in COORDS]
    net = MLPVelocityNet(specs, rng, width=cfg.width, depth=cfg.depth, time_dim=cfg.time_dim)
    trainer = Trainer(FlowModel(net), paths, cfg.trainer(seed))
    log = trainer.fit(ArraySource(dataset.modalities(), patterns), rng)
    return trainer.ema_model(), [r["loss"] for r in log]


def run_triplet_study(cfg: TripletStudyConfig, rng: np.random.Generator,
                      arms: Sequence[str] = ARMS) -> tuple[list[MetricsReport], dict[str, np.ndarray]]:
    """Train one model per arm on the same data and budget, then sample each jointly.

    Returns the reports in ``arms`` order and the generated ``(count, 3)``
    samples per arm.
    """
    data_seed, *arm_seeds = (int(s) for s in rng.integers(0, 2**31 - 1, size=1 + 2 * len(arms)))
    dataset = make_tetrahedron(cfg.data_size, cfg.epsilon, np.random.default_rng(data_seed))
    joint = subset_path(3, [], [0, 1, 2], name="joint")
    reports, samples, counts = [], {}, set()
    for k, arm in enumerate(arms):
        start = time.perf_counter()
        model, losses = train_arm(arm, dataset, cfg, arm_seeds[2 * k])
        counts.add(model.net.num_parameters())
        scfg = SamplerConfig(steps=cfg.sample_steps, gamma=cfg.sample_shift)
        out = sample_chunked(model, joint, cfg.sample_count, scfg, np.random.default_rng(arm_seeds[2 * k + 1]))
        pts = np.concatenate([out[n] for n in COORDS], axis=1).astype(np.float64)
        head, tail = _loss_trend(losses)
        reports.append(MetricsReport(
            name=arm, samples=len(pts), parameters=model.net.num_parameters(),
            support_distance=support_distance(pts, dataset),
            face_coverage=face_coverage(pts, dataset, cfg.coverage_threshold),
            loss_head=head, loss_tail=tail, seconds=time.perf_counter() - start, losses=losses))
        samples[arm] = pts
    if len(counts) != 1:
        raise ConfigError(f"study arms ended up with different parameter counts: {sorted(counts)}")
    return reports, samples


def samples_csv(points: np.ndarray, columns: Sequence[str] = COORDS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in np.asarray(points):
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


# --- variant bench ------------------------------------------------------


@dataclass(frozen=True)
class Variant:
    name: str
    schedule: str
    parameterization: str
    time_sampler: str


VARIANTS = {
    "eps/linear": Variant("eps/linear", S.DDPM_LINEAR, S.EPS, "uniform"),
    "v/cos": Variant("v/cos", S.COSINE, S.V, "uniform"),
    "v/linear": Variant("v/linear", S.DDPM_LINEAR, S.V, "uniform"),
    "rf/uniform": Variant("rf/uniform", S.RECTIFIED_FLOW, S.VELOCITY, "uniform"),
    "rf/lognorm": Variant("rf/lognorm", S.RECTIFIED_FLOW, S.VELOCITY, "lognorm(0,1)"),
}


def get_variant(name: str) -> Variant:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; expected one of {list(VARIANTS)}") from None


@dataclass
class BenchConfig:
    kind: str = GAUSSIAN_MIXTURE_8
    split: bool = False
    data_size: int = 100_000
    heldout: int = 10_000
    baseline_repeats: int = 5
    width: int = 256
    depth: int = 8
    time_dim: int = 16
    steps: int = 20_000
    batch_size: int = 256
    lr: float = 1e-3
    warmup: int = 1000
    ema_decay: float = 0.999
    v_weight: str = "exp"
    sample_count: int = 10_000
    sample_steps: int = 100
    sample_shift: float = 1.0


def resampling_baseline(kind: str, sizes: tuple[int, int], repeats: int, rng: np.random.Generator) -> float:
    """Mean energy distance between two fresh draws of the given sizes from the true density.

    A single pair fluctuates by roughly its own mean, so several pairs are
    averaged.
    """
    if repeats < 1:
        raise ConfigError("need at least one baseline repeat")
    vals = []
    for _ in range(repeats):
        a = make_toy2d(kind, sizes[0], rng).samples
        b = make_toy2d(kind, sizes[1], rng).samples
        vals.append(energy_distance(a, b))
    return float(np.mean(vals))


def train_variant(variant: Variant, dataset: Toy2DDataset, cfg: BenchConfig, seed: int
                  ) -> tuple[FlowModel, list[float]]:
    rng = np.random.default_rng(seed)
    specs = dataset.specs()
    net = MLPVelocityNet(specs, rng, width=cfg.width, depth=cfg.depth, time_dim=cfg.time_dim)
    model = FlowModel(net, S.schedule_from_name(variant.schedule), variant.parameterization, cfg.v_weight)
    tcfg = TrainerConfig(lr=cfg.lr, warmup=min(cfg.warmup, cfg.steps), total_steps=cfg.steps,
                         batch_size=cfg.batch_size, ema_decay=cfg.ema_decay, seed=seed,
                         time_sampler=S.parse_sampler(variant.time_sampler))
    path = subset_path(len(specs), [], list(range(len(specs))), name="joint")
    trainer = Trainer(model, [path], tcfg)
    log = trainer.fit(ArraySource(dataset.modalities()), rng)
    return trainer.ema_model(), [r["loss"] for r in log]


def run_variant_bench(variants: Sequence[str], dataset: Toy2DDataset | None, cfg: BenchConfig,
                      rng: np.random.Generator) -> list[MetricsReport]:
    """Train and sample one model per variant; compare to held-out data by energy distance.

    The baseline is the mean energy distance between independent fresh
    draws of the generated and held-out sizes (see ``resampling_baseline``).
    """
    chosen = [get_variant(v) for v in variants]
    data_seed, hold_seed, *seeds = (int(s) for s in rng.integers(0, 2**31 - 1, size=2 + 2 * len(chosen)))
    if dataset is None:
        dataset = make_toy2d(cfg.kind, cfg.data_size, np.random.default_rng(data_seed), split=cfg.split)
    hold_rng = np.random.default_rng(hold_seed)
    ref = make_toy2d(dataset.kind, cfg.heldout, hold_rng).samples
    baseline = resampling_baseline(dataset.kind, (cfg.sample_count, cfg.heldout), cfg.baseline_repeats, hold_rng)
    path = subset_path(len(dataset.specs()), [], list(range(len(dataset.specs()))), name="joint")
    reports = []
    for k, v in enumerate(chosen):
        start = time.perf_counter()
        model, losses = train_variant(v, dataset, cfg, seeds[2 * k])
        scfg = SamplerConfig(steps=cfg.sample_steps, gamma=cfg.sample_shift)
        out = sample_chunked(model, path, cfg.sample_count, scfg, np.random.default_rng(seeds[2 * k + 1]))
        pts = dataset.points(out).astype(np.float64)
        head, tail = _loss_trend(losses)
        ed = energy_distance(pts, ref) if np.all(np.isfinite(pts)) else float("nan")
        reports.append(MetricsReport(
            name=v.name, samples=len(pts), parameters=model.net.num_parameters(), energy_distance=ed,
            baseline=baseline, loss_head=head, loss_tail=tail, seconds=time.perf_counter() - start,
            losses=losses))
    return reports
