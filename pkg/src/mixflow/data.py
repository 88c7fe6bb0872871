"""Synthetic letter-rotation benchmark and generic population ingestion.

Letters are stroke polylines rasterized onto a fixed grid; a condition is
a (letter, rotation) pair whose population is sampled uniformly from the
silhouette's foreground pixels with sub-pixel jitter. Descriptors are
one-hot letter codes concatenated with the rotation normalized to [0,1).
Train split: even-indexed rotations of every letter. Val split: the
odd-indexed rotations of one chosen letter.

Also here: CSV/JSON round-trip for externally prepared embeddings, a
train-split-only PCA, and a random orthogonal lift for dimensionality
experiments.
"""

from __future__ import annotations

import csv
import hashlib
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Population",
    "Dataset",
    "GlyphSpec",
    "GLYPH_STROKES",
    "render_condition",
    "build_synthetic",
    "save_dataset",
    "load_populations",
    "pca_reduce",
    "PcaRecord",
    "orthogonal_lift",
    "condition_rng",
]

VIEW_HALF = 1.2  # raster grid and sample support live in [-VIEW_HALF, VIEW_HALF]^2


@dataclass
class Population:
    samples: np.ndarray
    descriptor: np.ndarray
    condition_id: str
    split: str = "train"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.descriptor = np.asarray(self.descriptor, dtype=np.float64)
        if self.samples.ndim != 2 or len(self.samples) < 1:
            raise ValueError(f"population {self.condition_id!r} needs an S x D sample matrix")
        if self.split not in ("train", "val"):
            raise ValueError(f"unknown split {self.split!r}")


@dataclass
class Dataset:
    populations: list
    dim: int

    def __post_init__(self):
        ddims = {len(pop.descriptor) for pop in self.populations}
        if len(ddims) > 1:
            raise ValueError(f"descriptor dimension differs across conditions: {sorted(ddims)}")
        for pop in self.populations:
            if pop.samples.shape[1] != self.dim:
                raise ValueError(
                    f"condition {pop.condition_id!r} has dim {pop.samples.shape[1]}, expected {self.dim}"
                )

    @property
    def descriptor_dim(self) -> int:
        return len(self.populations[0].descriptor)

    def split(self, which: str):
        return [p for p in self.populations if p.split == which]


# stroke polylines per letter, endpoints kept within radius ~1.05 of the
# origin so any rotation plus stroke width plus jitter stays in the viewport
GLYPH_STROKES = {
    "A": [((-0.55, -0.9), (0.0, 0.9)), ((0.0, 0.9), (0.55, -0.9)), ((-0.28, -0.1), (0.28, -0.1))],
    "E": [((-0.5, -0.9), (-0.5, 0.9)), ((-0.5, 0.9), (0.5, 0.9)),
          ((-0.5, 0.0), (0.35, 0.0)), ((-0.5, -0.9), (0.5, -0.9))],
    "H": [((-0.5, -0.9), (-0.5, 0.9)), ((0.5, -0.9), (0.5, 0.9)), ((-0.5, 0.0), (0.5, 0.0))],
    "I": [((0.0, -0.9), (0.0, 0.9))],
    "L": [((-0.45, 0.9), (-0.45, -0.9)), ((-0.45, -0.9), (0.5, -0.9))],
    "S": [((0.5, 0.72), (0.15, 0.9)), ((0.15, 0.9), (-0.35, 0.82)), ((-0.35, 0.82), (-0.5, 0.45)),
          ((-0.5, 0.45), (-0.3, 0.12)), ((-0.3, 0.12), (0.3, -0.12)), ((0.3, -0.12), (0.5, -0.45)),
          ((0.5, -0.45), (0.35, -0.82)), ((0.35, -0.82), (-0.15, -0.9)), ((-0.15, -0.9), (-0.5, -0.72))],
    "T": [((-0.55, 0.9), (0.55, 0.9)), ((0.0, 0.9), (0.0, -0.9))],
    "X": [((-0.5, -0.9), (0.5, 0.9)), ((-0.5, 0.9), (0.5, -0.9))],
}


@dataclass
class GlyphSpec:
    letter: str
    segments: list = None
    resolution: int = 48
    thickness: float = 0.055

    def __post_init__(self):
        if self.segments is None:
            if self.letter not in GLYPH_STROKES:
                raise ValueError(
                    f"no built-in glyph for {self.letter!r}; available: {sorted(GLYPH_STROKES)}"
                )
            self.segments = GLYPH_STROKES[self.letter]


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1)


def _foreground(glyph: GlyphSpec, rotation: float):
    """Pixel centers of the rotated silhouette plus the pixel size."""
    res = glyph.resolution
    step = 2.0 * VIEW_HALF / res
    centers_1d = -VIEW_HALF + step * (np.arange(res) + 0.5)
    gx, gy = np.meshgrid(centers_1d, centers_1d)
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    rot = np.array(
        [[np.cos(rotation), -np.sin(rotation)], [np.sin(rotation), np.cos(rotation)]]
    )
    dist = np.full(len(grid), np.inf)
    for seg_a, seg_b in glyph.segments:
        a = rot @ np.asarray(seg_a, dtype=np.float64)
        b = rot @ np.asarray(seg_b, dtype=np.float64)
        dist = np.minimum(dist, _segment_distance(grid, a, b))
    return grid[dist <= glyph.thickness], step


def render_condition(glyph: GlyphSpec, rotation: float, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw over foreground pixel centers with sub-pixel jitter."""
    if not 0.0 <= rotation < 2.0 * np.pi + 1e-12:
        raise ValueError(f"rotation must lie in [0, 2*pi), got {rotation}")
    fg, step = _foreground(glyph, rotation % (2.0 * np.pi))
    if len(fg) == 0:
        raise ValueError(f"glyph {glyph.letter!r} rasterized to an empty foreground")
    idx = rng.integers(0, len(fg), size=n_samples)
    jitter = rng.uniform(-0.5 * step, 0.5 * step, size=(n_samples, 2))
    return fg[idx] + jitter


def condition_rng(seed: int, condition_id: str, *extra) -> np.random.Generator:
    """Deterministic per-condition stream; stable across runs and platforms."""
    tag = zlib.crc32(condition_id.encode("utf-8"))
    return np.random.default_rng([seed, tag, *extra])


def build_synthetic(
    letters,
    rotations: int,
    copies_per_condition: int,
    samples_per_copy: int,
    val_letter: str,
    seed: int = 0,
    resolution: int = 48,
) -> Dataset:
    """Letter x rotation condition grid with even/odd rotation-index split.

    The dataset holds the train conditions (even rotation indices, every
    letter) and the val conditions (odd indices of `val_letter` only).
    Colour copies of the paper's renderings carry no descriptor
    information, so copies are realized as independent point draws.
    """
    letters = list(letters)
    if rotations % 2 != 0:
        raise ValueError(f"rotation count must be even, got {rotations}")
    if val_letter not in letters:
        raise ValueError(f"val_letter {val_letter!r} is not among letters {letters}")
    populations = []
    for letter in letters:
        glyph = GlyphSpec(letter, resolution=resolution)
        onehot = np.zeros(len(letters))
        onehot[letters.index(letter)] = 1.0
        for k in range(rotations):
            if k % 2 == 0:
                split = "train"
            elif letter == val_letter:
                split = "val"
            else:
                continue
            angle = 2.0 * np.pi * k / rotations
            cid = f"{letter}_rot{k:02d}"
            rng = condition_rng(seed, cid)
            draws = [
                render_condition(glyph, angle, samples_per_copy, rng)
                for _ in range(copies_per_condition)
            ]
            populations.append(
                Population(
                    samples=np.vstack(draws),
                    descriptor=np.concatenate([onehot, [angle / (2.0 * np.pi)]]),
                    condition_id=cid,
                    split=split,
                )
            )
    return Dataset(populations=populations, dim=2)


# -- disk layout --------------------------------------------------------------


def save_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "data.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["condition_id"] + [f"f{d}" for d in range(ds.dim)])
        for pop in ds.populations:
            for row in pop.samples:
                writer.writerow([pop.condition_id] + [repr(float(v)) for v in row])
    manifest = {
        "dim": ds.dim,
        "conditions": {
            pop.condition_id: {"descriptor": pop.descriptor.tolist(), "split": pop.split}
            for pop in ds.populations
        },
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_populations(data_path, manifest_path) -> Dataset:
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    dim = int(manifest["dim"])
    rows_by_cond = {}
    with open(data_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) != dim + 1:
            raise ValueError(f"data header has {len(header) - 1} feature columns, manifest says {dim}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != dim + 1:
                raise ValueError(f"row {lineno}: expected {dim + 1} columns, got {len(row)}")
            cid = row[0]
            if cid not in manifest["conditions"]:
                raise ValueError(f"row {lineno}: condition {cid!r} missing from manifest")
            rows_by_cond.setdefault(cid, []).append([float(v) for v in row[1:]])
    populations = []
    ddim = None
    for cid, meta in manifest["conditions"].items():
        if cid not in rows_by_cond:
            raise ValueError(f"condition {cid!r} has no data rows")
        desc = np.asarray(meta["descriptor"], dtype=np.float64)
        if ddim is None:
            ddim = len(desc)
        elif len(desc) != ddim:
            raise ValueError(
                f"descriptor length mismatch: {cid!r} has {len(desc)}, earlier conditions have {ddim}"
            )
        populations.append(
            Population(np.asarray(rows_by_cond[cid]), desc, cid, meta["split"])
        )
    return Dataset(populations=populations, dim=dim)


# -- transforms ----------------------------------------------------------------


@dataclass
class PcaRecord:
    mean: np.ndarray
    components: np.ndarray  # (k, D), orthonormal rows
    singular_values: np.ndarray
    explained_variance_ratio: float
    fit_hash: str

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) @ self.components.T

    def inverse(self, Z: np.ndarray) -> np.ndarray:
        return Z @ self.components + self.mean


def pca_reduce(ds: Dataset, n_components: int):
    """Project onto the top principal directions fitted on train samples only."""
    train = np.vstack([p.samples for p in ds.split("train")])
    if n_components > ds.dim or n_components > len(train):
        raise ValueError("n_components exceeds data dimension or sample count")
    mean = train.mean(axis=0)
    _, s, vt = np.linalg.svd(train - mean, full_matrices=False)
    if s[n_components - 1] <= 1e-12 * s[0]:
        raise ValueError(f"train data has rank below {n_components}")
    record = PcaRecord(
        mean=mean,
        components=vt[:n_components],
        singular_values=s,
        explained_variance_ratio=float((s[:n_components] ** 2).sum() / (s**2).sum()),
        fit_hash=hashlib.sha256(np.ascontiguousarray(train).tobytes()).hexdigest(),
    )
    pops = [
        Population(record.transform(p.samples), p.descriptor, p.condition_id, p.split)
        for p in ds.populations
    ]
    return Dataset(pops, n_components), record


def orthogonal_lift(ds: Dataset, dim: int, rng: np.random.Generator):
    """Embed a dataset into R^dim by a random orthonormal linear map."""
    if dim < ds.dim:
        raise ValueError("lift dimension must be at least the data dimension")
    raw = rng.standard_normal((dim, ds.dim))
    qmat, _ = np.linalg.qr(raw)
    pops = [
        Population(p.samples @ qmat.T, p.descriptor, p.condition_id, p.split)
        for p in ds.populations
    ]
    return Dataset(pops, dim), qmat
