"""Dataset ingestion, seeded splits, standardisation and synthetic generators."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .kernels import InputError

log = logging.getLogger(__name__)

DATA_DIR_ENV = "TIGHTGP_DATA_DIR"
SNELSON_DIR_ENV = "TIGHTGP_SNELSON_DIR"
SNELSON_SURROGATE = "snelson_surrogate.csv"


class DataError(InputError):
    """Malformed or missing dataset."""


@dataclass(frozen=True)
class Standardization:
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray
    y_scale: np.ndarray

    def apply(self, X: np.ndarray, y: Optional[np.ndarray]) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        Xs = (X - self.x_mean) / self.x_scale
        return Xs, None if y is None else (y - self.y_mean) / self.y_scale

    def inverse_y(self, mean: np.ndarray, var: Optional[np.ndarray] = None):
        """Map standardised predictive moments back to original target units."""
        scale = self.y_scale.reshape(-1)[0] if self.y_scale.size == 1 else self.y_scale
        shift = self.y_mean.reshape(-1)[0] if self.y_mean.size == 1 else self.y_mean
        out_mean = mean * scale + shift
        return out_mean if var is None else (out_mean, var * scale ** 2)

    def as_dict(self) -> Dict[str, List[float]]:
        return {k: np.asarray(getattr(self, k)).tolist()
                for k in ("x_mean", "x_scale", "y_mean", "y_scale")}

    @classmethod
    def from_dict(cls, d) -> "Standardization":
        return cls(*(np.asarray(d[k], dtype=np.float64)
                     for k in ("x_mean", "x_scale", "y_mean", "y_scale")))


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray  # N x P; empty second axis for unsupervised data
    name: str
    content_hash: str
    standardization: Optional[Standardization] = None
    rejected_rows: int = 0

    def __post_init__(self):
        if self.X.ndim != 2 or self.y.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise DataError("X must be N x D and y must be N x P with matching N")
        if not (np.isfinite(self.X).all() and np.isfinite(self.y).all()):
            raise DataError(f"dataset {self.name!r} contains NaN or Inf")

    @property
    def num_data(self) -> int:
        return self.X.shape[0]

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    @property
    def targets(self) -> np.ndarray:
        """``y`` as a vector when there is a single target column."""
        return self.y[:, 0] if self.y.shape[1] == 1 else self.y


def file_hash(path: Union[str, os.PathLike]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def array_hash(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=np.float64)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def _resolve_target(target, header: Optional[List[str]], ncols: int) -> Optional[int]:
    if target is None:
        return None
    if isinstance(target, str):
        if header is None or target not in header:
            raise DataError(f"target column {target!r} not found in header")
        return header.index(target)
    idx = int(target)
    idx = idx + ncols if idx < 0 else idx
    if not 0 <= idx < ncols:
        raise DataError(f"target column {target} out of range for {ncols} columns")
    return idx


def load_csv(path, target: Union[int, str, None] = -1, header: bool = True,
             delimiter: str = ",", name: Optional[str] = None) -> Dataset:
    """Parse a numeric CSV; rows with an empty cell are rejected and counted.

    ``target`` names the response column (index or header name); ``None``
    loads every column into ``X`` and leaves ``y`` with zero columns.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as err:
        raise DataError(f"cannot read {path}: {err}") from err
    rows = list(csv.reader(raw.decode("utf-8-sig").splitlines(), delimiter=delimiter))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    names = [c.strip().strip('"') for c in rows.pop(0)] if header and rows else None
    if not rows:
        raise DataError(f"{path} contains no data rows")
    ncols = len(names) if names is not None else len(rows[0])
    tcol = _resolve_target(target, names, ncols)
    parsed, rejected = [], 0
    first_line = 2 if names is not None else 1
    for i, row in enumerate(rows):
        line = first_line + i
        if len(row) != ncols:
            raise DataError(f"{path}:{line}: expected {ncols} columns, found {len(row)}")
        if any(not c.strip() for c in row):
            rejected += 1
            continue
        values = []
        for j, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                col = names[j] if names is not None else j
                raise DataError(f"{path}:{line}: cannot parse {cell!r} in column {col}") from None
            if not math.isfinite(v):
                rejected += 1
                break
            values.append(v)
        else:
            parsed.append(values)
    if rejected:
        log.warning("%s: rejected %d row(s) with missing values", path, rejected)
    if not parsed:
        raise DataError(f"{path}: every row was rejected")
    M = np.asarray(parsed, dtype=np.float64)
    if tcol is None:
        X, y = M, np.zeros((M.shape[0], 0))
    else:
        X, y = np.delete(M, tcol, axis=1), M[:, [tcol]]
    return Dataset(X, y, name or path.stem, hashlib.sha256(raw).hexdigest(), rejected_rows=rejected)


def fit_standardization(X: np.ndarray, y: np.ndarray, standardize_y: bool = True) -> Standardization:
    def stats(a):
        mean = a.mean(0)
        scale = a.std(0)
        return mean, np.where(scale > 0, scale, 1.0)

    xm, xs = stats(X)
    if standardize_y and y.shape[1]:
        ym, ys = stats(y)
    else:
        ym, ys = np.zeros(y.shape[1]), np.ones(y.shape[1])
    return Standardization(xm, xs, ym, ys)


def standardize(ds: Dataset, stats: Standardization) -> Dataset:
    X, y = stats.apply(ds.X, ds.y)
    return replace(ds, X=X, y=y, standardization=stats)


def split(ds: Dataset, test_fraction: float = 0.1, seed: int = 0, standardize_x: bool = True,
          standardize_y: bool = True) -> Tuple[Dataset, Dataset]:
    """Seeded random split; standardisation is fitted on the training part only."""
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    N = ds.num_data
    n_test = int(round(test_fraction * N))
    if n_test < 1 or N - n_test < 2:
        raise DataError(f"split of N={N} at fraction {test_fraction} leaves an empty side")
    perm = np.random.default_rng(seed).permutation(N)
    tr, te = np.sort(perm[n_test:]), np.sort(perm[:n_test])
    train = replace(ds, X=ds.X[tr], y=ds.y[tr], name=f"{ds.name}/train")
    test = replace(ds, X=ds.X[te], y=ds.y[te], name=f"{ds.name}/test")
    stats = fit_standardization(train.X, train.y, standardize_y)
    if not standardize_x:
        stats = replace(stats, x_mean=np.zeros_like(stats.x_mean), x_scale=np.ones_like(stats.x_scale))
    return standardize(train, stats), standardize(test, stats)


def _resource_path(name: str):
    return resources.files("tightgp").joinpath("resources").joinpath(name)


def snelson() -> Dataset:
    """The 1-D Snelson regression set, 200 points.

    If ``$TIGHTGP_SNELSON_DIR`` holds the public ``snelson_train_inputs`` and
    ``snelson_train_outputs`` files, those are used. Otherwise the bundled
    surrogate is loaded: a 200-point synthetic stand-in drawn on the same input
    range, named ``snelson-surrogate`` so the two are never confused.
    """
    override = os.environ.get(SNELSON_DIR_ENV)
    if override:
        xin, yout = Path(override) / "snelson_train_inputs", Path(override) / "snelson_train_outputs"
        if not (xin.exists() and yout.exists()):
            raise DataError(f"{SNELSON_DIR_ENV}={override} lacks snelson_train_inputs/outputs")
        X = np.loadtxt(xin, dtype=np.float64).reshape(-1, 1)
        y = np.loadtxt(yout, dtype=np.float64).reshape(-1, 1)
        digest = hashlib.sha256(xin.read_bytes() + yout.read_bytes()).hexdigest()
        return Dataset(X, y, "snelson", digest)
    res = _resource_path(SNELSON_SURROGATE)
    if not res.is_file():
        raise DataError(f"bundled file {SNELSON_SURROGATE} is missing from the installation")
    with resources.as_file(res) as p:
        return load_csv(p, target="y", name="snelson-surrogate")


def is_canonical_snelson(ds: Dataset) -> bool:
    return ds.name == "snelson"


def load_manifest() -> Dict[str, dict]:
    return json.loads(_resource_path("datasets.json").read_text())


def load_named(name: str, data_dir: Optional[os.PathLike] = None) -> Dataset:
    """Load a roster dataset; user-supplied ones live in ``$TIGHTGP_DATA_DIR``."""
    if name in ("snelson", "snelson-surrogate"):
        return snelson()
    manifest = load_manifest()
    if name not in manifest:
        raise DataError(f"unknown dataset {name!r}; known: {sorted(manifest)}")
    entry = manifest[name]
    root = data_dir or os.environ.get(DATA_DIR_ENV)
    if root is None:
        raise DataError(f"dataset {name!r} is user-supplied; set ${DATA_DIR_ENV}")
    path = Path(root) / entry["path"]
    if not path.exists():
        raise DataError(f"{path} not found (expected {entry['expected_n']} x {entry['expected_d']})")
    ds = load_csv(path, target=entry.get("target", -1), header=entry.get("header", True),
                  delimiter=entry.get("delimiter", ","), name=name)
    if (ds.num_data + ds.rejected_rows, ds.input_dim) != (entry["expected_n"], entry["expected_d"]):
        raise DataError(f"{name}: found {ds.num_data} x {ds.input_dim}, expected "
                        f"{entry['expected_n']} x {entry['expected_d']}")
    if entry.get("sha256") and entry["sha256"] != ds.content_hash:
        log.warning("%s: content hash differs from the manifest", name)
    return ds


def dataset_available(name: str, data_dir: Optional[os.PathLike] = None) -> bool:
    try:
        load_named(name, data_dir)
    except DataError:
        return False
    return True


def from_arrays(X, y=None, name: str = "arrays") -> Dataset:
    X = np.asarray(X, dtype=np.float64)
    X = X[:, None] if X.ndim == 1 else X
    if y is None:
        y = np.zeros((X.shape[0], 0))
    y = np.asarray(y, dtype=np.float64)
    y = y[:, None] if y.ndim == 1 else y
    return Dataset(X, y, name, array_hash(X, y))


def synthetic_regression(n: int = 2000, d: int = 4, seed: int = 0, noise: float = 0.2) -> Dataset:
    """Smooth nonlinear function of random projections plus Gaussian noise."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2.0, 2.0, (n, d))
    W = rng.normal(size=(d, 3)) / math.sqrt(d)
    H = X @ W
    f = np.sin(2.0 * H[:, 0]) + 0.5 * np.cos(3.0 * H[:, 1]) + 0.3 * H[:, 2] ** 2
    y = f + noise * rng.standard_normal(n)
    return from_arrays(X, y, f"synthetic-regression-{n}x{d}-s{seed}")


def synthetic_classification(n: int = 500, num_classes: int = 3, d: int = 2, seed: int = 0) -> Dataset:
    """Labels from the argmax of noisy smooth class scores; ``y`` holds class indices."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2.0, 2.0, (n, d))
    centres = rng.uniform(-1.5, 1.5, (num_classes, d))
    dist = ((X[:, None, :] - centres[None]) ** 2).sum(-1)
    scores = -2.0 * dist + 0.5 * np.sin(3.0 * X[:, :1]) + rng.gumbel(size=(n, num_classes))
    y = scores.argmax(1).astype(np.float64)
    return from_arrays(X, y, f"synthetic-classification-{n}x{d}-c{num_classes}-s{seed}")


def three_cluster(n: int = 200, p: int = 12, seed: int = 0, noise: float = 0.05) -> Dataset:
    """Three clusters on a 2-D manifold pushed through a random smooth map to ``p`` dims.

    Used as an oil-flow-like stand-in for latent variable models; all columns
    are observations and ``y`` is empty. Cluster labels are not returned.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 3
    centres = np.array([[-1.5, 0.0], [1.5, 0.8], [0.0, -1.6]])
    latent = centres[labels] + 0.35 * rng.standard_normal((n, 2))
    W1 = rng.normal(size=(2, p))
    W2 = rng.normal(size=(2, p))
    Y = np.tanh(latent @ W1) + 0.5 * np.sin(latent @ W2) + noise * rng.standard_normal((n, p))
    return from_arrays(Y, None, f"three-cluster-{n}x{p}-s{seed}")
