"""Site-level datasets, deterministic seed streams, and CSV round-trips.

A site dataset is the unit of locally held data: outcomes ``y``, binary
treatment ``z`` and covariates ``x``.  Subject rows never leave the site;
everything that crosses a site boundary in this package is a fitted model.

Randomness is organized as keyed streams derived from one master seed, so a
computation draws from ``stream(tag, index)`` instead of a shared global
generator.  Two runs with the same master seed produce identical results no
matter how work is scheduled across processes.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import (
    FormatError,
    IoError,
    PositivityError,
    ValidationError,
)

# Shortest decimal that round-trips binary64 exactly.
REAL_FMT = "%.17g"


def fmt_real(v: float) -> str:
    """Format a float with 17 significant digits (exact binary64 round-trip)."""
    return REAL_FMT % float(v)


# ============================================================
# Seed streams
# ============================================================


@dataclass(frozen=True)
class SeedSpec:
    """Keyed derivation of independent random streams from one master seed.

    Child seeds are ``sha256(master/tag/index)`` truncated to 128 bits, so the
    stream for (tag, index) depends only on the key, never on draw order or
    scheduling.
    """

    master: int

    def __post_init__(self):
        if not isinstance(self.master, (int, np.integer)) or isinstance(self.master, bool):
            raise ValidationError("seed must be an integer")
        if self.master < 0:
            raise ValidationError(f"seed must be non-negative, got {self.master}")

    def derive(self, tag: str, index: int = 0) -> int:
        """Child master seed for (tag, index), usable to build a nested SeedSpec."""
        digest = hashlib.sha256(f"{self.master}/{tag}/{index}".encode()).digest()
        return int.from_bytes(digest[:16], "little")

    def child(self, tag: str, index: int = 0) -> "SeedSpec":
        return SeedSpec(self.derive(tag, index))

    def stream(self, tag: str, index: int = 0) -> np.random.Generator:
        """Independent generator keyed by (tag, index)."""
        return np.random.default_rng(self.derive(tag, index))


# ============================================================
# Site data
# ============================================================


@dataclass
class SiteDataset:
    """Rows held by a single site.

    Attributes:
        site_id: positive integer identifying the site (1 is the target site).
        y: outcomes, shape (n,), finite.
        z: treatment indicators in {0, 1}, shape (n,).
        x: covariates, shape (n, dim), finite.
    """

    site_id: int
    y: np.ndarray
    z: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        self.z = np.asarray(self.z)
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise ValidationError("x must be a 2-d array of shape (n, dim)")
        n = self.x.shape[0]
        if self.y.shape != (n,) or self.z.shape != (n,):
            raise ValidationError(
                f"inconsistent shapes: y {self.y.shape}, z {self.z.shape}, x {self.x.shape}"
            )
        if n == 0:
            raise ValidationError("dataset has no rows")
        if not (isinstance(self.site_id, (int, np.integer)) and self.site_id >= 1):
            raise ValidationError(f"site_id must be a positive integer, got {self.site_id!r}")
        if not np.all(np.isfinite(self.y)):
            bad = int(np.flatnonzero(~np.isfinite(self.y))[0])
            raise ValidationError(f"non-finite outcome in row {bad}")
        if not np.all(np.isfinite(self.x)):
            bad = int(np.flatnonzero(~np.isfinite(self.x).all(axis=1))[0])
            raise ValidationError(f"non-finite covariate in row {bad}")
        zf = np.asarray(self.z, dtype=np.float64)
        if not np.all((zf == 0.0) | (zf == 1.0)):
            bad = int(np.flatnonzero(~((zf == 0.0) | (zf == 1.0)))[0])
            raise ValidationError(f"treatment must be 0 or 1, got {self.z[bad]!r} in row {bad}")
        self.z = zf.astype(np.int64)
        n_treated = int(self.z.sum())
        if n_treated == 0 or n_treated == n:
            raise PositivityError(
                f"site {self.site_id}: both treatment arms must be present "
                f"({n_treated} treated of {n} rows)"
            )

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]


@dataclass
class SiteSplit:
    """Disjoint train/estimation partition of one site's rows."""

    train: SiteDataset
    estimation: SiteDataset
    train_indices: np.ndarray
    estimation_indices: np.ndarray


def round_half_up(v: float) -> int:
    """Nearest integer with halves rounded up; used for all size computations."""
    return int(np.floor(v + 0.5))


def _check_arms(label: str, z: np.ndarray) -> None:
    treated = int(z.sum())
    control = int(len(z) - treated)
    if treated < 2 or control < 2:
        raise PositivityError(
            f"{label} would hold {treated} treated and {control} control rows; "
            "need at least 2 of each"
        )


def split_site1(data: SiteDataset, fraction: float = 0.5, seed: int = 0) -> SiteSplit:
    """Randomly partition a site's rows into a train part and an estimation part.

    The train part receives round(fraction * n) rows.  The partition is a
    deterministic function of (data order, fraction, seed).

    Raises:
        ValidationError: fraction outside (0, 1).
        PositivityError: either part would end up with fewer than 2 treated
            or 2 control rows.
    """
    if not (0.0 < fraction < 1.0):
        raise ValidationError(f"split fraction must be in (0, 1), got {fraction}")
    n = data.n
    n_train = round_half_up(fraction * n)
    rng = SeedSpec(seed).stream("split", data.site_id)
    perm = rng.permutation(n)
    train_idx = np.sort(perm[:n_train])
    est_idx = np.sort(perm[n_train:])
    if n_train == 0 or n_train == n:
        raise PositivityError(
            f"split of {n} rows at fraction {fraction} leaves an empty part"
        )
    _check_arms("train part", data.z[train_idx])
    _check_arms("estimation part", data.z[est_idx])
    train = SiteDataset(data.site_id, data.y[train_idx], data.z[train_idx], data.x[train_idx])
    est = SiteDataset(data.site_id, data.y[est_idx], data.z[est_idx], data.x[est_idx])
    return SiteSplit(train, est, train_idx, est_idx)


# ============================================================
# CSV I/O
# ============================================================


def _expected_header(dim: int) -> list[str]:
    return ["y", "z"] + [f"x{j}" for j in range(1, dim + 1)]


def save_csv(data: SiteDataset, path: str) -> None:
    """Write a site dataset as ``y,z,x1,...,xD`` with exact float round-trip."""
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(_expected_header(data.dim))
            for i in range(data.n):
                writer.writerow(
                    [fmt_real(data.y[i]), str(int(data.z[i]))]
                    + [fmt_real(v) for v in data.x[i]]
                )
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_csv(path: str, expected_dim: int | None = None, site_id: int = 1) -> SiteDataset:
    """Read a site dataset written in the ``y,z,x1,...,xD`` layout.

    Args:
        path: CSV file with a header row.
        expected_dim: if given, the number of covariate columns must match.
        site_id: site identifier to attach (the file itself carries none).

    Raises:
        IoError: unreadable file.
        FormatError: missing or malformed header, wrong column count,
            or an unparsable cell (the message names the file line).
        ValidationError: non-finite values or a covariate-count mismatch.
        PositivityError: only one treatment arm present.
    """
    try:
        with open(path, "r", newline="") as fh:
            reader = csv.reader(fh)
            rows = list(reader)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise FormatError(f"{path}: empty file, expected a header row")
    header = [c.strip() for c in rows[0]]
    if len(header) < 3 or header[:2] != ["y", "z"]:
        raise FormatError(
            f"{path}: header must start with 'y,z,x1,...', got {','.join(header)!r}"
        )
    dim = len(header) - 2
    if header != _expected_header(dim):
        raise FormatError(
            f"{path}: covariate columns must be named x1..x{dim} in order, "
            f"got {','.join(header[2:])!r}"
        )
    if expected_dim is not None and dim != expected_dim:
        raise ValidationError(
            f"{path}: expected {expected_dim} covariate columns, file has {dim}"
        )
    if len(rows) == 1:
        raise FormatError(f"{path}: no data rows")

    n = len(rows) - 1
    y = np.empty(n)
    z = np.empty(n)
    x = np.empty((n, dim))
    for i, row in enumerate(rows[1:]):
        line_no = i + 2  # header is line 1
        if len(row) != dim + 2:
            raise FormatError(
                f"{path} line {line_no}: expected {dim + 2} columns, got {len(row)}"
            )
        try:
            vals = [float(c) for c in row]
        except ValueError as exc:
            raise FormatError(f"{path} line {line_no}: unparsable value ({exc})") from exc
        y[i], z[i] = vals[0], vals[1]
        x[i] = vals[2:]
        if not np.isfinite(y[i]):
            raise ValidationError(f"{path} line {line_no}: non-finite outcome")
        if not np.all(np.isfinite(x[i])):
            raise ValidationError(f"{path} line {line_no}: non-finite covariate")
        if z[i] not in (0.0, 1.0):
            raise ValidationError(f"{path} line {line_no}: treatment must be 0 or 1")
    return SiteDataset(site_id, y, z, x)
