"""Seed streams, site data validation, splitting, and CSV round-trips."""

import hashlib

import numpy as np
import pytest

from fedtree import (
    FormatError,
    IoError,
    PositivityError,
    SeedSpec,
    SiteDataset,
    ValidationError,
    load_csv,
    save_csv,
    split_site1,
)
from fedtree.dataset import fmt_real, round_half_up


def make_site(n=40, dim=3, seed=0, site_id=1):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, dim))
    z = rng.integers(0, 2, size=n)
    while z.sum() in (0, n):
        z = rng.integers(0, 2, size=n)
    y = x[:, 0] + z * 0.5 + rng.normal(size=n)
    return SiteDataset(site_id, y, z, x)


# ============================================================
# Seeds
# ============================================================


def test_seedspec_derivation_is_keyed_sha256():
    spec = SeedSpec(123)
    digest = hashlib.sha256(b"123/fit/4").digest()
    assert spec.derive("fit", 4) == int.from_bytes(digest[:16], "little")
    assert spec.derive("fit", 4) == spec.derive("fit", 4)
    assert spec.derive("fit", 4) != spec.derive("fit", 5)
    assert spec.derive("fit", 4) != spec.derive("fix", 4)
    assert spec.child("fit", 4).master == spec.derive("fit", 4)


def test_seedspec_streams_are_independent_and_reproducible():
    spec = SeedSpec(7)
    a1 = spec.stream("a").normal(size=5)
    a2 = spec.stream("a").normal(size=5)
    b = spec.stream("b").normal(size=5)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b)


def test_seedspec_rejects_bad_masters():
    with pytest.raises(ValidationError):
        SeedSpec(-1)
    with pytest.raises(ValidationError):
        SeedSpec(1.5)
    with pytest.raises(ValidationError):
        SeedSpec(True)


# ============================================================
# Site data
# ============================================================


def test_sitedataset_validation():
    x = np.zeros((4, 2))
    with pytest.raises(ValidationError):
        SiteDataset(1, np.zeros(3), np.array([0, 1, 0, 1]), x)
    with pytest.raises(ValidationError):
        SiteDataset(1, np.array([1.0, np.inf, 0, 0]), np.array([0, 1, 0, 1]), x)
    with pytest.raises(ValidationError):
        SiteDataset(1, np.zeros(4), np.array([0, 2, 0, 1]), x)
    with pytest.raises(ValidationError):
        SiteDataset(0, np.zeros(4), np.array([0, 1, 0, 1]), x)
    with pytest.raises(PositivityError):
        SiteDataset(1, np.zeros(4), np.array([1, 1, 1, 1]), x)
    data = SiteDataset(2, np.zeros(4), np.array([0.0, 1.0, 0.0, 1.0]), x)
    assert data.z.dtype == np.int64
    assert data.n == 4 and data.dim == 2 and data.site_id == 2


def test_round_half_up():
    assert round_half_up(0.5) == 1
    assert round_half_up(1.5) == 2
    assert round_half_up(2.5) == 3
    assert round_half_up(2.4999) == 2
    assert round_half_up(-0.5) == 0


# ============================================================
# Splitting
# ============================================================


def test_split_site1_partitions_rows():
    data = make_site(n=41)
    split = split_site1(data, fraction=0.5, seed=3)
    assert len(split.train_indices) == round_half_up(0.5 * 41)
    merged = np.concatenate([split.train_indices, split.estimation_indices])
    assert sorted(merged.tolist()) == list(range(41))
    assert split.train.site_id == split.estimation.site_id == data.site_id
    i = split.train_indices[5]
    assert split.train.y[5] == data.y[i]
    assert np.array_equal(split.train.x[5], data.x[i])

    again = split_site1(data, fraction=0.5, seed=3)
    assert np.array_equal(split.train_indices, again.train_indices)
    other = split_site1(data, fraction=0.5, seed=4)
    assert not np.array_equal(split.train_indices, other.train_indices)


def test_split_site1_validates_fraction_and_arms():
    data = make_site()
    with pytest.raises(ValidationError):
        split_site1(data, fraction=0.0)
    with pytest.raises(ValidationError):
        split_site1(data, fraction=1.0)
    x = np.zeros((8, 1))
    z = np.array([1, 0, 0, 0, 0, 0, 0, 0])
    skewed = SiteDataset(1, np.zeros(8), z, x)
    with pytest.raises(PositivityError):
        split_site1(skewed, fraction=0.5, seed=0)


# ============================================================
# CSV
# ============================================================


def test_csv_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(5)
    n = 25
    x = rng.normal(size=(n, 3))
    x[0, 0] = 0.1
    x[1, 1] = 1e-300
    x[2, 2] = np.nextafter(1.0, 2.0)
    z = rng.integers(0, 2, size=n)
    z[0], z[1] = 0, 1
    y = rng.normal(size=n) * 1e6
    data = SiteDataset(3, y, z, x)
    path = tmp_path / "site.csv"
    save_csv(data, str(path))
    back = load_csv(str(path), expected_dim=3, site_id=3)
    assert np.array_equal(back.y, data.y)
    assert np.array_equal(back.z, data.z)
    assert np.array_equal(back.x, data.x)
    assert back.site_id == 3


def test_fmt_real_round_trips():
    for v in (0.1, -1e-300, 1e300, 3.141592653589793, np.nextafter(0.5, 1.0)):
        assert float(fmt_real(v)) == v


def test_load_csv_error_reporting(tmp_path):
    p = tmp_path / "bad.csv"

    p.write_text("")
    with pytest.raises(FormatError):
        load_csv(str(p))

    p.write_text("a,b,c\n1,0,2\n")
    with pytest.raises(FormatError):
        load_csv(str(p))

    p.write_text("y,z,x2,x1\n1,0,2,3\n")
    with pytest.raises(FormatError):
        load_csv(str(p))

    p.write_text("y,z,x1\n")
    with pytest.raises(FormatError):
        load_csv(str(p))

    p.write_text("y,z,x1\n1,0,2\n1,1\n")
    with pytest.raises(FormatError, match="line 3"):
        load_csv(str(p))

    p.write_text("y,z,x1\n1,0,oops\n")
    with pytest.raises(FormatError, match="line 2"):
        load_csv(str(p))

    p.write_text("y,z,x1\n1,0,2\n2,1,3\n")
    with pytest.raises(ValidationError):
        load_csv(str(p), expected_dim=2)

    p.write_text("y,z,x1\n1,0,2\n2,3,3\n")
    with pytest.raises(ValidationError):
        load_csv(str(p))

    with pytest.raises(IoError):
        load_csv(str(tmp_path / "missing.csv"))
