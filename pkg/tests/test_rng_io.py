import numpy as np
import pytest
from scipy import stats

from spem.errors import FormatError
from spem.io import ByteReader, atomic_write_bytes, atomic_write_text
from spem.rng import Stream, derive_key, derive_seed


def test_same_labels_same_stream():
    a = Stream(7, "x", 1).normal(100)
    b = Stream(7, "x", 1).normal(100)
    assert np.array_equal(a, b)


def test_labels_separate_streams():
    assert not np.array_equal(Stream(7, "x").uniform(10), Stream(7, "y").uniform(10))
    assert derive_key(1, "a") != derive_key(2, "a")
    # an int label and its string form must not collide
    assert derive_key(0, 1) != derive_key(0, "1")


def test_derive_seed_range():
    s = derive_seed(123, "sample", 4)
    assert 0 <= s < 2 ** 63


def test_uniform_open_interval_and_moments():
    u = Stream(0, "u").uniform(200_000)
    assert u.min() > 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.005


def test_normal_passes_ks():
    z = Stream(1, "n").normal(20_000)
    assert stats.kstest(z, "norm").pvalue > 0.01


def test_permutation_and_choice():
    p = Stream(0, "p").permutation(50)
    assert sorted(p.tolist()) == list(range(50))
    idx = Stream(0, "c").choice([0.0, 1.0, 0.0, 3.0], 4000)
    assert set(np.unique(idx)) <= {1, 3}
    assert abs(np.mean(idx == 3) - 0.75) < 0.03


def test_atomic_write_replaces(tmp_path):
    target = tmp_path / "f.txt"
    atomic_write_text(target, "one")
    atomic_write_bytes(target, b"two")
    assert target.read_bytes() == b"two"
    assert [p.name for p in tmp_path.iterdir()] == ["f.txt"]


def test_byte_reader_truncation():
    r = ByteReader(b"MAGIC\x01\x00", "mem")
    r.expect_magic(b"MAGIC")
    with pytest.raises(FormatError):
        r.unpack("<I")


def test_byte_reader_bad_magic_and_trailing():
    with pytest.raises(FormatError):
        ByteReader(b"NOPE", "mem").expect_magic(b"MAGIC")
    r = ByteReader(b"ab", "mem")
    r.take(1)
    with pytest.raises(FormatError):
        r.expect_end()
