import hashlib

import numpy as np
import pytest

from filterprior.errors import (
    EmptyBankError,
    FormatError,
    TruncationError,
    ValidationError,
)
from filterprior.tensorio import (
    FilterBank,
    FilterMeta,
    GmmFile,
    TensorArchive,
    TensorEntry,
    extract_filters,
    read_fbank,
    read_gmm,
    read_tarc,
    write_fbank,
    write_gmm,
    write_tarc,
)

from conftest import make_bank


def random_archive(rng, max_tensors=5):
    entries = []
    for i in range(rng.integers(0, max_tensors + 1)):
        rank = int(rng.integers(1, 5))
        shape = tuple(int(d) for d in rng.integers(1, 5, size=rank))
        if rng.random() < 0.5 and rank >= 2:
            shape = shape[:-2] + (3, 3)
        data = rng.standard_normal(shape).astype(np.float32)
        entries.append(TensorEntry(f"t{i}", data))
    return TensorArchive(entries)


# ---------------------------------------------------------------------------
# TARC

def test_empty_archive_is_twelve_bytes(tmp_path):
    p = tmp_path / "empty.tarc"
    write_tarc(TensorArchive([]), p)
    assert p.stat().st_size == 12


def test_tarc_round_trip_bit_exact(tmp_path, rng):
    data = rng.standard_normal((2, 1, 3, 3)).astype(np.float32)
    arc = TensorArchive([TensorEntry("c1", data)])
    p = tmp_path / "a.tarc"
    write_tarc(arc, p)
    back = read_tarc(p)
    assert back.names() == ["c1"]
    assert back.entries[0].shape == (2, 1, 3, 3)
    assert back.entries[0].data.tobytes() == data.tobytes()


def test_tarc_byte_length_accounting(tmp_path, rng):
    shapes = {"conv_a": (4, 2, 3, 3), "bias_b": (7,)}
    arc = TensorArchive(
        [TensorEntry(n, rng.standard_normal(s).astype(np.float32)) for n, s in shapes.items()]
    )
    p = tmp_path / "two.tarc"
    write_tarc(arc, p)
    # independent accounting from the shape table alone
    expected = 12
    for name, shape in shapes.items():
        expected += 2 + len(name) + 1 + 4 * len(shape) + 4 * int(np.prod(shape))
    assert p.stat().st_size == expected


def test_tarc_bad_magic(tmp_path):
    p = tmp_path / "bad.tarc"
    p.write_bytes(b"NOPE" + b"\x00" * 8)
    with pytest.raises(FormatError):
        read_tarc(p)


def test_tarc_bad_version(tmp_path):
    p = tmp_path / "bad.tarc"
    p.write_bytes(b"TARC" + (99).to_bytes(4, "little") + (0).to_bytes(4, "little"))
    with pytest.raises(FormatError):
        read_tarc(p)


def test_tarc_truncated_payload(tmp_path, rng):
    arc = TensorArchive([TensorEntry("w", rng.standard_normal((2, 3, 3)).astype(np.float32))])
    p = tmp_path / "full.tarc"
    write_tarc(arc, p)
    clipped = tmp_path / "clipped.tarc"
    clipped.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(TruncationError):
        read_tarc(clipped)


def test_tarc_trailing_garbage_rejected(tmp_path):
    p = tmp_path / "pad.tarc"
    write_tarc(TensorArchive([]), p)
    p.write_bytes(p.read_bytes() + b"\x00")
    with pytest.raises(FormatError):
        read_tarc(p)


def test_tarc_duplicate_names_rejected(tmp_path):
    arc = TensorArchive(
        [TensorEntry("w", np.zeros((1,), np.float32)), TensorEntry("w", np.ones((1,), np.float32))]
    )
    with pytest.raises(ValidationError):
        write_tarc(arc, tmp_path / "dup.tarc")


def test_tarc_round_trip_randomized(tmp_path, rng):
    for i in range(50):
        arc = random_archive(rng)
        p = tmp_path / f"r{i}.tarc"
        write_tarc(arc, p)
        first = p.read_bytes()
        back = read_tarc(p)
        p2 = tmp_path / f"r{i}b.tarc"
        write_tarc(back, p2)
        assert p2.read_bytes() == first


# ---------------------------------------------------------------------------
# extract_filters

def test_extract_counts_mixed_archive(rng):
    arc = TensorArchive(
        [
            TensorEntry("conv1", rng.standard_normal((64, 3, 3, 3)).astype(np.float32)),
            TensorEntry("bias", rng.standard_normal((10,)).astype(np.float32)),
        ]
    )
    bank = extract_filters(arc)
    assert bank.n == 64 * 3
    assert bank.dim == 9


def test_extract_counts_large_conv(rng):
    arc = TensorArchive(
        [TensorEntry("conv", rng.standard_normal((128, 64, 3, 3)).astype(np.float32))]
    )
    assert extract_filters(arc).n == 8192


def test_extract_vgg16_like_shape_table(rng):
    # thirteen 3x3 conv tensors with VGG-16 channel progression
    channels = [
        (64, 3), (64, 64),
        (128, 64), (128, 128),
        (256, 128), (256, 256), (256, 256),
        (512, 256), (512, 512), (512, 512),
        (512, 512), (512, 512), (512, 512),
    ]
    entries = [
        TensorEntry(f"conv{i}", rng.standard_normal((co, ci, 3, 3)).astype(np.float32))
        for i, (co, ci) in enumerate(channels)
    ]
    entries.append(TensorEntry("fc", rng.standard_normal((10, 25088)).astype(np.float32)))
    bank = extract_filters(TensorArchive(entries))
    # independent summation over the shape table
    assert bank.n == sum(co * ci for co, ci in channels)


def test_extract_ordering_and_meta(rng):
    data = rng.standard_normal((2, 3, 3, 3)).astype(np.float32)
    arc = TensorArchive([TensorEntry("w", data)])
    bank = extract_filters(arc)
    # archive order then leading-index lexicographic; row-major flattening
    i = 0
    for o in range(2):
        for c in range(3):
            assert bank.meta[i] == FilterMeta("w", o, c)
            np.testing.assert_array_equal(bank.vectors[i], data[o, c].reshape(9).astype(np.float64))
            i += 1


def test_extract_skips_non_3x3():
    arc = TensorArchive(
        [
            TensorEntry("five", np.zeros((4, 2, 5, 5), np.float32)),
            TensorEntry("vec", np.zeros((9,), np.float32)),
        ]
    )
    with pytest.raises(EmptyBankError):
        extract_filters(arc)


def test_extract_count_ignores_values(rng):
    # count is a pure function of the shape table
    shape = (6, 4, 3, 3)
    a = TensorArchive([TensorEntry("w", rng.standard_normal(shape).astype(np.float32))])
    b = TensorArchive([TensorEntry("w", np.zeros(shape, np.float32))])
    assert extract_filters(a).n == extract_filters(b).n == 24


def test_extract_rank2_and_rank3():
    arc = TensorArchive(
        [
            TensorEntry("k2", np.arange(9, dtype=np.float32).reshape(3, 3)),
            TensorEntry("k3", np.arange(18, dtype=np.float32).reshape(2, 3, 3)),
        ]
    )
    bank = extract_filters(arc)
    assert bank.n == 3
    assert bank.meta[0] == FilterMeta("k2", 0, 0)
    assert bank.meta[1] == FilterMeta("k3", 0, 0)
    assert bank.meta[2] == FilterMeta("k3", 1, 0)
    np.testing.assert_array_equal(bank.vectors[0], np.arange(9.0))


# ---------------------------------------------------------------------------
# FBNK

def test_fbank_empty_is_sixteen_bytes(tmp_path):
    bank = FilterBank(np.zeros((0, 9)), [])
    p = tmp_path / "e.fbank"
    write_fbank(bank, p)
    assert p.stat().st_size == 16


def test_fbank_single_filter_size(tmp_path):
    p = tmp_path / "one.fbank"
    write_fbank(make_bank(np.arange(9.0)), p)
    assert p.stat().st_size == 16 + 36


def test_fbank_round_trip_checksum(tmp_path, rng):
    vecs = rng.standard_normal((1000, 9)).astype(np.float32).astype(np.float64)
    bank = make_bank(vecs)
    p = tmp_path / "big.fbank"
    write_fbank(bank, p)
    back = read_fbank(p)
    np.testing.assert_array_equal(back.vectors, vecs)
    assert back.meta == bank.meta
    # independent hash of the numeric payload
    payload = p.read_bytes()[16:]
    assert hashlib.sha256(payload).hexdigest() == hashlib.sha256(
        vecs.astype("<f4").tobytes()
    ).hexdigest()
    # rewrite is byte-identical
    p2 = tmp_path / "big2.fbank"
    write_fbank(back, p2)
    assert p2.read_bytes() == p.read_bytes()


def test_fbank_nonstandard_dim_warns(tmp_path, rng):
    bank = FilterBank(rng.standard_normal((3, 4)), [FilterMeta("t", i, 0) for i in range(3)])
    p = tmp_path / "odd.fbank"
    with pytest.warns(UserWarning):
        write_fbank(bank, p)
    with pytest.warns(UserWarning):
        back = read_fbank(p)
    assert back.dim == 4


def test_fbank_truncation(tmp_path, rng):
    p = tmp_path / "t.fbank"
    write_fbank(make_bank(rng.standard_normal((4, 9))), p)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(TruncationError):
        read_fbank(p)


def test_fbank_missing_sidecar_defaults(tmp_path, rng):
    p = tmp_path / "m.fbank"
    write_fbank(make_bank(rng.standard_normal((2, 9))), p)
    (tmp_path / "m.fbank.meta").unlink()
    back = read_fbank(p)
    assert back.meta == [FilterMeta("", 0, 0), FilterMeta("", 0, 0)]


# ---------------------------------------------------------------------------
# GMM text format

def test_gmm_round_trip_standard_normal(tmp_path):
    model = GmmFile(dim=9, weights=np.ones(1), means=np.zeros((1, 9)), variances=np.ones((1, 9)))
    p = tmp_path / "m.gmm"
    write_gmm(model, p)
    back = read_gmm(p)
    assert back.dim == 9 and back.k == 1
    np.testing.assert_array_equal(back.weights, model.weights)
    np.testing.assert_array_equal(back.means, model.means)
    np.testing.assert_array_equal(back.variances, model.variances)


def test_gmm_weights_sum_exactly_one(tmp_path):
    model = GmmFile(
        dim=2,
        weights=np.array([0.3, 0.7]),
        means=np.zeros((2, 2)),
        variances=np.ones((2, 2)),
    )
    p = tmp_path / "w.gmm"
    write_gmm(model, p)
    assert float(read_gmm(p).weights.sum()) == 1.0


def test_gmm_double_round_trip_fixed_point(tmp_path, rng):
    k, dim = 64, 9
    w = rng.random(k)
    model = GmmFile(
        dim=dim,
        weights=w / w.sum(),
        means=rng.standard_normal((k, dim)),
        variances=np.exp(rng.standard_normal((k, dim))),
    )
    p1, p2 = tmp_path / "a.gmm", tmp_path / "b.gmm"
    write_gmm(model, p1)
    write_gmm(read_gmm(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_gmm_rejects_bad_weight_sum(tmp_path):
    p = tmp_path / "bad.gmm"
    p.write_text(
        "GMM 1\ndim 1\ncomponents 2\nweights 0.5 0.6\n"
        "mean 0 0\nvar 0 1\nmean 1 0\nvar 1 1\n"
    )
    with pytest.raises(ValidationError):
        read_gmm(p)


def test_gmm_rejects_nonpositive_variance(tmp_path):
    p = tmp_path / "bad.gmm"
    p.write_text("GMM 1\ndim 1\ncomponents 1\nweights 1\nmean 0 0\nvar 0 0\n")
    with pytest.raises(ValidationError):
        read_gmm(p)


def test_gmm_truncated(tmp_path):
    p = tmp_path / "short.gmm"
    p.write_text("GMM 1\ndim 1\ncomponents 2\nweights 0.5 0.5\nmean 0 0\nvar 0 1\n")
    with pytest.raises(TruncationError):
        read_gmm(p)


def test_gmm_bad_header(tmp_path):
    p = tmp_path / "h.gmm"
    p.write_text("MIX 1\n")
    with pytest.raises(FormatError):
        read_gmm(p)
