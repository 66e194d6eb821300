import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freqseg.dct import (
    ConfigurationError,
    InvalidSizeError,
    channel_filters,
    dct2,
    dct2_direct,
    idct2,
    make_basis,
    multispectral_extract,
    zigzag_order,
)
from freqseg.tensor import Tensor


def test_basis_n1():
    assert make_basis(1).basis1d.tolist() == [[1.0]]


def test_basis_dc_row():
    assert np.abs(make_basis(8).basis1d[0] - np.sqrt(1 / 8)).max() < 1e-15


@pytest.mark.parametrize("N", [2, 4, 8, 16, 32])
def test_basis_orthonormal(N):
    b = make_basis(N).basis1d
    assert np.abs(b @ b.T - np.eye(N)).max() < 1e-12


def test_basis_is_read_only_and_cached():
    b = make_basis(8)
    assert b is make_basis(8)
    with pytest.raises(ValueError):
        b.basis1d[0, 0] = 1.0


def test_basis_rejects_zero():
    with pytest.raises(InvalidSizeError):
        make_basis(0)


def test_constant_block():
    F = dct2(np.ones((8, 8)), make_basis(8)).data
    assert abs(F[0, 0] - 8.0) < 1e-12
    F[0, 0] = 0.0
    assert np.abs(F).max() < 1e-12


def test_zero_block():
    assert not dct2(np.zeros((8, 8)), make_basis(8)).data.any()
    assert not idct2(np.zeros((8, 8)), make_basis(8)).data.any()


def test_inverse_of_constant():
    spec = np.zeros((8, 8))
    spec[0, 0] = 8.0
    assert np.abs(idct2(spec, make_basis(8)).data - 1.0).max() < 1e-12


def test_delta_block_matches_quadruple_loop():
    f = np.zeros((8, 8))
    f[3, 2] = 1.0
    assert np.abs(dct2(f, make_basis(8)).data - dct2_direct(f)).max() < 1e-12


@pytest.mark.parametrize("N", [2, 4, 8])
def test_random_block_matches_quadruple_loop(rng, N):
    f = rng.normal(size=(N, N))
    assert np.abs(dct2(f, make_basis(N)).data - dct2_direct(f)).max() < 1e-12


def test_round_trip_100_blocks(rng):
    blocks = rng.normal(size=(100, 8, 8))
    b = make_basis(8)
    assert np.abs(idct2(dct2(blocks, b), b).data - blocks).max() < 1e-9


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25)
def test_parseval(seed):
    f = np.random.default_rng(seed).uniform(-1, 1, size=(8, 8))
    F = dct2(f, make_basis(8)).data
    assert abs((f ** 2).sum() - (F ** 2).sum()) < 1e-12


def test_dct_shape_mismatch():
    from freqseg.tensor import DimensionError

    with pytest.raises(DimensionError):
        dct2(np.zeros((4, 4)), make_basis(8))


def test_zigzag_small():
    assert zigzag_order(1).order == ((0, 0),)
    assert zigzag_order(2).order == ((0, 0), (0, 1), (1, 0), (1, 1))


def test_zigzag_jpeg_prefix():
    assert zigzag_order(8).order[:10] == (
        (0, 0), (0, 1), (1, 0), (2, 0), (1, 1), (0, 2), (0, 3), (1, 2), (2, 1), (3, 0),
    )


@pytest.mark.parametrize("N", [2, 4, 8, 16])
def test_zigzag_is_permutation(N):
    order = zigzag_order(N).order
    assert len(order) == N * N
    assert set(order) == {(u, v) for u in range(N) for v in range(N)}


def test_zigzag_steps_are_adjacent():
    order = zigzag_order(8).order
    for (a, b), (c, d) in zip(order, order[1:]):
        assert max(abs(a - c), abs(b - d)) == 1


def test_extract_constant_map():
    v = multispectral_extract(Tensor(np.full((128, 16, 16), 0.5)), zigzag_order(8), make_basis(8))
    vals = v.values.data
    assert v.groups == 64 and v.group_size == 2
    assert np.abs(vals[:2] - 4.0).max() < 1e-12
    assert np.abs(vals[2:]).max() < 1e-12


def test_extract_own_patterns_give_ones():
    basis, assign = make_basis(8), zigzag_order(8)
    x = np.stack([basis.pattern(u, v) for u, v in assign.order])
    vals = multispectral_extract(Tensor(x), assign, basis).values.data
    assert np.abs(vals - 1.0).max() < 1e-12


def test_extract_matches_full_spectrum_gather(rng):
    basis, assign = make_basis(8), zigzag_order(8)
    x = rng.normal(size=(128, 16, 16))
    vals = multispectral_extract(Tensor(x), assign, basis).values.data
    pooled = x.reshape(128, 8, 2, 8, 2).mean(axis=(2, 4))
    spectra = dct2(pooled, basis).data
    ref = np.array([spectra[k, assign.order[k // 2][0], assign.order[k // 2][1]] for k in range(128)])
    assert np.abs(vals - ref).max() < 1e-12


def test_extract_batched_equals_per_image(rng):
    basis, assign = make_basis(4), zigzag_order(4)
    x = rng.normal(size=(3, 32, 8, 8))
    batched = multispectral_extract(Tensor(x), assign, basis).values.data
    for b in range(3):
        single = multispectral_extract(Tensor(x[b]), assign, basis).values.data
        assert np.array_equal(batched[b], single)


def test_extract_channel_divisibility():
    with pytest.raises(ConfigurationError, match="divisible"):
        channel_filters(30, zigzag_order(8), make_basis(8))


def test_group_of():
    v = multispectral_extract(Tensor(np.zeros((8, 4, 4))), zigzag_order(2), make_basis(2))
    assert [v.group_of(k) for k in range(8)] == [0, 0, 1, 1, 2, 2, 3, 3]
