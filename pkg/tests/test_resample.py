import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from pbbn.resample import (Image, InterpMethod, ResizePolicy, axis_weights, choose_target_size,
                           preprocess, read_pnm, resize, resize_float, select_method, write_pnm)

METHODS = list(InterpMethod)


def img(a):
    return Image(np.asarray(a, dtype=np.uint8))


def random_image(rng, h, w, c=1):
    return Image(rng.integers(0, 256, (h, w, c), dtype=np.uint8))


def test_exactly_five_methods():
    assert {m.value for m in InterpMethod} == {"nn", "bilinear", "area", "bicubic", "lanczos4"}


@pytest.mark.parametrize("token,method", [("BC", InterpMethod.BICUBIC), ("bl", InterpMethod.BILINEAR),
                                          ("Lanczos", InterpMethod.LANCZOS4), ("area", InterpMethod.AREA)])
def test_parse_aliases(token, method):
    assert InterpMethod.parse(token) is method


def test_nn_checkerboard_replication():
    out = resize(img([[0, 255], [255, 0]]), 4, 4, InterpMethod.NEAREST)
    want = np.kron(np.array([[0, 255], [255, 0]]), np.ones((2, 2), int))
    assert np.array_equal(out.pixels[:, :, 0], want)


@pytest.mark.parametrize("method", METHODS)
def test_constant_preserved_downsample(method):
    out = resize(img(np.full((4, 4), 100)), 2, 2, method)
    assert np.all(out.pixels == 100)


def test_area_integer_decimation_block_means():
    src = np.arange(16).reshape(4, 4, 1) * 13 % 256
    out = resize(img(src), 2, 2, InterpMethod.AREA)
    want = oracles.block_means(src.astype(float), 2)
    assert np.array_equal(out.pixels, np.floor(want + 0.5).astype(np.uint8))


def test_zero_target_rejected():
    with pytest.raises(ValueError):
        resize(img(np.zeros((4, 4))), 0, 4, InterpMethod.BILINEAR)


def test_bicubic_weights_use_a_minus_075():
    m = axis_weights(4, 8, InterpMethod.BICUBIC)
    t = 0.25  # destination 2 maps to source 0.75, which is 0.25 from tap 1
    a = -0.75
    near = (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
    assert m[2, 1] == pytest.approx(near, abs=1e-15)


def test_lanczos_rows_normalized():
    m = axis_weights(10, 23, InterpMethod.LANCZOS4)
    assert np.allclose(m.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("method", ["nn", "bilinear", "bicubic", "lanczos4", "area"])
@pytest.mark.parametrize("src_shape,dst", [((7, 5, 1), (13, 9)), ((16, 16, 3), (6, 11)),
                                           ((9, 12, 1), (9, 4))])
def test_matches_joint_2d_oracle(method, src_shape, dst):
    rng = np.random.default_rng(11)
    src = rng.integers(0, 256, src_shape).astype(float)
    got = resize_float(src, *dst, InterpMethod(method))
    assert np.allclose(got, oracles.resample_2d(src, *dst, method), atol=1e-9)


@pytest.mark.parametrize("method", [InterpMethod.BILINEAR, InterpMethod.BICUBIC, InterpMethod.LANCZOS4])
def test_separable_equals_joint_within_one_level(method):
    rng = np.random.default_rng(5)
    for _ in range(5):
        src = random_image(rng, 16, 16)
        th, tw = rng.integers(4, 30, 2)
        joint = np.clip(np.floor(oracles.resample_2d(src.pixels.astype(float), th, tw, method.value)
                                 + 0.5), 0, 255)
        got = resize(src, th, tw, method).pixels
        assert np.abs(got.astype(int) - joint.astype(int)).max() <= 1


def test_choose_target_size_examples():
    assert choose_target_size([(96, 96)]) == (96, 96)
    assert choose_target_size([(50, 50), (142, 142)]) == (96, 96)
    assert choose_target_size([(3, 3)]) == (8, 8)
    assert choose_target_size([(10, 10), (11, 11)]) == (11, 11)  # 10.5 rounds up


def test_choose_target_size_empty():
    with pytest.raises(ValueError):
        choose_target_size([])


def test_policy_floor():
    with pytest.raises(ValueError):
        ResizePolicy(7, 96)


POLICY = ResizePolicy(96, 96, InterpMethod.BICUBIC, InterpMethod.BILINEAR)


def test_preprocess_upsamples_with_up_method():
    rng = np.random.default_rng(0)
    small = random_image(rng, 50, 50, 3)
    assert select_method(small, POLICY) is InterpMethod.BICUBIC
    t = preprocess(small, POLICY)
    assert t.shape == (96, 96, 3)
    want = resize(small, 96, 96, InterpMethod.BICUBIC).pixels / np.float32(255)
    assert np.array_equal(t.numpy(), want.astype(np.float32))


def test_preprocess_downsamples_with_down_method():
    rng = np.random.default_rng(1)
    big = random_image(rng, 120, 120)
    assert select_method(big, POLICY) is InterpMethod.BILINEAR
    want = resize(big, 96, 96, InterpMethod.BILINEAR).pixels / np.float32(255)
    assert np.array_equal(preprocess(big, POLICY).numpy(), want.astype(np.float32))


def test_preprocess_saturated_passthrough():
    t = preprocess(img(np.full((96, 96), 255)), POLICY)
    assert select_method(img(np.full((96, 96), 255)), POLICY) is None
    assert np.all(t.numpy() == 1.0)


def test_preprocess_same_area_other_shape_uses_down():
    assert select_method(img(np.zeros((48, 192))), POLICY) is InterpMethod.BILINEAR


image_dims = st.tuples(st.integers(1, 12), st.integers(1, 12), st.sampled_from([1, 3]))


@settings(max_examples=40, deadline=None)
@given(image_dims, st.sampled_from(METHODS), st.integers(0, 2**32 - 1))
def test_identity_resize_exact(dims, method, seed):
    src = random_image(np.random.default_rng(seed), *dims)
    assert resize(src, dims[0], dims[1], method) == src


@settings(max_examples=40, deadline=None)
@given(image_dims, st.integers(1, 20), st.integers(1, 20), st.sampled_from(METHODS),
       st.integers(0, 255))
def test_constant_preserved_any_size(dims, th, tw, method, value):
    src = Image(np.full(dims, value, dtype=np.uint8))
    assert np.all(resize(src, th, tw, method).pixels == value)


@settings(max_examples=40, deadline=None)
@given(image_dims, st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_nn_outputs_are_input_values(dims, th, tw, seed):
    src = random_image(np.random.default_rng(seed), *dims)
    out = resize(src, th, tw, InterpMethod.NEAREST)
    for c in range(dims[2]):
        assert set(np.unique(out.pixels[..., c])) <= set(np.unique(src.pixels[..., c]))


@settings(max_examples=40, deadline=None)
@given(image_dims, st.integers(1, 20), st.integers(1, 20),
       st.sampled_from([InterpMethod.NEAREST, InterpMethod.BILINEAR, InterpMethod.AREA]),
       st.integers(0, 2**32 - 1))
def test_monotone_methods_stay_in_input_range(dims, th, tw, method, seed):
    src = random_image(np.random.default_rng(seed), *dims)
    out = resize_float(src.pixels, th, tw, method)
    assert out.min() >= src.pixels.min() - 1e-9
    assert out.max() <= src.pixels.max() + 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_area_decimation_property(bh, bw, k, seed):
    src = np.random.default_rng(seed).integers(0, 256, (bh * k, bw * k, 1)).astype(float)
    got = resize_float(src, bh, bw, InterpMethod.AREA)
    assert np.abs(got - oracles.block_means(src, k)).max() < 1e-9


@settings(max_examples=30, deadline=None)
@given(image_dims, st.integers(8, 20), st.integers(8, 20), st.sampled_from(METHODS),
       st.sampled_from(METHODS), st.integers(0, 2**32 - 1))
def test_preprocess_range(dims, th, tw, up, down, seed):
    src = random_image(np.random.default_rng(seed), *dims)
    t = preprocess(src, ResizePolicy(th, tw, up, down)).numpy()
    assert t.shape == (th, tw, dims[2])
    assert t.min() >= 0 and t.max() <= 1


# -- PGM / PPM ---------------------------------------------------------------------

@pytest.mark.parametrize("channels,magic", [(1, b"P5"), (3, b"P6")])
def test_pnm_round_trip(tmp_path, channels, magic):
    src = random_image(np.random.default_rng(2), 5, 7, channels)
    path = tmp_path / "x.pnm"
    write_pnm(path, src)
    raw = path.read_bytes()
    assert raw.startswith(magic) and b"#" not in raw[:20]
    assert read_pnm(path) == src


def test_pnm_reads_header_comments(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x07\x09")
    assert read_pnm(path).pixels[:, :, 0].tolist() == [[7, 9]]


@pytest.mark.parametrize("data", [b"P2\n1 1\n255\n0", b"P5\n1 1\n65535\n\x00\x00"])
def test_pnm_rejects_unsupported(tmp_path, data):
    path = tmp_path / "bad.pgm"
    path.write_bytes(data)
    with pytest.raises(ValueError):
        read_pnm(path)
