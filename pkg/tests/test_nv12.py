import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamnerf.nv12 import Nv12Frame, nv12_to_rgba, rgba_to_nv12

cv2 = pytest.importorskip("cv2")


def uniform_frame(w, h, y, u, v):
    uv = np.empty((h // 2, w // 2, 2), np.uint8)
    uv[..., 0], uv[..., 1] = u, v
    return Nv12Frame(w, h, bytes([y]) * (w * h), uv.tobytes())


def test_black_white_gray():
    assert (nv12_to_rgba(uniform_frame(4, 2, 16, 128, 128)) == [0, 0, 0, 255]).all()
    assert (nv12_to_rgba(uniform_frame(4, 2, 235, 128, 128)) == [255, 255, 255, 255]).all()
    g = nv12_to_rgba(uniform_frame(4, 2, 126, 128, 128))
    assert (g[..., 0] == g[..., 1]).all() and (g[..., 1] == g[..., 2]).all()
    assert (g[..., 3] == 255).all()


def test_encode_black_and_white():
    for value, y in ((0, 16), (255, 235)):
        img = np.full((2, 4, 4), value, np.uint8)
        f = rgba_to_nv12(img)
        assert set(f.y_plane) == {y}
        assert set(f.uv_plane) == {128}


def test_matches_opencv_decoder(rng):
    w, h = 32, 16
    # legal ranges only; OpenCV clamps Y below 16 before scaling
    data = np.concatenate([rng.integers(16, 236, w * h), rng.integers(16, 241, w * h // 2)]).astype(np.uint8)
    ours = nv12_to_rgba(Nv12Frame.from_bytes(data.tobytes(), w, h))
    ref = cv2.cvtColor(data.reshape(h * 3 // 2, w), cv2.COLOR_YUV2RGBA_NV12)
    # OpenCV works in fixed point; allow one code of rounding
    assert np.abs(ours.astype(int) - ref.astype(int)).max() <= 1


def test_matches_opencv_on_natural_colors(rng):
    w, h = 64, 32
    rgba = np.full((h, w, 4), 255, np.uint8)
    rgba[..., :3] = rng.integers(20, 236, (h // 2, w // 2, 3)).repeat(2, 0).repeat(2, 1)
    f = rgba_to_nv12(rgba)
    ref = cv2.cvtColor(np.frombuffer(f.to_bytes(), np.uint8).reshape(h * 3 // 2, w), cv2.COLOR_YUV2RGBA_NV12)
    assert np.abs(nv12_to_rgba(f).astype(int) - ref.astype(int)).max() <= 1


@settings(max_examples=60, deadline=None)
@given(st.tuples(st.integers(0, 255), st.integers(0, 255), st.integers(0, 255)),
       st.sampled_from([(2, 2), (4, 6), (8, 4)]))
def test_uniform_round_trip_within_two(color, size):
    h, w = size
    img = np.empty((h, w, 4), np.uint8)
    img[..., :3] = color
    img[..., 3] = 255
    back = nv12_to_rgba(rgba_to_nv12(img))
    assert np.abs(back.astype(int) - img.astype(int)).max() <= 2


def test_round_trip_two_by_two_constant_chroma(rng):
    img = np.full((8, 8, 4), 255, np.uint8)
    img[..., :3] = rng.integers(0, 256, (4, 4, 3)).repeat(2, 0).repeat(2, 1)
    back = nv12_to_rgba(rgba_to_nv12(img))
    assert np.abs(back.astype(int) - img.astype(int)).max() <= 2


@settings(max_examples=100, deadline=None)
@given(st.binary(min_size=24, max_size=24))
def test_any_bytes_decode_in_range(data):
    out = nv12_to_rgba(Nv12Frame.from_bytes(data, 4, 4))
    assert out.dtype == np.uint8 and (out[..., 3] == 255).all()
    uv = np.frombuffer(data[16:], np.uint8).reshape(2, 2, 2)
    gray = np.repeat(np.repeat((uv == 128).all(axis=2), 2, 0), 2, 1)
    assert (out[gray][:, 0] == out[gray][:, 1]).all() and (out[gray][:, 1] == out[gray][:, 2]).all()


def test_odd_dimensions_rejected():
    with pytest.raises(ValueError):
        rgba_to_nv12(np.zeros((3, 4, 4), np.uint8))
    with pytest.raises(ValueError):
        Nv12Frame(3, 2, bytes(6), bytes(3))
    with pytest.raises(ValueError):
        Nv12Frame.from_bytes(bytes(10), 4, 2)
