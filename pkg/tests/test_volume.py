import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdcuda.volume import (LabelVolume, MiniVolume, Volume, VolumeFormatError, extract_mini_volume,
                           load_volume, normalize_intensity, save_volume, stack_center_slices)


def _ramp(D=5, H=3, W=4):
    return Volume(np.arange(D * H * W, dtype=np.float32).reshape(D, H, W), (2.0, 0.5, 0.5))


def test_minimal_file(tmp_path):
    path = tmp_path / "v.svol"
    header = b'{"dims":[2,2,2],"spacing":[1,1,1],"dtype":"f32","kind":"image"}\n'
    path.write_bytes(header + np.arange(8, dtype="<f4").tobytes())
    v = load_volume(path)
    assert isinstance(v, Volume) and v.dims == (2, 2, 2)
    assert v.data.size == 8


def test_payload_length_mismatch(tmp_path):
    path = tmp_path / "v.svol"
    header = b'{"dims":[2,2,2],"spacing":[1,1,1],"dtype":"f32","kind":"image"}\n'
    path.write_bytes(header + np.arange(7, dtype="<f4").tobytes())
    with pytest.raises(VolumeFormatError, match="payload length mismatch"):
        load_volume(path)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "nope.svol")


def test_non_finite_rejected(tmp_path):
    path = tmp_path / "v.svol"
    header = b'{"dims":[1,1,2],"spacing":[1,1,1],"dtype":"f32","kind":"image"}\n'
    path.write_bytes(header + np.array([1.0, np.nan], dtype="<f4").tobytes())
    with pytest.raises(VolumeFormatError, match="non-finite"):
        load_volume(path)


def test_label_out_of_range_rejected(tmp_path):
    path = tmp_path / "y.svol"
    header = b'{"dims":[1,1,2],"spacing":[1,1,1],"dtype":"f32","kind":"label","num_classes":2}\n'
    path.write_bytes(header + np.array([1.0, 2.0], dtype="<f4").tobytes())
    with pytest.raises(VolumeFormatError, match="out of range"):
        load_volume(path)


def test_label_non_integer_rejected():
    with pytest.raises(VolumeFormatError):
        LabelVolume(np.full((1, 1, 2), 0.5, dtype=np.float32), 2)


def test_unsupported_dtype(tmp_path):
    path = tmp_path / "v.svol"
    path.write_bytes(b'{"dims":[1,1,1],"spacing":[1,1,1],"dtype":"f64","kind":"image"}\n' + b"\0" * 4)
    with pytest.raises(VolumeFormatError):
        load_volume(path)


def test_label_round_trip(tmp_path):
    y = LabelVolume(np.random.default_rng(0).integers(0, 3, size=(3, 4, 5)), 3, (1.0, 2.0, 3.0))
    save_volume(y, tmp_path / "y.svol")
    back = load_volume(tmp_path / "y.svol")
    assert isinstance(back, LabelVolume) and back.num_classes == 3
    np.testing.assert_array_equal(back.data, y.data)
    assert back.spacing == y.spacing


@settings(max_examples=60, deadline=None)
@given(dims=st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
       spacing=st.tuples(*[st.floats(0.01, 10.0, allow_nan=False)] * 3),
       seed=st.integers(0, 2**32 - 1), label=st.booleans())
def test_round_trip_byte_identical(tmp_path_factory, dims, spacing, seed, label):
    rng = np.random.default_rng(seed)
    if label:
        v = LabelVolume(rng.integers(0, 4, size=dims), 4, spacing)
    else:
        v = Volume(rng.normal(scale=100, size=dims).astype(np.float32), spacing)
    d = tmp_path_factory.mktemp("rt")
    save_volume(v, d / "a.svol")
    raw = (d / "a.svol").read_bytes()
    save_volume(load_volume(d / "a.svol"), d / "b.svol")
    assert (d / "b.svol").read_bytes() == raw


def test_volume_is_immutable():
    v = _ramp()
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1


def test_invalid_spacing():
    with pytest.raises(VolumeFormatError):
        Volume(np.zeros((1, 1, 1)), (1.0, 0.0, 1.0))


def test_extract_interior():
    v = _ramp()
    m = extract_mini_volume(v, 2)
    np.testing.assert_array_equal(m.slices, v.data[[1, 2, 3]])
    assert m.center_index == 2


@pytest.mark.parametrize("t,idx", [(0, [0, 0, 1]), (4, [3, 4, 4])])
def test_extract_edges_replicate(t, idx):
    v = _ramp()
    np.testing.assert_array_equal(extract_mini_volume(v, t).slices, v.data[idx])


def test_extract_out_of_range():
    with pytest.raises(IndexError):
        extract_mini_volume(_ramp(), 5)


def test_center_slice_is_source_slice():
    v = _ramp(D=7)
    for t in range(7):
        np.testing.assert_array_equal(extract_mini_volume(v, t).slices[1], v.data[t])


def test_identity_stack_recovers_volume():
    v = _ramp()
    out = stack_center_slices([extract_mini_volume(v, t) for t in range(v.depth)], v.spacing)
    assert out.dims == v.dims
    np.testing.assert_array_equal(out.data, v.data)


def test_stack_gap_rejected():
    v = _ramp()
    minis = [extract_mini_volume(v, t) for t in (0, 1, 3, 4)]
    with pytest.raises(ValueError, match="gap in slice coverage"):
        stack_center_slices(minis)


def test_stack_duplicate_rejected():
    v = _ramp()
    minis = [extract_mini_volume(v, t) for t in (0, 1, 1, 2)]
    with pytest.raises(ValueError, match="duplicate"):
        stack_center_slices(minis)


def test_stack_shape_mismatch():
    a = MiniVolume(np.zeros((3, 2, 2)), 0)
    b = MiniVolume(np.zeros((3, 2, 3)), 1)
    with pytest.raises(ValueError, match="shape mismatch"):
        stack_center_slices([a, b])


def test_minmax_linear():
    v = Volume(np.array([0.0, 5.0, 10.0]).reshape(1, 1, 3))
    np.testing.assert_array_equal(normalize_intensity(v, "minmax").data.ravel(), [0.0, 0.5, 1.0])


def test_minmax_idempotent():
    v = Volume(np.random.default_rng(1).normal(size=(4, 5, 6)) * 37 + 3)
    once = normalize_intensity(v, "minmax")
    twice = normalize_intensity(once, "minmax")
    np.testing.assert_array_equal(once.data, twice.data)


def test_zscore_moments():
    v = Volume(np.random.default_rng(2).gamma(2.0, 3.0, size=(6, 7, 8)), (1.0, 2.0, 3.0))
    z = normalize_intensity(v, "zscore")
    data = z.data.astype(np.float64)
    assert abs(data.mean()) < 1e-6 and abs(data.std() - 1) < 1e-6
    assert z.dims == v.dims and z.spacing == v.spacing


def test_zscore_constant_rejected():
    with pytest.raises(ValueError):
        normalize_intensity(Volume(np.ones((2, 2, 2))), "zscore")
