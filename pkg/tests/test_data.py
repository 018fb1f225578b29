import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snnq.data import (
    BadMagicError,
    CoordinateRangeError,
    EmptyStreamError,
    EventStream,
    SyntheticSpec,
    TimestampOrderError,
    TruncatedFileError,
    UnsupportedVersionError,
    decode_event_file,
    encode_event_file,
    events_to_frames,
    gen_synthetic,
    read_event_file,
    split,
    to_arrays,
    write_event_file,
)


def stream(n, width=8, height=8, seed=0, label=0):
    rng = np.random.default_rng(seed)
    return EventStream.from_arrays(
        width, height, np.sort(rng.integers(0, 10_000, n)),
        rng.integers(0, width, n), rng.integers(0, height, n), rng.integers(0, 2, n), label,
    )


# -- integration ---------------------------------------------------------------------

def test_one_event_per_slice():
    ft = events_to_frames(stream(10), 10)
    assert ft.frames.shape == (10, 2, 8, 8)
    np.testing.assert_array_equal(ft.frames.sum(axis=(1, 2, 3)), np.ones(10))


def test_events_accumulate_per_pixel():
    s = EventStream.from_arrays(4, 4, [0, 1, 2], [1, 1, 1], [1, 1, 1], [0, 0, 0])
    assert events_to_frames(s, 3, by="duration").frames[0, 0, 1, 1] == 1
    s = EventStream.from_arrays(4, 4, [0, 0, 0], [1, 1, 1], [1, 1, 1], [0, 0, 0])
    assert events_to_frames(s, 1).frames[0, 0, 1, 1] == 3


def test_remainder_goes_to_last_slice():
    counts = events_to_frames(stream(25), 10).frames.sum(axis=(1, 2, 3))
    np.testing.assert_array_equal(counts, [2] * 9 + [7])


def test_duration_slicing_by_time():
    s = EventStream.from_arrays(2, 1, [0, 10, 90, 100], [0, 1, 0, 1], [0, 0, 0, 0], [1, 1, 0, 0])
    counts = events_to_frames(s, 2, by="duration").frames.sum(axis=(1, 2, 3))
    np.testing.assert_array_equal(counts, [2, 2])


def test_bad_slicing_arguments():
    with pytest.raises(ValueError, match="slicing policy"):
        events_to_frames(stream(5), 2, by="rate")
    with pytest.raises(ValueError):
        events_to_frames(stream(5), 0)
    with pytest.raises(EmptyStreamError):
        events_to_frames(EventStream(4, 4), 2)


@settings(max_examples=40)
@given(st.integers(1, 300), st.integers(1, 12), st.sampled_from(["count", "duration"]))
def test_integration_conserves_events(n, t, by):
    s = stream(n, seed=n)
    assert events_to_frames(s, t, by).frames.sum() == n


@settings(max_examples=40)
@given(st.integers(1, 200), st.integers(1, 12))
def test_count_slices_follow_rank_order(n, t):
    # give every event its own pixel so a frame reveals which events it holds
    s = EventStream.from_arrays(n, 1, np.arange(n), np.arange(n), np.zeros(n), np.zeros(n))
    frames = events_to_frames(s, t).frames[:, 0, 0, :]
    slice_of = np.argmax(frames, axis=0)
    assert np.all(np.diff(slice_of) >= 0)
    assert np.all(frames.sum(axis=0) == 1)


# -- event files ---------------------------------------------------------------------

def test_file_round_trip(tmp_path):
    s = stream(50, label=2)
    path = tmp_path / "a.aer"
    write_event_file(s, path)
    back = read_event_file(path)
    assert back.label == 2 and len(back) == 50
    np.testing.assert_array_equal(back.events, s.events)
    write_event_file(back, tmp_path / "b.aer")
    assert (tmp_path / "b.aer").read_bytes() == path.read_bytes()


def test_single_record_file():
    assert len(decode_event_file(encode_event_file(stream(1)))) == 1


def test_empty_payload_rejected():
    with pytest.raises(EmptyStreamError):
        decode_event_file(encode_event_file(EventStream(4, 4)))


def test_bad_magic_and_version():
    buf = bytearray(encode_event_file(stream(3)))
    with pytest.raises(BadMagicError):
        decode_event_file(b"XXXX" + bytes(buf[4:]))
    buf[4] = 9
    with pytest.raises(UnsupportedVersionError):
        decode_event_file(bytes(buf))


def test_truncation_reports_record():
    buf = encode_event_file(stream(10))
    with pytest.raises(TruncatedFileError, match="record 7 of 10"):
        decode_event_file(buf[: len(buf) - 9 * 3 + 4])


def test_timestamp_regression_cites_record():
    s = stream(10)
    ev = s.events.copy()
    buf = bytearray(encode_event_file(s))
    ev["t"][6] = 0
    ev["t"][5] = 5_000
    ev["t"][:5] = np.arange(5)
    header = len(buf) - ev.nbytes
    buf[header:] = ev.tobytes()
    with pytest.raises(TimestampOrderError, match="record 6"):
        decode_event_file(bytes(buf))


def test_coordinate_out_of_range_cites_record():
    s = stream(6, width=4, height=4)
    buf = bytearray(encode_event_file(s))
    header = len(buf) - s.events.nbytes
    ev = s.events.copy()
    ev["x"][4] = 4
    buf[header:] = ev.tobytes()
    with pytest.raises(CoordinateRangeError, match="record 4"):
        decode_event_file(bytes(buf))


def test_stream_validates_on_construction():
    with pytest.raises(ValueError):
        EventStream.from_arrays(4, 4, [5, 1], [0, 0], [0, 0], [0, 0])
    with pytest.raises(ValueError):
        EventStream.from_arrays(4, 4, [0], [0], [0], [2])


# -- synthetic data ------------------------------------------------------------------

def test_synthetic_deterministic_and_balanced():
    spec = SyntheticSpec(samples_per_class=200, events_per_sample=100)
    a = gen_synthetic(spec, seed=3)
    b = gen_synthetic(spec, seed=3)
    assert len(a) == 600
    assert np.bincount([lab for _, lab in a]).tolist() == [200, 200, 200]
    for (sa, _), (sb, _) in zip(a, b):
        np.testing.assert_array_equal(sa.events, sb.events)


def test_concentrated_map_without_noise():
    maps = np.zeros((2, 6, 6))
    maps[0, 2, 3] = 1.0
    maps[1, 4, 1] = 1.0
    spec = SyntheticSpec(n_classes=2, samples_per_class=3, height=6, width=6,
                         events_per_sample=50, noise_rate=0.0, jitter=0, rate_maps=maps)
    for s, lab in gen_synthetic(spec, seed=0):
        y, x = (2, 3) if lab == 0 else (4, 1)
        assert np.all(s.events["x"] == x) and np.all(s.events["y"] == y)


def test_identical_class_maps_rejected():
    with pytest.raises(ValueError, match="same rate map"):
        SyntheticSpec(n_classes=2, height=4, width=4, rate_maps=np.ones((2, 4, 4)))


# -- splitting -----------------------------------------------------------------------

def test_split_sizes_and_partition():
    data = list(range(10))
    train, test = split(data, 0.2, seed=0)
    assert (len(train), len(test)) == (8, 2)
    assert not set(train) & set(test)
    assert sorted(train + test) == data
    assert split(data, 0.2, seed=0) == (train, test)


def test_split_rejects_bad_fraction():
    with pytest.raises(ValueError):
        split([1, 2, 3], 1.0)


def test_to_arrays_shapes():
    X, y = to_arrays(gen_synthetic(SyntheticSpec(samples_per_class=2, events_per_sample=40)), 5)
    assert X.shape == (6, 5, 2, 16, 16) and X.dtype == np.float32
    assert y.tolist() == [0, 1, 2, 0, 1, 2]
