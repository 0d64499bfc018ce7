import struct
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from odda.audio_io import (
    AudioClip,
    DatasetManifest,
    ManifestEntry,
    NoiseProfile,
    TARGET,
    dataset_storage_bytes,
    load_wav,
    read_manifest,
    storage_bytes,
    synth_dataset,
    synth_noise,
    write_dataset,
    write_manifest,
    write_wav,
)
from odda.errors import ConfigError, DataError


def _raw_wav(path, channels=1, width=2, rate=16000, frames=16000):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(rate)
        w.writeframes(b"\x00" * frames * channels * width)


def _float_wav(path, n=16000):
    data = np.zeros(n, "<f4").tobytes()
    fmt = struct.pack("<HHIIHH", 3, 1, 16000, 64000, 4, 32)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
    path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def test_load_one_second(tmp_path):
    _raw_wav(tmp_path / "a.wav")
    clip = load_wav(tmp_path / "a.wav")
    assert len(clip) == 16000
    assert clip.samples.dtype == np.int16
    assert clip.sample_rate == 16000


def test_load_noise_length(tmp_path):
    _raw_wav(tmp_path / "n.wav", frames=40000)
    assert len(load_wav(tmp_path / "n.wav")) == 40000


def test_little_endian_decode(tmp_path):
    samples = np.array([1, -2, 32767, -32768, 256], dtype=np.int16)
    write_wav(tmp_path / "x.wav", AudioClip(samples))
    raw = (tmp_path / "x.wav").read_bytes()
    assert raw[-10:] == samples.astype("<i2").tobytes()
    np.testing.assert_array_equal(load_wav(tmp_path / "x.wav").samples, samples)


@pytest.mark.parametrize(
    "kw",
    [dict(channels=2), dict(rate=8000), dict(width=1), dict(width=3)],
    ids=["stereo", "8khz", "8bit", "24bit"],
)
def test_unsupported_format(tmp_path, kw):
    _raw_wav(tmp_path / "bad.wav", **kw)
    with pytest.raises(DataError) as e:
        load_wav(tmp_path / "bad.wav")
    assert e.value.code == "UNSUPPORTED_FORMAT"


def test_float_wav_rejected(tmp_path):
    _float_wav(tmp_path / "f.wav")
    with pytest.raises(DataError) as e:
        load_wav(tmp_path / "f.wav")
    assert e.value.code == "UNSUPPORTED_FORMAT"


def test_not_riff(tmp_path):
    (tmp_path / "junk.wav").write_bytes(b"OggS" + b"\x00" * 100)
    with pytest.raises(DataError) as e:
        load_wav(tmp_path / "junk.wav")
    assert e.value.code == "MALFORMED_CONTAINER"


def test_truncated_data(tmp_path):
    _raw_wav(tmp_path / "t.wav")
    raw = (tmp_path / "t.wav").read_bytes()
    (tmp_path / "t.wav").write_bytes(raw[:1000])
    with pytest.raises(DataError) as e:
        load_wav(tmp_path / "t.wav")
    assert e.value.code == "MALFORMED_CONTAINER"


def test_missing_file(tmp_path):
    with pytest.raises(DataError) as e:
        load_wav(tmp_path / "nope.wav")
    assert e.value.code == "MISSING_FILE"


def test_storage_bytes():
    assert storage_bytes(AudioClip(np.zeros(16000, np.int16))) == 32000
    assert storage_bytes(AudioClip(np.zeros(0, np.int16))) == 0
    m = synth_dataset(12, 10, seed=3).subset(synth_dataset(12, 10, seed=3).entries[:100])
    assert dataset_storage_bytes(m) == 3_200_000


def test_clip_range_check():
    with pytest.raises(DataError):
        AudioClip(np.array([40000]))
    with pytest.raises(DataError):
        AudioClip(np.zeros(10, np.int16), sample_rate=8000)


@pytest.mark.parametrize("task_size", [6, 12, 35])
def test_synth_counts(task_size):
    m = synth_dataset(task_size, 3, seed=0)
    assert len(m.entries) == 3 * task_size
    assert m.task_size == task_size
    assert all(len(m.get_clip(e)) == 16000 for e in m.entries)


def test_synth_310_per_class():
    m = synth_dataset(12, 310, seed=0)
    assert len(m.entries) == 3720
    counts = np.bincount([e.label for e in m.entries])
    assert set(counts) == {310}


def test_synth_invalid_task_size():
    with pytest.raises(ConfigError) as e:
        synth_dataset(10, 5, seed=0)
    assert e.value.code == "INVALID_TASK_SIZE"


def _digest(m):
    return [m.get_clip(e).samples.tobytes() for e in m.entries]


def test_synth_deterministic():
    a, b = synth_dataset(6, 4, seed=11), synth_dataset(6, 4, seed=11)
    assert a.entries == b.entries
    assert _digest(a) == _digest(b)
    assert _digest(a) != _digest(synth_dataset(6, 4, seed=12))


def test_splits_disjoint():
    m = synth_dataset(12, 20, seed=0)
    paths = [set(e.path for e in m.split(s)) for s in ("train", "validation", "test")]
    assert not (paths[0] & paths[1] or paths[0] & paths[2] or paths[1] & paths[2])
    assert sum(map(len, paths)) == len(m.entries)


def test_manifest_rejects_overlap():
    e = [ManifestEntry("a.wav", 0, "train"), ManifestEntry("a.wav", 0, "test")]
    with pytest.raises(DataError):
        DatasetManifest(e, [f"c{i}" for i in range(6)], 6)
    with pytest.raises(DataError):
        DatasetManifest([ManifestEntry("b.wav", 6, "train")], [f"c{i}" for i in range(6)], 6)


def test_manifest_round_trip(tmp_path):
    m = synth_dataset(6, 3, seed=2)
    path = write_dataset(tmp_path / "ds", m)
    back = read_manifest(path)
    assert back.entries == m.entries
    assert back.class_names == m.class_names
    text = path.read_text(encoding="utf-8").splitlines()
    assert text[0] == "path,label,split"
    e = back.entries[4]
    np.testing.assert_array_equal(back.get_clip(e).samples, m.get_clip(e).samples)


def test_manifest_missing(tmp_path):
    with pytest.raises(DataError) as e:
        read_manifest(tmp_path / "manifest.csv")
    assert "manifest.csv" in str(e.value)


def test_manifest_bad_header(tmp_path):
    m = synth_dataset(6, 1, seed=0)
    write_manifest(m, tmp_path / "m.csv")
    (tmp_path / "m.csv").write_text("file,label,split\n", encoding="utf-8")
    with pytest.raises(DataError):
        read_manifest(tmp_path / "m.csv")


def test_noise_kinds():
    for kind in ("white", "pink", "brown", "hum", "machine", "babble"):
        clip = synth_noise(kind, 2.0, seed=0)
        assert len(clip) == 32000 and clip.label is None
        rms = np.sqrt(np.mean(clip.as_float() ** 2))
        assert abs(rms - 0.1 * 32767 / 32768) < 2e-3
    assert not synth_noise("silence", 1.0).samples.any()
    with pytest.raises(ConfigError):
        synth_noise("traffic", 1.0)
    with pytest.raises(ConfigError):
        synth_noise("white", 0.5)


def test_noise_profile_roles():
    p = NoiseProfile(synth_noise("white", 1.0), TARGET)
    assert p.name == "white"
    with pytest.raises(ConfigError):
        NoiseProfile(synth_noise("white", 1.0), "OTHER")


@settings(max_examples=25, deadline=None)
@given(arrays(np.int16, st.integers(1, 3000)))
def test_wav_round_trip(tmp_path_factory, samples):
    path = tmp_path_factory.mktemp("wav") / "r.wav"
    write_wav(path, AudioClip(samples))
    np.testing.assert_array_equal(load_wav(path).samples, samples)
