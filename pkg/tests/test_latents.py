import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avbind import tensorio
from avbind.config import CodecConfig
from avbind.latents import AudioLatent, Codecs, ReferenceSignal, VideoLatent


@pytest.fixture(scope="module")
def codecs():
    return Codecs(CodecConfig(), model_width=64)


def rng():
    return np.random.default_rng(0)


def test_zero_frames_encode_to_zero_latent(codecs):
    frames = np.zeros((2, 8, 8, 3))
    lat = codecs.encode_video(frames)
    assert lat.data.shape == (2, 2, 2, 48)
    assert np.all(lat.data == 0)


def test_video_round_trip(codecs):
    frames = rng().standard_normal((3, 16, 16, 3))
    back = codecs.decode_video(codecs.encode_video(frames))
    assert np.max(np.abs(back - frames)) < 1e-5


def test_single_frame_latent_shape(codecs):
    lat = codecs.encode_video(np.ones((1, 8, 8, 3)))
    assert lat.data.shape == (1, 2, 2, 48)


def test_audio_zero_and_shape(codecs):
    lat = codecs.encode_audio(np.zeros((160, 1)))
    assert lat.data.shape == (10, 16)
    assert np.all(lat.data == 0)


def test_audio_round_trip(codecs):
    wave = rng().standard_normal((320, 1))
    back = codecs.decode_audio(codecs.encode_audio(wave))
    assert np.max(np.abs(back - wave)) < 1e-5


def test_encode_linearity(codecs):
    g = rng()
    x, y = g.standard_normal((2, 16, 16, 3)), g.standard_normal((2, 16, 16, 3))
    a, b = 0.7, -1.3
    lhs = codecs.encode_video(a * x + b * y).data
    rhs = a * codecs.encode_video(x).data + b * codecs.encode_video(y).data
    assert np.max(np.abs(lhs - rhs)) < 1e-6

    u, v = g.standard_normal((64, 1)), g.standard_normal((64, 1))
    lhs = codecs.encode_audio(a * u + b * v).data
    rhs = a * codecs.encode_audio(u).data + b * codecs.encode_audio(v).data
    assert np.max(np.abs(lhs - rhs)) < 1e-6


def test_dimension_mismatch_errors(codecs):
    with pytest.raises(ValueError, match="not divisible"):
        codecs.encode_video(np.zeros((1, 10, 8, 3)))
    with pytest.raises(ValueError, match="not divisible"):
        codecs.encode_audio(np.zeros((17, 1)))
    with pytest.raises(ValueError, match="expected frames"):
        codecs.encode_video(np.zeros((1, 8, 8, 2)))


@settings(deadline=None, max_examples=50)
@given(
    t=st.integers(1, 4),
    hp=st.integers(1, 5),
    wp=st.integers(1, 5),
    steps=st.integers(1, 12),
)
def test_shape_contract(t, hp, wp, steps):
    codecs = Codecs(CodecConfig(), model_width=64)
    frames = np.zeros((t, hp * 4, wp * 4, 3))
    assert codecs.encode_video(frames).data.shape == (t, hp, wp, 48)
    wave = np.zeros((steps * 16, 1))
    assert codecs.encode_audio(wave).data.shape == (steps, 16)


def test_round_trip_property(codecs):
    g = rng()
    for _ in range(20):
        t, hp, wp = g.integers(1, 4), g.integers(1, 4), g.integers(1, 4)
        frames = g.standard_normal((t, hp * 4, wp * 4, 3))
        assert np.max(np.abs(codecs.decode_video(codecs.encode_video(frames)) - frames)) < 1e-5
        wave = g.standard_normal((int(g.integers(1, 12)) * 16, 1))
        assert np.max(np.abs(codecs.decode_audio(codecs.encode_audio(wave)) - wave)) < 1e-5


def test_width_projection_is_isometric_and_invertible(codecs):
    lat = codecs.encode_video(rng().standard_normal((2, 16, 16, 3)))
    toks = codecs.video_tokens(lat)
    assert toks.shape == (2 * 4 * 4, 64)
    back = codecs.video_from_tokens(toks, (2, 4, 4))
    assert np.max(np.abs(back - lat.data)) < 1e-6
    assert abs(np.linalg.norm(toks) - np.linalg.norm(lat.data)) < 1e-6

    alat = codecs.encode_audio(rng().standard_normal((64, 1)))
    atoks = codecs.audio_tokens(alat)
    assert atoks.shape == (4, 64)
    assert np.max(np.abs(codecs.audio_from_tokens(atoks) - alat.data)) < 1e-6


def test_tokenize_visual_reference_counts(codecs):
    img = rng().standard_normal((8, 8, 3))
    one = ReferenceSignal("visual", [img], identity_slot=1)
    assert codecs.tokenize_reference(one).shape == (4, 64)

    four = ReferenceSignal("visual", [img] * 4, identity_slot=2)
    assert codecs.tokenize_reference(four).shape == (16, 64)


def test_tokenize_audio_reference_counts(codecs):
    wave = rng().standard_normal((160, 1))
    ref = ReferenceSignal("auditory", wave, identity_slot=1)
    assert codecs.tokenize_reference(ref).shape == (10, 64)


def test_reference_signal_validation():
    with pytest.raises(ValueError, match="at least one image"):
        ReferenceSignal("visual", [], identity_slot=1)
    with pytest.raises(ValueError, match="share dimensions"):
        ReferenceSignal("visual", [np.zeros((8, 8, 3)), np.zeros((4, 4, 3))], identity_slot=1)
    with pytest.raises(ValueError, match="slot"):
        ReferenceSignal("auditory", np.zeros((16, 1)), identity_slot=0)


def test_latent_invariants():
    with pytest.raises(ValueError, match="non-finite"):
        VideoLatent(np.full((1, 1, 1, 4), np.nan), fps_latent=8.0)
    with pytest.raises(ValueError, match="positive dims"):
        AudioLatent(np.zeros((0, 4)), tokens_per_second=32.0)


def test_tensor_container_round_trip(tmp_path):
    arr = rng().standard_normal((3, 5, 2)).astype(np.float32)
    path = tmp_path / "lat.iapl"
    tensorio.save_tensor(path, arr)
    again = tensorio.load_tensor(path)
    assert again.dtype == np.float32
    assert np.array_equal(arr, again)
    raw = path.read_bytes()
    assert raw[:4] == b"IAPL"


def test_tensor_container_rejects_bad_magic():
    with pytest.raises(ValueError, match="magic"):
        tensorio.read_tensor(io.BytesIO(b"NOPE" + b"\x00" * 16))


def test_checkpoint_container_round_trip(tmp_path):
    tensors = {"b": np.ones((2, 2), np.float32), "a": np.arange(4, dtype=np.float32)}
    meta = {"stage": "stage1_audio", "step": 7, "seed": 3, "config_hash": "abc"}
    path = tmp_path / "ckpt.iapc"
    tensorio.save_checkpoint(path, meta, tensors)
    meta2, tensors2 = tensorio.load_checkpoint(path)
    assert meta2 == meta
    assert sorted(tensors2) == ["a", "b"]
    assert np.array_equal(tensors2["a"], tensors["a"])
    # byte determinism: same content, same bytes
    path2 = tmp_path / "ckpt2.iapc"
    tensorio.save_checkpoint(path2, meta, dict(reversed(list(tensors.items()))))
    assert path.read_bytes() == path2.read_bytes()
