from pathlib import Path

import numpy as np
import pytest

from face2cognition.cae import (
    CaeTrainConfig,
    EncoderConfig,
    cae_checkpoint,
    cosine_similarity,
    decode,
    decode_tensor,
    encode,
    encode_batch,
    encode_tensor,
    encoder_shape_ladder,
    init_cae,
    load_cae,
    reconstruct,
    reconstruction_mse,
    similarity_profile,
    train_cae,
)
from face2cognition.numerics import Tensor, cast_params, gradcheck, mse
from face2cognition.storage import load_checkpoint, save_checkpoint
from face2cognition.utils import DataError

SMALL = EncoderConfig(image_size=32).scaled(16, (1, 1, 1, 1))


def _faces(n: int, size: int = 32, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = []
    for _ in range(n):
        cx, cy, r = rng.uniform(0.35, 0.65), rng.uniform(0.35, 0.65), rng.uniform(0.2, 0.35)
        blob = ((xx - cx) ** 2 + (yy - cy) ** 2 < r * r).astype(np.float32)
        out.append(np.stack([blob * c for c in rng.uniform(0.3, 1.0, 3)], axis=-1))
    return np.asarray(out, dtype=np.float32)


def test_full_profile_shape_ladder():
    """The full encoder reproduces the ResNet-50 spatial ladder for 96x96 input."""
    ladder = encoder_shape_ladder(EncoderConfig.full())
    assert [name for name, _ in ladder] == ["conv1", "pool", "conv2_x", "conv3_x", "conv4_x",
                                            "conv5_x"]
    assert [shape for _, shape in ladder] == [(64, 48, 48), (64, 24, 24), (256, 24, 24),
                                              (512, 12, 12), (1024, 6, 6), (2048, 3, 3)]
    assert EncoderConfig.full().latent_dim == 128


def test_desk_profile_runs_the_same_ladder():
    model = init_cae(EncoderConfig.desk(), seed=0)
    trace = []
    x = Tensor(np.random.default_rng(0).random((1, 3, 96, 96), dtype=np.float32))
    z = encode_tensor(model, x, trace=trace)
    assert [tuple(shape[1:]) for _, shape in trace] == [(48, 48), (24, 24), (24, 24), (12, 12),
                                                         (6, 6), (3, 3)]
    assert trace == [(n, tuple(s)) for n, s in encoder_shape_ladder(EncoderConfig.desk())]
    assert z.shape == (1, 128)


def test_encode_and_decode_contracts():
    model = init_cae(SMALL, seed=1)
    img = _faces(1)[0]
    z = encode(model, img)
    assert z.shape == (128,)
    assert np.all(np.isfinite(z))
    assert np.array_equal(z, encode(model, img.copy())), "identical images give identical latents"

    out = decode(model, np.zeros(128, dtype=np.float32))
    assert out.shape == (32, 32, 3)
    assert np.all((out >= 0) & (out <= 1))
    assert reconstruct(model, _faces(2)).shape == (2, 32, 32, 3)

    with pytest.raises(ValueError):
        encode(model, np.zeros((31, 32, 3)))
    with pytest.raises(ValueError):
        decode(model, np.zeros(64))


def test_zero_image_encodes_to_zero_latent():
    """With zero biases and fresh statistics a black image maps to the zero latent."""
    model = init_cae(EncoderConfig.desk(), seed=2)
    z = encode(model, np.zeros((96, 96, 3), dtype=np.float32))
    assert np.array_equal(z, np.zeros(128, dtype=np.float32))


def test_encode_batch_is_order_preserving():
    model = init_cae(SMALL, seed=3)
    faces = _faces(5)
    whole = encode_batch(model, faces, batch_size=2)
    assert whole.shape == (5, 128)
    assert np.allclose(whole[3], encode(model, faces[3]), atol=1e-6)
    assert encode_batch(model, faces[:0]).shape == (0, 128)


def test_width_reduced_cae_gradients_match_finite_differences():
    cfg = EncoderConfig(image_size=32).scaled(8, (1, 1, 1, 1))
    model = init_cae(cfg, seed=4).astype(np.float64)
    params = cast_params(model.params, np.float64)
    x = Tensor(_faces(2).transpose(0, 3, 1, 2).astype(np.float64), dtype=np.float64)

    def loss_fn(ps):
        z = encode_tensor(model, x, train=False, params=ps)
        return mse(decode_tensor(model, z, train=False, params=ps), x)

    errors = gradcheck(loss_fn, params, h=1e-6, max_entries=3)
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-4, f"{worst}: relative error {errors[worst]}"


def test_train_cae_reduces_loss_and_is_deterministic():
    faces = _faces(8)
    cfg = CaeTrainConfig(epochs=4, batch_size=4, lr=3e-3, seed=5)
    first = train_cae(faces, cfg, encoder_config=SMALL, verbose=False)
    second = train_cae(faces, cfg, encoder_config=SMALL, verbose=False)
    assert len(first.mse_curve) == 4
    assert first.mse_curve[-1] <= first.mse_curve[0]
    assert first.mse_curve == second.mse_curve


def test_train_cae_rejects_empty_dataset():
    with pytest.raises(DataError):
        train_cae(np.zeros((0, 32, 32, 3)), CaeTrainConfig(epochs=1), encoder_config=SMALL,
                  verbose=False)
    with pytest.raises(ValueError):
        CaeTrainConfig(epochs=0)


def test_reconstruction_mse_ignores_batch_order():
    model = init_cae(SMALL, seed=6)
    faces = _faces(4)
    forward = reconstruction_mse(model, faces)
    backward = reconstruction_mse(model, faces[::-1])
    assert forward == pytest.approx(backward, rel=1e-6)


def test_cae_checkpoint_round_trip(tmp_path: Path):
    result = train_cae(_faces(4), CaeTrainConfig(epochs=1, batch_size=2, seed=7),
                       encoder_config=SMALL, verbose=False)
    path = tmp_path / "cae.tsck"
    save_checkpoint(result.checkpoint(), path)
    ckpt = load_checkpoint(path)
    assert ckpt.config["mse_curve"] == pytest.approx(result.mse_curve)

    restored = load_cae(ckpt)
    faces = _faces(3, seed=1)
    assert np.array_equal(encode_batch(restored, faces), encode_batch(result.model, faces))

    ckpt.kind = "transformer"
    with pytest.raises(DataError, match="CAE"):
        load_cae(ckpt)


def test_cae_checkpoint_keeps_running_statistics():
    model = init_cae(SMALL, seed=8)
    model.stats["enc.stem.bn"].mean[:] = 0.25
    ckpt = cae_checkpoint(model, CaeTrainConfig())
    assert np.all(ckpt.params["bn/enc.stem.bn/mean"] == 0.25)
    assert np.all(load_cae(ckpt).stats["enc.stem.bn"].mean == 0.25)


def test_cosine_similarity_examples():
    u = np.array([1.0, 2.0, 3.0])
    assert cosine_similarity(u, u) == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [0, 1]) == pytest.approx(0.0)
    assert cosine_similarity(u, -u) == pytest.approx(-1.0)
    with pytest.raises(ValueError, match="zero-norm"):
        cosine_similarity(u, np.zeros(3))


def test_cosine_similarity_is_symmetric_and_scale_invariant():
    rng = np.random.default_rng(9)
    for _ in range(100):
        u, v = rng.standard_normal(128), rng.standard_normal(128)
        a, b = rng.uniform(0.01, 100, size=2)
        assert cosine_similarity(u, v) == pytest.approx(cosine_similarity(v, u), abs=1e-12)
        assert cosine_similarity(a * u, b * v) == pytest.approx(cosine_similarity(u, v), abs=1e-6)


def test_similarity_profile_starts_at_one():
    latents = np.random.default_rng(10).standard_normal((5, 128))
    profile = similarity_profile(latents, reference_index=2)
    assert profile.shape == (5,)
    assert profile[2] == pytest.approx(1.0)
