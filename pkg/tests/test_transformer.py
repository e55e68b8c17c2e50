from pathlib import Path

import numpy as np
import pytest

from face2cognition.numerics import Tensor, gradcheck
from face2cognition.storage import load_checkpoint, save_checkpoint
from face2cognition.temporal import SequenceBatch
from face2cognition.transformer import (
    TransformerConfig,
    TransformerTrainConfig,
    attention,
    bce,
    class_weight_beta,
    clip_triples,
    embed_inputs,
    forward,
    init_transformer,
    load_transformer,
    multi_head,
    sequence_loss,
    train_transformer,
    weighted_bce,
    zero_position_tables,
)
from face2cognition.utils import DataError

TINY = dict(num_layers=1, hidden_dim=8, num_heads=2, mlp_head_dims=(6, 4, 2), dropout=0.0,
            seq_len=3, max_sequences=4, max_segments=3)


def _dense_attention(q, k, v):
    scores = q @ k.T / np.sqrt(q.shape[-1])
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        w = np.exp(scores[i] - scores[i].max())
        w = w / w.sum()
        for j in range(k.shape[0]):
            out[i] += w[j] * v[j]
    return out


def _triples(n: int, l: int, m0: int = 0) -> np.ndarray:
    tri = np.zeros((n, l + 1, 3), dtype=np.int64)
    tri[:, :, 0] = np.arange(l + 1)
    tri[:, :, 1] = (m0 + np.arange(n))[:, None]
    tri[:, :, 2] = (np.arange(n) // 2)[:, None]
    return tri


def _batch(n: int, l: int, dim: int, seed: int = 0, shift: float = 1.0) -> SequenceBatch:
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    latents = rng.standard_normal((n, l, dim)).astype(np.float32)
    signs = np.where(np.arange(dim) % 2 == 0, 1.0, -1.0)
    latents += (shift * labels[:, None, None] * signs).astype(np.float32)
    return SequenceBatch(latents=latents, triples=_triples(n, l), labels=labels.astype(np.int64),
                         video_ids=[f"v{i % 3}" for i in range(n)],
                         participant_ids=[f"p{i % 3}" for i in range(n)])


def test_attention_single_token_returns_value():
    v = np.array([[0.3, -2.0, 5.0]])
    out = attention(Tensor(np.ones((1, 3))), Tensor(np.zeros((1, 3))), Tensor(v)).numpy()
    assert np.allclose(out, v)


def test_attention_identical_keys_average_values():
    q = np.array([[1.0, 2.0]])
    k = np.array([[0.5, 0.5], [0.5, 0.5]])
    v = np.array([[1.0, 3.0], [3.0, 5.0]])
    out = attention(Tensor(q, dtype=np.float64), Tensor(k, dtype=np.float64),
                    Tensor(v, dtype=np.float64)).numpy()
    assert np.allclose(out, [[2.0, 4.0]])


def test_attention_matches_dense_evaluation():
    rng = np.random.default_rng(0)
    q, k, v = (rng.standard_normal((3, 4)) for _ in range(3))
    weights = []
    out = attention(Tensor(q, dtype=np.float64), Tensor(k, dtype=np.float64),
                    Tensor(v, dtype=np.float64), weights_out=weights).numpy()
    assert np.allclose(out, _dense_attention(q, k, v), atol=1e-10)
    assert np.allclose(weights[0].sum(axis=-1), 1.0, atol=1e-6)


def test_attention_shape_mismatch():
    with pytest.raises(ValueError):
        attention(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 4)))
    with pytest.raises(ValueError):
        attention(np.ones((2, 3)), np.ones((2, 3)), np.ones((3, 3)))


def test_multi_head_single_head_identity_output():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 6))
    w_q, w_k, w_v = (rng.standard_normal((6, 6)) for _ in range(3))
    out = multi_head(Tensor(x, dtype=np.float64), Tensor(x, dtype=np.float64),
                     Tensor(x, dtype=np.float64), Tensor(w_q, dtype=np.float64),
                     Tensor(w_k, dtype=np.float64), Tensor(w_v, dtype=np.float64),
                     Tensor(np.eye(6), dtype=np.float64), num_heads=1).numpy()
    assert np.allclose(out, _dense_attention(x @ w_q, x @ w_k, x @ w_v), atol=1e-10)


def test_multi_head_zero_values_give_zero_output():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((3, 4)), dtype=np.float64)
    w = [Tensor(rng.standard_normal((4, 4)), dtype=np.float64) for _ in range(4)]
    out = multi_head(x, x, Tensor(np.zeros((3, 4)), dtype=np.float64), *w, num_heads=2).numpy()
    assert np.array_equal(out, np.zeros((3, 4)))


def test_multi_head_matches_split_compute_concat():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 5, 8))
    w_q, w_k, w_v, w_o = (rng.standard_normal((8, 8)) for _ in range(4))
    t = lambda a: Tensor(a, dtype=np.float64)
    weights = []
    out = multi_head(t(x), t(x), t(x), t(w_q), t(w_k), t(w_v), t(w_o), num_heads=2,
                     weights_out=weights).numpy()
    for b in range(2):
        heads = [_dense_attention(x[b] @ w_q[:, 4 * h:4 * h + 4], x[b] @ w_k[:, 4 * h:4 * h + 4],
                                  x[b] @ w_v[:, 4 * h:4 * h + 4]) for h in range(2)]
        assert np.allclose(out[b], np.concatenate(heads, axis=1) @ w_o, atol=1e-10)
    assert weights[0].shape == (2, 2, 5, 5)


def test_multi_head_rejects_indivisible_heads():
    x = np.ones((2, 6))
    with pytest.raises(ValueError, match="divide"):
        multi_head(x, x, x, np.eye(6), np.eye(6), np.eye(6), np.eye(6), num_heads=4)


def test_config_validation_and_head_dims():
    cfg = TransformerConfig()
    assert (cfg.num_layers, cfg.hidden_dim, cfg.num_heads, cfg.dropout) == (4, 128, 2, 0.2)
    assert cfg.max_positions == 16
    params = init_transformer(cfg)
    assert [params[f"head.{j}.w"].shape for j in range(3)] == [(128, 64), (64, 32), (32, 2)]
    assert params["pos_slot"].shape == (16, 128)
    assert params["pos_sequence"].shape == (512, 128)
    assert params["pos_segment"].shape == (128, 128)
    assert np.all(params["head.0.b"].numpy() == 0)
    assert abs(float(params["pos_sequence"].numpy().std()) - 0.02) < 0.002

    for bad in ({"hidden_dim": 10, "num_heads": 3}, {"dropout": 1.0}, {"positions": "all"},
                {"mlp_head_dims": (64, 1)}):
        with pytest.raises(ValueError):
            TransformerConfig(**bad)
    with pytest.raises(ValueError):
        TransformerTrainConfig(loss="focal")


def test_embed_inputs_with_zero_tables_passes_latents_through():
    cfg = TransformerConfig(**TINY)
    params = init_transformer(cfg, seed=0, dtype=np.float64)
    zero_position_tables(params, ("pos_slot", "pos_sequence", "pos_segment"))
    latents = np.random.default_rng(4).standard_normal((2, 3, 8))
    z = embed_inputs(latents, _triples(2, 3), params, cfg).numpy()
    assert np.array_equal(z[:, 1:], latents)
    assert np.array_equal(z[:, 0], np.stack([params["cls_token"].numpy()] * 2))


def test_embed_inputs_clips_large_indices():
    cfg = TransformerConfig(**TINY)
    params = init_transformer(cfg, seed=1, dtype=np.float64)
    latents = np.zeros((1, 3, 8))
    tri = _triples(1, 3, m0=cfg.max_sequences + 5)
    tri[:, :, 2] = 99
    z = embed_inputs(latents, tri, params, cfg).numpy()
    expected = (params["pos_slot"].numpy()[1] + params["pos_sequence"].numpy()[cfg.max_sequences - 1]
                + params["pos_segment"].numpy()[cfg.max_segments - 1])
    assert np.allclose(z[0, 1], expected, atol=1e-15)
    assert clip_triples(tri, cfg)[0, 0].tolist() == [0, 3, 2]


def test_embed_inputs_sequences_differ_only_by_sequence_table():
    cfg = TransformerConfig(**TINY)
    params = init_transformer(cfg, seed=2, dtype=np.float64)
    latents = np.random.default_rng(5).standard_normal((1, 3, 8))
    tri_a, tri_b = _triples(1, 3, m0=0), _triples(1, 3, m0=1)
    za = embed_inputs(latents, tri_a, params, cfg).numpy()
    zb = embed_inputs(latents, tri_b, params, cfg).numpy()
    delta = params["pos_sequence"].numpy()[1] - params["pos_sequence"].numpy()[0]
    assert np.allclose(zb - za, np.broadcast_to(delta, za.shape), atol=1e-12)


def test_forward_outputs_probabilities_and_is_pure():
    cfg = TransformerConfig(num_layers=2, hidden_dim=16, num_heads=2, seq_len=5)
    params = init_transformer(cfg, seed=3)
    batch = _batch(4, 5, 16)
    weights = []
    z = embed_inputs(batch.latents, batch.triples, params, cfg)
    first = forward(z, params, cfg, weights_out=weights).numpy()
    second = forward(z, params, cfg).numpy()
    assert first.shape == (4, 2)
    assert np.all((first >= 0) & (first <= 1))
    assert np.allclose(first.sum(axis=1), 1.0, atol=1e-6)
    assert np.array_equal(first, second)
    assert len(weights) == 2
    for w in weights:
        assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-6)
    with pytest.raises(ValueError):
        forward(z[:0], params, cfg)


def test_forward_dropout_needs_generator_in_training():
    cfg = TransformerConfig(**{**TINY, "dropout": 0.2})
    params = init_transformer(cfg)
    batch = _batch(2, 3, 8)
    z = embed_inputs(batch.latents, batch.triples, params, cfg)
    with pytest.raises(ValueError):
        forward(z, params, cfg, train_mode=True)
    out = forward(z, params, cfg, train_mode=True, gen=np.random.default_rng(0)).numpy()
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-6)


def test_class_token_output_ignores_token_order():
    """Permuting frame tokens together with their slot indices leaves the prediction unchanged."""
    cfg = TransformerConfig(**TINY)
    params = init_transformer(cfg, seed=4, dtype=np.float64)
    latents = np.random.default_rng(6).standard_normal((1, 3, 8))
    tri = _triples(1, 3)
    perm = np.array([2, 0, 1])
    tri_perm = tri.copy()
    tri_perm[0, 1:] = tri[0, 1:][perm]
    a = forward(embed_inputs(latents, tri, params, cfg), params, cfg).numpy()
    b = forward(embed_inputs(latents[:, perm], tri_perm, params, cfg), params, cfg).numpy()
    assert np.allclose(a, b, atol=1e-12)


def test_full_model_gradients_match_finite_differences():
    cfg = TransformerConfig(**TINY)
    params = init_transformer(cfg, seed=5, dtype=np.float64)
    for name in ("pos_slot", "pos_sequence", "pos_segment", "cls_token"):
        params[name].data = params[name].data * 25.0
    rng = np.random.default_rng(7)
    latents = rng.uniform(-1, 1, size=(3, 3, 8))
    tri = _triples(3, 3)
    tri[2, :, 1] = 9
    labels = np.array([1, 0, 1])

    errors = gradcheck(lambda ps: sequence_loss(ps, cfg, latents, tri, labels, "wbce", 2.0),
                       params)
    for name in ("cls_token", "pos_slot", "pos_sequence", "pos_segment"):
        assert name in errors
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-4, f"{worst}: relative error {errors[worst]}"


@pytest.mark.parametrize("p, y, beta, expected", [
    (1.0, 1, 1.0, 0.0),
    (0.5, 0, 2.0, 0.6931),
    (0.5, 0, 7.0, 0.6931),
    (0.5, 1, 2.0, 1.3863),
])
def test_weighted_bce_examples(p, y, beta, expected):
    loss = weighted_bce(np.array([p]), np.array([y]), beta).item()
    assert loss == pytest.approx(expected, abs=1e-4)


def test_bce_examples_and_equivalence():
    assert bce(np.array([0.5, 0.5]), np.array([1, 0])).item() == pytest.approx(0.6931, abs=1e-4)
    rng = np.random.default_rng(8)
    for _ in range(20):
        p = rng.uniform(0.01, 0.99, size=16)
        y = rng.integers(0, 2, size=16)
        pt = Tensor(p, dtype=np.float64)
        assert abs(weighted_bce(pt, y, 1.0).item() - bce(pt, y).item()) < 1e-12
        oracle = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
        assert bce(pt, y).item() == pytest.approx(oracle, abs=1e-12)


def test_loss_clamps_extreme_probabilities():
    loss = bce(Tensor(np.array([0.0, 1.0]), dtype=np.float64), np.array([1, 0])).item()
    assert np.isfinite(loss)
    assert loss == pytest.approx(-np.log(1e-7), rel=1e-6)


def test_class_weight_beta():
    assert class_weight_beta(np.array([1, 0, 0, 0])) == 3.0
    assert class_weight_beta(np.array([1, 1])) == 1.0
    assert class_weight_beta(np.array([], dtype=int)) == 1.0


def test_frozen_zero_tables_make_position_modes_identical():
    """With P_M and P_S zeroed and frozen, every position mode trains to the same outputs."""
    batch = _batch(6, 3, 8, seed=9)
    outputs = []
    for mode in ("none", "seq", "seg", "both"):
        cfg = TransformerConfig(**{**TINY, "positions": mode, "dropout": 0.2})
        params = init_transformer(cfg, seed=0)
        zero_position_tables(params)
        train_cfg = TransformerTrainConfig(epochs=2, batch_size=4, lr=1e-3, seed=0,
                                           frozen=("pos_sequence", "pos_segment"))
        result = train_transformer(batch, cfg, train_cfg, verbose=False, params=params)
        assert np.all(result.model.params["pos_sequence"].numpy() == 0)
        outputs.append(result.model.predict_proba(batch))
    for out in outputs[1:]:
        assert np.array_equal(out, outputs[0])


def test_train_transformer_is_deterministic_and_checks_input():
    batch = _batch(8, 3, 8, seed=10)
    cfg = TransformerConfig(**TINY)
    train_cfg = TransformerTrainConfig(epochs=3, batch_size=4, lr=1e-3, seed=1)
    a = train_transformer(batch, cfg, train_cfg, verbose=False)
    b = train_transformer(batch, cfg, train_cfg, verbose=False)
    assert a.loss_curve == b.loss_curve
    assert a.beta == 1.0
    assert np.array_equal(a.model.predict_proba(batch), b.model.predict_proba(batch))

    with pytest.raises(DataError):
        train_transformer(batch.subset(np.array([], dtype=np.int64)), cfg, train_cfg,
                          verbose=False)


def test_train_transformer_learns_separable_sequences():
    batch = _batch(16, 3, 8, seed=11, shift=2.0)
    cfg = TransformerConfig(**{**TINY, "dropout": 0.0})
    result = train_transformer(batch, cfg, TransformerTrainConfig(epochs=30, batch_size=8,
                                                                  lr=5e-3, seed=2), verbose=False)
    assert result.loss_curve[-1] < result.loss_curve[0]
    predicted = result.model.predict_proba(batch).argmax(axis=1)
    assert (predicted == batch.labels).mean() >= 0.75


def test_transformer_checkpoint_round_trip(tmp_path: Path):
    batch = _batch(4, 3, 8)
    cfg = TransformerConfig(**TINY)
    result = train_transformer(batch, cfg, TransformerTrainConfig(epochs=1, seed=3),
                               verbose=False)
    path = tmp_path / "transformer.tsck"
    save_checkpoint(result.checkpoint(), path)
    ckpt = load_checkpoint(path)
    model = load_transformer(ckpt)
    assert model.config == cfg
    assert ckpt.config["beta"] == result.beta
    assert np.array_equal(model.predict_proba(batch), result.model.predict_proba(batch))

    ckpt.params.pop("cls_token")
    with pytest.raises(DataError, match="cls_token"):
        load_transformer(ckpt)
