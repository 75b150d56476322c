import math

import numpy as np
import pytest

from oracles import (
    finite_difference_grads,
    relative_error,
    scalar_classify,
    scalar_encoder,
    scalar_mlm_loss,
)

from ehraug.seqpipe import IGNORE
from ehraug.tinyformer import (
    AdamHyper,
    AdamState,
    Batch,
    Checkpoint,
    ModelConfig,
    NonFiniteLossError,
    adam_step,
    forward_encoder,
    init_params,
    loss_and_grads,
    mlm_loss,
    pool,
    pool_and_classify,
)
from ehraug.tinyformer.model import _softmax, param_shapes

GRAD_CFG = ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, seq_len=8, vocab_size=20,
                       dropout_rate=0.0)  # fmt: skip


def perturbed_params(cfg, seed=0, scale=0.3, dtype=np.float64):
    """Init plus noise so LN scales, biases and the head are all non-trivial."""
    params = init_params(cfg, seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed + 100)
    return {k: (v + rng.normal(0, scale, v.shape)).astype(dtype) for k, v in params.items()}


def fixture_batch(cfg, seed=0, batch=3):
    rng = np.random.default_rng(seed)
    ids = rng.integers(3, cfg.vocab_size, (batch, cfg.seq_len))
    mask = np.ones_like(ids, dtype=bool)
    mask[1, cfg.seq_len // 2 :] = False
    mask[2, 2:] = False
    ids[~mask] = 0
    targets = np.full_like(ids, IGNORE)
    targets[0, [1, cfg.seq_len - 1]] = ids[0, [1, cfg.seq_len - 1]]
    targets[1, 0] = ids[1, 0]
    targets[2, 1] = 7
    return Batch(ids, mask, targets=targets, labels=np.array([1, 0, 1]))


class TestForward:
    def test_matches_scalar_oracle_one_layer(self):
        cfg = ModelConfig(n_layers=1, n_heads=1, d_model=4, d_ff=8, seq_len=2, vocab_size=6,
                          dropout_rate=0.0)  # fmt: skip
        params = perturbed_params(cfg, seed=3)
        ids, mask = np.array([[4, 5]]), np.ones((1, 2), bool)
        hidden, _ = forward_encoder(ids, mask, params, cfg)
        expected = scalar_encoder([4, 5], [1, 1], params, 1, 1)
        np.testing.assert_allclose(hidden[0], expected, atol=1e-5)

    def test_matches_scalar_oracle_with_pads(self):
        cfg = ModelConfig(n_layers=2, n_heads=2, d_model=8, d_ff=12, seq_len=5, vocab_size=9,
                          dropout_rate=0.0)  # fmt: skip
        params = perturbed_params(cfg, seed=4)
        ids = np.array([[3, 8, 5, 0, 0]])
        mask = np.array([[1, 1, 1, 0, 0]], bool)
        hidden, _ = forward_encoder(ids, mask, params, cfg)
        expected = scalar_encoder(ids[0].tolist(), mask[0].tolist(), params, 2, 2)
        np.testing.assert_allclose(hidden[0], expected, atol=1e-8)

    def test_attention_rows_normalized(self):
        s = np.random.default_rng(0).normal(size=(2, 2, 5, 5)).astype(np.float32)
        s[..., 3:] = -np.inf
        p = _softmax(s)
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
        assert (p[..., 3:] == 0).all()

    def test_pad_token_values_do_not_leak(self):
        params = perturbed_params(GRAD_CFG, seed=1, dtype=np.float32)
        b = fixture_batch(GRAD_CFG)
        ids2 = b.ids.copy()
        ids2[~b.mask] = 13
        h1, _ = forward_encoder(b.ids, b.mask, params, GRAD_CFG)
        h2, _ = forward_encoder(ids2, b.mask, params, GRAD_CFG)
        assert np.abs(h1[b.mask] - h2[b.mask]).max() <= 1e-6
        p1 = pool_and_classify(h1, b.mask, params)
        p2 = pool_and_classify(h2, b.mask, params)
        np.testing.assert_array_equal(p1, p2)

    def test_trimmed_width_matches_full(self):
        params = perturbed_params(GRAD_CFG, seed=2, dtype=np.float64)
        b = fixture_batch(GRAD_CFG)
        sub = slice(1, 3)
        full, _ = forward_encoder(b.ids[sub], b.mask[sub], params, GRAD_CFG)
        w = GRAD_CFG.seq_len // 2
        trimmed, _ = forward_encoder(b.ids[sub, :w], b.mask[sub, :w], params, GRAD_CFG)
        np.testing.assert_allclose(full[:, :w][b.mask[sub, :w]], trimmed[b.mask[sub, :w]], atol=1e-12)

    def test_eval_mode_is_deterministic(self):
        cfg = ModelConfig(n_layers=1, n_heads=2, d_model=8, d_ff=8, seq_len=4, vocab_size=10)
        params = init_params(cfg, seed=0)
        ids, mask = np.array([[3, 4, 5, 6]]), np.ones((1, 4), bool)
        a, _ = forward_encoder(ids, mask, params, cfg)
        b, _ = forward_encoder(ids, mask, params, cfg)
        np.testing.assert_array_equal(a, b)
        c, _ = forward_encoder(ids, mask, params, cfg, rng=np.random.default_rng(0))
        assert not np.array_equal(a, c)

    @pytest.mark.parametrize(
        "ids,mask",
        [
            (np.zeros((1, 9), int), np.ones((1, 9), bool)),  # wider than seq_len
            (np.full((1, 4), 20), np.ones((1, 4), bool)),  # id out of vocab
            (np.zeros((1, 4), int), np.zeros((1, 4), bool)),  # all pad
            (np.zeros((1, 4), int), np.ones((1, 3), bool)),  # shape mismatch
        ],
    )
    def test_contract_violations(self, ids, mask):
        params = init_params(GRAD_CFG)
        with pytest.raises(ValueError):
            forward_encoder(ids, mask, params, GRAD_CFG)


class TestHeads:
    def test_uniform_logits(self):
        cfg = ModelConfig(n_layers=1, n_heads=1, d_model=4, d_ff=4, seq_len=2, vocab_size=20)
        params = init_params(cfg)
        params["tok_emb"][:] = 0
        hidden = np.ones((1, 2, 4), np.float32)
        targets = np.array([[5, IGNORE]])
        assert mlm_loss(hidden, targets, params) == pytest.approx(math.log(20), abs=1e-6)

    def test_confident_logits(self):
        cfg = ModelConfig(n_layers=1, n_heads=1, d_model=20, d_ff=4, seq_len=1, vocab_size=20)
        params = init_params(cfg, dtype=np.float64)
        params["tok_emb"][:] = np.eye(20) * 50
        hidden = np.zeros((1, 1, 20))
        hidden[0, 0, 7] = 1.0
        assert mlm_loss(hidden, np.array([[7]]), params) < 1e-12

    def test_mlm_loss_scalar_oracle(self):
        params = perturbed_params(GRAD_CFG, seed=5)
        b = fixture_batch(GRAD_CFG, seed=5)
        hidden, _ = forward_encoder(b.ids, b.mask, params, GRAD_CFG)
        expected = scalar_mlm_loss(hidden, b.targets.tolist(), params)
        assert mlm_loss(hidden, b.targets, params) == pytest.approx(expected, abs=1e-5)

    def test_mlm_needs_targets(self):
        params = init_params(GRAD_CFG)
        with pytest.raises(ValueError):
            mlm_loss(np.zeros((1, 8, 16)), np.full((1, 8), IGNORE), params)

    def test_zero_head_gives_half(self):
        params = init_params(GRAD_CFG)
        hidden = np.random.default_rng(0).normal(size=(2, 8, 16)).astype(np.float32)
        np.testing.assert_allclose(pool_and_classify(hidden, np.ones((2, 8), bool), params), 0.5)

    def test_pool_of_identical_states(self):
        hidden = np.tile(np.arange(16.0), (1, 8, 1))
        mask = np.zeros((1, 8), bool)
        mask[0, :3] = True
        np.testing.assert_allclose(pool(hidden, mask)[0], np.arange(16.0))

    def test_classify_scalar_oracle(self):
        params = perturbed_params(GRAD_CFG, seed=6)
        b = fixture_batch(GRAD_CFG, seed=6)
        hidden, _ = forward_encoder(b.ids, b.mask, params, GRAD_CFG)
        got = pool_and_classify(hidden, b.mask, params)
        np.testing.assert_allclose(got, scalar_classify(hidden, b.mask, params), atol=1e-6)

    def test_all_pad_pool_rejected(self):
        with pytest.raises(ValueError):
            pool(np.zeros((1, 3, 4)), np.zeros((1, 3), bool))


@pytest.mark.parametrize("objective", ["mlm", "bce"])
def test_gradients_match_finite_differences(objective):
    params = perturbed_params(GRAD_CFG, seed=7)
    batch = fixture_batch(GRAD_CFG, seed=7)
    _, grads = loss_and_grads(batch, params, GRAD_CFG, objective)
    numeric = finite_difference_grads(
        lambda: loss_and_grads(batch, params, GRAD_CFG, objective)[0], params, eps=1e-3
    )
    errors = {k: relative_error(grads[k], numeric[k]) for k in params}
    assert max(errors.values()) < 1e-3, errors


def test_gradients_cover_every_parameter():
    params = perturbed_params(GRAD_CFG, seed=8)
    batch = fixture_batch(GRAD_CFG, seed=8)
    _, g_mlm = loss_and_grads(batch, params, GRAD_CFG, "mlm")
    _, g_bce = loss_and_grads(batch, params, GRAD_CFG, "bce")
    assert set(g_mlm) == set(params) == set(param_shapes(GRAD_CFG))
    for k in params:
        assert g_mlm[k].shape == params[k].shape
        assert np.abs(g_mlm[k]).max() > 0 or np.abs(g_bce[k]).max() > 0, k


def test_duplicated_example_keeps_mean_loss():
    params = perturbed_params(GRAD_CFG, seed=9)
    b = fixture_batch(GRAD_CFG, seed=9)
    one = Batch(b.ids[:1], b.mask[:1], labels=b.labels[:1])
    two = Batch(np.repeat(b.ids[:1], 2, 0), np.repeat(b.mask[:1], 2, 0), labels=np.repeat(b.labels[:1], 2))
    l1, g1 = loss_and_grads(one, params, GRAD_CFG, "bce")
    l2, g2 = loss_and_grads(two, params, GRAD_CFG, "bce")
    assert l1 == pytest.approx(l2, rel=1e-12)
    for k in params:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-9, atol=1e-12)


def test_no_masked_positions_rejected():
    params = init_params(GRAD_CFG)
    b = fixture_batch(GRAD_CFG)
    b.targets[:] = IGNORE
    with pytest.raises(ValueError):
        loss_and_grads(b, params, GRAD_CFG, "mlm")


def test_non_finite_loss_reported():
    params = init_params(GRAD_CFG)
    params["cls_w"][:] = np.nan
    with pytest.raises(NonFiniteLossError, match="non-finite"):
        loss_and_grads(fixture_batch(GRAD_CFG), params, GRAD_CFG, "bce")


class TestAdam:
    def test_first_step_magnitude(self):
        p = {"w": np.array([1.0, -2.0, 3.0])}
        g = {"w": np.array([0.5, -1e-3, 10.0])}
        adam_step(p, g, AdamState(), AdamHyper(lr=0.01))
        update = p["w"] - np.array([1.0, -2.0, 3.0])
        assert (np.sign(update) == -np.sign(g["w"])).all()
        assert (np.abs(update) <= 0.01 * (1 + 1e-6)).all()
        np.testing.assert_allclose(np.abs(update), 0.01, rtol=1e-4)

    def test_zero_grad_no_change(self):
        p = {"w": np.array([1.0, 2.0])}
        adam_step(p, {"w": np.zeros(2)}, AdamState(), AdamHyper())
        np.testing.assert_array_equal(p["w"], [1.0, 2.0])

    def test_descends_quadratic(self):
        p = {"x": np.array([3.0])}
        state = AdamState.zeros_like(p)
        losses = []
        for _ in range(2):
            losses.append(float(p["x"][0] ** 2))
            adam_step(p, {"x": 2 * p["x"]}, state, AdamHyper(lr=0.1))
        losses.append(float(p["x"][0] ** 2))
        assert losses[0] > losses[1] > losses[2]
        assert state.step == 2

    def test_state_mismatch(self):
        state = AdamState.zeros_like({"a": np.zeros(2)})
        with pytest.raises(ValueError):
            adam_step({"b": np.zeros(2)}, {"b": np.zeros(2)}, state)


def test_mlm_training_reduces_loss():
    """200 Adam steps on a 50-sequence toy corpus cut the MLM loss by >= 30%."""
    from ehraug.seqpipe import TokenSeq, apply_mlm_mask, stack_windows

    cfg = ModelConfig(n_layers=2, n_heads=2, d_model=32, d_ff=64, seq_len=12, vocab_size=23,
                      dropout_rate=0.0)  # fmt: skip
    rng = np.random.default_rng(0)
    # two "phenotypes": each sequence repeats tokens from one half of the vocabulary
    corpus = []
    for i in range(50):
        lo = 3 if i % 2 else 13
        ids = rng.integers(lo, lo + 10, 12)
        corpus.append(TokenSeq(ids, np.ones(12, np.int8)))
    params = init_params(cfg, seed=0)
    state = AdamState.zeros_like(params)
    mask_rng = np.random.default_rng(1)

    def batch_loss(step_rng):
        masked = [apply_mlm_mask(t, cfg.vocab_size, 0.15, step_rng) for t in corpus]
        ids, mask = stack_windows([m.inputs for m in masked])
        return Batch(ids, mask, targets=np.stack([m.targets for m in masked]))

    eval_batch = batch_loss(np.random.default_rng(99))
    initial = loss_and_grads(eval_batch, params, cfg, "mlm")[0]
    for _ in range(200):
        _, grads = loss_and_grads(batch_loss(mask_rng), params, cfg, "mlm")
        adam_step(params, grads, state, AdamHyper(lr=1e-3))
    final = loss_and_grads(eval_batch, params, cfg, "mlm")[0]
    assert final <= 0.7 * initial, (initial, final)


class TestCheckpoint:
    def test_roundtrip_bytes(self, tmp_path):
        cfg = ModelConfig(n_layers=1, n_heads=2, d_model=8, d_ff=8, seq_len=4, vocab_size=10)
        ck = Checkpoint(cfg, init_params(cfg, seed=3), seed=3, step=17, extra={"vocab": {"a": 3}})
        path = tmp_path / "m.ckpt"
        ck.save(path)
        loaded = Checkpoint.load(path)
        assert loaded.config == cfg and loaded.step == 17 and loaded.seed == 3
        assert loaded.extra == {"vocab": {"a": 3}}
        for k, v in ck.params.items():
            assert loaded.params[k].tobytes() == v.tobytes()
        loaded.save(tmp_path / "again.ckpt")
        assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()

    def test_layout(self, tmp_path):
        import json
        import struct

        cfg = ModelConfig(n_layers=1, n_heads=1, d_model=4, d_ff=4, seq_len=2, vocab_size=5)
        params = init_params(cfg, seed=1)
        data = Checkpoint(cfg, params).to_bytes()
        (hlen,) = struct.unpack_from("<I", data, 8)
        manifest = json.loads(data[12 : 12 + hlen])
        first = manifest["arrays"][0]
        assert first["name"] == "tok_emb" and first["shape"] == [5, 4]
        raw = np.frombuffer(data, "<f4", count=20, offset=12 + hlen).reshape(5, 4)
        np.testing.assert_array_equal(raw, params["tok_emb"])

    def test_rejects_garbage(self):
        with pytest.raises(ValueError):
            Checkpoint.from_bytes(b"not a checkpoint")

    def test_shape_check(self):
        cfg = ModelConfig(n_layers=1, n_heads=1, d_model=4, d_ff=4, seq_len=2, vocab_size=5)
        params = init_params(cfg)
        params["cls_w"] = np.zeros(3, np.float32)
        with pytest.raises(ValueError):
            Checkpoint(cfg, params).to_bytes()


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=3)
    ModelConfig(n_layers=12, n_heads=12, d_model=768, d_ff=3072, seq_len=512, vocab_size=31592)
