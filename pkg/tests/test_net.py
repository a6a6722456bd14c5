"""Regressor: init determinism, forward contracts, masking, gradients, checkpoints."""

import numpy as np
import pytest

from metaforge.net import (
    CheckpointError,
    NetConfig,
    ParamSet,
    TransformerModel,
    batch_from_token_sequences,
    forward,
    forward_with_attention,
    grads,
    init_params,
    load_checkpoint,
    loss_mse,
    param_shapes,
    save_checkpoint,
)
from metaforge.tensor_engine import ShapeError, Tensor, fd_check
from metaforge.mutenc import Vocabulary, encode_enhanced, parse_mutation_list

TINY = NetConfig(vocab_size=24, max_len=16, d_model=8, n_heads=2, n_layers=1,
                 ff_dim=16, dropout_p=0.1)


def _batch(config, batch_size=3, length=None, seed=0, lengths=None):
    rng = np.random.default_rng(seed)
    length = length or config.max_len
    ids = rng.integers(4, config.vocab_size, size=(batch_size, length))
    ids[:, 0] = 1  # [CLS]
    mask = np.ones((batch_size, length))
    if lengths:
        for i, n in enumerate(lengths):
            ids[i, n:] = 0
            mask[i, n:] = 0.0
    return ids, mask


# ---------------------------------------------------------------------------
# config and init
# ---------------------------------------------------------------------------

def test_config_rejects_indivisible_heads():
    with pytest.raises(ShapeError):
        NetConfig(d_model=10, n_heads=4)


def test_config_rejects_nonstandard_head():
    with pytest.raises(ShapeError):
        NetConfig(head_dims=(64, 1))


def test_init_deterministic_and_biases_zero():
    a = init_params(TINY, seed=5)
    b = init_params(TINY, seed=5)
    assert a.names() == b.names()
    for name in a.names():
        assert np.array_equal(a[name].data, b[name].data), name
    for name in a.names():
        leaf = name.rsplit(".", 1)[1]
        if leaf.startswith("b"):
            assert np.all(a[name].data == 0.0), name
        if leaf == "g":
            assert np.all(a[name].data == 1.0), name


def test_param_count_closed_form():
    config = NetConfig(vocab_size=24, max_len=64, d_model=32, n_heads=2,
                       n_layers=2, ff_dim=64)
    params = init_params(config, seed=0)
    v, L, d, ff = 24, 64, 32, 64
    per_layer = 4 * (d * d + d) + 2 * 2 * d + (d * ff + ff) + (ff * d + d)
    head = d * 256 + 256 + 256 * 128 + 128 + 128 * 1 + 1
    want = v * d + L * d + 2 * per_layer + head
    assert params.total_count == want
    # independent recount from the declared shapes
    assert want == sum(int(np.prod(s)) for s in param_shapes(config).values())


def test_clone_never_aliases():
    params = init_params(TINY, seed=1)
    copy = params.clone()
    copy["embed.tok"].data[0, 0] += 1.0
    assert params["embed.tok"].data[0, 0] != copy["embed.tok"].data[0, 0]


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def test_forward_shape_and_eval_determinism():
    params = init_params(TINY, seed=2)
    ids, mask = _batch(TINY, batch_size=4)
    a = forward(params, ids, mask, TINY, mode="eval")
    b = forward(params, ids, mask, TINY, mode="eval")
    assert a.shape == (4,)
    assert np.array_equal(a, b)


def test_forward_dropout_zero_equals_eval():
    config = NetConfig(vocab_size=24, max_len=16, d_model=8, n_heads=2,
                       n_layers=1, ff_dim=16, dropout_p=0.0)
    params = init_params(config, seed=3)
    ids, mask = _batch(config)
    train_out = forward(params, ids, mask, config, mode="train",
                        rng=np.random.default_rng(0))
    eval_out = forward(params, ids, mask, config, mode="eval")
    assert np.array_equal(train_out, eval_out)


def test_forward_train_dropout_changes_output():
    params = init_params(TINY, seed=3)
    ids, mask = _batch(TINY)
    a = forward(params, ids, mask, TINY, mode="train", rng=np.random.default_rng(1))
    b = forward(params, ids, mask, TINY, mode="eval")
    assert not np.array_equal(a, b)


def test_forward_rejects_out_of_range_ids():
    params = init_params(TINY, seed=0)
    ids, mask = _batch(TINY)
    ids[0, 1] = TINY.vocab_size
    with pytest.raises(ShapeError):
        forward(params, ids, mask, TINY)


def test_masked_positions_cannot_influence_prediction():
    params = init_params(TINY, seed=4)
    ids, mask = _batch(TINY, batch_size=2, lengths=[9, 12])
    base = forward(params, ids, mask, TINY)
    scrambled = ids.copy()
    rng = np.random.default_rng(7)
    scrambled[0, 9:] = rng.integers(4, 24, size=TINY.max_len - 9)
    scrambled[1, 12:] = rng.integers(4, 24, size=TINY.max_len - 12)
    out = forward(params, scrambled, mask, TINY)
    assert np.array_equal(base, out)


def test_attention_rows_sum_to_one_and_mask_is_hard():
    params = init_params(TINY, seed=5)
    ids, mask = _batch(TINY, batch_size=2, lengths=[10, 16])
    _, maps = forward_with_attention(params, ids, mask, TINY)
    assert len(maps) == TINY.n_layers * TINY.n_heads
    for probs in maps:
        assert np.all(np.abs(probs.sum(axis=-1) - 1.0) < 1e-12)
        assert np.all(probs[0, :, 10:] == 0.0)  # masked keys get exactly zero


def test_forward_real_encoded_batch():
    vocab = Vocabulary()
    params = init_params(TINY, seed=6)
    seqs = [encode_enhanced("MKRVLA", parse_mutation_list("R3G"), vocab, TINY.max_len),
            encode_enhanced("MKRVLA", [], vocab, TINY.max_len)]
    ids, mask = batch_from_token_sequences(seqs)
    out = forward(params, ids, mask, TINY)
    assert out.shape == (2,) and np.all(np.isfinite(out))


# ---------------------------------------------------------------------------
# loss and gradients
# ---------------------------------------------------------------------------

def test_loss_mse_trivials():
    assert loss_mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert loss_mse([0.0, 0.0], [1.0, -1.0]) == 1.0
    with pytest.raises(ShapeError):
        loss_mse([], [])
    with pytest.raises(ShapeError):
        loss_mse([1.0], [1.0, 2.0])


def test_loss_mse_matches_brute_force():
    rng = np.random.default_rng(8)
    p, t = rng.normal(size=8), rng.normal(size=8)
    acc = 0.0
    for a, b in zip(p, t):
        acc += (a - b) ** 2
    assert abs(loss_mse(p, t) - acc / 8) < 1e-12


def test_grads_zero_at_zero_residual():
    config = NetConfig(vocab_size=24, max_len=12, d_model=8, n_heads=2,
                       n_layers=1, ff_dim=16, dropout_p=0.0)
    params = init_params(config, seed=9)
    ids, mask = _batch(config, batch_size=2, length=12)
    targets = forward(params, ids, mask, config)
    loss, g = grads(params, ids, mask, targets, config, mode="eval")
    assert loss == 0.0
    for name in params.names():
        assert np.allclose(g[name].data, 0.0, atol=1e-18), name


def test_grads_deterministic_under_seed():
    params = init_params(TINY, seed=10)
    ids, mask = _batch(TINY, batch_size=2)
    targets = np.array([0.3, -0.7])
    l1, g1 = grads(params, ids, mask, targets, TINY, rng=np.random.default_rng(42))
    l2, g2 = grads(params, ids, mask, targets, TINY, rng=np.random.default_rng(42))
    assert l1 == l2
    for name in params.names():
        assert np.array_equal(g1[name].data, g2[name].data)


def test_grads_cover_every_parameter():
    params = init_params(TINY, seed=11)
    ids, mask = _batch(TINY, batch_size=2)
    _, g = grads(params, ids, mask, np.array([1.0, -1.0]), TINY, mode="eval")
    assert set(g.names()) == set(params.names())
    for name in params.names():
        assert g[name].shape == params[name].shape


def test_full_model_gradient_check_small():
    # acceptance runs the 2-layer d16 version; this is the fast regression guard
    config = NetConfig(vocab_size=24, max_len=8, d_model=4, n_heads=2,
                       n_layers=1, ff_dim=8, dropout_p=0.0)
    params = init_params(config, seed=12)
    ids, mask = _batch(config, batch_size=2, length=8, lengths=[6, 8])
    targets = np.array([0.5, -0.25])

    def f(p):
        from metaforge.net import _forward_tensor, _loss_tensor
        pred = _forward_tensor(p, ids, mask, config, False, None)
        return _loss_tensor(pred, targets)

    err = fd_check(f, dict(params.items()), step=1e-5)
    assert err < 1e-4, f"max relative error {err}"


def test_sgd_step_descends():
    config = NetConfig(vocab_size=24, max_len=12, d_model=8, n_heads=2,
                       n_layers=1, ff_dim=16, dropout_p=0.0)
    params = init_params(config, seed=13)
    ids, mask = _batch(config, batch_size=4, length=12)
    targets = np.array([1.0, -1.0, 0.5, 2.0])
    loss0, g = grads(params, ids, mask, targets, config, mode="eval")
    norm = np.sqrt(sum(float((t.data ** 2).sum()) for t in dict(g.items()).values()))
    assert norm > 1e-8
    stepped = params.clone()
    for name in stepped.names():
        stepped[name].data -= 1e-4 * g[name].data
    loss1 = loss_mse(forward(stepped, ids, mask, config), targets)
    assert loss1 < loss0


# ---------------------------------------------------------------------------
# model adapter
# ---------------------------------------------------------------------------

def test_transformer_model_interface():
    model = TransformerModel(TINY)
    params = model.init(seed=14)
    ids, mask = _batch(TINY, batch_size=2)
    targets = np.array([0.0, 1.0])
    preds = model.predict(params, (ids, mask))
    assert preds.shape == (2,)
    assert model.loss(params, (ids, mask), targets) == loss_mse(preds, targets)
    loss, g = model.loss_and_grads(params, (ids, mask), targets,
                                   rng=np.random.default_rng(0), train=False)
    assert set(g.names()) == set(params.names())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_bit_identical(tmp_path):
    params = init_params(TINY, seed=15)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, TINY, params, meta={"note": "x"})
    config, loaded, opt, meta = load_checkpoint(path)
    assert config == TINY
    assert opt is None and meta == {"note": "x"}
    for name in params.names():
        assert np.array_equal(loaded[name].data, params[name].data)
    # byte-identical rewrite
    path2 = tmp_path / "model2.ckpt"
    save_checkpoint(path2, config, loaded, meta=meta)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_with_optimizer_state(tmp_path):
    params = init_params(TINY, seed=16)
    m = {name: np.full_like(t.data, 0.5) for name, t in params.items()}
    v = {name: np.full_like(t.data, 0.25) for name, t in params.items()}
    path = tmp_path / "opt.ckpt"
    save_checkpoint(path, TINY, params, opt_state=(7, m, v))
    _, _, opt, _ = load_checkpoint(path)
    step, m2, v2 = opt
    assert step == 7
    assert np.array_equal(m2["embed.tok"], m["embed.tok"])
    assert np.array_equal(v2["head.w3"], v["head.w3"])


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    params = init_params(TINY, seed=17)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, TINY, params)
    clipped = tmp_path / "clipped.ckpt"
    clipped.write_bytes(path.read_bytes()[:100])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(clipped)


def test_checkpoint_shape_mismatch(tmp_path):
    params = init_params(TINY, seed=18)
    path = tmp_path / "model.ckpt"
    # lie about the config: claim a different d_model than the tensors carry
    other = NetConfig(vocab_size=24, max_len=16, d_model=16, n_heads=2,
                      n_layers=1, ff_dim=16)
    save_checkpoint(path, other, params)
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(path)
