import numpy as np
import pytest

import helpers
from vidlabel import features, models, nncore
from vidlabel.errors import ConfigError, SchemaError


def _zero_store(model):
    store = nncore.ParameterStore()
    for name, shape in model.param_shapes().items():
        store.add(name, np.zeros(shape))
    return store


def _init_store(model, seed):
    store = nncore.ParameterStore()
    model.init_params(store, seed)
    return store


# ---------------------------------------------------------------------------
# MoE head


@pytest.mark.parametrize("num_experts,expected", [(1, 0.25), (2, 1 / 3), (3, 0.375)])
def test_moe_head_zero_params(num_experts, expected):
    head = models.MoEHead("h/", 4, 4, 5, num_experts)
    store = nncore.ParameterStore()
    for name, shape in head.param_shapes().items():
        store.add(name, np.zeros(shape))
    x = np.random.default_rng(0).normal(size=(2, 4))
    probs, _ = head.forward(store, x, x)
    np.testing.assert_allclose(probs, expected, atol=1e-15)


def test_moe_head_matches_scalar_reference():
    rng = np.random.default_rng(1)
    head = models.MoEHead("h/", 3, 4, 6, 2)
    store = nncore.ParameterStore()
    head.init_params(store, 13)
    gate_in = rng.normal(size=(3, 3))
    expert_in = rng.normal(size=(3, 4))
    probs, _ = head.forward(store, gate_in, expert_in)
    reference = helpers.moe_reference(
        gate_in, expert_in, store["h/gate/W"], store["h/gate/b"],
        store["h/expert/W"], store["h/expert/b"], 6, 2)
    np.testing.assert_allclose(probs, reference, atol=1e-12)
    assert ((probs > 0) & (probs < 1)).all()


def test_moe_head_gate_softmax_sums_to_one():
    rng = np.random.default_rng(2)
    head = models.MoEHead("h/", 3, 3, 4, 3)
    store = nncore.ParameterStore()
    head.init_params(store, 3)
    x = rng.normal(size=(5, 3))
    _, cache = head.forward(store, x, x)
    gates = cache[2]
    np.testing.assert_allclose(gates.sum(axis=-1), 1.0, atol=1e-12)


def test_moe_head_gradient_check():
    rng = np.random.default_rng(3)
    head = models.MoEHead("h/", 3, 3, 4, 2)
    store = nncore.ParameterStore()
    head.init_params(store, 5)
    x = rng.normal(size=(2, 3))
    y = (rng.random((2, 4)) < 0.5).astype(float)

    def f(s):
        probs, cache = head.forward(s, x, x)
        loss, dp = nncore.cross_entropy_multilabel(probs, y)
        grads = {}
        head.backward(s, dp, cache, grads)
        return loss, grads

    assert nncore.gradient_check(f, store) < 1e-4


def test_moe_head_standalone_op():
    x = np.zeros((2, 3))
    head = models.MoEHead("", 3, 3, 4, 1)
    store = nncore.ParameterStore()
    for name, shape in head.param_shapes().items():
        store.add(name, np.zeros(shape))
    probs = models.moe_head(x, store, 4, 1)
    np.testing.assert_allclose(probs, 0.25, atol=1e-15)


# ---------------------------------------------------------------------------
# MoNN


def test_monn_zero_params_three_experts():
    cfg = models.MoNNConfig(vocab_size=5, feature_dim=2, num_experts=3,
                            expert_hidden=(4,), input_features=("mean", "std"))
    model = models.MoNNModel(cfg)
    store = _zero_store(model)
    x = np.random.default_rng(4).normal(size=(3, cfg.input_dim))
    probs = model.forward(store, x)
    np.testing.assert_allclose(probs, 0.375, atol=1e-15)


def test_monn_truncate_masks_trailing_labels():
    cfg = models.MoNNConfig(vocab_size=8, feature_dim=2, num_experts=2,
                            expert_hidden=(4,), input_features=("mean",),
                            truncate_labels=5)
    model = models.MoNNModel(cfg)
    store = _init_store(model, 6)
    probs = model.forward(store, np.random.default_rng(5).normal(size=(4, 2)))
    assert (probs[:, 5:] == 0.0).all()
    assert (probs[:, :5] > 0.0).all()


def test_monn_gradient_check_tiny_config():
    cfg = models.MoNNConfig(vocab_size=5, feature_dim=3, num_experts=2,
                            expert_hidden=(8, 4), input_features=("mean", "std"))
    model = models.MoNNModel(cfg)
    store = _init_store(model, 7)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(3, cfg.input_dim))
    y = (rng.random((3, 5)) < 0.4).astype(float)

    def f(s):
        probs = model.forward(s, x)
        loss, dp = nncore.cross_entropy_multilabel(probs, y)
        return loss, model.backward(s, dp)

    assert nncore.gradient_check(f, store) < 1e-4


def test_monn_outputs_are_probabilities():
    cfg = models.MoNNConfig(vocab_size=6, feature_dim=4, num_experts=3,
                            expert_hidden=(10, 5))
    model = models.MoNNModel(cfg)
    store = _init_store(model, 8)
    probs = model.forward(store, np.random.default_rng(7).normal(size=(10, cfg.input_dim)))
    assert (probs >= 0).all() and (probs <= 1).all()


def test_monn_config_validation():
    with pytest.raises(ConfigError):
        models.MoNNConfig(vocab_size=5, feature_dim=2, num_experts=0).validate()
    with pytest.raises(ConfigError):
        models.MoNNConfig(vocab_size=5, feature_dim=2, expert_hidden=()).validate()
    with pytest.raises(ConfigError):
        models.MoNNConfig(vocab_size=5, feature_dim=2,
                          input_features=("bogus",)).validate()
    with pytest.raises(ConfigError):
        models.MoNNConfig(vocab_size=5, feature_dim=2, truncate_labels=6).validate()


def test_build_input_blocks():
    rows = [
        features.VideoFeatures("a", "whole", np.array([1.0, 2.0]),
                               np.array([3.0, 4.0]), np.array([5.0, 6.0]),
                               7, frozenset({1})),
    ]
    x = models.build_input(rows, ("mean", "std", "num_frames"))
    np.testing.assert_array_equal(x, [[1.0, 2.0, 3.0, 4.0, 7.0]])
    x = models.build_input(rows, ("x3", "std", "num_frames"))
    np.testing.assert_array_equal(x, [[5.0, 6.0, 3.0, 4.0, 7.0]])
    y = models.build_targets(rows, 3)
    np.testing.assert_array_equal(y, [[0.0, 1.0, 0.0]])


# ---------------------------------------------------------------------------
# presets


def test_monn_presets_published_widths():
    assert models.MONN_PRESETS["monn2lw"] == (13830, 6915)
    assert models.MONN_PRESETS["monn3lw"] == (18440, 2035, 6915)
    assert models.MONN_PRESETS["monn3l"] == (4096, 4096, 4096)
    assert models.MONN_PRESETS["monn4ln"] == (2048, 2048, 2048, 2048)


def test_rnn_presets_published_units():
    assert models.RNN_PRESETS["bilstm"] == {"cell": "lstm", "layer1_units": 600,
                                            "layer2_units": 1200}
    assert models.RNN_PRESETS["bigru"] == {"cell": "gru", "layer1_units": 625,
                                           "layer2_units": 1250}


def test_scaled_presets():
    widths = models.scaled_monn_hidden("monn3lw", 0.01)
    assert widths == (184, 20, 69)
    assert all(w >= 1 for w in models.scaled_monn_hidden("monn2lw", 1e-9))
    units = models.scaled_rnn_units("bigru", 0.02)
    assert units == {"cell": "gru", "layer1_units": 13, "layer2_units": 25}
    with pytest.raises(ConfigError):
        models.scaled_monn_hidden("nope", 1.0)


# ---------------------------------------------------------------------------
# recurrent cells


def test_lstm_cell_zero_weights_forget_bias_one():
    cell = models.LstmCell("c", 3, 4)
    store = nncore.ParameterStore()
    cell.init_params(store, 0)
    store["c/Wx"][:] = 0.0
    store["c/Wh"][:] = 0.0
    assert (store["c/b"][4:8] == 1.0).all()  # forget segment
    h2, c2, _ = cell.step(store, np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 4)))
    np.testing.assert_array_equal(h2, np.zeros((2, 4)))
    np.testing.assert_array_equal(c2, np.zeros((2, 4)))


def test_gru_cell_zero_params():
    cell = models.GruCell("g", 3, 4)
    store = nncore.ParameterStore()
    cell.init_params(store, 0)
    store["g/Wx"][:] = 0.0
    store["g/Wh"][:] = 0.0
    h2, _ = cell.step(store, np.zeros((2, 3)), np.zeros((2, 4)))
    np.testing.assert_array_equal(h2, np.zeros((2, 4)))


@pytest.mark.parametrize("kind", ["lstm", "gru"])
def test_cell_three_step_unroll_gradient_check(kind):
    rng = np.random.default_rng(10)
    xs = rng.normal(size=(3, 2, 3))
    upstream = rng.normal(size=(2, 4))
    if kind == "lstm":
        cell = models.LstmCell("c", 3, 4)
    else:
        cell = models.GruCell("c", 3, 4)
    store = nncore.ParameterStore()
    cell.init_params(store, 12)

    def f(s):
        h = np.zeros((2, 4))
        c = np.zeros((2, 4))
        caches = []
        for t in range(3):
            if kind == "lstm":
                h, c, cache = cell.step(s, xs[t], h, c)
            else:
                h, cache = cell.step(s, xs[t], h)
            caches.append(cache)
        loss = float((h * upstream).sum())
        grads = {}
        dh, dc = upstream, np.zeros((2, 4))
        for t in reversed(range(3)):
            if kind == "lstm":
                _, dh, dc = cell.step_backward(s, dh, dc, caches[t], grads)
            else:
                _, dh = cell.step_backward(s, dh, caches[t], grads)
        return loss, grads

    assert nncore.gradient_check(f, store) < 1e-4


def test_rnn_cell_step_dispatch():
    lstm = models.LstmCell("c", 2, 3)
    store = nncore.ParameterStore()
    lstm.init_params(store, 1)
    h, c = models.rnn_cell_step(lstm, store, np.zeros((1, 2)),
                                (np.zeros((1, 3)), np.zeros((1, 3))))
    assert h.shape == (1, 3) and c.shape == (1, 3)
    gru = models.GruCell("g", 2, 3)
    store2 = nncore.ParameterStore()
    gru.init_params(store2, 1)
    h = models.rnn_cell_step(gru, store2, np.zeros((1, 2)), np.zeros((1, 3)))
    assert h.shape == (1, 3)


# ---------------------------------------------------------------------------
# bidirectional stack


def test_birnn_zero_params_two_expert_head():
    cfg = models.RnnConfig(vocab_size=4, feature_dim=3, cell="lstm",
                           layer1_units=3, layer2_units=5, max_frames=10)
    model = models.BiRnnModel(cfg)
    store = _zero_store(model)
    x = np.random.default_rng(11).normal(size=(2, 4, 3))
    probs = model.forward(store, x, np.array([2, 4]))
    np.testing.assert_allclose(probs, 1 / 3, atol=1e-15)


@pytest.mark.parametrize("cell", ["lstm", "gru"])
def test_birnn_padding_invariance_bit_exact(cell):
    rng = np.random.default_rng(12)
    cfg = models.RnnConfig(vocab_size=4, feature_dim=3, cell=cell,
                           layer1_units=3, layer2_units=5, max_frames=10)
    model = models.BiRnnModel(cfg)
    store = _init_store(model, 14)
    x1 = rng.normal(size=(2, 5, 3))
    lengths = np.array([2, 5])
    x2 = x1.copy()
    x2[0, 2:] = 1e6  # arbitrary padding garbage
    np.testing.assert_array_equal(model.forward(store, x1, lengths),
                                  model.forward(store, x2, lengths))


@pytest.mark.parametrize("cell", ["lstm", "gru"])
def test_birnn_gradient_check(cell):
    rng = np.random.default_rng(13)
    cfg = models.RnnConfig(vocab_size=4, feature_dim=4, cell=cell,
                           layer1_units=3, layer2_units=5, max_frames=8)
    model = models.BiRnnModel(cfg)
    store = _init_store(model, 15)
    # scale away from the finite-difference noise floor
    for name in store.names():
        if not name.endswith("/b"):
            store[name][:] *= 2.0
    x = rng.normal(size=(3, 4, 4)) * 2.0
    lengths = np.array([2, 4, 3])
    y = (rng.random((3, 4)) < 0.5).astype(float)

    def f(s):
        probs = model.forward(s, x, lengths)
        loss, dp = nncore.cross_entropy_multilabel(probs, y)
        return loss, model.backward(s, dp)

    assert nncore.gradient_check(f, store) < 1e-4


def test_birnn_rejects_bad_lengths():
    cfg = models.RnnConfig(vocab_size=3, feature_dim=2, layer1_units=2,
                           layer2_units=2, max_frames=5)
    model = models.BiRnnModel(cfg)
    store = _init_store(model, 16)
    x = np.zeros((2, 3, 2))
    with pytest.raises(ValueError):
        model.forward(store, x, np.array([0, 2]))  # zero-length sequence
    with pytest.raises(ValueError):
        model.forward(store, x, np.array([4, 2]))  # beyond T
    with pytest.raises(ValueError):
        model.forward(store, np.zeros((1, 9, 2)), np.array([9]))  # beyond cap


def test_birnn_final_state_switch_matters():
    rng = np.random.default_rng(17)
    kw = dict(vocab_size=4, feature_dim=3, cell="lstm", layer1_units=3,
              layer2_units=5, max_frames=10)
    m_cell = models.BiRnnModel(models.RnnConfig(final_state="cell", **kw))
    m_hidden = models.BiRnnModel(models.RnnConfig(final_state="hidden", **kw))
    store = _init_store(m_cell, 18)
    x = rng.normal(size=(2, 4, 3))
    lengths = np.array([4, 3])
    assert not np.allclose(m_cell.forward(store, x, lengths),
                           m_hidden.forward(store, x, lengths))


# ---------------------------------------------------------------------------
# boosting


def test_boost_zero_params_is_identity():
    cfg = models.BoostConfig(vocab_size=4, feature_dim=3, hidden_units=5,
                             input_features=("mean",))
    model = models.BoostModel(cfg)
    store = _zero_store(model)
    x = np.random.default_rng(19).normal(size=(2, 3))
    correction = model.forward(store, x)
    p_base = np.random.default_rng(20).random((2, 4))
    np.testing.assert_array_equal(models.boost_wrap(p_base, correction), p_base)


def test_boost_wrap_clamps():
    p = models.boost_wrap(np.array([[0.9, 0.1]]), np.array([[0.3, -0.3]]))
    np.testing.assert_allclose(p, [[1.0, 0.0]])


def test_boost_output_range_and_gradient():
    rng = np.random.default_rng(21)
    cfg = models.BoostConfig(vocab_size=4, feature_dim=3, hidden_units=6,
                             input_features=("mean",))
    model = models.BoostModel(cfg)
    store = _init_store(model, 22)
    x = rng.normal(size=(5, 3))
    out = model.forward(store, x)
    assert (out > -1).all() and (out < 1).all()

    target = rng.uniform(-1, 1, size=(5, 4))

    def f(s):
        out = model.forward(s, x)
        loss, dout = nncore.l2_loss(out, target)
        return loss, model.backward(s, dout)

    assert nncore.gradient_check(f, store) < 1e-4


# ---------------------------------------------------------------------------
# config round-trip / store validation


def test_model_config_dict_round_trip():
    cfg = models.MoNNConfig(vocab_size=9, feature_dim=4, num_experts=2,
                            expert_hidden=(6, 3), truncate_labels=7)
    again = models.config_from_dict(models.config_to_dict(cfg))
    assert again == cfg
    rnn = models.RnnConfig(vocab_size=9, feature_dim=4, cell="gru",
                           layer1_units=3, layer2_units=6)
    assert models.config_from_dict(models.config_to_dict(rnn)) == rnn
    with pytest.raises(ConfigError):
        models.config_from_dict({"kind": "mystery"})


def test_validate_store_detects_mismatch():
    cfg = models.MoNNConfig(vocab_size=5, feature_dim=2, num_experts=2,
                            expert_hidden=(4,), input_features=("mean",))
    model = models.MoNNModel(cfg)
    store = _init_store(model, 23)
    models.validate_store(model, store)  # passes

    bad = nncore.ParameterStore()
    for name, arr in store.items():
        bad.add(name, arr[..., :1] if arr.ndim else arr)
    with pytest.raises(SchemaError, match="mismatch"):
        models.validate_store(model, bad)

    missing = nncore.ParameterStore()
    missing.add("tower0/W", np.zeros((2, 4)))
    with pytest.raises(SchemaError, match="missing"):
        models.validate_store(model, missing)


def test_param_init_matches_declared_shapes():
    for model in (
        models.MoNNModel(models.MoNNConfig(vocab_size=5, feature_dim=3)),
        models.BiRnnModel(models.RnnConfig(vocab_size=5, feature_dim=3,
                                           layer1_units=2, layer2_units=3)),
        models.LinearModel(models.LinearConfig(vocab_size=5, feature_dim=3)),
        models.BoostModel(models.BoostConfig(vocab_size=5, feature_dim=3)),
    ):
        store = _init_store(model, 24)
        assert store.shapes() == {k: tuple(v) for k, v in model.param_shapes().items()}
