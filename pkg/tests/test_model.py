import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chimera import contrastive as CL
from chimera import model as M
from chimera import tensor as T
from chimera.tensor import ShapeError, Tape, Tensor

from conftest import param_grad_error, tiny_model


def _layer(w, b=None):
    w = np.asarray(w, dtype=np.float64)
    b = np.zeros(w.shape[1]) if b is None else np.asarray(b, dtype=np.float64)
    return Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)


def test_default_architecture_shapes():
    p = M.init_model(32, 8, np.random.default_rng(0))
    assert p.shapes() == {
        "encoder.0.weight": (32, 64), "encoder.0.bias": (64,),
        "encoder.1.weight": (64, 64), "encoder.1.bias": (64,),
        "projector.0.weight": (64, 64), "projector.0.bias": (64,),
        "projector.1.weight": (64, 16), "projector.1.bias": (16,),
        "classifier.weight": (64, 8), "classifier.bias": (8,),
    }


def test_init_is_uniform_within_fan_in_bound():
    p = M.init_model(32, 8, np.random.default_rng(0))
    for w, b in p.layers():
        bound = 1 / np.sqrt(w.shape[0])
        assert np.abs(w.data).max() <= bound and np.abs(b.data).max() <= bound
        assert np.abs(w.data).max() > 0.9 * bound


def test_chain_validation():
    with pytest.raises(ShapeError):
        M.ModelParams([_layer(np.ones((3, 4))), _layer(np.ones((5, 2)))], [], _layer(np.ones((2, 2))))
    with pytest.raises(ShapeError):
        M.ModelParams([_layer(np.ones((3, 4)))], [], _layer(np.ones((3, 2))))


def test_zero_encoder_gives_zero_embeddings():
    p = M.ModelParams([_layer(np.zeros((3, 4)))], [_layer(np.eye(4))], _layer(np.ones((4, 2))))
    assert np.all(M.encode(p, Tensor(np.random.default_rng(0).standard_normal((5, 3)))).data == 0)


def test_identity_encoder_is_identity():
    p = M.ModelParams([_layer(np.eye(3))], [_layer(np.eye(3))], _layer(np.ones((3, 2))))
    x = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_array_equal(M.encode(p, Tensor(x)).data, x)


def test_encode_dimension_mismatch():
    with pytest.raises(ShapeError):
        M.encode(tiny_model(in_dim=3), Tensor(np.ones((2, 5))))


def test_project_3_4_5():
    p = M.ModelParams([_layer(np.eye(2))], [_layer(np.eye(2))], _layer(np.ones((2, 2))))
    np.testing.assert_allclose(M.project(p, Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]], atol=1e-15)


def test_classify_examples():
    p = M.ModelParams([_layer(np.eye(2))], [_layer(np.eye(2))], _layer(np.zeros((2, 3))))
    np.testing.assert_allclose(M.classify(p, Tensor(np.ones((2, 2)))).data, 1 / 3, atol=1e-15)
    q = M.ModelParams([_layer(np.eye(2))], [_layer(np.eye(2))], _layer(np.eye(2)))
    np.testing.assert_allclose(M.classify(q, Tensor([[np.log(2.0), 0.0]])).data, [[2 / 3, 1 / 3]], atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 30))
def test_classify_rows_sum_to_one_and_projections_unit(seed, spread):
    rng = np.random.default_rng(seed)
    p = M.init_model(6, 3, rng, hidden=(8,), proj_hidden=5, proj_dim=4)
    x = Tensor(spread * rng.standard_normal((4, 6)))
    np.testing.assert_allclose(M.classify(p, x).data.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(M.features(p, x).data, axis=1), 1.0, atol=1e-12)


def test_encoder_and_projection_gradients():
    rng = np.random.default_rng(3)
    p = M.init_model(8, 3, rng, hidden=(6,), proj_hidden=5, proj_dim=4)
    x = rng.standard_normal((4, 8))
    assert param_grad_error(lambda q: T.sum(T.square(M.encode(q, Tensor(x)))), p) <= 1e-4
    assert np.all(np.isfinite(M.encode(p, Tensor(x)).data))
    x1, x2 = x, x + 0.1 * rng.standard_normal(x.shape)
    loss = lambda q: CL.nt_xent(M.features(q, Tensor(x1)), M.features(q, Tensor(x2)), 0.5)  # noqa: E731
    assert param_grad_error(loss, p) <= 1e-4


def _grads(p, g):
    for _, t in p.named_parameters():
        t.grad = np.full(t.shape, g)


def test_sgd_vanilla_step():
    p = tiny_model()
    before = [t.data.copy() for _, t in p.named_parameters()]
    _grads(p, 0.5)
    state = M.OptimizerState.for_params(p, learning_rate=0.1, momentum=0.0, weight_decay=0.0)
    M.sgd_step(p, state)
    for b, (_, t) in zip(before, p.named_parameters()):
        np.testing.assert_allclose(t.data, b - 0.05, atol=1e-15)


def test_sgd_zero_grad_is_fixed_point():
    p = tiny_model()
    before = M.params_bytes(p)
    _grads(p, 0.0)
    M.sgd_step(p, M.OptimizerState.for_params(p, learning_rate=0.1, weight_decay=0.0))
    assert M.params_bytes(p) == before


def test_sgd_two_momentum_steps():
    p = tiny_model()
    before = [t.data.copy() for _, t in p.named_parameters()]
    state = M.OptimizerState.for_params(p, learning_rate=1.0, momentum=0.9, weight_decay=0.0)
    for _ in range(2):
        _grads(p, 0.25)
        M.sgd_step(p, state)
    for b, (_, t) in zip(before, p.named_parameters()):
        np.testing.assert_allclose(t.data, b - (0.25 + 1.9 * 0.25), atol=1e-14)


def test_sgd_weight_decay_term():
    p = tiny_model()
    w0 = p.classifier[0].data.copy()
    _grads(p, 0.0)
    M.sgd_step(p, M.OptimizerState.for_params(p, learning_rate=0.1, momentum=0.0, weight_decay=0.5))
    np.testing.assert_allclose(p.classifier[0].data, w0 - 0.1 * 0.5 * w0)


def test_sgd_missing_grad_lists_parameter():
    p = tiny_model()
    _grads(p, 1.0)
    p.classifier[1].grad = None
    with pytest.raises(ValueError, match="classifier.bias"):
        M.sgd_step(p, M.OptimizerState.for_params(p))


def test_sgd_group_restriction_leaves_others():
    p = tiny_model()
    cls_before = p.classifier[0].data.copy()
    for name, t in p.named_parameters():
        t.grad = None if name.startswith("classifier") else np.ones(t.shape)
    M.sgd_step(p, M.OptimizerState.for_params(p), groups=("encoder", "projector"))
    np.testing.assert_array_equal(p.classifier[0].data, cls_before)


def test_optimizer_validation():
    with pytest.raises(ValueError):
        M.OptimizerState(learning_rate=0)
    with pytest.raises(ValueError):
        M.OptimizerState(momentum=1.0)
    with pytest.raises(ValueError):
        M.OptimizerState(weight_decay=-1)


def test_small_step_decreases_smooth_loss():
    rng = np.random.default_rng(11)
    p = M.init_model(5, 3, rng, hidden=(6,), proj_hidden=0, proj_dim=3)
    x, y = rng.standard_normal((10, 5)), rng.integers(0, 3, 10)
    onehot = np.eye(3)[y]

    def loss(q):
        return T.scale(T.sum(T.mul(T.log_softmax(M.logits(q, Tensor(x))), onehot)), -0.1)

    base = loss(p).item()
    with Tape() as tape:
        out = loss(p)
    tape.backward(out)
    lr = 0.5
    while lr >= 1e-6:
        q = p.clone()
        for (_, t), (_, s) in zip(q.named_parameters(), p.named_parameters()):
            t.grad = s.grad
        M.sgd_step(q, M.OptimizerState.for_params(q, learning_rate=lr, momentum=0.0, weight_decay=0.0),
                   groups=("encoder", "classifier"))
        if loss(q).item() < base:
            break
        lr /= 2
    assert lr >= 1e-6


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    nets = [tiny_model(1), tiny_model(2)]
    M.save_params(tmp_path / "p.npz", nets, {"tag": "x"})
    loaded, meta = M.load_params(tmp_path / "p.npz", nets[0].shapes())
    assert meta == {"tag": "x"}
    assert [M.params_bytes(m) for m in loaded] == [M.params_bytes(m) for m in nets]


def test_checkpoint_architecture_mismatch_lists_shapes(tmp_path):
    M.save_params(tmp_path / "p.npz", tiny_model())
    with pytest.raises(ShapeError, match=r"\(3, 4\)"):
        M.load_params(tmp_path / "p.npz", tiny_model(hidden=(5,)).shapes())


def test_clone_is_independent_and_init_like_is_fresh():
    p = tiny_model(0)
    c = p.clone()
    assert M.params_bytes(c) == M.params_bytes(p)
    c.classifier[0].data += 1
    assert M.params_bytes(c) != M.params_bytes(p)
    f = M.init_like(p, 99)
    assert f.shapes() == p.shapes() and M.params_bytes(f) != M.params_bytes(p)


def test_predict_proba_and_embed_are_detached():
    p = tiny_model()
    X = np.random.default_rng(0).standard_normal((7, 3))
    with Tape() as tape:
        pr = M.predict_proba(p, X)
    assert isinstance(pr, np.ndarray) and pr.shape == (7, 3)
    assert M.embed(p, X).shape == (7, 4) and M.embed(p, X, projected=True).shape == (7, 3)
    np.testing.assert_allclose(pr, M.classify(p, Tensor(X)).data)
    del tape
