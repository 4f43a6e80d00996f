import numpy as np
import pytest

from quosr import autodiff as ad
from quosr.autodiff import Tensor

from gradcheck import numeric_grad, relative_error


def check(fn, *shapes, seed=0, positive=False, tol=1e-6):
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s) for s in shapes]

    def value():
        return fn(*[Tensor(a) for a in arrays]).item()

    ts = [Tensor(a, requires_grad=True) for a in arrays]
    fn(*ts).backward()
    analytic = [t.grad for t in ts]
    numeric = numeric_grad(value, arrays)
    assert relative_error(analytic, numeric) < tol


W = np.random.default_rng(9).normal(size=(3, 4))


@pytest.mark.parametrize("name,fn,shapes,positive", [
    ("add", lambda a, b: ad.sum((a + b) * W), [(3, 4), (3, 4)], False),
    ("broadcast_row", lambda a, b: ad.sum((a * b) * W), [(3, 4), (4,)], False),
    ("scalar", lambda a: ad.sum(a * 3.0 - 1.0 / (a + 5.0)), [(3, 4)], True),
    ("sub_div", lambda a, b: ad.sum((a - b) / b * W), [(3, 4), (3, 4)], True),
    ("exp_log_sqrt", lambda a: ad.sum(ad.exp(a) + ad.log(a) + ad.sqrt(a)), [(3, 4)], True),
    ("tanh_relu", lambda a: ad.sum(ad.tanh(a) * W + ad.relu(a) * W), [(3, 4)], False),
    ("square_neg", lambda a: ad.sum(-ad.square(a) * W), [(3, 4)], False),
    ("matmul", lambda a, b: ad.sum(ad.tanh(a @ b)), [(3, 4), (4, 2)], False),
    ("transpose_reshape", lambda a: ad.sum(ad.reshape(a.T, (2, 6)) * np.arange(12.0).reshape(2, 6)),
     [(3, 4)], False),
    ("sum_axis", lambda a: ad.sum(ad.square(ad.sum(a, axis=0))) + ad.sum(ad.square(ad.mean(a, axis=1))),
     [(3, 4)], False),
    ("concat_slice", lambda a, b: ad.sum(ad.square(ad.slice_cols(ad.concat_cols([a, b]), 2, 6))),
     [(3, 4), (3, 3)], False),
    ("concat_rows_take", lambda a, b: ad.sum(ad.take_rows(ad.concat_rows([a, b]), [0, 4, 4, 2]) * W[:1]),
     [(3, 4), (2, 4)], False),
    ("logsumexp", lambda a: ad.sum(ad.logsumexp_rows(a) * np.arange(3.0)[:, None]), [(3, 4)], False),
    ("softmax", lambda a: ad.sum(ad.softmax_rows(a) * W), [(3, 4)], False),
    ("group_pool", lambda v, g: ad.sum(ad.group_softmax_pool(v, g, 3) * W[:2]), [(6, 4), (6, 1)], False),
    ("group_mean", lambda v: ad.sum(ad.group_mean(v, 2) * np.ones((3, 4))), [(6, 4)], False),
    ("group_max", lambda v: ad.sum(ad.group_max(v, 3) * W[:2]), [(6, 4)], False),
])
def test_op_gradients(name, fn, shapes, positive):
    check(fn, *shapes, positive=positive)


def test_clip_gradient_is_zero_outside():
    a = Tensor(np.array([[-2.0, 0.5, 3.0]]), requires_grad=True)
    ad.sum(ad.clip(a, -1, 1)).backward()
    assert a.grad.tolist() == [[0.0, 1.0, 0.0]]


def test_logsumexp_with_minus_inf():
    a = Tensor(np.array([[0.0, -np.inf, 0.0]]), requires_grad=True)
    out = ad.logsumexp_rows(a)
    assert out.item() == pytest.approx(np.log(2))
    out.backward()
    assert a.grad.tolist() == [[0.5, 0.0, 0.5]]


def test_unsupported_broadcast_rejected():
    with pytest.raises(ValueError):
        ad.add(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 1))))


def test_backward_twice_rejected():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    out = ad.sum(a * a)
    out.backward()
    with pytest.raises(RuntimeError):
        out.backward()


def test_gradients_accumulate_across_uses():
    a = Tensor(np.array([[2.0]]), requires_grad=True)
    ad.sum(a * a + a).backward()
    assert a.grad.item() == 5.0


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_mlp_gradient(activation):
    rng = np.random.default_rng(3)
    net = ad.Mlp.build([3, 8, 8, 5], rng, activation)
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(4, 5))
    params = net.parameters()
    ad.sum(net(Tensor(x)) * w).backward()
    arrays = [p.data for p in params]
    numeric = numeric_grad(lambda: ad.sum(net(Tensor(x)) * w).item(), arrays)
    assert relative_error([p.grad for p in params], numeric) < 1e-5


def test_sgd_step_and_nonfinite_guard():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    p.grad = np.array([0.5, -1.0])
    ad.sgd_step([p], 0.1)
    np.testing.assert_allclose(p.data, [0.95, 2.1])
    p.grad = np.array([np.nan, 0.0])
    before = p.data.copy()
    with pytest.raises(ad.NonFiniteGradient):
        ad.sgd_step([p], 0.1, ["w"])
    np.testing.assert_array_equal(p.data, before)


def test_checkpoint_round_trip_and_bytes(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
    p1, p2 = tmp_path / "1.ckpt", tmp_path / "2.ckpt"
    ad.save_arrays(p1, arrays, {"k": 1})
    ad.save_arrays(p2, arrays, {"k": 1})
    assert p1.read_bytes() == p2.read_bytes()
    back, meta = ad.load_arrays(p1)
    assert meta == {"k": 1}
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])


def test_checkpoint_rejects_bad_header(tmp_path):
    p = tmp_path / "x.ckpt"
    ad.save_arrays(p, {"a": np.zeros(2)})
    raw = p.read_bytes()
    p.write_bytes(raw.replace(b"CHECKPOINT 1", b"CHECKPOINT 7", 1))
    with pytest.raises(ValueError, match="version"):
        ad.load_arrays(p)
    p.write_bytes(b"garbage\n")
    with pytest.raises(ValueError):
        ad.load_arrays(p)
