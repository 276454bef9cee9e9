import numpy as np
import pytest

from dcqe import autodiff as ad
from dcqe.autodiff import GradientTape, Tensor
from dcqe.models import (ModelParams, ModelSpec, apply, forward, init_params, load_checkpoint,
                         save_checkpoint, zero_params)

from .gradcheck import numeric_grad, rel_err


def test_family_defaults():
    a = ModelSpec.arcnn_like()
    assert a.kernel_sizes == (9, 7, 1, 5) and not a.residual
    d = ModelSpec.dncnn_like()
    assert d.depth == 8 and d.residual and set(d.channels_hidden) == {32}


@pytest.mark.parametrize("kwargs", [
    dict(family="unet"),
    dict(kernel_sizes=(3, 4, 3), channels_hidden=(4, 4)),
    dict(kernel_sizes=(3, 3), channels_hidden=(4, 4)),
    dict(channels_in=2),
    dict(family="arcnn_like", channels_hidden=(4, 4), kernel_sizes=(3, 3, 3), residual=False),
    dict(residual=False),
])
def test_invalid_specs_rejected(kwargs):
    with pytest.raises(ValueError):
        ModelSpec(**kwargs)


def test_zero_params_dncnn_is_identity():
    spec = ModelSpec.dncnn_like(depth=4, width=6)
    x = np.random.default_rng(0).random((2, 1, 9, 7))
    assert np.array_equal(apply(zero_params(spec), spec, x), x)


def test_zero_params_arcnn_outputs_zero():
    spec = ModelSpec.arcnn_like(hidden=(4, 4, 4))
    x = np.random.default_rng(0).random((1, 1, 8, 8))
    assert np.all(apply(zero_params(spec), spec, x) == 0)


def test_output_shape_equals_input_shape():
    for spec in (ModelSpec.arcnn_like(3, hidden=(4, 3, 3)), ModelSpec.dncnn_like(3, depth=3, width=4)):
        x = np.random.default_rng(1).random((2, 3, 10, 12))
        assert apply(init_params(spec, 0), spec, x).shape == x.shape


def test_wrong_channel_count_rejected():
    spec = ModelSpec.dncnn_like(depth=3, width=4)
    with pytest.raises(ad.ShapeError):
        forward(zero_params(spec), spec, Tensor(np.zeros((1, 3, 8, 8))))


def test_init_std_matches_fan_in():
    spec = ModelSpec.dncnn_like(depth=3, width=64)
    params = init_params(spec, 0)
    w = params.layers[1][0].data  # 64 x 64 x 3 x 3, fan-in 576
    assert w.std() == pytest.approx(np.sqrt(2 / 576), rel=0.03)
    assert all(np.all(b.data == 0) for _, b in params.layers)


def test_init_deterministic_per_seed():
    spec = ModelSpec.dncnn_like(depth=3, width=4)
    a, b, c = init_params(spec, 5), init_params(spec, 5), init_params(spec, 6)
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
    assert not np.array_equal(a.arrays()[0], c.arrays()[0])


def test_parameter_count():
    spec = ModelSpec.dncnn_like(depth=3, width=2)
    assert init_params(spec, 0).count() == (18 + 2) + (36 + 2) + (18 + 1)


@pytest.mark.parametrize("spec", [ModelSpec.dncnn_like(depth=3, width=2),
                                  ModelSpec.arcnn_like(hidden=(2, 2, 2), kernels=(3, 3, 1, 3))])
def test_forward_gradients_match_fd(spec):
    params = init_params(spec, 3)
    rng = np.random.default_rng(4)
    # zero biases put whole receptive fields exactly on the relu kink
    for _, b in params.layers:
        b.data[:] = rng.normal(0, 0.1, size=b.shape)
    x = Tensor(rng.random((2, 1, 5, 5)))
    probe = Tensor(rng.normal(size=(2, 1, 5, 5)))
    f = lambda: ad.mean(ad.mul(forward(params, spec, x), probe))
    with GradientTape():
        g = ad.backward(f())
    for t in params.tensors():
        assert rel_err(ad.grad_of(g, t), numeric_grad(f, t)) < 1e-3


def test_checkpoint_round_trip_bit_exact(tmp_path):
    spec = ModelSpec.dncnn_like(depth=3, width=4)
    params = init_params(spec, 9)
    save_checkpoint(tmp_path / "m.ckpt", spec, params, {"iteration": 7})
    spec2, params2, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert spec2 == spec and meta == {"iteration": 7}
    assert all(np.array_equal(a, b) for a, b in zip(params.arrays(), params2.arrays()))
    x = np.random.default_rng(0).random((1, 1, 8, 8))
    assert np.array_equal(apply(params, spec, x), apply(params2, spec2, x))
    assert not (tmp_path / "m.ckpt.part").exists()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(tmp_path / "bad.ckpt")
    spec = ModelSpec.dncnn_like(depth=3, width=4)
    save_checkpoint(tmp_path / "m.ckpt", spec, init_params(spec, 0))
    data = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(data[:-16])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(tmp_path / "cut.ckpt")


def test_spec_dict_round_trip():
    spec = ModelSpec.arcnn_like(3)
    assert ModelSpec.from_dict(spec.to_dict()) == spec


def test_params_copy_is_independent():
    spec = ModelSpec.dncnn_like(depth=3, width=2)
    p = init_params(spec, 0)
    q = p.copy()
    q.layers[0][0].data += 1
    assert not np.array_equal(p.arrays()[0], q.arrays()[0])
    assert isinstance(ModelParams.from_arrays(p.arrays()), ModelParams)
