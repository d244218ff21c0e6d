import numpy as np
import pytest
from hypothesis import given, strategies as st

from exgen.dataset import RAINFALL_TOTAL
from exgen.gan import ext_loss
from exgen.substrate import (
    BACKEND,
    ArchError,
    KeyMismatchError,
    ModelParams,
    NonScalarLossError,
    OptimConfig,
    ShapeMismatchError,
    adam_step,
    apply,
    autoencoder_arch,
    build_model,
    discriminator_arch,
    forward,
    generator_arch,
    gradients,
    infer_shapes,
    load_checkpoint,
    save_checkpoint,
)
from exgen.substrate import _pykernels, kernels
from exgen.substrate import tensor as T

from gradcheck import max_rel_error

TOL = 1e-4


def _rand(rng, *shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, shape)


# --- per-op gradient checks ----------------------------------------------------------


def test_grad_dense(rng):
    x = _rand(rng, 3, 5)
    err = max_rel_error(lambda p: T.sum(T.tanh(T.matmul(p["x"], p["w"]) + p["b"])),
                        {"x": x, "w": _rand(rng, 5, 4), "b": _rand(rng, 4)})
    assert err < TOL


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (1, 1)])
def test_grad_conv(rng, stride, pad):
    arrays = {"x": _rand(rng, 2, 2, 6, 6), "w": _rand(rng, 3, 2, 4, 4) * 0.3, "b": _rand(rng, 3)}
    err = max_rel_error(lambda p: T.sum(T.tanh(T.conv2d(p["x"], p["w"], p["b"], stride, pad))), arrays)
    assert err < TOL


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1)])
def test_grad_conv_transpose(rng, stride, pad):
    arrays = {"x": _rand(rng, 2, 3, 3, 3), "w": _rand(rng, 3, 2, 4, 4) * 0.3, "b": _rand(rng, 2)}
    err = max_rel_error(lambda p: T.sum(T.tanh(T.conv_transpose2d(p["x"], p["w"], p["b"], stride, pad))), arrays)
    assert err < TOL


def test_grad_instance_norm(rng):
    x = _rand(rng, 2, 3, 4, 4)
    wts = _rand(rng, 2, 3, 4, 4)
    err = max_rel_error(lambda p: T.sum(T.mul(T.instance_norm(p["x"]), wts)), {"x": x})
    assert err < TOL


@pytest.mark.parametrize("op", ["lrelu", "relu", "tanh", "sigmoid", "abs", "log"])
def test_grad_elementwise(rng, op):
    x = _rand(rng, 4, 5)
    x = np.where(np.abs(x) < 0.05, 0.3, x)  # keep away from kinks
    fns = {
        "lrelu": lambda t: T.leaky_relu(t, 0.2), "relu": T.relu, "tanh": T.tanh, "sigmoid": T.sigmoid,
        "abs": T.absolute, "log": lambda t: T.log(T.absolute(t)),
    }
    wts = _rand(rng, 4, 5)
    err = max_rel_error(lambda p: T.sum(T.mul(fns[op](p["x"]), wts)), {"x": x})
    assert err < TOL


def test_grad_reductions_and_shapes(rng):
    a, b = _rand(rng, 3, 4), _rand(rng, 3, 2)

    def f(p):
        c = T.concat([p["a"], p["b"]], axis=1)
        r = T.reshape(c, (3, 2, 3))
        return T.mean(T.sum(r, axis=(1, 2)) / 2.0) + T.mean(T.div(p["a"], p["a"] + 3))

    assert max_rel_error(f, {"a": a, "b": b}) < TOL


def test_grad_dropout_fixed_mask(rng):
    x = _rand(rng, 4, 6)

    def f(p):
        return T.sum(T.mul(T.dropout(p["x"], 0.5, np.random.default_rng(3), True), p["x"]))

    assert max_rel_error(f, {"x": x}) < TOL


def test_grad_bce_forms(rng):
    p_ = rng.uniform(0.1, 0.9, (5, 1))
    z = rng.normal(size=(5, 1))
    tgt = rng.uniform(0, 1.2, (5, 1))
    assert max_rel_error(lambda p: T.bce(p["p"], tgt), {"p": p_}) < TOL
    assert max_rel_error(lambda p: T.bce_with_logits(p["z"], tgt), {"z": z}) < TOL


def test_bce_logits_matches_probability_form(rng):
    z = rng.normal(size=(7, 1))
    tgt = rng.uniform(0, 1, (7, 1))
    a = T.bce_with_logits(z, tgt).data
    b = T.bce(1 / (1 + np.exp(-z)), tgt).data
    assert a == pytest.approx(b, rel=1e-10)


def test_grad_measure_and_ext_loss(rng):
    g = _rand(rng, 3, 4, 4)
    e = np.array([12.0, 20.0, 5.0])
    assert max_rel_error(lambda p: T.sum(RAINFALL_TOTAL.tensor(p["g"])), {"g": g}) < TOL
    assert max_rel_error(lambda p: ext_loss(e, p["g"]), {"g": g}) < TOL


def test_ext_loss_one_pixel_hand_derivation():
    # E = x + 1 on a 1x1 grid; L = |e - E| / e, dL/dx = sign(E - e) / (e * B)
    for x0, e in ((0.5, 2.0), (0.5, 1.0)):
        x = T.Tensor(np.array([[[x0]]]), requires_grad=True)
        loss = ext_loss([e], x)
        loss.backward()
        assert loss.data == pytest.approx(abs(e - (x0 + 1)) / e)
        assert x.grad.item() == pytest.approx(np.sign(x0 + 1 - e) / e)


def test_grad_small_network(rng):
    arch = discriminator_arch(8, cond_dim=1, width=2, features=4)
    model = build_model(arch, 0, dtype=np.float64)
    assert model.n_params <= 1000
    x = _rand(rng, 2, 8, 8)
    c = rng.random((2, 1))
    err = max_rel_error(lambda p: T.sum(apply(arch, p, x, c)), dict(model.tensors))
    assert err < TOL


def test_grad_small_generator(rng):
    arch = generator_arch(8, latent_dim=3, cond_dim=1, width=2)
    model = build_model(arch, 1, dtype=np.float64)
    assert model.n_params <= 1000
    z = rng.normal(size=(2, 3))
    c = rng.random((2, 1))
    wts = _rand(rng, 2, 8, 8)
    err = max_rel_error(lambda p: T.sum(T.mul(apply(arch, p, z, c), wts)), dict(model.tensors))
    assert err < TOL


def test_sum_of_params_gradient_is_one(rng):
    params = {"a": T.Tensor(rng.random((3, 2)), requires_grad=True), "b": T.Tensor(rng.random(4), True)}
    loss = T.sum(params["a"]) + T.sum(params["b"])
    for g in gradients(loss, params).values():
        assert np.all(g == 1.0)


def test_non_scalar_loss_rejected():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(NonScalarLossError):
        gradients(x * 2, {"x": x})


def test_unused_param_gets_zero_gradient():
    a, b = T.Tensor(np.ones(2), True), T.Tensor(np.ones(3), True)
    g = gradients(T.sum(a), {"a": a, "b": b})
    assert np.all(g["b"] == 0)


# --- models ----------------------------------------------------------------------------


def test_build_model_deterministic_and_shapes():
    arch = {"name": "m", "input": [20], "layers": [{"op": "dense", "in": 20, "out": 64}]}
    a, b = build_model(arch, 5), build_model(arch, 5)
    assert a.tensors["0.weight"].shape == (20, 64)
    for k in a.tensors:
        assert np.array_equal(a.tensors[k], b.tensors[k])
    assert np.all(a.tensors["0.bias"] == 0)


def test_conv_init_std():
    arch = {"name": "c", "input": [250, 4, 4],
            "layers": [{"op": "conv", "in": 250, "out": 250, "k": 4, "stride": 1, "pad": 0}]}
    w = build_model(arch, 0).tensors["0.weight"]
    assert w.size >= 1_000_000
    assert abs(w.std() - 0.02) < 0.001


def test_inconsistent_arch_names_layer():
    arch = {"name": "bad", "input": [10], "layers": [
        {"op": "dense", "in": 10, "out": 5}, {"op": "relu"}, {"op": "dense", "in": 6, "out": 1}]}
    with pytest.raises(ArchError, match="layer 2"):
        build_model(arch, 0)


def test_forward_contracts(rng):
    g = build_model(generator_arch(16), 0)
    out = forward(g, rng.normal(size=(8, 20)) * 5)
    assert out.shape == (8, 16, 16) and np.max(np.abs(out)) < 1
    d = build_model(discriminator_arch(16), 0)
    p = forward(d, rng.uniform(-1, 1, (4, 16, 16)))
    assert p.shape == (4, 1) and np.all((p > 0) & (p < 1))
    with pytest.raises(ShapeMismatchError):
        forward(d, np.zeros((2, 8, 8)))
    assert T.leaky_relu(np.array([-1.0]), 0.2).data[0] == pytest.approx(-0.2)


def test_zero_dense_outputs_zero():
    arch = {"name": "z", "input": [4], "layers": [{"op": "dense", "in": 4, "out": 3}]}
    m = build_model(arch, 0)
    m = ModelParams(arch, {k: np.zeros_like(v) for k, v in m.tensors.items()})
    assert np.all(forward(m, np.ones((2, 4))) == 0)


@pytest.mark.parametrize("size", [8, 16, 32])
def test_default_architectures_consistent(size):
    for arch in (generator_arch(size, cond_dim=1), discriminator_arch(size, cond_dim=1),
                 generator_arch(size, kind="mlp"), discriminator_arch(size, kind="mlp"),
                 autoencoder_arch(size)):
        shapes = infer_shapes(arch)
        assert shapes[-1] in ((size, size), (1,))


# --- Adam -------------------------------------------------------------------------------


def _one_param(value=1.0):
    arch = {"name": "p", "input": [1], "layers": [{"op": "dense", "in": 1, "out": 1}]}
    return ModelParams(arch, {"0.weight": np.array([[value]]), "0.bias": np.array([0.0])})


def test_adam_zero_grad_keeps_params():
    m = _one_param()
    new = adam_step(m, {k: np.zeros_like(v) for k, v in m.tensors.items()}, 0.1, OptimConfig())
    assert new.opt_state.step == 1
    for k in m.tensors:
        assert np.array_equal(new.tensors[k], m.tensors[k])


def test_adam_first_step_is_lr_sign():
    m = _one_param(1.0)
    new = adam_step(m, {"0.weight": np.array([[1.0]]), "0.bias": np.array([0.0])}, 0.1, OptimConfig())
    assert new.tensors["0.weight"][0, 0] == pytest.approx(0.9, abs=1e-6)


def test_adam_clipping():
    m = _one_param()
    cfg = OptimConfig(clip=20.0)
    for _ in range(3):
        a = adam_step(m, {"0.weight": np.array([[100.0]]), "0.bias": np.array([0.0])}, 0.01, cfg)
        b = adam_step(m, {"0.weight": np.array([[20.0]]), "0.bias": np.array([0.0])}, 0.01, cfg)
        assert np.array_equal(a.tensors["0.weight"], b.tensors["0.weight"])
        assert np.array_equal(a.opt_state.v["0.weight"], b.opt_state.v["0.weight"])
        m = a


def test_adam_key_mismatch():
    with pytest.raises(KeyMismatchError):
        adam_step(_one_param(), {"0.weight": np.array([[1.0]])}, 0.1, OptimConfig())


def test_adam_matches_reference_sequence(rng):
    grads = rng.normal(size=10)
    cfg = OptimConfig()
    m = _one_param(0.5)
    w, mm, vv = 0.5, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = adam_step(m, {"0.weight": np.array([[g]]), "0.bias": np.array([0.0])}, 0.01, cfg)
        mm = 0.5 * mm + 0.5 * g
        vv = 0.999 * vv + 0.001 * g * g
        w -= 0.01 * (mm / (1 - 0.5 ** t)) / (np.sqrt(vv / (1 - 0.999 ** t)) + 1e-8)
    assert m.tensors["0.weight"][0, 0] == pytest.approx(w, rel=1e-10)


def test_optim_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(clip=0)
    with pytest.raises(ValueError):
        OptimConfig(beta1=1.0)


# --- kernels ----------------------------------------------------------------------------


def test_backend_is_reported():
    assert BACKEND in ("cython", "python")


@given(st.integers(1, 3), st.integers(1, 3), st.integers(4, 9), st.sampled_from([(4, 1, 0), (4, 2, 1), (3, 1, 1)]))
def test_kernels_agree_with_python_fallback(b, c, n, ksp):
    k, s, p = ksp
    x = np.random.default_rng(b * 100 + c * 10 + n).normal(size=(b, c, n, n))
    ref = _pykernels.im2col(x, k, s, p)
    np.testing.assert_array_equal(kernels.im2col(x, k, s, p), ref)
    back = _pykernels.col2im(ref, x.shape, k, s, p)
    np.testing.assert_array_equal(kernels.col2im(ref, x.shape, k, s, p), back)


def test_im2col_against_direct_convolution(rng):
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    out = T.conv2d(x, w, np.zeros(4), 1, 1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for i in range(6):
        for j in range(6):
            ref[:, :, i, j] = np.einsum("bckl,ockl->bo", xp[:, :, i:i + 3, j:j + 3], w)
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_col2im_is_adjoint_of_im2col(rng):
    x = rng.normal(size=(2, 2, 7, 7))
    cols = kernels.im2col(x, 4, 2, 1)
    y = rng.normal(size=cols.shape)
    lhs = np.sum(cols * y)
    rhs = np.sum(x * kernels.col2im(y, x.shape, 4, 2, 1))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_crc64_check_value():
    assert kernels.crc64(b"123456789") == 0x995DC9BBDF1939FA
    assert _pykernels.crc64(b"123456789") == 0x995DC9BBDF1939FA
    data = bytes(range(256)) * 3
    assert kernels.crc64(data[300:], kernels.crc64(data[:300])) == kernels.crc64(data)


# --- checkpoints --------------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    g = build_model(generator_arch(8, cond_dim=1, width=4), 0)
    d = build_model(discriminator_arch(8, cond_dim=1, width=4), 1)
    save_checkpoint(tmp_path / "m.ckpt", {"G": g, "D": d}, {"iteration": 2})
    models, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"iteration": 2}
    for key, src in (("G", g), ("D", d)):
        assert models[key].arch == src.arch
        for name, val in src.tensors.items():
            assert np.array_equal(models[key].tensors[name], val)


def test_checkpoint_bytes_deterministic(tmp_path):
    g = build_model(generator_arch(8, width=4), 3)
    save_checkpoint(tmp_path / "a.ckpt", {"G": g}, {"x": 1})
    save_checkpoint(tmp_path / "b.ckpt", {"G": g}, {"x": 1})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
