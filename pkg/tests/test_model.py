import struct

import numpy as np
import pytest

from metabearing import data
from metabearing import model as mdl
from metabearing.cli import model_gradcheck
from metabearing.tensor_core import ParamSet, Tape, Tensor, backward, no_grad, ops

# Logits of init_params(ModelSpec(3), seed=0) at 64-bit on
# default_rng(123).standard_normal((4, 1, 64, 64)); frozen after the
# gradient checks passed.
GOLDEN_LOGITS = np.array([
    [1.302478771736, -1.737058289835, -0.063517647121],
    [1.000294894656, -1.807526810436, -0.185762553934],
    [0.034944124618, -1.588839811524, 0.998941139876],
    [0.714671301868, -1.834696510561, 0.355116878718],
])


def logits(params, x):
    with no_grad():
        return mdl.forward(params, x).data


def reference_forward(params, x):
    """Plain NCHW numpy forward written independently of the tensor library."""
    h = np.asarray(x, dtype=np.float64)
    blocks = sum(1 for n in params.names if n.startswith("conv"))
    for b in range(1, blocks + 1):
        w = params[f"conv{b}.weight"].data
        B, C, H, W = h.shape
        hp = np.pad(h, ((0, 0), (0, 0), (1, 1), (1, 1)))
        out = np.zeros((B, w.shape[0], H, W))
        for dy in range(3):
            for dx in range(3):
                out += np.einsum("oc,bchw->bohw", w[:, :, dy, dx], hp[:, :, dy:dy + H, dx:dx + W])
        mu = out.mean(axis=(0, 2, 3), keepdims=True)
        var = out.var(axis=(0, 2, 3), keepdims=True)
        gamma = params[f"bn{b}.weight"].data.reshape(1, -1, 1, 1)
        beta = params[f"bn{b}.bias"].data.reshape(1, -1, 1, 1)
        out = np.maximum((out - mu) / np.sqrt(var + 1e-5) * gamma + beta, 0)
        h = out.reshape(B, -1, H // 2, 2, W // 2, 2).max(axis=(3, 5))
    # Features are flattened in (row, column, channel) order.
    feats = h.transpose(0, 2, 3, 1).reshape(h.shape[0], -1)
    return feats @ params["fc.weight"].data + params["fc.bias"].data


def test_param_shapes():
    p = mdl.init_params(mdl.ModelSpec(3), 0)
    assert p["conv1.weight"].shape == (64, 1, 3, 3)
    assert p["conv2.weight"].shape == (64, 64, 3, 3)
    assert p["fc.weight"].shape == (1024, 3)
    assert mdl.ModelSpec(3).feature_size == 4 * 4 * 64
    np.testing.assert_array_equal(p["bn3.weight"].data, 1.0)
    np.testing.assert_array_equal(p["bn3.bias"].data, 0.0)
    np.testing.assert_array_equal(p["fc.bias"].data, 0.0)


def test_init_is_deterministic():
    a, b = mdl.init_params(mdl.ModelSpec(5), 7), mdl.init_params(mdl.ModelSpec(5), 7)
    assert all(a[n].data.tobytes() == b[n].data.tobytes() for n in a.names)
    c = mdl.init_params(mdl.ModelSpec(5), 8)
    assert a["conv1.weight"].data.tobytes() != c["conv1.weight"].data.tobytes()


def test_init_is_fan_in_scaled():
    p = mdl.init_params(mdl.ModelSpec(3), 0, dtype=np.float64)
    w2 = p["conv2.weight"].data
    assert np.abs(w2).max() <= np.sqrt(6 / (64 * 9))
    assert np.abs(p["conv1.weight"].data).max() <= np.sqrt(6 / 9)


def test_forward_shape():
    p = mdl.init_params(mdl.ModelSpec(5), 0)
    x = np.random.default_rng(0).standard_normal((15, 1, 64, 64)).astype(np.float32)
    assert logits(p, x).shape == (15, 5)


def test_forward_matches_reference_implementation():
    p = mdl.init_params(mdl.ModelSpec(4), 3, dtype=np.float64)
    rng = np.random.default_rng(4)
    p = p.map(lambda n, t: Tensor(rng.uniform(0.5, 1.5, t.shape)) if n.startswith("bn") and "weight" in n else t)
    x = rng.standard_normal((3, 1, 64, 64))
    np.testing.assert_allclose(logits(p, x), reference_forward(p, x), rtol=1e-10, atol=1e-10)


def test_golden_logits():
    p = mdl.init_params(mdl.ModelSpec(3), 0, dtype=np.float64)
    x = np.random.default_rng(123).standard_normal((4, 1, 64, 64))
    np.testing.assert_allclose(logits(p, x), GOLDEN_LOGITS, rtol=0, atol=1e-9)
    p32 = mdl.init_params(mdl.ModelSpec(3), 0)
    np.testing.assert_allclose(logits(p32, x.astype(np.float32)), GOLDEN_LOGITS, atol=2e-5)


def test_zero_weights_give_bias_rows():
    p = mdl.init_params(mdl.ModelSpec(3), 0)
    bias = np.array([0.5, -1.0, 2.0], dtype=np.float32)
    p = p.map(lambda n, t: Tensor(np.zeros_like(t.data)) if n.startswith("conv") else
              (Tensor(bias) if n == "fc.bias" else t))
    out = logits(p, np.zeros((4, 1, 64, 64), dtype=np.float32))
    np.testing.assert_array_equal(out, np.tile(bias, (4, 1)))


def test_batch_permutation_equivariance():
    p = mdl.init_params(mdl.ModelSpec(3), 1, dtype=np.float64)
    x = np.random.default_rng(2).standard_normal((5, 1, 64, 64))
    perm = np.array([3, 0, 4, 1, 2])
    np.testing.assert_allclose(logits(p, x[perm]), logits(p, x)[perm], rtol=1e-10, atol=1e-12)


def test_forward_rejects_bad_inputs():
    p = mdl.init_params(mdl.ModelSpec(3), 0)
    with pytest.raises(ValueError, match="too small"):
        mdl.forward(p, np.zeros((1, 1, 64, 64), dtype=np.float32))
    with pytest.raises(ValueError, match="expected input"):
        mdl.forward(p, np.zeros((2, 1, 32, 32), dtype=np.float32))


def test_forward_records_on_tape():
    p = mdl.init_params(mdl.ModelSpec(3), 0)
    x = np.random.default_rng(0).standard_normal((2, 1, 64, 64)).astype(np.float32)
    with Tape() as tape:
        out = mdl.forward(p, x)
    assert out.requires_grad and len(tape) > 20


def test_loss_examples():
    assert mdl.loss(Tensor(np.zeros((4, 3))), [0, 1, 2, 0]).item() == pytest.approx(np.log(3), abs=1e-7)
    confident = np.zeros((2, 3))
    confident[[0, 1], [2, 0]] = 20.0
    assert mdl.loss(Tensor(confident), [2, 0]).item() < 1e-6
    for label in (0, 1):
        assert mdl.loss(Tensor(np.zeros((1, 2))), [label]).item() == pytest.approx(np.log(2))
    with pytest.raises(ValueError):
        mdl.loss(Tensor(np.zeros((2, 3))), [0, 3])


def test_model_gradients_match_finite_differences():
    assert model_gradcheck(seed=5, coords_per_entry=2) < 1e-4


def test_every_parameter_receives_gradient():
    p = mdl.init_params(mdl.ModelSpec(3), 0)
    x = np.random.default_rng(0).standard_normal((2, 1, 64, 64)).astype(np.float32)
    with Tape() as tape:
        loss = mdl.loss(mdl.forward(p, x), [0, 2])
    grads = backward(tape, loss, p)
    assert all(np.abs(g.data).sum() > 0 for g in grads.values())


# ----------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip_is_byte_exact(tmp_path):
    p = mdl.init_params(mdl.ModelSpec(3), 0)
    rates = np.full((len(p), 2), 0.01, dtype=np.float32)
    path = tmp_path / "m.mflt"
    mdl.save_checkpoint(path, p, rates)
    q, r = mdl.load_checkpoint(path)
    assert q.names == p.names
    assert all(q[n].data.tobytes() == p[n].data.tobytes() for n in p.names)
    assert r.tobytes() == rates.tobytes()
    again = tmp_path / "n.mflt"
    mdl.save_checkpoint(again, q, r)
    assert again.read_bytes() == path.read_bytes()


def test_checkpoint_layout():
    blob = mdl.encode_params([("ab", np.array([[1.0, 2.0]], dtype=np.float64))], 8)
    assert blob[:5] == b"MFLT1"
    assert struct.unpack_from("<BI", blob, 5) == (8, 1)
    assert struct.unpack_from("<I", blob, 10) == (2,)
    assert blob[14:16] == b"ab"
    assert struct.unpack_from("<III", blob, 16) == (2, 1, 2)
    assert np.frombuffer(blob[28:], dtype="<f8").tolist() == [1.0, 2.0]


@pytest.mark.parametrize("mutate, message", [
    (lambda b: b"XFLT1" + b[5:], "magic"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\0", "trailing"),
])
def test_checkpoint_corruption_detected(mutate, message):
    blob = mdl.encode_params([("w", np.ones(3, dtype=np.float32))], 4)
    with pytest.raises(ValueError, match=message):
        mdl.decode_params(mutate(blob))


def test_spec_from_params():
    p = mdl.init_params(mdl.ModelSpec(7), 0)
    assert mdl.ModelSpec.from_params(p) == mdl.ModelSpec(7)
    with pytest.raises(ValueError):
        mdl.ModelSpec(3, input_side=60)


# ------------------------------------------------------------ separability


def test_conventional_training_separates_synthetic_classes():
    """Plain supervised training on four synthetic classes, held-out accuracy >= 95%."""
    cond = data.SYNTH_CONDITIONS[0]
    kinds = [("healthy", 0), ("ball", 2), ("inner", 2), ("outer", 2)]
    images, labels = [], []
    for label, (kind, sev) in enumerate(kinds):
        rec = data.synth_fault_signal(kind, sev, cond, data.WINDOW * 40, rng_seed=label)
        segs = data.segment_record(rec)
        images += [data.to_image(s) for s in segs]
        labels += [label] * len(segs)
    x = np.stack(images).astype(np.float32)
    y = np.array(labels)
    rng = np.random.default_rng(0)
    order = rng.permutation(len(y))
    train, test = order[:120], order[120:]

    theta = mdl.init_params(mdl.ModelSpec(4), 0)
    from metabearing.meta_engine import outer_optimizer_step

    state = None
    for step in range(200):
        idx = rng.choice(train, size=16, replace=False)
        with Tape() as tape:
            loss = mdl.loss(mdl.forward(theta, x[idx]), y[idx])
        grads = backward(tape, loss, theta)
        new, state = outer_optimizer_step("adam", theta.arrays(), {n: g.data for n, g in grads.items()},
                                          state, 1e-3)
        theta = ParamSet((n, Tensor(new[n], requires_grad=True)) for n in theta.names)
    assert mdl.accuracy(Tensor(logits(theta, x[test])), y[test]) >= 0.95


def test_ops_flatten_order_is_channels_last():
    # The dense layer sees features ordered (row, column, channel).
    h = Tensor(np.arange(2 * 2 * 2 * 3, dtype=np.float64).reshape(2, 2, 2, 3))
    flat = ops.reshape(h, (2, 12)).data
    assert flat[0, :3].tolist() == [0.0, 1.0, 2.0]
