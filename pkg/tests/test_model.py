import math

import numpy as np
import pytest

from srdl import tensor as tz
from srdl.errors import (
    CheckpointFormatError,
    ContractViolation,
    ShapeMismatch,
    UnsupportedVersionError,
)
from srdl.model import (
    Checkpoint,
    ModelSpec,
    forward_flops,
    forward_logits,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

MLP = ModelSpec("mlp", (16,), (8, 8), 4)
CNN = ModelSpec("smallcnn", (1, 8, 8), (4, 8, 8), 4)


def graph_flops(root):
    """Instrumented oracle: count FLOPs from the shapes actually produced.

    Walks the recorded op graph of a 1-sample forward pass and applies the
    package's counting convention (MAC = 2 FLOPs, 1 per elementwise op) to the
    observed extents, independently of the analytic layer arithmetic.
    """
    total = 0
    for node in tz.topo_order(root):
        if node.op == "matmul":
            m, k = node.parents[0].shape
            _, n = node.parents[1].shape
            total += 2 * m * k * n
        elif node.op in ("add_bias", "add_channel_bias", "relu"):
            total += node.data.size
        elif node.op == "conv2d":
            _, cin, kh, kw = node.parents[1].shape
            total += node.data.size * 2 * cin * kh * kw
        elif node.op == "gap":
            total += node.parents[0].data.size
    return total


# ---------------------------------------------------------------- init_params


def test_init_deterministic():
    a = init_params(MLP, seed=5)
    b = init_params(MLP, seed=5)
    for (name, ta), (_, tb) in zip(a, b):
        assert ta.data.tobytes() == tb.data.tobytes(), name


def test_init_biases_zero():
    params = init_params(CNN, seed=0)
    for name, t in params:
        if name.endswith(".bias"):
            assert not t.data.any()


def test_init_weight_std_matches_fan_in():
    spec = ModelSpec("mlp", (200,), (500,), 2)
    params = init_params(spec, seed=11, dtype=np.float64)
    w = params["fc1.weight"].data  # fan_in 200, 100k samples
    assert w.size == 100_000
    expected = math.sqrt(2.0 / 200)
    assert abs(w.std() - expected) / expected < 0.05


def test_init_different_seeds_differ():
    a = init_params(MLP, seed=1)
    b = init_params(MLP, seed=2)
    assert a["fc1.weight"].data.tobytes() != b["fc1.weight"].data.tobytes()


# ---------------------------------------------------------------- forward_logits


def test_zero_params_give_zero_logits():
    params = init_params(MLP, seed=0, dtype=np.float64)
    for _, t in params:
        t.data[...] = 0.0
    x = tz.Tensor(np.random.default_rng(0).standard_normal((3, 16)))
    out = forward_logits(params, x)
    assert out.shape == (3, 4)
    assert not out.data.any()


def test_single_linear_layer_hand_case():
    spec = ModelSpec("mlp", (2,), (), 2)
    params = init_params(spec, seed=0, dtype=np.float64)
    params["head.weight"].data[...] = np.array([[1.0, 2.0], [3.0, 4.0]])
    params["head.bias"].data[...] = np.array([0.5, -0.5])
    out = forward_logits(params, tz.Tensor(np.array([[1.0, 1.0]])))
    assert out.data.tolist() == [[4.5, 5.5]]


def test_logits_unbounded_no_softmax():
    params = init_params(MLP, seed=3, dtype=np.float64)
    x = tz.Tensor(np.random.default_rng(1).standard_normal((64, 16)) * 10)
    out = forward_logits(params, x).data
    assert (out < 0).any() and (out > 0).any()
    assert not np.allclose(out.sum(axis=1), 1.0)


@pytest.mark.parametrize("trial", range(10))
def test_output_shape_random_specs(trial):
    rng = np.random.default_rng(trial)
    c = int(rng.integers(2, 7))
    din = int(rng.integers(2, 12))
    widths = tuple(int(w) for w in rng.integers(1, 9, size=rng.integers(0, 3)))
    spec = ModelSpec("mlp", (din,), widths, c)
    n = int(rng.integers(1, 9))
    out = forward_logits(init_params(spec, seed=trial), tz.Tensor(rng.standard_normal((n, din)).astype(np.float32)))
    assert out.shape == (n, c)


def test_cnn_forward_shape_and_grad_reaches_all_params():
    params = init_params(CNN, seed=7, dtype=np.float64)
    x = tz.Tensor(np.random.default_rng(2).standard_normal((2, 1, 8, 8)))
    out = forward_logits(params, x)
    assert out.shape == (2, 4)
    out.backward(np.ones((2, 4)))
    for name, t in params:
        assert t.grad is not None, name


def test_forward_shape_mismatch():
    params = init_params(MLP, seed=0)
    with pytest.raises(ShapeMismatch):
        forward_logits(params, tz.Tensor(np.zeros((2, 9), dtype=np.float32)))


def test_spec_validation():
    with pytest.raises(ContractViolation):
        ModelSpec("mlp", (4,), (8,), 1)
    with pytest.raises(ContractViolation):
        ModelSpec("mlp", (4,), (0,), 3)
    with pytest.raises(ContractViolation):
        ModelSpec("rnn", (4,), (8,), 3)


# ---------------------------------------------------------------- forward_flops


def test_dense_layer_flops_hand_count():
    spec = ModelSpec("mlp", (10,), (), 5)
    assert forward_flops(spec) == 2 * 10 * 5 + 5


def test_stacked_layers_flops_additive():
    one = ModelSpec("mlp", (10,), (), 6)
    stacked = ModelSpec("mlp", (10,), (6,), 5)
    # dense 10->6 plus relu(6) plus dense 6->5
    assert forward_flops(stacked) == (2 * 10 * 6 + 6) + 6 + (2 * 6 * 5 + 5)
    assert forward_flops(one) == 2 * 10 * 6 + 6


def test_mlp_flops_match_instrumented_forward():
    params = init_params(MLP, seed=0, dtype=np.float64)
    out = forward_logits(params, tz.Tensor(np.zeros((1, 16))))
    assert forward_flops(MLP) == graph_flops(out)


def test_cnn_flops_match_instrumented_forward():
    params = init_params(CNN, seed=0, dtype=np.float64)
    out = forward_logits(params, tz.Tensor(np.zeros((1, 1, 8, 8))))
    assert forward_flops(CNN) == graph_flops(out)


def test_flops_independent_of_parameter_values():
    before = forward_flops(MLP)
    params = init_params(MLP, seed=0)
    for _, t in params:
        t.data[...] = 1e6
    assert forward_flops(MLP) == before


# ---------------------------------------------------------------- checkpoints


def _ckpt(seed=0):
    params = init_params(MLP, seed=seed)
    return Checkpoint(spec=MLP, params=params, stage="vanilla-final", epoch=12,
                      rng_state={"seed": seed})


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    ckpt = _ckpt(seed=9)
    path = tmp_path / "model.ckpt"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    assert loaded.spec == ckpt.spec
    assert loaded.stage == ckpt.stage
    assert loaded.epoch == ckpt.epoch
    assert loaded.rng_state == ckpt.rng_state
    assert loaded.params.init_scheme == ckpt.params.init_scheme
    assert loaded.params.init_seed == ckpt.params.init_seed
    assert list(loaded.params.tensors) == list(ckpt.params.tensors)
    for (name, a), (_, b) in zip(ckpt.params, loaded.params):
        assert a.data.tobytes() == b.data.tobytes(), name


def test_checkpoint_double_roundtrip_identical_bytes(tmp_path):
    ckpt = _ckpt()
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(ckpt, p1)
    save_checkpoint(load_checkpoint(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    save_checkpoint(_ckpt(), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(raw)
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_checkpoint_future_version_rejected(tmp_path):
    path = tmp_path / "future.ckpt"
    ckpt = _ckpt()
    ckpt.version = 99
    save_checkpoint(ckpt, path)
    with pytest.raises(UnsupportedVersionError):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "trunc.ckpt"
    save_checkpoint(_ckpt(), path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(Exception) as exc:
        load_checkpoint(path)
    assert "truncated" in str(exc.value)
