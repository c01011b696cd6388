"""Model families: parameter arithmetic, forward contracts, checkpoints.

Parameter counts are recomputed in the tests from the layer dimensions so
a silent architecture change cannot slip through. The residual block and
the attention layer are additionally checked against independent numpy
re-implementations of their math.
"""

import hashlib
import subprocess
import sys

import numpy as np
import pytest

from _fd import check_model_grads
from cellwatch import tensor as T
from cellwatch.errors import CheckpointError, ShapeError
from cellwatch.models import (
    CKPT_SCHEMA_VERSION,
    FAMILIES,
    FAMILY_NAMES,
    VIT_FUSION_MESSAGE,
    MiniResNet,
    MiniViT,
    ModelSpec,
    ShallowCnn,
    build_mini_resnet,
    build_mini_vit,
    build_model,
    build_shallow_cnn,
    load_checkpoint,
    save_checkpoint,
)
from cellwatch.optim import make_optimizer
from cellwatch.tensor import Tensor


def _cnn_spec(size=64, in_channels=3, seed=0):
    return ModelSpec(family="cnn", in_channels=in_channels, image_size=size, init_seed=seed)


def _resnet_spec(size=64, in_channels=3, seed=0):
    return ModelSpec(family="resnet", in_channels=in_channels, image_size=size, init_seed=seed)


def _vit_spec(size=64, seed=0, **kw):
    return ModelSpec(family="vit", in_channels=3, image_size=size, init_seed=seed, **kw)


# ---------------------------------------------------------------------------
# parameter arithmetic
# ---------------------------------------------------------------------------


def test_shallow_cnn_parameter_count_closed_form():
    model = build_shallow_cnn(_cnn_spec(size=64))
    # conv1 8*3*9+8, conv2 16*8*9+16, fc1 32*(16*16*16)+32, fc2 2*32+2
    assert model.parameter_count() == 224 + 1168 + 131104 + 66 == 132562


def test_mini_resnet_parameter_count_closed_form():
    model = build_mini_resnet(_resnet_spec(size=128))
    widths, strides = (8, 16, 16, 32), (1, 2, 1, 2)
    want = 8 * 3 * 9 + 8  # stem
    c_in = 8
    for c_out, stride in zip(widths, strides):
        want += c_out * c_in * 9 + c_out + c_out * c_out * 9 + c_out
        if c_in != c_out or stride != 1:
            want += c_out * c_in + c_out  # 1x1 projection
        c_in = c_out
    want += 32 * c_in + 32 + 2 * 32 + 2  # head
    assert model.parameter_count() == want


def test_mini_vit_parameter_count_closed_form():
    model = build_mini_vit(_vit_spec(size=128))
    d, mlp, depth, patches = 128, 256, 4, 64
    patch_dim = 3 * 16 * 16
    want = d * patch_dim + d  # patch embedding
    want += d + (patches + 1) * d  # cls token + positions
    per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (mlp * d + mlp) + (d * mlp + d)
    want += depth * per_layer
    want += 2 * d  # final layer norm
    want += 2 * d + 2  # head
    assert model.parameter_count() == want


def test_family_tables():
    assert FAMILIES == ("cnn", "resnet", "vit")
    assert FAMILY_NAMES["vit"] == "MiniViT"
    assert isinstance(build_model(_cnn_spec()), ShallowCnn)
    assert isinstance(build_model(_resnet_spec()), MiniResNet)
    assert isinstance(build_model(_vit_spec()), MiniViT)


# ---------------------------------------------------------------------------
# forward shapes and traces
# ---------------------------------------------------------------------------


def _batch(spec, n=2, seed=1):
    rng = np.random.default_rng(seed)
    return rng.random((n, spec.in_channels, spec.image_size, spec.image_size)).astype(np.float32)


def test_cnn_forward_shapes():
    spec = _cnn_spec(size=64)
    trace = build_model(spec)(_batch(spec))
    assert trace.logits.shape == (2, 2)
    assert trace.final_conv_activations.shape == (2, 16, 32, 32)
    assert trace.attention_maps is None


def test_resnet_forward_shapes():
    spec = _resnet_spec(size=64)
    trace = build_model(spec)(_batch(spec))
    assert trace.logits.shape == (2, 2)
    # 64 -> stem/2 -> pool/2 -> strides (1,2,1,2) -> 4
    assert trace.final_conv_activations.shape == (2, 32, 4, 4)


def test_vit_forward_shapes_and_row_stochastic_attention():
    spec = _vit_spec(size=64)
    trace = build_model(spec)(_batch(spec))
    assert trace.logits.shape == (2, 2)
    tokens = (64 // 16) ** 2 + 1
    assert len(trace.attention_maps) == 4
    for attn in trace.attention_maps:
        assert attn.shape == (2, 4, tokens, tokens)
        assert (attn.data >= 0).all()
        np.testing.assert_allclose(
            attn.data.sum(axis=-1), np.ones((2, 4, tokens)), atol=1e-5
        )
    assert trace.final_conv_activations is None


def test_6_channel_variants_build():
    for make in (_cnn_spec, _resnet_spec):
        spec = make(size=64, in_channels=6)
        trace = build_model(spec)(_batch(spec))
        assert trace.logits.shape == (2, 2)


def test_input_validation():
    spec = _cnn_spec(size=64)
    model = build_model(spec)
    with pytest.raises(ShapeError):
        model(np.zeros((3, 64, 64), dtype=np.float32))
    with pytest.raises(ShapeError):
        model(np.zeros((1, 6, 64, 64), dtype=np.float32))
    with pytest.raises(ShapeError):
        model(np.zeros((1, 3, 32, 32), dtype=np.float32))


def test_spec_validation_errors():
    with pytest.raises(ValueError, match="fusion unsupported"):
        ModelSpec(family="vit", in_channels=6).validate()
    with pytest.raises(ValueError):
        ModelSpec(family="vit", image_size=100, patch_size=16).validate()
    with pytest.raises(ValueError):
        ModelSpec(family="vit", embed_dim=100, heads=3).validate()
    with pytest.raises(ValueError):
        ModelSpec(family="mlp").validate()
    with pytest.raises(ValueError):
        ModelSpec(family="cnn", image_size=2).validate()
    with pytest.raises(ValueError):
        ModelSpec(family="resnet", image_size=8).validate()
    assert "3 channels" in VIT_FUSION_MESSAGE


def test_builder_family_guards():
    with pytest.raises(ValueError):
        build_shallow_cnn(_resnet_spec())
    with pytest.raises(ValueError):
        build_mini_resnet(_vit_spec())
    with pytest.raises(ValueError):
        build_mini_vit(_cnn_spec())


def test_spec_round_trip():
    spec = _vit_spec(size=32, patch_size=8, seed=42)
    assert ModelSpec.from_dict(spec.to_dict()) == spec


# ---------------------------------------------------------------------------
# initialization determinism
# ---------------------------------------------------------------------------


def test_same_seed_same_weights():
    a = build_model(_resnet_spec(seed=5))
    b = build_model(_resnet_spec(seed=5))
    c = build_model(_resnet_spec(seed=6))
    pa, pb, pc = a.named_parameters(), b.named_parameters(), c.named_parameters()
    assert pa.keys() == pb.keys() == pc.keys()
    for name in pa:
        assert pa[name].data.tobytes() == pb[name].data.tobytes()
    assert any(pa[n].data.tobytes() != pc[n].data.tobytes() for n in pa)


def test_init_streams_keyed_by_name_not_order():
    # the same layer name yields the same weights in different models
    cnn64 = build_shallow_cnn(_cnn_spec(size=64, seed=3))
    cnn128 = build_shallow_cnn(_cnn_spec(size=128, seed=3))
    assert (
        cnn64.named_parameters()["conv1.weight"].data.tobytes()
        == cnn128.named_parameters()["conv1.weight"].data.tobytes()
    )


def test_batch_composition_independence():
    spec = _resnet_spec(size=32)
    model = build_model(spec)
    x = _batch(spec, n=6, seed=9)
    with T.no_grad():
        full = model(x).logits.data
        one = model(x[2:3]).logits.data
        perm = np.array([3, 1, 5, 0, 2, 4])
        shuffled = model(x[perm]).logits.data
    np.testing.assert_allclose(full[2], one[0], atol=1e-5)
    np.testing.assert_allclose(shuffled, full[perm], atol=1e-5)


def test_cross_process_logits_bit_identical():
    code = (
        "import numpy as np, hashlib;"
        "from cellwatch.models import ModelSpec, build_model;"
        "from cellwatch.tensor import no_grad;"
        "spec = ModelSpec(family='resnet', image_size=32, init_seed=11);"
        "m = build_model(spec);"
        "x = np.random.default_rng(4).random((2, 3, 32, 32)).astype(np.float32);"
        "l = None\n"
        "with no_grad():\n"
        "    l = m(x).logits.data\n"
        "print(hashlib.sha256(l.tobytes()).hexdigest())"
    )
    runs = [
        subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True)
        for _ in range(2)
    ]
    assert runs[0].stdout == runs[1].stdout

    spec = ModelSpec(family="resnet", image_size=32, init_seed=11)
    m = build_model(spec)
    x = np.random.default_rng(4).random((2, 3, 32, 32)).astype(np.float32)
    with T.no_grad():
        here = hashlib.sha256(m(x).logits.data.tobytes()).hexdigest()
    assert runs[0].stdout.strip() == here


# ---------------------------------------------------------------------------
# block-level oracles
# ---------------------------------------------------------------------------


def test_residual_block_identity_skip_matches_primitive_composition():
    model = build_mini_resnet(_resnet_spec(size=32, seed=2))
    block = model.blocks[0]  # 8 -> 8, stride 1: identity skip
    assert not block.project
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 8, 8, 8)).astype(np.float32))
    got = block(x)
    want = T.relu(
        T.conv2d(
            T.relu(T.conv2d(x, block.w1, block.b1, stride=1, padding=1)),
            block.w2,
            block.b2,
            stride=1,
            padding=1,
        )
        + x
    )
    assert got.data.tobytes() == want.data.tobytes()


def test_residual_block_projection_skip():
    model = build_mini_resnet(_resnet_spec(size=32, seed=2))
    block = model.blocks[1]  # 8 -> 16, stride 2: 1x1 projection skip
    assert block.project
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(1, 8, 8, 8)).astype(np.float32))
    got = block(x)
    assert got.shape == (1, 16, 4, 4)
    want = T.relu(
        T.conv2d(
            T.relu(T.conv2d(x, block.w1, block.b1, stride=2, padding=1)),
            block.w2,
            block.b2,
            stride=1,
            padding=1,
        )
        + T.conv2d(x, block.wp, block.bp, stride=2)
    )
    assert got.data.tobytes() == want.data.tobytes()


def test_zeroed_residual_block_is_relu_identity():
    model = build_mini_resnet(_resnet_spec(size=32, seed=2))
    block = model.blocks[0]
    block.w2.data[:] = 0.0
    block.b2.data[:] = 0.0
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(1, 8, 6, 6)).astype(np.float32))
    out = block(x)
    np.testing.assert_array_equal(out.data, np.maximum(x.data, 0.0))


def test_attention_matches_numpy_reimplementation():
    model = build_mini_vit(_vit_spec(size=32, patch_size=8, embed_dim=8, depth=1, heads=2, mlp_hidden=16, seed=7))
    layer = model.layers[0]
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 5, 8)).astype(np.float32)
    _, attn = layer(Tensor(x))

    # independent numpy path
    xf = x.astype(np.float64)
    mu = xf.mean(-1, keepdims=True)
    var = ((xf - mu) ** 2).mean(-1, keepdims=True)
    h = (xf - mu) / np.sqrt(var + 1e-5)
    h = h * layer.g1.data + layer.c1.data

    def project(w, b):
        y = h @ w.data.T.astype(np.float64) + b.data
        return y.reshape(2, 5, 2, 4).transpose(0, 2, 1, 3)  # (N, heads, T, dh)

    q, k = project(layer.wq, layer.bq), project(layer.wk, layer.bk)
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(4.0)
    e = np.exp(scores - scores.max(-1, keepdims=True))
    want = e / e.sum(-1, keepdims=True)
    np.testing.assert_allclose(attn.data, want, atol=1e-6)


# ---------------------------------------------------------------------------
# gradients flow and match finite differences
# ---------------------------------------------------------------------------


TINY_SPECS = {
    "cnn": dict(family="cnn", image_size=8, conv_widths=(2, 3), fc_hidden=4),
    "resnet": dict(
        family="resnet", image_size=8, stem_width=2, block_widths=(2, 3), block_strides=(1, 2), head_hidden=4
    ),
    "vit": dict(family="vit", image_size=8, patch_size=4, embed_dim=8, depth=1, heads=2, mlp_hidden=8),
}


def tiny_model(family, seed=0, dtype=np.float32):
    return build_model(ModelSpec(init_seed=seed, **TINY_SPECS[family]), dtype=dtype)


@pytest.mark.parametrize("family", FAMILIES)
def test_every_parameter_receives_gradient(family):
    model = tiny_model(family)
    rng = np.random.default_rng(1)
    x = rng.random((2, 3, 8, 8)).astype(np.float32)
    loss = T.cross_entropy(model(x).logits, np.array([0, 1]))
    loss.backward()
    for name, p in model.named_parameters().items():
        assert p.grad is not None, f"{name} got no gradient"
        assert np.abs(p.grad).sum() > 0 or p.data.size <= 2, f"{name} gradient all zero"


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("seed", [200, 201])
def test_model_family_finite_differences(family, seed):
    rng = np.random.default_rng(seed)
    model = tiny_model(family, seed=seed, dtype=np.float64)
    x = rng.random((2, 3, 8, 8))
    labels = rng.integers(0, 2, size=2)
    check_model_grads(model, x, labels, rng, coords_per_param=4)


@pytest.mark.parametrize("family", FAMILIES)
def test_toy_task_converges(family, toy_inputs):
    x, labels = toy_inputs
    spec = ModelSpec(init_seed=3, **{**TINY_SPECS[family], "image_size": 16})
    if family == "resnet":
        spec.block_strides = (1, 2)
    model = build_model(spec)
    opt = make_optimizer("adam", model.parameters(), lr=1e-2)
    loss_value = None
    for _ in range(200):
        loss = T.cross_entropy(model(x).logits, labels)
        loss.backward()
        opt.step()
        opt.zero_grad()
        loss_value = loss.item()
        if loss_value < 0.05:
            break
    assert loss_value < 0.05, f"{family} stuck at loss {loss_value:.3f}"


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = tiny_model("resnet", seed=9)
    path = tmp_path / "m.bin"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    pa, pb = model.named_parameters(), loaded.named_parameters()
    assert pa.keys() == pb.keys()
    for name in pa:
        assert pa[name].data.tobytes() == pb[name].data.tobytes()
    x = np.random.default_rng(0).random((1, 3, 8, 8)).astype(np.float32)
    with T.no_grad():
        assert model(x).logits.data.tobytes() == loaded(x).logits.data.tobytes()


def test_checkpoint_write_is_deterministic(tmp_path):
    model = tiny_model("cnn", seed=4)
    save_checkpoint(model, tmp_path / "a.bin")
    save_checkpoint(model, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_checkpoint_spec_guard(tmp_path):
    model = tiny_model("cnn", seed=1)
    path = tmp_path / "m.bin"
    save_checkpoint(model, path)
    load_checkpoint(path, expect_spec=model.spec)
    other = ModelSpec(init_seed=2, **TINY_SPECS["cnn"])
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(path, expect_spec=other)


def test_checkpoint_corruption_detected(tmp_path):
    model = tiny_model("cnn", seed=1)
    path = tmp_path / "m.bin"
    save_checkpoint(model, path)
    blob = path.read_bytes()

    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTMODEL" + blob[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)

    bad.write_bytes(blob[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(bad)

    bad.write_bytes(blob + b"\x00\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(bad)

    import json as _json
    import struct as _struct

    hlen = _struct.unpack_from("<Q", blob, 8)[0]
    header = _json.loads(blob[16 : 16 + hlen])
    header["schema_version"] = 99
    hb = _json.dumps(header, sort_keys=True).encode()
    bad.write_bytes(blob[:8] + _struct.pack("<Q", len(hb)) + hb + blob[16 + hlen :])
    with pytest.raises(CheckpointError, match="schema"):
        load_checkpoint(bad)

    header = _json.loads(blob[16 : 16 + hlen])
    header["arrays"][0]["name"] = "conv9.weight"
    hb = _json.dumps(header, sort_keys=True).encode()
    bad.write_bytes(blob[:8] + _struct.pack("<Q", len(hb)) + hb + blob[16 + hlen :])
    with pytest.raises(CheckpointError, match="arrays"):
        load_checkpoint(bad)


def test_checkpoint_preserves_dtype(tmp_path):
    model = tiny_model("cnn", seed=2, dtype=np.float64)
    path = tmp_path / "m64.bin"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    for p in loaded.parameters():
        assert p.data.dtype == np.float64
