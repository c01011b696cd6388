"""Three detector families on the in-repo tensor engine.

ShallowCnn is two conv/pool stages and two fully connected layers.
MiniResNet is a stem plus four residual blocks (identity or 1x1-projection
skips) with a two-layer head on globally pooled features. MiniViT is a
patch-embedding transformer with pre-layer-norm encoder blocks, a class
token, and learned positional embeddings; it accepts 3-channel input only,
so the fused 6-channel representation cannot be routed to it.

Every forward call returns a ForwardTrace carrying, besides the logits,
whatever the explanation pass needs: final conv activations for the CNN
families, per-layer attention maps for the transformer.

Checkpoints are a single binary file: magic, a JSON header (spec plus
array directory), then the raw weight bytes in directory order. Nothing in
the file depends on when it was written, so identical weights give
identical bytes.
"""

import json
import struct
from dataclasses import dataclass, asdict, field

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ShapeError
from .seeding import spawn_rng
from .tensor import Tensor

FAMILIES = ("cnn", "resnet", "vit")

FAMILY_NAMES = {"cnn": "ShallowCnn", "resnet": "MiniResNet", "vit": "MiniViT"}

VIT_FUSION_MESSAGE = "fusion unsupported for MiniViT: the patch embedding accepts 3 channels only"


@dataclass
class ModelSpec:
    family: str
    in_channels: int = 3
    image_size: int = 128
    init_seed: int = 0
    # ShallowCnn
    conv_widths: tuple = (8, 16)
    fc_hidden: int = 32
    # MiniResNet
    stem_width: int = 8
    block_widths: tuple = (8, 16, 16, 32)
    block_strides: tuple = (1, 2, 1, 2)
    head_hidden: int = 32
    # MiniViT
    patch_size: int = 16
    embed_dim: int = 128
    depth: int = 4
    heads: int = 4
    mlp_hidden: int = 256

    def validate(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}, expected one of {FAMILIES}")
        if self.in_channels not in (3, 6):
            raise ValueError(f"in_channels must be 3 or 6, got {self.in_channels}")
        if self.image_size < 1:
            raise ValueError(f"image_size must be positive, got {self.image_size}")
        if self.family == "cnn":
            if self.image_size // 4 < 1:
                raise ValueError(
                    f"image size {self.image_size} too small for two pooling stages"
                )
            if len(self.conv_widths) != 2:
                raise ValueError(f"conv_widths must name two layers, got {self.conv_widths}")
        if self.family == "resnet":
            if len(self.block_widths) != len(self.block_strides):
                raise ValueError("block_widths and block_strides must have equal length")
            down = 4 * int(np.prod(self.block_strides))
            if self.image_size // down < 1:
                raise ValueError(
                    f"image size {self.image_size} too small for stem plus strided blocks"
                )
        if self.family == "vit":
            if self.in_channels != 3:
                raise ValueError(VIT_FUSION_MESSAGE)
            if self.image_size % self.patch_size != 0:
                raise ValueError(
                    f"patch size {self.patch_size} must divide image size {self.image_size}"
                )
            if self.embed_dim % self.heads != 0:
                raise ValueError(
                    f"heads {self.heads} must divide embed_dim {self.embed_dim}"
                )
        return self

    def to_dict(self):
        d = asdict(self)
        for k in ("conv_widths", "block_widths", "block_strides"):
            d[k] = list(d[k])
        return d

    @staticmethod
    def from_dict(d):
        spec = ModelSpec(**d)
        spec.conv_widths = tuple(spec.conv_widths)
        spec.block_widths = tuple(spec.block_widths)
        spec.block_strides = tuple(spec.block_strides)
        return spec.validate()


@dataclass
class ForwardTrace:
    logits: Tensor
    final_conv_activations: Tensor = None
    attention_maps: list = None


class _ParamStore:
    """Named parameters, each initialized from its own (seed, name) stream
    so build order never changes the weights."""

    def __init__(self, seed, dtype=np.float32):
        self.seed = seed
        self.dtype = dtype
        self.params = {}

    def _new(self, name, data):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data.astype(self.dtype), requires_grad=True, dtype=self.dtype)
        self.params[name] = t
        return t

    def kaiming(self, name, shape, fan_in):
        rng = spawn_rng(self.seed, "init", name)
        bound = np.sqrt(6.0 / fan_in)
        return self._new(name, rng.uniform(-bound, bound, size=shape))

    def normal(self, name, shape, std):
        rng = spawn_rng(self.seed, "init", name)
        return self._new(name, rng.normal(0.0, std, size=shape))

    def zeros(self, name, shape):
        return self._new(name, np.zeros(shape))

    def ones(self, name, shape):
        return self._new(name, np.ones(shape))


class Model:
    """Common surface: named parameters, forward -> ForwardTrace."""

    def __init__(self, spec, dtype=np.float32):
        self.spec = spec.validate()
        self.dtype = dtype
        self._store = _ParamStore(spec.init_seed, dtype)
        self._build(self._store)

    def _build(self, ps):
        raise NotImplementedError

    def named_parameters(self):
        return dict(self._store.params)

    def parameters(self):
        return list(self._store.params.values())

    def parameter_count(self):
        return sum(p.data.size for p in self.parameters())

    def _check_input(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x), dtype=self.dtype)
        s = self.spec
        if x.data.ndim != 4:
            raise ShapeError(f"expected (N, C, H, W) input, got shape {x.data.shape}")
        if x.data.shape[1] != s.in_channels:
            raise ShapeError(
                f"model expects {s.in_channels} channels, batch has {x.data.shape[1]}"
            )
        if x.data.shape[2] != s.image_size or x.data.shape[3] != s.image_size:
            raise ShapeError(
                f"model expects {s.image_size}x{s.image_size} images, got {x.data.shape[2:]}"
            )
        return x

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


class ShallowCnn(Model):
    """conv-relu-pool, conv-relu-pool, flatten, fc-relu, fc -> 2 logits."""

    def _build(self, ps):
        s = self.spec
        c1, c2 = s.conv_widths
        self.w1 = ps.kaiming("conv1.weight", (c1, s.in_channels, 3, 3), s.in_channels * 9)
        self.b1 = ps.zeros("conv1.bias", (c1,))
        self.w2 = ps.kaiming("conv2.weight", (c2, c1, 3, 3), c1 * 9)
        self.b2 = ps.zeros("conv2.bias", (c2,))
        side = s.image_size // 2 // 2
        self.flat_dim = c2 * side * side
        self.w3 = ps.kaiming("fc1.weight", (s.fc_hidden, self.flat_dim), self.flat_dim)
        self.b3 = ps.zeros("fc1.bias", (s.fc_hidden,))
        self.w4 = ps.kaiming("fc2.weight", (2, s.fc_hidden), s.fc_hidden)
        self.b4 = ps.zeros("fc2.bias", (2,))

    def forward(self, x):
        x = self._check_input(x)
        h = T.max_pool2d(T.relu(T.conv2d(x, self.w1, self.b1, stride=1, padding=1)), 2)
        acts = T.relu(T.conv2d(h, self.w2, self.b2, stride=1, padding=1))
        h = T.max_pool2d(acts, 2)
        h = h.reshape(h.shape[0], self.flat_dim)
        h = T.relu(T.linear(h, self.w3, self.b3))
        logits = T.linear(h, self.w4, self.b4)
        return ForwardTrace(logits=logits, final_conv_activations=acts)


class ResidualBlock:
    """conv-relu-conv plus a skip, relu after the add. The skip is the
    identity unless width or stride changes, then a 1x1 projection."""

    def __init__(self, ps, name, c_in, c_out, stride):
        self.stride = stride
        self.w1 = ps.kaiming(f"{name}.conv1.weight", (c_out, c_in, 3, 3), c_in * 9)
        self.b1 = ps.zeros(f"{name}.conv1.bias", (c_out,))
        self.w2 = ps.kaiming(f"{name}.conv2.weight", (c_out, c_out, 3, 3), c_out * 9)
        self.b2 = ps.zeros(f"{name}.conv2.bias", (c_out,))
        self.project = c_in != c_out or stride != 1
        if self.project:
            self.wp = ps.kaiming(f"{name}.proj.weight", (c_out, c_in, 1, 1), c_in)
            self.bp = ps.zeros(f"{name}.proj.bias", (c_out,))

    def __call__(self, x):
        y = T.relu(T.conv2d(x, self.w1, self.b1, stride=self.stride, padding=1))
        y = T.conv2d(y, self.w2, self.b2, stride=1, padding=1)
        skip = T.conv2d(x, self.wp, self.bp, stride=self.stride) if self.project else x
        return T.relu(y + skip)


class MiniResNet(Model):
    """Strided stem, residual blocks, global average pool, 2-layer head."""

    def _build(self, ps):
        s = self.spec
        self.ws = ps.kaiming("stem.weight", (s.stem_width, s.in_channels, 3, 3), s.in_channels * 9)
        self.bs = ps.zeros("stem.bias", (s.stem_width,))
        self.blocks = []
        c_in = s.stem_width
        for i, (c_out, stride) in enumerate(zip(s.block_widths, s.block_strides)):
            self.blocks.append(ResidualBlock(ps, f"blocks.{i}", c_in, c_out, stride))
            c_in = c_out
        self.wh1 = ps.kaiming("head1.weight", (s.head_hidden, c_in), c_in)
        self.bh1 = ps.zeros("head1.bias", (s.head_hidden,))
        self.wh2 = ps.kaiming("head2.weight", (2, s.head_hidden), s.head_hidden)
        self.bh2 = ps.zeros("head2.bias", (2,))

    def forward(self, x):
        x = self._check_input(x)
        h = T.max_pool2d(T.relu(T.conv2d(x, self.ws, self.bs, stride=2, padding=1)), 2)
        for block in self.blocks:
            h = block(h)
        acts = h
        h = h.mean(axis=(2, 3))
        h = T.relu(T.linear(h, self.wh1, self.bh1))
        logits = T.linear(h, self.wh2, self.bh2)
        return ForwardTrace(logits=logits, final_conv_activations=acts)


class EncoderLayer:
    """Pre-layer-norm transformer block: x + MHSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, ps, name, dim, heads, mlp_hidden):
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.g1 = ps.ones(f"{name}.ln1.gain", (dim,))
        self.c1 = ps.zeros(f"{name}.ln1.bias", (dim,))
        self.wq = ps.kaiming(f"{name}.attn.q.weight", (dim, dim), dim)
        self.bq = ps.zeros(f"{name}.attn.q.bias", (dim,))
        self.wk = ps.kaiming(f"{name}.attn.k.weight", (dim, dim), dim)
        self.bk = ps.zeros(f"{name}.attn.k.bias", (dim,))
        self.wv = ps.kaiming(f"{name}.attn.v.weight", (dim, dim), dim)
        self.bv = ps.zeros(f"{name}.attn.v.bias", (dim,))
        self.wo = ps.kaiming(f"{name}.attn.out.weight", (dim, dim), dim)
        self.bo = ps.zeros(f"{name}.attn.out.bias", (dim,))
        self.g2 = ps.ones(f"{name}.ln2.gain", (dim,))
        self.c2 = ps.zeros(f"{name}.ln2.bias", (dim,))
        self.wm1 = ps.kaiming(f"{name}.mlp.fc1.weight", (mlp_hidden, dim), dim)
        self.bm1 = ps.zeros(f"{name}.mlp.fc1.bias", (mlp_hidden,))
        self.wm2 = ps.kaiming(f"{name}.mlp.fc2.weight", (dim, mlp_hidden), mlp_hidden)
        self.bm2 = ps.zeros(f"{name}.mlp.fc2.bias", (dim,))

    def _split_heads(self, t, n, tokens):
        return t.reshape(n, tokens, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, x):
        n, tokens, _ = x.shape
        h = T.layer_norm(x, self.g1, self.c1)
        q = self._split_heads(T.linear(h, self.wq, self.bq), n, tokens)
        k = self._split_heads(T.linear(h, self.wk, self.bk), n, tokens)
        v = self._split_heads(T.linear(h, self.wv, self.bv), n, tokens)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(self.head_dim))
        attn = T.softmax(scores, axis=-1)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(n, tokens, self.dim)
        x = x + T.linear(ctx, self.wo, self.bo)
        h = T.layer_norm(x, self.g2, self.c2)
        m = T.linear(T.relu(T.linear(h, self.wm1, self.bm1)), self.wm2, self.bm2)
        return x + m, attn


class MiniViT(Model):
    """Patch embedding, class token, positional embeddings, pre-LN encoder
    stack, classification from the class token."""

    def _build(self, ps):
        s = self.spec
        self.grid = s.image_size // s.patch_size
        self.n_patches = self.grid * self.grid
        patch_dim = s.in_channels * s.patch_size * s.patch_size
        self.we = ps.kaiming("patch_embed.weight", (s.embed_dim, patch_dim), patch_dim)
        self.be = ps.zeros("patch_embed.bias", (s.embed_dim,))
        self.cls = ps.normal("cls_token", (1, 1, s.embed_dim), 0.02)
        self.pos = ps.normal("pos_embed", (1, self.n_patches + 1, s.embed_dim), 0.02)
        self.layers = [
            EncoderLayer(ps, f"layers.{i}", s.embed_dim, s.heads, s.mlp_hidden)
            for i in range(s.depth)
        ]
        self.gf = ps.ones("final_ln.gain", (s.embed_dim,))
        self.cf = ps.zeros("final_ln.bias", (s.embed_dim,))
        self.wh = ps.kaiming("head.weight", (2, s.embed_dim), s.embed_dim)
        self.bh = ps.zeros("head.bias", (2,))

    def patchify(self, x):
        n = x.shape[0]
        s = self.spec
        g, p = self.grid, s.patch_size
        x = x.reshape(n, s.in_channels, g, p, g, p)
        x = x.transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(n, self.n_patches, s.in_channels * p * p)

    def forward(self, x):
        x = self._check_input(x)
        n = x.shape[0]
        tokens = T.linear(self.patchify(x), self.we, self.be)
        cls = self.cls.broadcast_to((n, 1, self.spec.embed_dim))
        h = T.concat([cls, tokens], axis=1) + self.pos
        maps = []
        for layer in self.layers:
            h, attn = layer(h)
            maps.append(attn)
        h = T.layer_norm(h, self.gf, self.cf)
        logits = T.linear(h[:, 0], self.wh, self.bh)
        return ForwardTrace(logits=logits, attention_maps=maps)


_FAMILY_CLASSES = {"cnn": ShallowCnn, "resnet": MiniResNet, "vit": MiniViT}


def build_model(spec, dtype=np.float32):
    spec.validate()
    return _FAMILY_CLASSES[spec.family](spec, dtype=dtype)


def build_shallow_cnn(spec, dtype=np.float32):
    if spec.family != "cnn":
        raise ValueError(f"expected a cnn spec, got family {spec.family!r}")
    return ShallowCnn(spec, dtype=dtype)


def build_mini_resnet(spec, dtype=np.float32):
    if spec.family != "resnet":
        raise ValueError(f"expected a resnet spec, got family {spec.family!r}")
    return MiniResNet(spec, dtype=dtype)


def build_mini_vit(spec, dtype=np.float32):
    if spec.family != "vit":
        raise ValueError(f"expected a vit spec, got family {spec.family!r}")
    return MiniViT(spec, dtype=dtype)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"CWMODEL1"
CKPT_SCHEMA_VERSION = 1


def save_checkpoint(model, path):
    """Write spec plus all weights to one self-describing binary file."""
    names = sorted(model.named_parameters())
    params = model.named_parameters()
    directory = [
        {"name": n, "dtype": str(params[n].data.dtype), "shape": list(params[n].data.shape)}
        for n in names
    ]
    header = {
        "schema_version": CKPT_SCHEMA_VERSION,
        "spec": model.spec.to_dict(),
        "arrays": directory,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        for n in names:
            f.write(np.ascontiguousarray(params[n].data).tobytes())
    return path


def load_checkpoint(path, expect_spec=None):
    """Rebuild a model from a checkpoint; bit-exact weight round trip.

    With ``expect_spec`` given, a checkpoint whose spec differs is refused.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
    off = len(_CKPT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", blob, off)
    off += 8
    try:
        header = json.loads(blob[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: malformed header: {e}") from e
    off += hlen
    if header.get("schema_version") != CKPT_SCHEMA_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint schema {header.get('schema_version')}"
        )
    spec = ModelSpec.from_dict(header["spec"])
    if expect_spec is not None and spec != expect_spec:
        raise CheckpointError(
            f"{path}: checkpoint spec {spec} does not match expected {expect_spec}"
        )
    model = build_model(spec)
    params = model.named_parameters()
    names = [a["name"] for a in header["arrays"]]
    if sorted(names) != sorted(params):
        raise CheckpointError(f"{path}: checkpoint arrays do not match model parameters")
    for entry in header["arrays"]:
        p = params[entry["name"]]
        shape, dt = tuple(entry["shape"]), np.dtype(entry["dtype"])
        if shape != p.data.shape:
            raise CheckpointError(
                f"{path}: array {entry['name']} has shape {shape}, model expects {p.data.shape}"
            )
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        p.data = np.frombuffer(blob[off : off + nbytes], dtype=dt).reshape(shape).copy()
        off += nbytes
    if off != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after weight data")
    return model
