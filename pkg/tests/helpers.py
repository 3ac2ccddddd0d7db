"""Independent oracles shared by several test modules."""

import math

import numpy as np

from psvit import tensor as T
from psvit.arch import CellChoice, Genotype, PatchConfig, StageSpec
from psvit.layers import EncoderLayer, EncoderLayerConfig, ViT
from psvit.tensor import Tensor

B, S = CellChoice.BASIC, CellChoice.SHARED_PAIR


def ln_ref(x, g, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def gelu_ref(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def softmax_ref(z):
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def weights_of(lin):
    return lin.weight.data, lin.bias.data


def reference_layer(layer: EncoderLayer, x, maps=None):
    """One pre-norm layer for a single sequence x[N, d]; per-head loops."""
    cfg = layer.cfg
    h, dh = cfg.heads, cfg.head_dim
    a_in = ln_ref(x, layer.norm1.gain.data, layer.norm1.bias.data)
    wv, bv = weights_of(layer.attn.v)
    v = a_in @ wv + bv
    if maps is None:
        wq, bq = weights_of(layer.attn.q)
        wk, bk = weights_of(layer.attn.k)
        q, k = a_in @ wq + bq, a_in @ wk + bk
        maps = np.stack([softmax_ref(q[:, i * dh : (i + 1) * dh] @ k[:, i * dh : (i + 1) * dh].T / math.sqrt(dh)) for i in range(h)])
    heads = [maps[i] @ v[:, i * dh : (i + 1) * dh] for i in range(h)]
    wp, bp = weights_of(layer.attn.proj)
    x = x + np.concatenate(heads, axis=1) @ wp + bp
    w1, b1 = weights_of(layer.fc1)
    w2, b2 = weights_of(layer.fc2)
    m = gelu_ref(ln_ref(x, layer.norm2.gain.data, layer.norm2.bias.data) @ w1 + b1) @ w2 + b2
    return x + m, maps


def copy_shared_weights(src: EncoderLayer, dst: EncoderLayer):
    for name in ("norm1", "norm2", "fc1", "fc2"):
        for pa, pb in zip(getattr(src, name).parameters(), getattr(dst, name).parameters()):
            pb.data[...] = pa.data
    for name in ("v", "proj"):
        for pa, pb in zip(getattr(src.attn, name).parameters(), getattr(dst.attn, name).parameters()):
            pb.data[...] = pa.data



def sharing_equivalence_error(seed):
    """Max deviation between a sharing layer and a forced-maps independent oracle.

    Also checks that maps pass through unchanged and that a basic layer's own
    maps, fed to a sharing layer with copied weights, reproduce its output.
    """
    rng = np.random.default_rng(seed)
    dim, heads = [(4, 1), (4, 2), (6, 3), (8, 2)][seed % 4]
    n = int(rng.integers(1, 7))
    basic = EncoderLayer(EncoderLayerConfig(dim, heads), rng)
    sharing = EncoderLayer(EncoderLayerConfig(dim, heads, 4, True), rng)
    x = rng.normal(size=(2, n, dim))
    maps = softmax_ref(rng.normal(size=(2, heads, n, n)) * 2)
    out, passed = sharing(Tensor(x), Tensor(maps))
    assert np.array_equal(passed.data, maps)
    copy_shared_weights(sharing, basic)
    err = 0.0
    for b in range(2):
        ref, _ = reference_layer(basic, x[b], maps[b])
        err = max(err, float(np.max(np.abs(out.data[b] - ref))))
    own, own_maps = basic(Tensor(x))
    again, _ = sharing(Tensor(x), own_maps)
    return max(err, float(np.max(np.abs(own.data - again.data))))


def gradcheck_model(full=False):
    """Three-stage model with dims <= 16 and N <= 17; every parameter tensor is checked.

    ``full`` checks every entry; otherwise each tensor contributes up to 12
    seeded entries plus its largest-gradient entry.
    """
    g = Genotype(
        "1D",
        PatchConfig(8, 2, 3, True),
        (StageSpec(17, 8, 2, (B,)), StageSpec(9, 12, 2, (S,)), StageSpec(5, 16, 4, (B,))),
        num_classes=3,
    )
    model = ViT(g, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    # move LN/bias params off their init values so every path is exercised
    for p in model.parameters():
        p.data += rng.normal(0, 0.05, size=p.shape)
    x, y = rng.normal(size=(2, 8, 8, 3)), np.array([0, 2])
    named = list(model.named_parameters())
    params = [p for _, p in named]
    for name, p in named:
        p.name = name

    def fn():
        return T.cross_entropy(model(Tensor(x)), y, 0.1)

    for p in params:
        p.grad = None
    T.backward(fn())
    if full:
        return T.max_rel_error(fn, params, h=1e-5), len(params)
    indices = {}
    for i, p in enumerate(params):
        if p.size <= 16:
            indices[i] = list(range(p.size))
        else:
            pick = set(rng.choice(p.size, size=12, replace=False).tolist())
            pick.add(int(np.argmax(np.abs(p.grad))))
            indices[i] = sorted(pick)
    return T.max_rel_error(fn, params, h=1e-5, indices=indices), len(params)


TOY_PATCH = PatchConfig(32, 4, 3, True)


def reduced_supernet(seed=0, cells_per_stage=(2, 1, 1)):
    """Toy-width supernet with four cells (81 raw paths)."""
    from psvit.nas import build_supernet

    return build_supernet(
        [65, 33, 17], [16, 24, 32], [2, 2, 4], TOY_PATCH, "1D", list(cells_per_stage), 10, 4, np.random.default_rng(seed)
    )
