"""Independent oracles shared by the test modules."""

import numpy as np

from sct import tensor as T
from sct.tensor import Tape

FD_STEP = 1e-3
FD_TOL = 1e-3


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def projected_value(fn, inputs, proj):
    out = fn(**{k: T.Tensor(v) for k, v in inputs.items()})
    return float(np.sum(out.data.astype(np.float64) * proj))


def check_grad(fn, inputs, seed=0, h=FD_STEP):
    """Compare tape gradients of sum(fn(**inputs) * R) against central differences.

    Returns {input name: relative error}. R is a fixed random projection so
    non-scalar outputs reduce to one number without privileging any entry.
    """
    gen = np.random.default_rng(seed)
    inputs = {k: np.asarray(v, dtype=np.float32) for k, v in inputs.items()}
    out = fn(**{k: T.Tensor(v) for k, v in inputs.items()})
    proj = gen.standard_normal(out.shape)
    with Tape() as tape:
        leaves = {k: tape.leaf(k, v) for k, v in inputs.items()}
        y = fn(**leaves)
        loss = T.sum_all(T.mul(y, T.Tensor(proj.astype(np.float32))))
        grads = T.grad_of(loss, tape)
    errs = {}
    for name, value in inputs.items():
        numeric = np.zeros(value.shape, dtype=np.float64)
        flat = numeric.reshape(-1)
        for i in range(value.size):
            plus, minus = value.copy(), value.copy()
            plus.reshape(-1)[i] += h
            minus.reshape(-1)[i] -= h
            fp = projected_value(fn, {**inputs, name: plus}, proj)
            fm = projected_value(fn, {**inputs, name: minus}, proj)
            flat[i] = (fp - fm) / (2 * h)
        errs[name] = rel_err(grads[name].data, numeric)
    return errs


def matmul_loop(a, b):
    """Naive triple loop over 2-D operands in float64."""
    p, q = a.shape
    r = b.shape[1]
    out = np.zeros((p, r))
    for i in range(p):
        for j in range(r):
            s = 0.0
            for k in range(q):
                s += float(a[i, k]) * float(b[k, j])
            out[i, j] = s
    return out


def channel_norm_loop(feats):
    """sqrt of the sum of squares of each channel over every sample and token, scalar loops."""
    b, n, d = feats.shape
    out = []
    for c in range(d):
        s = 0.0
        for i in range(b):
            for t in range(n):
                s += float(feats[i, t, c]) ** 2
        out.append(s**0.5)
    return np.asarray(out)


def sctm_end_to_end_errors(batch: int = 16) -> dict:
    """Finite-difference check of the SCTM + head loss on a D=8, K=2, L=2, N=5 model.

    Returns {parameter name: relative error}.
    """
    from sct.rng import Rng
    from sct.sctm import InjectionPlan, inject
    from sct.select import ChannelSelection
    from sct.vit import VisionTransformer, VitCheckpoint, VitConfig, init_toy_checkpoint

    cfg = VitConfig(image_size=8, patch_size=4, embed_dim=8, num_layers=2, num_heads=2, num_classes=3)
    assert cfg.num_tokens == 5
    ckpt = init_toy_checkpoint(cfg, Rng(3))
    # larger weights than the init scheme so gradients sit well above float32 noise
    scaled = {
        n: T.Tensor(t.data * 20.0) if t.data.ndim == 2 and not n.endswith(("ln1", "ln2", "norm")) else t
        for n, t in ckpt.items()
    }
    vit = VisionTransformer(cfg, VitCheckpoint(scaled))
    sel = ChannelSelection({1: np.array([1, 6]), 2: np.array([0, 3])})
    model = inject(vit, sel, InjectionPlan.all_layers(2), 0.7, 3)
    gen = np.random.default_rng(0)
    base = {k: (gen.standard_normal(v.shape) * 0.5).astype(np.float32) for k, v in model.params.items()}
    x = np.random.default_rng(5).random((batch, 3, 8, 8)).astype(np.float32)
    y = np.arange(batch) % 3

    def loss_at(params):
        logits = model.logits(x, {k: T.Tensor(v) for k, v in params.items()}).data.astype(np.float64)
        z = logits - logits.max(axis=1, keepdims=True)
        return float(np.mean(np.log(np.exp(z).sum(axis=1)) - z[np.arange(batch), y]))

    with Tape() as tape:
        leaves = {k: tape.leaf(k, v) for k, v in base.items()}
        grads = T.grad_of(T.cross_entropy(model.logits(x, leaves), y), tape)
    errs = {}
    for name, value in base.items():
        numeric = np.zeros(value.size)
        for i in range(value.size):
            plus, minus = value.copy(), value.copy()
            plus.reshape(-1)[i] += FD_STEP
            minus.reshape(-1)[i] -= FD_STEP
            numeric[i] = (loss_at({**base, name: plus}) - loss_at({**base, name: minus})) / (2 * FD_STEP)
        errs[name] = rel_err(grads[name].data.reshape(-1), numeric)
    return errs
