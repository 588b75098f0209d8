"""Shared test utilities: finite-difference gradient checks and tiny model builders."""
import numpy as np

from maskdance import autodiff as ad
from maskdance.autodiff import Tensor


# criterion number -> (passed, detail); printed by the conftest summary hook
ACCEPTANCE: dict = {}


def to_float64(*modules):
    for m in modules:
        for p in m.parameters():
            p.data = p.data.astype(np.float64)
        for _, b in m.named_buffers():
            b.data = b.data.astype(np.float64)


def numeric_grad(fn, x: np.ndarray, eps=1e-3, entries=None):
    """Central differences of scalar ``fn()`` w.r.t. ``x`` (modified in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    idx = range(flat.size) if entries is None else entries
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        hi = fn()
        flat[i] = old - eps
        lo = fn()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def relative_error(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(build, tensors, eps=1e-3, max_entries=60, seed=0):
    """Compare tape gradients of scalar ``build()`` with central differences.

    Returns the worst relative error over ``tensors``. Large tensors are checked on a
    random subset of entries (analytic gradient restricted to the same subset).
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    with ad.Tape() as tape:
        loss = build()
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        size = t.data.size
        entries = None if size <= max_entries else rng.choice(size, max_entries, replace=False)

        def f():
            return float(build().data)

        num = numeric_grad(f, t.data, eps, entries)
        ana = np.zeros(size) if t.grad is None else t.grad.reshape(-1).astype(np.float64)
        if entries is not None:
            worst = max(worst, relative_error(ana[entries], num.reshape(-1)[entries]))
        else:
            worst = max(worst, relative_error(ana, num.reshape(-1)))
    return worst


def rand_tensor(rng, *shape, scale=1.0, requires_grad=True):
    return Tensor(rng.normal(0, scale, size=shape), requires_grad=requires_grad)


def tiny_config(**kw):
    from maskdance.config import Config

    base = dict(tok_width=16, tok_latent=8, tok_codes=16, tok_steps=6, tok_batch=4, tok_window=16,
                tok_warmup=2, tok_reset_every=3, width=16, heads=2, depth=2, max_tokens=16, warmup=2, batch=4,
                t2m_steps=4, res_width=16, res_depth=1, adapter_steps=3, adapter_batch=2, steps=6,
                itto_iters=20)
    base.update(kw)
    return Config(**base)


def tiny_models(seed=0, adapters=True, live_bridges=True):
    """Untrained tiny model set with both adapters attached and all stages marked done."""
    from maskdance.models import ModelSet

    models = ModelSet.build(tiny_config(seed=seed))
    models.tokenizer.trained_flag.data[:] = 1
    models.stages = ["tokenizer", "t2m"]
    if adapters:
        models.music = models.new_music_tower()
        models.pose = models.new_pose_tower()
        models.stages += ["music", "pose"]
        if live_bridges:
            rng = np.random.default_rng(seed + 100)
            for tower in (models.music, models.pose):
                for b in tower.bridges:
                    b.weight.data = rng.normal(0, 0.05, b.weight.shape).astype(np.float32)
    return models
