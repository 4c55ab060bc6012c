"""Finite-difference gradient checking shared by the test modules."""

import numpy as np

from marmot.tensor import Tensor, backward, mul

FD_STEP = 1e-5
REL_TOL = 1e-4


def projected_loss(out: Tensor, proj: np.ndarray) -> Tensor:
    """Scalar loss ``sum(out * proj)`` so every output entry contributes."""
    return mul(out, Tensor(proj)).sum()


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """``||a - n|| / max(||a||, ||n||)``; the floor only matters for all-zero gradients."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradcheck(loss_fn, tensors: dict, rng=None, max_coords=None, h: float = FD_STEP) -> dict:
    """Compare backprop gradients against central differences.

    ``loss_fn()`` must rebuild the graph from the current tensor values and
    return a scalar Tensor. With ``max_coords`` only that many randomly chosen
    entries per tensor are differenced. Returns ``{name: relative error}``.
    """
    for t in tensors.values():
        t.grad = None
    backward(loss_fn())
    errors = {}
    for name, t in tensors.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = np.arange(t.data.size)
        if max_coords is not None and flat.size > max_coords:
            flat = rng.choice(flat, size=max_coords, replace=False)
        a, n = [], []
        for k in flat:
            idx = np.unravel_index(k, t.data.shape)
            orig = t.data[idx]
            t.data[idx] = orig + h
            up = float(loss_fn().data)
            t.data[idx] = orig - h
            down = float(loss_fn().data)
            t.data[idx] = orig
            a.append(analytic[idx])
            n.append((up - down) / (2 * h))
        errors[name] = relative_error(np.array(a), np.array(n))
    return errors


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def synth_examples(n, seed, vocab=None, **kw):
    """Encoded synthetic-task examples plus the vocabulary used to encode them."""
    from marmot.data import encode, record_texts
    from marmot.synth import gen_synth
    from marmot.vocab import Vocab

    records = gen_synth(n, seed, **kw)
    if vocab is None:
        vocab = Vocab.build(record_texts(gen_synth(8, 0)))
    return [encode(r, vocab) for r in records], vocab


def perturbed_params(cfg, seed, std=0.3):
    """Freshly initialised params with every tensor (biases and norms included) randomised."""
    from marmot.model import init_params

    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 1000)
    for name, t in params.named_parameters().items():
        base = 1.0 if name.endswith("gamma") else 0.0
        t.data[:] = base + rng.normal(0.0, std, t.shape)
    return params
