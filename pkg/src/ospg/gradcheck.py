"""Finite-difference gradient suite over every differentiable primitive and the composed model graph.

Checks run in float64 (central differences at h=1e-3 in float32 cannot resolve
1e-4 relative error) on random problems with every dimension at most 8.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import adapter as ad
from . import encoder as enc
from . import layers
from . import lm
from . import numerics as nx
from .numerics import GradCheckReport, Tensor

F64 = np.float64


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, dtype=F64)


def _probe(rng, out: Tensor) -> Tensor:
    """Random fixed weights so every output coordinate matters in the scalar."""
    return Tensor(rng.standard_normal(out.shape), dtype=F64)


def _scalar(f: Callable[[], Tensor], rng) -> Callable[[], Tensor]:
    with nx.no_grad():
        w = _probe(rng, f())
    return lambda: nx.tsum(f() * w)


def primitive_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    rng = np.random.default_rng(seed)
    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    row = _t(rng, 4)
    m1, m2 = _t(rng, 2, 3, 5), _t(rng, 2, 5, 4)
    x = _t(rng, 2, 5, 6)
    w, bias = _t(rng, 4, 6, scale=0.5), _t(rng, 4)
    g, be = Tensor(1 + 0.1 * rng.standard_normal(6), dtype=F64), _t(rng, 6)
    img = _t(rng, 2, 1, 7, 8)
    k1, kb = _t(rng, 3, 1, 3, 3, scale=0.5), _t(rng, 3)
    q, k, v = _t(rng, 2, 5, 4), _t(rng, 2, 5, 4), _t(rng, 2, 5, 4)
    table = _t(rng, 6, 3)
    idx = rng.integers(0, 6, size=(2, 5))
    logits = _t(rng, 2, 4, 7)
    tgt = rng.integers(0, 7, size=(2, 4))
    cmask = rng.random((2, 4)) < 0.7
    cmask[0, 0] = True
    cases = {
        "add_broadcast": (lambda: a + row, [a, row]),
        "sub": (lambda: a - b, [a, b]),
        "mul_broadcast": (lambda: a * row, [a, row]),
        "neg": (lambda: -a, [a]),
        "gelu": (lambda: nx.gelu(a), [a]),
        "reshape": (lambda: nx.reshape(a, (4, 3)), [a]),
        "transpose": (lambda: nx.transpose(m1, (0, 2, 1)), [m1]),
        "concat": (lambda: nx.concat([a, b], axis=1), [a, b]),
        "pad_axis": (lambda: nx.pad_axis(a, 1, 1, 2), [a]),
        "gather_rows": (lambda: nx.gather_rows(table, idx), [table]),
        "sum": (lambda: nx.tsum(m1, axis=1), [m1]),
        "mean": (lambda: nx.mean(m1, axis=2, keepdims=True), [m1]),
        "matmul_batched": (lambda: nx.matmul(m1, m2), [m1, m2]),
        "linear": (lambda: nx.linear(x, w, bias), [x, w, bias]),
        "softmax": (lambda: nx.softmax(x, axis=-1), [x]),
        "layer_norm": (lambda: nx.layer_norm(x, g, be), [x, g, be]),
        "conv2d_strided": (lambda: nx.conv2d(img, k1, kb, stride=(2, 2), padding=(1, 1)), [img, k1, kb]),
        "attention_causal": (lambda: nx.attention(q, k, v, nx.causal_mask(5)), [q, k, v]),
    }
    out = {name: (_scalar(f, rng), ps) for name, (f, ps) in cases.items()}
    out["cross_entropy_masked"] = (lambda: nx.cross_entropy(logits, tgt, cmask), [logits])
    return out


def tiny_model(seed: int = 0):
    """Configs and float64 parameters for a model with every dimension <= 8."""
    ecfg = enc.EncoderConfig(n_mels=8, d_a=8, n_layers=1, n_heads=2, ff_mult=1, frozen=False)
    acfg = ad.AdapterConfig(d_a=8, conv_channels=2, n_layers=1, n_heads=2, ff_mult=1, d_llm=8)
    lcfg = lm.LmConfig(vocab_size=8, d_llm=8, n_layers=1, n_heads=2, ff_mult=1, max_len=32, lora_rank=2,
                       lora_alpha=4.0)
    rng = np.random.default_rng(seed)
    ep = layers.cast_params(enc.init_encoder(ecfg, seed), F64)
    ap = layers.cast_params(ad.init_adapter(acfg, seed + 1), F64)
    lp = layers.cast_params(lm.init_lm(lcfg, seed + 2), F64)
    lo = layers.cast_params(lm.init_lora(lcfg, seed + 3), F64)
    for key in lo:
        if key.endswith(".B"):
            lo[key] = Tensor(0.3 * rng.standard_normal(lo[key].shape), dtype=F64)
    return ecfg, acfg, lcfg, ep, ap, lp, lo


def composed_case(seed: int = 0) -> tuple[Callable[[], Tensor], list[Tensor]]:
    """mel -> encode -> adapt -> splice -> LM forward -> masked CE."""
    ecfg, acfg, lcfg, ep, ap, lp, lo = tiny_model(seed)
    rng = np.random.default_rng(seed + 10)
    mel = Tensor(rng.standard_normal((7, 8)), dtype=F64)
    left, right = (3, 4), (5, 1, 6)
    L = ad.compressed_len(7)
    targets = rng.integers(0, 8, size=len(left) + L + len(right))
    mask = np.zeros(len(targets), bool)
    mask[len(left) + L:] = True

    def f():
        h = enc.encode_frames(mel, ep, ecfg)
        z = ad.adapt(h, ap, acfg)
        x = lm.assemble_hybrid(left, z, right, lp)
        logits = lm.forward_embeddings(x, lp, lcfg, lo)
        return nx.cross_entropy(logits, targets, mask)

    params = [mel, *ep.values(), *ap.values(), *lo.values(), lp["embed"], lp["head.weight"],
              lp["layers.0.attn.wk.weight"]]
    return f, params


def run_suite(seed: int = 0, h: float = 1e-3, max_coords: int = 24) -> dict[str, GradCheckReport]:
    reports = {}
    for name, (f, ps) in primitive_cases(seed).items():
        reports[name] = nx.finite_diff_check(f, ps, h=h, max_coords=max_coords, seed=seed)
    f, ps = composed_case(seed)
    reports["encode_adapt_forward_ce"] = nx.finite_diff_check(f, ps, h=h, max_coords=12, seed=seed)
    return reports
