"""Finite-difference checks run by the ``gradcheck`` command."""

from __future__ import annotations

import numpy as np

from . import tensor as tn
from .decoder import ModelConfig, attention, init_decoder
from .encoders import EncoderConfig, HiddenPair, encode_sequence, init_encoder, lstm_cell
from .fusion import build_plan, fuse_into_layer, init_fusion_params
from .tensor import GradCheckReport, Tensor

TOLERANCE = 1e-5


def _leaf(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _weights(shape, seed: int = 7) -> Tensor:
    # fixed random mixing weights make every output element matter
    return Tensor(np.random.default_rng(seed).normal(size=shape))


def primitive_cases() -> dict[str, tuple]:
    """name -> (scalar function, argument shapes)."""
    return {
        "matmul": (lambda a, b: tn.sum_(tn.tanh(tn.matmul(a, b))), [(3, 4), (4, 2)]),
        "matmul_shared_weight": (lambda a, b: tn.sum_(tn.tanh(tn.matmul(a, b))), [(2, 3, 4), (4, 2)]),
        "add": (lambda a, b: tn.sum_(tn.tanh(tn.add(a, b))), [(3, 4), (3, 4)]),
        "add_bias": (lambda a, b: tn.sum_(tn.tanh(tn.add(a, b))), [(2, 3, 4), (4,)]),
        "multiply": (lambda a, b: tn.sum_(tn.multiply(a, b)), [(3, 4), (3, 4)]),
        "concat": (lambda a, b: tn.sum_(tn.tanh(tn.concat([a, b], axis=1))), [(2, 3), (2, 2)]),
        "slice": (lambda a: tn.sum_(tn.tanh(tn.slice_(a, 1, 3))), [(3, 4)]),
        "tanh": (lambda a: tn.sum_(tn.multiply(tn.tanh(a), _weights((3, 4)))), [(3, 4)]),
        "sigmoid": (lambda a: tn.sum_(tn.multiply(tn.sigmoid(a), _weights((3, 4)))), [(3, 4)]),
        "gelu": (lambda a: tn.sum_(tn.multiply(tn.gelu(a), _weights((3, 4)))), [(3, 4)]),
        "softmax_rows": (lambda a: tn.sum_(tn.multiply(tn.softmax_rows(a), _weights((3, 4)))), [(3, 4)]),
        "rms_norm": (lambda a, w: tn.sum_(tn.multiply(tn.rms_norm(a, w), _weights((3, 4)))), [(3, 4), (4,)]),
        "embedding_lookup": (lambda e: tn.sum_(tn.tanh(tn.embedding_lookup(e, np.array([[0, 2], [2, 1]])))),
                             [(3, 4)]),
        "cross_entropy": (lambda a: tn.cross_entropy(a, np.array([0, 3, 1])), [(3, 4)]),
    }


def check_primitives(seed: int = 0) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    out = []
    for name, (fn, shapes) in primitive_cases().items():
        out.append(tn.grad_check(fn, [_leaf(rng, s) for s in shapes], TOLERANCE, name=name))
    return out


def check_lstm_cell(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    B, D, H = 2, 3, 4
    w_out = _weights((B, H))

    def fn(x, h, c, wx, wh, b):
        h2, c2 = lstm_cell(x, h, c, wx, wh, b)
        return tn.sum_(tn.add(tn.multiply(h2, w_out), tn.multiply(c2, w_out)))

    args = [_leaf(rng, s) for s in [(B, D), (B, H), (B, H), (D, 4 * H), (H, 4 * H), (4 * H,)]]
    return tn.grad_check(fn, args, TOLERANCE, name="lstm_cell")


def check_encoder_pipeline(T: int = 3, seed: int = 0) -> GradCheckReport:
    """Frame MLPs + 2-layer LSTMs + projections over ``T`` steps, small widths."""
    cfg = EncoderConfig(grid=(2, 2), feature_dim=3, lstm_hidden=3, out_dim=2, n_classes=2)
    rng = np.random.default_rng(seed)
    params = init_encoder(cfg, rng)
    visual = rng.normal(size=(T, 2, 2, 2, 3))
    tactile = rng.normal(size=(T, 2, 2, 2))
    names = sorted(params.tensors)
    mix = [_weights((2, 2), 10 + t) for t in range(2 * T)]

    def fn(*leaves):
        for n, leaf in zip(names, leaves):
            params.tensors[n] = leaf
        seq = encode_sequence(visual, tactile, params)
        terms = [tn.sum_(tn.multiply(h, m)) for h, m in zip(seq.image + seq.tactile, mix)]
        total = terms[0]
        for t in terms[1:]:
            total = tn.add(total, t)
        return total

    return tn.grad_check(fn, [params.tensors[n] for n in names], TOLERANCE, name=f"encoder_pipeline_T{T}")


def check_fused_attention(seed: int = 0) -> GradCheckReport:
    """One attention sublayer followed by gated injection, gates nonzero."""
    mc = ModelConfig(n_layers=2, width=4, heads=2, vocab_size=6, max_positions=4)
    rng = np.random.default_rng(seed)
    dec = init_decoder(mc, rng)
    plan = build_plan("aware", "tactile_and_vision", 2, 2)
    fus = init_fusion_params(plan, 3, mc.width, rng)
    B, S = 2, 3
    x = rng.normal(size=(B, S, mc.width))
    h_img, h_tac = rng.normal(size=(B, 3)), rng.normal(size=(B, 3))
    mix = _weights((B, S, mc.width))
    names = ["dec.0.wq", "dec.0.wk", "dec.0.wv", "dec.0.wo", "fusion.gate.image", "fusion.gate.tactile",
             "fusion.proj.image.w", "fusion.proj.tactile.b"]
    fus["fusion.gate.image"].data = np.array([0.3, -0.2])
    fus["fusion.gate.tactile"].data = np.array([-0.4, 0.5])
    params = {**dec, **fus}

    def fn(xin, *leaves):
        p = dict(params)
        p.update(zip(names, leaves))
        a = attention(xin, p, 0, mc)
        pair = HiddenPair(Tensor(h_img), Tensor(h_tac), 1)
        out = fuse_into_layer(a, pair, plan, 0, {k: v for k, v in p.items() if k.startswith("fusion.")})
        return tn.sum_(tn.multiply(out, mix))

    return tn.grad_check(fn, [Tensor(x, requires_grad=True)] + [params[n] for n in names], TOLERANCE,
                         name="fused_attention_layer")


def run_all(seed: int = 0) -> list[GradCheckReport]:
    return [*check_primitives(seed), check_lstm_cell(seed), check_encoder_pipeline(3, seed),
            check_fused_attention(seed)]
