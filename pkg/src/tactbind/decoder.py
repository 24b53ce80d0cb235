"""Small causal decoder with fusion hook points and greedy keyword decoding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .encoders import HiddenSequence
from .fusion import FusionPlan, check_hidden, inject_projected, project_hidden
from .tensor import Tensor

PAD, BOS, EOS, QUERY0, QUERY1 = "<pad>", "<bos>", "<eos>", "<q0>", "<q1>"
SPECIALS = (PAD, BOS, EOS, QUERY0, QUERY1)


class Vocab:
    """Special tokens followed by label keywords."""

    def __init__(self, keywords: Sequence[str]):
        self.tokens = list(SPECIALS) + [w for w in keywords]
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary")
        self.index = {w: i for i, w in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, word: str) -> int:
        return self.index[word]

    @property
    def prompt(self) -> list[int]:
        return [self.index[BOS], self.index[QUERY0], self.index[QUERY1]]

    def target_sequence(self, keywords: Sequence[str]) -> list[int]:
        """Prompt + keywords in vocabulary order + EOS."""
        ids = sorted(self.index[w] for w in set(keywords))
        return self.prompt + ids + [self.index[EOS]]

    def keyword_set(self, ids: Sequence[int]) -> frozenset[str]:
        return frozenset(self.tokens[i] for i in ids if i >= len(SPECIALS))


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    width: int = 64
    heads: int = 4
    vocab_size: int = 11
    max_positions: int = 16
    ff_mult: int = 4

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads


def init_decoder(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    W, V, F = config.width, config.vocab_size, config.ff_mult * config.width

    def u(shape, fan_in=W):
        b = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-b, b, size=shape), requires_grad=True)

    p = {
        "dec.tok": u((V, W)),
        "dec.pos": u((config.max_positions, W)),
    }
    for l in range(config.n_layers):
        pre = f"dec.{l}"
        p[f"{pre}.norm1"] = Tensor(np.ones(W), requires_grad=True)
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{pre}.{name}"] = u((W, W))
        p[f"{pre}.norm2"] = Tensor(np.ones(W), requires_grad=True)
        p[f"{pre}.ff.w1"] = u((W, F))
        p[f"{pre}.ff.b1"] = Tensor(np.zeros(F), requires_grad=True)
        p[f"{pre}.ff.w2"] = u((F, W), F)
        p[f"{pre}.ff.b2"] = Tensor(np.zeros(W), requires_grad=True)
    p["dec.norm_f"] = Tensor(np.ones(W), requires_grad=True)
    p["dec.out.w"] = u((W, V))
    p["dec.out.b"] = Tensor(np.zeros(V), requires_grad=True)
    return p


def parameter_count(config: ModelConfig) -> int:
    W, V, F, P = config.width, config.vocab_size, config.ff_mult * config.width, config.max_positions
    per_layer = 2 * W + 4 * W * W + W * F + F + F * W + W
    return V * W + P * W + config.n_layers * per_layer + W + W * V + V


def attention(x: Tensor, params: dict[str, Tensor], layer: int, config: ModelConfig,
              trace: list | None = None) -> Tensor:
    B, S, W = x.shape
    Hh, hd = config.heads, config.head_dim
    pre = f"dec.{layer}"

    def heads(t):
        return tn.transpose(tn.reshape(t, (B, S, Hh, hd)), (0, 2, 1, 3))

    q = heads(tn.matmul(x, params[f"{pre}.wq"]))
    k = heads(tn.matmul(x, params[f"{pre}.wk"]))
    v = heads(tn.matmul(x, params[f"{pre}.wv"]))
    scores = tn.scale(tn.matmul(q, tn.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    att = tn.softmax_rows(scores, causal=True)
    if trace is not None:
        trace.append(att.data)
    o = tn.reshape(tn.transpose(tn.matmul(att, v), (0, 2, 1, 3)), (B, S, W))
    return tn.matmul(o, params[f"{pre}.wo"])


def decoder_layer(x: Tensor, params: dict[str, Tensor], layer: int, config: ModelConfig,
                  plan: FusionPlan | None = None, projected: dict[str, Tensor] | None = None,
                  fparams: dict[str, Tensor] | None = None, trace: list | None = None) -> Tensor:
    """One pre-norm block; ``projected`` holds this layer's projected hidden vectors."""
    pre = f"dec.{layer}"
    a = attention(tn.rms_norm(x, params[f"{pre}.norm1"]), params, layer, config, trace)
    if plan is not None:
        a = inject_projected(a, projected, plan, layer, fparams)
    x = tn.add(x, a)
    h = tn.rms_norm(x, params[f"{pre}.norm2"])
    h = tn.gelu(tn.add(tn.matmul(h, params[f"{pre}.ff.w1"]), params[f"{pre}.ff.b1"]))
    h = tn.add(tn.matmul(h, params[f"{pre}.ff.w2"]), params[f"{pre}.ff.b2"])
    return tn.add(x, h)


def decoder_forward(tokens, plan: FusionPlan | None, hidden: HiddenSequence | None,
                    params: dict[str, Tensor], config: ModelConfig,
                    fparams: dict[str, Tensor] | None = None, trace: list | None = None) -> Tensor:
    """Logits ``(B, S, V)`` for an integer token batch ``(B, S)``.

    ``plan=None`` runs the bare language model.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise tn.ShapeError(f"tokens must be (B, S), got {tokens.shape}")
    B, S = tokens.shape
    if S > config.max_positions:
        raise ValueError(f"sequence length {S} exceeds max_positions {config.max_positions}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ValueError(f"token index out of range [0, {config.vocab_size})")
    if plan is not None:
        if plan.n_layers != config.n_layers:
            raise ValueError(f"plan has {plan.n_layers} layers, model has {config.n_layers}")
        check_hidden(plan, hidden)
    x = tn.add(tn.embedding_lookup(params["dec.tok"], tokens),
               tn.embedding_lookup(params["dec.pos"], np.broadcast_to(np.arange(S), (B, S))))
    # each hidden state is projected once and reused by every layer of its block
    per_state: dict[int, dict[str, Tensor]] = {}
    for layer in range(config.n_layers):
        projected = None
        if plan is not None:
            t = plan.layer_map[layer]
            if t not in per_state:
                pair = hidden.pair(t)
                per_state[t] = {"tactile": project_hidden(pair.tactile, fparams, "tactile")}
                if plan.uses_image:
                    per_state[t]["image"] = project_hidden(pair.image, fparams, "image")
            projected = per_state[t]
        x = decoder_layer(x, params, layer, config, plan, projected, fparams, trace)
    x = tn.rms_norm(x, params["dec.norm_f"])
    return tn.add(tn.matmul(x, params["dec.out.w"]), params["dec.out.b"])


def generate_keywords(plan: FusionPlan | None, hidden: HiddenSequence | None,
                      params: dict[str, Tensor], config: ModelConfig, vocab: Vocab,
                      max_len: int = 6, fparams: dict[str, Tensor] | None = None) -> list[frozenset[str]]:
    """Greedy decoding from the fixed prompt, batched; stops per row at EOS."""
    B = hidden.tactile[0].shape[0] if hidden is not None else 1
    seqs = np.tile(np.array(vocab.prompt, dtype=np.int64), (B, 1))
    done = np.zeros(B, dtype=bool)
    produced: list[list[int]] = [[] for _ in range(B)]
    eos = vocab.id(EOS)
    with tn.no_grad():
        for _ in range(max_len):
            if seqs.shape[1] > config.max_positions:
                break
            logits = decoder_forward(seqs, plan, hidden, params, config, fparams).data
            nxt = np.argmax(logits[:, -1, :], axis=-1)
            for i in range(B):
                if done[i]:
                    continue
                if nxt[i] == eos:
                    done[i] = True
                else:
                    produced[i].append(int(nxt[i]))
            if done.all():
                break
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return [vocab.keyword_set(p) for p in produced]
