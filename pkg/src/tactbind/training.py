"""Stage 1 trains the encoders; stage 2 trains the decoder and fusion gates on frozen hidden states."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .decoder import PAD, ModelConfig, Vocab, decoder_forward, init_decoder
from .encoders import (EncoderConfig, EncoderParams, HiddenSequence, collate, encode_sequence,
                       init_encoder, pretrain_forward, pretrain_loss)
from .fusion import FusionPlan, build_plan, init_fusion_params
from .metrics import retrieval_accuracy, topk_accuracy, topk_hits
from .tensor import Tensor

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Loss became NaN/Inf; ``step`` is the global optimizer step."""

    def __init__(self, step: int, what: str = "loss"):
        self.step = step
        super().__init__(f"{what} is not finite at step {step}")


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    clip_norm: float = 1.0
    freeze_encoder: bool = True
    freeze_gates: bool = False

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.stage not in ("pretrain", "finetune"):
            raise ValueError(f"unknown stage {self.stage!r}")


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> None:
    """Bias-corrected Adam. Rebinds ``param.data`` to a new array; old arrays are not mutated."""
    b1, b2 = config.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise tn.ShapeError(f"adam_step: gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += config.eps
        p.data = p.data - (config.learning_rate / c1) * m / denom


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        s = max_norm / total
        for k in grads:
            grads[k] = grads[k] * s
    return total


def optimize(loss: Tensor, params: dict[str, Tensor], names: Sequence[str], state: AdamState,
             config: TrainConfig) -> None:
    if not np.isfinite(loss.data).all():
        raise NumericalError(state.step)
    gl = tn.backward(loss, [params[n] for n in names])
    grads = dict(zip(names, gl))
    norm = clip_by_global_norm(grads, config.clip_norm)
    if not np.isfinite(norm):
        raise NumericalError(state.step, "gradient norm")
    adam_step(params, grads, state, config)


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    loss: float
    top1: float | None = None
    top5: float | None = None
    retrieval_top1: float | None = None
    retrieval_top5: float | None = None

    CSV_HEADER = "epoch,split,loss,top1,top5,retrieval_top1,retrieval_top5"

    def csv_row(self) -> str:
        def f(x):
            return "" if x is None else f"{x:.6f}"
        return ",".join([str(self.epoch), self.split, f(self.loss), f(self.top1), f(self.top5),
                         f(self.retrieval_top1), f(self.retrieval_top5)])


def write_metrics_csv(history: Sequence[EpochMetrics], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(EpochMetrics.CSV_HEADER + "\n")
        for m in history:
            fh.write(m.csv_row() + "\n")


def _batches(n: int, batch_size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for i in range(0, n, batch_size):
        yield idx[i:i + batch_size]


# ------------------------------------------------------------------ stage 1


@dataclass
class PretrainResult:
    params: EncoderParams
    history: list[EpochMetrics]


def evaluate_encoder(params: EncoderParams, samples: Sequence, batch_size: int = 16,
                     split: str = "test", epoch: int = 0) -> EpochMetrics:
    """Classification top-1/5 and in-batch retrieval top-1/5 (batches of ``batch_size``, in order)."""
    losses, weights, logits_all, targets_all, r1, r5 = [], [], [], [], [], []
    with tn.no_grad():
        for b in _batches(len(samples), batch_size):
            v, t, y = collate([samples[i] for i in b])
            logits, sim = pretrain_forward(v, t, params)
            losses.append(pretrain_loss(logits, sim, y).item())
            weights.append(len(b))
            logits_all.append(logits.data)
            targets_all.append(y)
            r1.append(retrieval_accuracy(sim.data, 1) * len(b))
            r5.append(retrieval_accuracy(sim.data, 5) * len(b))
    L = np.concatenate(logits_all)
    Y = np.concatenate(targets_all)
    n = float(sum(weights))
    k5 = min(5, L.shape[1])
    return EpochMetrics(epoch, split, float(np.dot(losses, weights) / n),
                        topk_accuracy(L, Y, 1), topk_accuracy(L, Y, k5),
                        float(sum(r1) / n), float(sum(r5) / n))


def pretrain(train: Sequence, config: TrainConfig, encoder_config: EncoderConfig,
             test: Sequence | None = None) -> PretrainResult:
    """Stage 1: classification + contrastive alignment with Adam."""
    classes = {s.class_id for s in train}
    if len(classes) < 2:
        raise ValueError(f"pretraining needs at least 2 classes, train set has {len(classes)}")
    params = init_encoder(encoder_config, np.random.default_rng([config.seed, 0]))
    order_rng = np.random.default_rng([config.seed, 1])
    names = list(params.tensors)
    state = AdamState()
    history: list[EpochMetrics] = []
    k5 = min(5, encoder_config.n_classes)
    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(len(train))
        losses, weights, hits1, hits5, r1, r5 = [], [], 0, 0, 0.0, 0.0
        for b in _batches(len(train), config.batch_size, order):
            v, t, y = collate([train[i] for i in b])
            logits, sim = pretrain_forward(v, t, params)
            loss = pretrain_loss(logits, sim, y)
            losses.append(loss.item())
            weights.append(len(b))
            hits1 += int(topk_hits(logits.data, y, 1).sum())
            hits5 += int(topk_hits(logits.data, y, k5).sum())
            r1 += retrieval_accuracy(sim.data, 1) * len(b)
            r5 += retrieval_accuracy(sim.data, 5) * len(b)
            optimize(loss, params.tensors, names, state, config)
        n = float(len(train))
        history.append(EpochMetrics(epoch, "train", float(np.dot(losses, weights) / n),
                                    100.0 * hits1 / n, 100.0 * hits5 / n, r1 / n, r5 / n))
        if test:
            history.append(evaluate_encoder(params, test, config.batch_size, "test", epoch))
        log.debug("pretrain %s epoch %d loss %.4f", encoder_config.kind, epoch, history[-1].loss)
    return PretrainResult(params, history)


# ------------------------------------------------------------------ stage 2


def precompute_hidden(encoder: EncoderParams, samples: Sequence, batch_size: int = 256) -> dict[str, np.ndarray]:
    """Frozen-encoder outputs for every sample: ``(steps, N, D_h)`` per modality."""
    img, tac = [], []
    with tn.no_grad():
        for b in _batches(len(samples), batch_size):
            v, t, _ = collate([samples[i] for i in b])
            seq = encode_sequence(v, t, encoder)
            img.append(np.stack([h.data for h in seq.image]))
            tac.append(np.stack([h.data for h in seq.tactile]))
    return {"image": np.concatenate(img, axis=1), "tactile": np.concatenate(tac, axis=1)}


def hidden_batch(cache: dict[str, np.ndarray], idx: np.ndarray, use_image: bool = True) -> HiddenSequence:
    img = [Tensor(x[idx]) for x in cache["image"]] if use_image else None
    return HiddenSequence(img, [Tensor(x[idx]) for x in cache["tactile"]])


def token_batch(samples: Sequence, vocab: Vocab) -> tuple[np.ndarray, np.ndarray]:
    """Decoder inputs and next-token targets; prompt and padding targets are ``-1``."""
    seqs = [vocab.target_sequence(s.keywords) for s in samples]
    S = max(len(s) for s in seqs)
    pad = vocab.id(PAD)
    full = np.full((len(seqs), S), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        full[i, :len(s)] = s
    inputs = full[:, :-1]
    targets = full[:, 1:].copy()
    targets[:, :len(vocab.prompt) - 1] = -1
    targets[targets == pad] = -1
    return inputs, targets


def lm_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    B, S, V = logits.shape
    return tn.cross_entropy(tn.reshape(logits, (B * S, V)), targets.reshape(-1))


@dataclass
class FinetuneResult:
    plan: FusionPlan
    model_config: ModelConfig
    vocab: Vocab
    decoder: dict[str, Tensor]
    fusion: dict[str, Tensor]
    encoder: EncoderParams
    history: list[EpochMetrics]
    step_losses: list[float] = field(default_factory=list)


def encoder_kind_for(variant: str) -> str:
    return "frame" if variant == "base" else "lstm"


def finetune_loss_on(result: FinetuneResult, samples: Sequence, batch_size: int = 64,
                     cache: dict[str, np.ndarray] | None = None) -> float:
    """Mean next-token loss over ``samples`` (weighted by target count)."""
    cache = cache if cache is not None else precompute_hidden(result.encoder, samples)
    total, count = 0.0, 0
    with tn.no_grad():
        for b in _batches(len(samples), batch_size):
            inputs, targets = token_batch([samples[i] for i in b], result.vocab)
            hidden = hidden_batch(cache, b, result.plan.uses_image)
            logits = decoder_forward(inputs, result.plan, hidden, result.decoder, result.model_config,
                                     result.fusion)
            n = int((targets != -1).sum())
            total += lm_loss(logits, targets).item() * n
            count += n
    return total / count


def finetune(train: Sequence, encoder: EncoderParams, variant: str, modality_group: str,
             config: TrainConfig, model_config: ModelConfig, vocab: Vocab,
             test: Sequence | None = None) -> FinetuneResult:
    """Stage 2: train decoder, gates and projections on keyword continuation.

    The encoder stays frozen unless ``config.freeze_encoder`` is False; gates
    stay at zero when ``config.freeze_gates`` is set.
    """
    if encoder.config.kind != encoder_kind_for(variant):
        raise ValueError(f"{variant} variant needs a {encoder_kind_for(variant)!r} encoder, "
                         f"got {encoder.config.kind!r}")
    T = train[0].T
    plan = build_plan(variant, modality_group, model_config.n_layers, T)
    init_rng = np.random.default_rng([config.seed, 2])
    dec = init_decoder(model_config, init_rng)
    fus = init_fusion_params(plan, encoder.config.out_dim, model_config.width, init_rng)
    params: dict[str, Tensor] = {**dec, **fus}
    names = [n for n in params if not (config.freeze_gates and n.startswith("fusion.gate."))]
    if not config.freeze_encoder:
        for k, t in encoder.tensors.items():
            params[f"encoder.{k}"] = t
            names.append(f"encoder.{k}")
    cache = precompute_hidden(encoder, train) if config.freeze_encoder else None
    order_rng = np.random.default_rng([config.seed, 3])
    state = AdamState()
    history: list[EpochMetrics] = []
    result = FinetuneResult(plan, model_config, vocab, dec, fus, encoder, history)
    test_cache = precompute_hidden(encoder, test) if test and config.freeze_encoder else None
    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(len(train))
        total, count, hits1, hits5 = 0.0, 0, 0, 0
        for b in _batches(len(train), config.batch_size, order):
            batch = [train[i] for i in b]
            inputs, targets = token_batch(batch, vocab)
            if cache is not None:
                hidden = hidden_batch(cache, b, plan.uses_image)
            else:
                v, t, _ = collate(batch)
                hidden = encode_sequence(v, t, encoder)
                if not plan.uses_image:
                    hidden = HiddenSequence(None, hidden.tactile)
            logits = decoder_forward(inputs, plan, hidden, dec, model_config, fus)
            loss = lm_loss(logits, targets)
            keep = targets.reshape(-1) != -1
            flat = logits.data.reshape(-1, logits.shape[-1])[keep]
            tk = targets.reshape(-1)[keep]
            n = int(keep.sum())
            total += loss.item() * n
            count += n
            result.step_losses.append(loss.item())
            hits1 += int(topk_hits(flat, tk, 1).sum())
            hits5 += int(topk_hits(flat, tk, min(5, flat.shape[1])).sum())
            optimize(loss, params, names, state, config)
        history.append(EpochMetrics(epoch, "train", total / count, 100.0 * hits1 / count, 100.0 * hits5 / count))
        if test:
            history.append(EpochMetrics(epoch, "test", finetune_loss_on(result, test, cache=test_cache)))
    return result
