"""Per-frame encoders, dual two-layer LSTM stacks and projection heads.

Two encoder kinds share this module:

``lstm``  frame encoder -> 2-layer LSTM -> 2-layer MLP, one stack per modality;
          yields a hidden pair for every time step.
``frame`` the single-frame baseline: frame encoder -> 2-layer MLP on the last
          frame only.

Batched inputs are time-major: visual ``(T, B, H, W, 3)``, tactile ``(T, B, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .tensor import Tensor

MODALITIES = ("image", "tactile")


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "lstm"  # "lstm" or "frame"
    grid: tuple[int, int] = (8, 8)
    feature_dim: int = 64
    lstm_hidden: int = 64
    lstm_layers: int = 2
    out_dim: int = 64
    n_classes: int = 8
    temperature: float = 0.1

    def __post_init__(self):
        if self.kind not in ("lstm", "frame"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def input_dim(self, modality: str) -> int:
        h, w = self.grid
        return h * w * 3 if modality == "image" else h * w


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


@dataclass(frozen=True)
class HiddenPair:
    image: Tensor | None
    tactile: Tensor
    time_index: int


@dataclass
class HiddenSequence:
    """Per-step encoder outputs; each entry is a ``(B, out_dim)`` Tensor."""

    image: list[Tensor] | None
    tactile: list[Tensor]

    def __post_init__(self):
        if not self.tactile:
            raise ValueError("empty hidden sequence")
        if self.image is not None and len(self.image) != len(self.tactile):
            raise ValueError("image and tactile sequences differ in length")

    @property
    def T(self) -> int:
        return len(self.tactile)

    def pair(self, t: int) -> HiddenPair:
        """Hidden pair at 1-based step ``t``."""
        img = self.image[t - 1] if self.image is not None else None
        return HiddenPair(img, self.tactile[t - 1], t)

    @property
    def pairs(self) -> list[HiddenPair]:
        return [self.pair(t) for t in range(1, self.T + 1)]


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    s = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-s, s, size=shape), requires_grad=True)


def init_encoder(config: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
    """Uniform(-1/sqrt(fan_in), +) init; LSTM forget-gate bias starts at 1."""
    p: dict[str, Tensor] = {}
    D, H, O = config.feature_dim, config.lstm_hidden, config.out_dim
    for mod in MODALITIES:
        fin = config.input_dim(mod)
        p[f"frame.{mod}.w1"] = _uniform(rng, fin, (fin, D))
        p[f"frame.{mod}.b1"] = _uniform(rng, fin, (D,))
        p[f"frame.{mod}.w2"] = _uniform(rng, D, (D, D))
        p[f"frame.{mod}.b2"] = _uniform(rng, D, (D,))
        proj_in = D
        if config.kind == "lstm":
            for layer in range(config.lstm_layers):
                din = D if layer == 0 else H
                p[f"lstm.{mod}.{layer}.wx"] = _uniform(rng, din, (din, 4 * H))
                p[f"lstm.{mod}.{layer}.wh"] = _uniform(rng, H, (H, 4 * H))
                b = rng.uniform(-1 / np.sqrt(H), 1 / np.sqrt(H), size=4 * H)
                b[H:2 * H] = 1.0
                p[f"lstm.{mod}.{layer}.b"] = Tensor(b, requires_grad=True)
            proj_in = H
        p[f"proj.{mod}.w1"] = _uniform(rng, proj_in, (proj_in, O))
        p[f"proj.{mod}.b1"] = _uniform(rng, proj_in, (O,))
        p[f"proj.{mod}.w2"] = _uniform(rng, O, (O, O))
        p[f"proj.{mod}.b2"] = _uniform(rng, O, (O,))
    p["head.w"] = _uniform(rng, 2 * O, (2 * O, config.n_classes))
    p["head.b"] = _uniform(rng, 2 * O, (config.n_classes,))
    return EncoderParams(config, p)


def _linear(x, w: Tensor, b: Tensor) -> Tensor:
    return tn.add(tn.matmul(x, w), b)


def _frame_mlp(x, params: EncoderParams, mod: str) -> Tensor:
    h = tn.gelu(_linear(x, params[f"frame.{mod}.w1"], params[f"frame.{mod}.b1"]))
    return _linear(h, params[f"frame.{mod}.w2"], params[f"frame.{mod}.b2"])


def project(x, params: EncoderParams, mod: str) -> Tensor:
    h = tn.gelu(_linear(x, params[f"proj.{mod}.w1"], params[f"proj.{mod}.b1"]))
    return _linear(h, params[f"proj.{mod}.w2"], params[f"proj.{mod}.b2"])


def _check_grid(arr: np.ndarray, params: EncoderParams, mod: str) -> None:
    H, W = params.config.grid
    want = (H, W, 3) if mod == "image" else (H, W)
    got = arr.shape[-len(want):] if arr.ndim >= len(want) else arr.shape
    if tuple(got) != want:
        raise tn.ShapeError(f"{mod} frame grid {arr.shape} does not match configured {want}")


def encode_frame(visual: np.ndarray, tactile: np.ndarray, params: EncoderParams) -> tuple[Tensor, Tensor]:
    """Frame encoders on any leading batch shape; returns ``(f_image, f_tactile)``."""
    visual = np.asarray(visual)
    tactile = np.asarray(tactile)
    _check_grid(visual, params, "image")
    _check_grid(tactile, params, "tactile")
    lead_v = visual.shape[:-3]
    lead_t = tactile.shape[:-2]
    xv = Tensor(visual.reshape(*lead_v, -1).astype(np.float64))
    xt = Tensor(tactile.reshape(*lead_t, -1).astype(np.float64))
    if lead_v != lead_t:
        raise tn.ShapeError(f"visual batch {visual.shape} and tactile batch {tactile.shape} disagree")
    if not lead_v:
        # single frame: run as a batch of one
        xv, xt = tn.reshape(xv, (1, xv.size)), tn.reshape(xt, (1, xt.size))
        fv, ft = _frame_mlp(xv, params, "image"), _frame_mlp(xt, params, "tactile")
        return tn.reshape(fv, (fv.shape[-1],)), tn.reshape(ft, (ft.shape[-1],))
    return _frame_mlp(xv, params, "image"), _frame_mlp(xt, params, "tactile")


def lstm_cell(x: Tensor, h: Tensor | None, c: Tensor | None,
              wx: Tensor, wh: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step. Gate column order: input, forget, candidate, output.

    ``h``/``c`` of ``None`` stand for the zero initial state.
    """
    H = wh.shape[0]
    z = tn.matmul(x, wx)
    if h is not None:
        z = tn.add(z, tn.matmul(h, wh))
    z = tn.add(z, b)
    i = tn.sigmoid(tn.slice_(z, 0, H))
    f = tn.sigmoid(tn.slice_(z, H, 2 * H))
    g = tn.tanh(tn.slice_(z, 2 * H, 3 * H))
    o = tn.sigmoid(tn.slice_(z, 3 * H, 4 * H))
    c_new = tn.multiply(i, g) if c is None else tn.add(tn.multiply(f, c), tn.multiply(i, g))
    return tn.multiply(o, tn.tanh(c_new)), c_new


def lstm_encode(features: Tensor, params: EncoderParams, modality: str) -> list[Tensor]:
    """Run the modality's LSTM stack over ``(T, B, D_f)`` features.

    Returns the projected layer-2 output for each step, ``T`` tensors of
    shape ``(B, out_dim)``.
    """
    if features.shape[0] < 1:
        raise ValueError("lstm_encode: empty sequence")
    T = features.shape[0]
    layer_in = [tn.select(features, t, axis=0) for t in range(T)]
    for layer in range(params.config.lstm_layers):
        pre = f"lstm.{modality}.{layer}"
        h = c = None
        outs = []
        for x in layer_in:
            h, c = lstm_cell(x, h, c, params[f"{pre}.wx"], params[f"{pre}.wh"], params[f"{pre}.b"])
            outs.append(h)
        layer_in = outs
    return [project(h, params, modality) for h in layer_in]


def encode_sequence(visual: np.ndarray, tactile: np.ndarray, params: EncoderParams) -> HiddenSequence:
    """Time-major batch -> HiddenSequence.

    The ``frame`` kind only looks at the last frame and returns a length-1 sequence.
    """
    if tactile.shape[0] < 1:
        raise ValueError("encode_sequence: empty sequence")
    if params.config.kind == "frame":
        fv, ft = encode_frame(visual[-1], tactile[-1], params)
        return HiddenSequence([project(fv, params, "image")], [project(ft, params, "tactile")])
    fv, ft = encode_frame(visual, tactile, params)
    return HiddenSequence(lstm_encode(fv, params, "image"), lstm_encode(ft, params, "tactile"))


def collate(samples: Sequence) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack TemporalSamples into time-major float64 arrays plus class targets."""
    visual = np.stack([s.visual for s in samples], axis=1).astype(np.float64)
    tactile = np.stack([s.tactile for s in samples], axis=1).astype(np.float64)
    targets = np.array([s.class_id for s in samples], dtype=np.int64)
    return visual, tactile, targets


def similarity(h_tactile: Tensor, h_image: Tensor, temperature: float) -> Tensor:
    """Cosine similarity matrix ``S[i, j] = cos(tactile_i, image_j) / temperature``.

    rms_norm rescales each row to RMS 1, so the dot product divided by the
    width is the cosine.
    """
    d = h_tactile.shape[-1]
    a = tn.rms_norm(h_tactile)
    b = tn.rms_norm(h_image)
    return tn.scale(tn.matmul(a, tn.transpose(b, (1, 0))), 1.0 / (d * temperature))


def pretrain_forward(visual: np.ndarray, tactile: np.ndarray, params: EncoderParams) -> tuple[Tensor, Tensor]:
    """Class logits ``(B, K)`` and tactile-to-image similarity ``(B, B)``."""
    seq = encode_sequence(visual, tactile, params)
    last = seq.pair(seq.T)
    logits = _linear(tn.concat([last.image, last.tactile], axis=-1), params["head.w"], params["head.b"])
    return logits, similarity(last.tactile, last.image, params.config.temperature)


CONTRASTIVE_WEIGHT = 0.5


def pretrain_loss(logits: Tensor, sim: Tensor, targets: np.ndarray) -> Tensor:
    """Cross-entropy on classes + 0.5 * symmetric InfoNCE over the batch."""
    B = sim.shape[0]
    diag = np.arange(B)
    nce = tn.scale(tn.add(tn.cross_entropy(sim, diag), tn.cross_entropy(tn.transpose(sim, (1, 0)), diag)), 0.5)
    return tn.add(tn.cross_entropy(logits, targets), tn.scale(nce, CONTRASTIVE_WEIGHT))
