"""Named float64 parameter checkpoints in the manifest + blob container.

Manifest records are ``meta key value`` and
``param name shape offset nbytes crc32`` with ``shape`` written as
comma-separated dims (``-`` for a scalar). Values are little-endian float64.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np

from .storage import BlobWriter, FormatError, read_chunk, read_container, write_container

CHECKPOINT_MAGIC = "tactbind-checkpoint v1"
BLOB_NAME = "params.bin"


def _shape_text(shape: tuple[int, ...]) -> str:
    return ",".join(str(d) for d in shape) if shape else "-"


def write_checkpoint(directory, params: Mapping[str, np.ndarray], meta: Mapping[str, str] | None = None) -> None:
    """Write ``params`` (sorted by name) and string ``meta`` under ``directory``."""
    lines = []
    for key, value in sorted((meta or {}).items()):
        value = str(value)
        if not key or any(c.isspace() for c in key) or value != " ".join(value.split()):
            raise ValueError(f"meta entry {key!r}={value!r} does not survive whitespace tokenizing")
        lines.append(f"meta {key} {value}")
    blob = BlobWriter()
    for name in sorted(params):
        if any(c.isspace() for c in name):
            raise ValueError(f"parameter name {name!r} contains whitespace")
        arr = np.asarray(params[name], dtype="<f8")
        off, n, crc = blob.append(arr.tobytes())
        lines.append(f"param {name} {_shape_text(arr.shape)} {off} {n} {crc}")
    write_container(directory, CHECKPOINT_MAGIC, lines, blob.getvalue(), BLOB_NAME)


def read_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    records, blob, mpath = read_container(directory, CHECKPOINT_MAGIC, BLOB_NAME)
    bpath = Path(directory) / BLOB_NAME
    params: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    for rec in records:
        lineno, kind, rest = rec[0], rec[1], rec[2:]
        where = f"line {lineno}"
        if kind == "meta":
            if not rest:
                raise FormatError(mpath, where, "meta record without key")
            meta[rest[0]] = " ".join(rest[1:])
        elif kind == "param":
            if len(rest) != 5:
                raise FormatError(mpath, where, f"param record needs 5 fields, got {len(rest)}")
            name, shape_s, off_s, n_s, crc = rest
            try:
                shape = () if shape_s == "-" else tuple(int(d) for d in shape_s.split(","))
                off, n = int(off_s), int(n_s)
            except ValueError:
                raise FormatError(mpath, where, f"malformed param record for {name}") from None
            if name in params:
                raise FormatError(mpath, where, f"duplicate parameter {name}")
            expected = 8 * int(np.prod(shape, dtype=np.int64))
            if n != expected:
                raise FormatError(mpath, where, f"length error: {name} with shape {shape} needs {expected} bytes, record says {n}")
            chunk = read_chunk(blob, bpath, mpath, lineno, off, n, crc)
            params[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        else:
            raise FormatError(mpath, where, f"unknown record type {kind!r}")
    return params, meta


# ------------------------------------------------------------------ typed wrappers


def _encoder_meta(config, prefix: str = "") -> dict[str, str]:
    return {
        f"{prefix}kind": config.kind,
        f"{prefix}grid": f"{config.grid[0]},{config.grid[1]}",
        f"{prefix}feature_dim": str(config.feature_dim),
        f"{prefix}lstm_hidden": str(config.lstm_hidden),
        f"{prefix}lstm_layers": str(config.lstm_layers),
        f"{prefix}out_dim": str(config.out_dim),
        f"{prefix}n_classes": str(config.n_classes),
        f"{prefix}temperature": repr(config.temperature),
    }


def _encoder_config(meta: Mapping[str, str], where, prefix: str = ""):
    from .encoders import EncoderConfig

    try:
        gh, gw = (int(x) for x in meta[f"{prefix}grid"].split(","))
        return EncoderConfig(
            kind=meta[f"{prefix}kind"], grid=(gh, gw),
            feature_dim=int(meta[f"{prefix}feature_dim"]), lstm_hidden=int(meta[f"{prefix}lstm_hidden"]),
            lstm_layers=int(meta[f"{prefix}lstm_layers"]), out_dim=int(meta[f"{prefix}out_dim"]),
            n_classes=int(meta[f"{prefix}n_classes"]), temperature=float(meta[f"{prefix}temperature"]))
    except KeyError as exc:
        raise FormatError(where, 0, f"missing meta key {exc.args[0]}") from None
    except ValueError as exc:
        raise FormatError(where, 0, f"bad encoder meta: {exc}") from None


def _check_against(expected: Mapping, got: Mapping[str, np.ndarray], where) -> None:
    missing = sorted(set(expected) - set(got))
    extra = sorted(set(got) - set(expected))
    if missing or extra:
        raise FormatError(where, 0, f"parameter names differ: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, t in expected.items():
        if t.shape != got[name].shape:
            raise FormatError(where, 0, f"{name} has shape {got[name].shape}, config implies {t.shape}")


def save_encoder(directory, encoder) -> None:
    arrays = {k: t.data for k, t in encoder.tensors.items()}
    write_checkpoint(directory, arrays, {"type": "encoder", **_encoder_meta(encoder.config)})


def load_encoder(directory):
    from .encoders import EncoderParams, init_encoder
    from .tensor import Tensor

    arrays, meta = read_checkpoint(directory)
    where = Path(directory) / "manifest.txt"
    if meta.get("type") != "encoder":
        raise FormatError(where, 0, f"not an encoder checkpoint (type={meta.get('type')!r})")
    config = _encoder_config(meta, where)
    template = init_encoder(config, np.random.default_rng(0))
    _check_against(template.tensors, arrays, where)
    return EncoderParams(config, {k: Tensor(arrays[k], requires_grad=True) for k in template.tensors})


def save_finetune(directory, result) -> None:
    """Decoder, fusion and (frozen) encoder parameters plus everything needed to rebuild the cell."""
    from .decoder import SPECIALS

    mc = result.model_config
    meta = {
        "type": "finetune",
        "variant": result.plan.variant,
        "group": result.plan.modality_group,
        "T": str(result.plan.T),
        "n_layers": str(mc.n_layers),
        "width": str(mc.width),
        "heads": str(mc.heads),
        "vocab_size": str(mc.vocab_size),
        "max_positions": str(mc.max_positions),
        "ff_mult": str(mc.ff_mult),
        "keywords": ",".join(result.vocab.tokens[len(SPECIALS):]),
        **_encoder_meta(result.encoder.config, "encoder."),
    }
    arrays = {k: t.data for k, t in result.decoder.items()}
    arrays.update({k: t.data for k, t in result.fusion.items()})
    arrays.update({f"encoder.{k}": t.data for k, t in result.encoder.tensors.items()})
    write_checkpoint(directory, arrays, meta)


def load_finetune(directory):
    from .decoder import ModelConfig, Vocab, init_decoder
    from .encoders import EncoderParams, init_encoder
    from .fusion import build_plan, init_fusion_params
    from .tensor import Tensor
    from .training import FinetuneResult

    arrays, meta = read_checkpoint(directory)
    where = Path(directory) / "manifest.txt"
    if meta.get("type") != "finetune":
        raise FormatError(where, 0, f"not a finetune checkpoint (type={meta.get('type')!r})")
    try:
        mc = ModelConfig(n_layers=int(meta["n_layers"]), width=int(meta["width"]), heads=int(meta["heads"]),
                         vocab_size=int(meta["vocab_size"]), max_positions=int(meta["max_positions"]),
                         ff_mult=int(meta["ff_mult"]))
        plan = build_plan(meta["variant"], meta["group"], mc.n_layers, int(meta["T"]))
        vocab = Vocab(meta["keywords"].split(","))
    except KeyError as exc:
        raise FormatError(where, 0, f"missing meta key {exc.args[0]}") from None
    except ValueError as exc:
        raise FormatError(where, 0, f"bad finetune meta: {exc}") from None
    ec = _encoder_config(meta, where, "encoder.")
    rng = np.random.default_rng(0)
    templates = {**init_decoder(mc, rng), **init_fusion_params(plan, ec.out_dim, mc.width, rng)}
    enc_template = init_encoder(ec, rng).tensors
    templates.update({f"encoder.{k}": t for k, t in enc_template.items()})
    _check_against(templates, arrays, where)

    def leaf(name):
        return Tensor(arrays[name], requires_grad=True)

    dec = {k: leaf(k) for k in arrays if k.startswith("dec.")}
    fus = {k: leaf(k) for k in arrays if k.startswith("fusion.")}
    enc = EncoderParams(ec, {k: leaf(f"encoder.{k}") for k in enc_template})
    return FinetuneResult(plan, mc, vocab, dec, fus, enc, [])
