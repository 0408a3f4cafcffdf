"""Single-file weight archive and standalone vocabulary JSON.

Archive layout:

    bytes 0..8    magic b"EMBEDIT1"
    bytes 8..16   header length, unsigned 64-bit little-endian
    header        UTF-8 JSON: {"config": {...}, "vocab": {...},
                  "tensors": [{"name", "shape", "dtype": "f64",
                               "offset", "nbytes"}, ...]}
    payload       raw little-endian float64 tensor data; each tensor's
                  "offset" is relative to the start of the payload section
                  (= 16 + header length)

Save followed by load is bitwise lossless.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .encoder import EncoderConfig, EncoderWeights, LayerWeights, Vocab, _LAYER_FIELDS
from .errors import ArchiveFormatError

MAGIC = b"EMBEDIT1"
_HEADER_LEN_END = len(MAGIC) + 8


def _config_to_dict(config: EncoderConfig) -> dict:
    return {
        "vocab_size": config.vocab_size,
        "d_model": config.d_model,
        "n_layers": config.n_layers,
        "n_heads": config.n_heads,
        "d_ff": config.d_ff,
        "context_length": config.context_length,
        "eps": config.eps,
    }


def _config_from_dict(d: dict) -> EncoderConfig:
    try:
        return EncoderConfig(**d)
    except (TypeError, ValueError) as e:
        raise ArchiveFormatError(f"bad config in header: {e}") from e


def vocab_to_dict(vocab: Vocab) -> dict:
    return {
        "tokens": dict(vocab.tokens),
        "splits": {w: list(s) for w, s in vocab.splits.items()},
        "bos": vocab.bos,
        "eos": vocab.eos,
        "pad": vocab.pad,
    }


def vocab_from_dict(d: dict) -> Vocab:
    try:
        return Vocab(
            tokens=dict(d["tokens"]),
            splits={w: list(s) for w, s in d.get("splits", {}).items()},
            bos=int(d["bos"]),
            eos=int(d["eos"]),
            pad=int(d["pad"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ArchiveFormatError(f"bad vocab: {e}") from e


def load_vocab(path: str | Path) -> Vocab:
    """Read a standalone vocabulary JSON file."""
    with open(path, "r", encoding="utf-8") as f:
        return vocab_from_dict(json.load(f))


def save_vocab(path: str | Path, vocab: Vocab) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(vocab_to_dict(vocab), f, indent=2, sort_keys=True)
        f.write("\n")


def save_weights(
    path: str | Path,
    config: EncoderConfig,
    weights: EncoderWeights,
    vocab: Vocab,
) -> None:
    """Write config, vocab, and all tensors to one archive file."""
    entries = []
    payloads = []
    offset = 0
    for name, tensor in weights.named_tensors():
        raw = np.ascontiguousarray(tensor.array, dtype="<f8").tobytes()
        entries.append({
            "name": name,
            "shape": list(tensor.shape),
            "dtype": "f64",
            "offset": offset,
            "nbytes": len(raw),
        })
        payloads.append(raw)
        offset += len(raw)
    header = {
        "config": _config_to_dict(config),
        "vocab": vocab_to_dict(vocab),
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for raw in payloads:
            f.write(raw)


def load_weights(path: str | Path) -> tuple[EncoderConfig, EncoderWeights, Vocab]:
    """Read an archive; raises ArchiveFormatError (with a byte offset) on damage."""
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise ArchiveFormatError(f"bad magic, expected {MAGIC!r}", offset=0)
    if len(blob) < _HEADER_LEN_END:
        raise ArchiveFormatError("truncated before header length", offset=len(blob))
    (header_len,) = struct.unpack("<Q", blob[len(MAGIC):_HEADER_LEN_END])
    payload_base = _HEADER_LEN_END + header_len
    if len(blob) < payload_base:
        raise ArchiveFormatError("truncated inside header", offset=len(blob))
    try:
        header = json.loads(blob[_HEADER_LEN_END:payload_base].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArchiveFormatError(f"header is not valid JSON: {e}", offset=_HEADER_LEN_END) from e

    for key in ("config", "vocab", "tensors"):
        if key not in header:
            raise ArchiveFormatError(f"header missing {key!r}", offset=_HEADER_LEN_END)
    config = _config_from_dict(header["config"])
    vocab = vocab_from_dict(header["vocab"])

    tensors: dict[str, Tensor] = {}
    for entry in header["tensors"]:
        name = entry.get("name", "<unnamed>")
        shape = tuple(int(s) for s in entry["shape"])
        if entry.get("dtype") != "f64":
            raise ArchiveFormatError(
                f"tensor {name}: unsupported dtype {entry.get('dtype')!r}",
                offset=_HEADER_LEN_END,
            )
        nbytes = int(entry["nbytes"])
        want = int(np.prod(shape)) * 8
        start = payload_base + int(entry["offset"])
        if nbytes != want:
            raise ArchiveFormatError(
                f"tensor {name}: shape {shape} needs {want} bytes, header says {nbytes}",
                offset=start,
            )
        end = start + nbytes
        if end > len(blob):
            raise ArchiveFormatError(f"tensor {name}: payload truncated", offset=len(blob))
        data = np.frombuffer(blob, dtype="<f8", count=want // 8, offset=start)
        tensors[name] = Tensor(data.reshape(shape))

    weights = _weights_from_named(tensors, config)
    weights.validate_shapes(config)
    return config, weights, vocab


def _weights_from_named(tensors: dict[str, Tensor], config: EncoderConfig) -> EncoderWeights:
    def take(name: str) -> Tensor:
        if name not in tensors:
            raise ArchiveFormatError(f"archive is missing tensor {name!r}")
        return tensors[name]

    layers = []
    for i in range(config.n_layers):
        layers.append(LayerWeights(**{
            fname: take(f"layers.{i}.{fname}") for fname in _LAYER_FIELDS
        }))
    return EncoderWeights(
        wte=take("wte"),
        positional=take("positional"),
        layers=layers,
        final_gamma=take("final_gamma"),
        final_beta=take("final_beta"),
    )
