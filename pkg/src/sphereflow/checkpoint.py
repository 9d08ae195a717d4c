"""Parameter checkpoints: a flat name -> float64 array container.

Checkpoints are zip archives of `.npy` entries (numpy's documented format:
magic, version, shape/dtype header, little-endian payload), one per
parameter, keyed by the traversal names from `layers.named_parameters`
(degree and lag spelled out, e.g. ``down0.conv.weights.deg1.lag2``). A
``__meta__`` entry holds a JSON metadata string. Round trips are bit-exact
because float64 payloads are stored verbatim.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import autodiff as ad
from .errors import DataFormatError

_META_KEY = "__meta__"
FORMAT_VERSION = 1


def save_checkpoint(path, named, meta: dict | None = None) -> None:
    """Write name -> tensor/array pairs plus JSON metadata."""
    arrays = {}
    for name, value in named.items():
        if name == _META_KEY:
            raise ValueError(f"parameter name {_META_KEY!r} is reserved")
        data = value.data if isinstance(value, ad.Tensor) else np.asarray(value)
        arrays[name] = np.asarray(data, dtype="<f8")
    header = dict(meta or {})
    header["format_version"] = FORMAT_VERSION
    arrays[_META_KEY] = np.frombuffer(
        json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (name -> float64 array, metadata)."""
    try:
        with np.load(path, allow_pickle=False) as zf:
            entries = {k: zf[k] for k in zf.files}
    except (OSError, ValueError) as exc:
        raise DataFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if _META_KEY not in entries:
        raise DataFormatError(f"{path} has no metadata entry; not a "
                              "checkpoint file")
    meta = json.loads(entries.pop(_META_KEY).tobytes().decode("utf-8"))
    if meta.get("format_version") != FORMAT_VERSION:
        raise DataFormatError(
            f"unsupported checkpoint version {meta.get('format_version')!r}")
    return {k: np.asarray(v, dtype=np.float64) for k, v in entries.items()}, meta


def assign_parameters(named: dict[str, ad.Tensor],
                      loaded: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into existing tensors, in place.

    The key sets and shapes must match exactly; assignment preserves tensor
    identity so optimizer state and model references stay valid.
    """
    missing = sorted(set(named) - set(loaded))
    extra = sorted(set(loaded) - set(named))
    if missing or extra:
        raise DataFormatError(
            f"checkpoint keys do not match model: missing {missing[:5]}, "
            f"unexpected {extra[:5]}")
    for name, tensor in named.items():
        arr = loaded[name]
        if arr.shape != tensor.shape:
            raise DataFormatError(
                f"shape mismatch for {name}: checkpoint {arr.shape}, "
                f"model {tensor.shape}")
        tensor.data[...] = arr
