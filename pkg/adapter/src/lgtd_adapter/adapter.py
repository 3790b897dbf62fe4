"""LGTD dump writing and token-id map export.

LGTD layout (little-endian): magic ``LGTD``, u32 version=1, u32 vocab_size,
u32 num_steps, then ``num_steps * vocab_size`` raw float32 logits
(unnormalized; the consumer applies log-softmax).  The byte layout here must
stay in lockstep with the keypose toolkit's reader.
"""

from __future__ import annotations

import json
import struct

import numpy as np

LGTD_MAGIC = b"LGTD"
LGTD_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class NonFiniteLogit(ValueError):
    """The logit matrix contains NaN or infinities."""


class RangeOverlap(ValueError):
    """Model token id ranges for loc and seg tokens overlap."""


def encode_dump(logits) -> bytes:
    """Serialize a (steps, vocab) float matrix to LGTD bytes."""
    arr = np.asarray(logits, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"logit matrix must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteLogit("logit matrix contains non-finite values")
    header = _HEADER.pack(LGTD_MAGIC, LGTD_VERSION, arr.shape[1], arr.shape[0])
    return header + arr.astype("<f4").tobytes()


def write_dump(logits, path) -> None:
    """Write a logit matrix as an LGTD file."""
    data = encode_dump(logits)
    with open(path, "wb") as f:
        f.write(data)


def token_map_export(
    loc_start: int,
    seg_start: int,
    n_loc: int = 1024,
    n_seg: int = 128,
) -> dict:
    """Map ``<locNNNN>``/``<segNNN>`` token texts to contiguous model ids.

    ``loc_start``/``seg_start`` are the model ids of ``<loc0000>`` and
    ``<seg000>``.  The result is bijective by construction; overlapping id
    ranges raise ``RangeOverlap``.
    """
    if n_loc <= 0 or n_seg <= 0:
        raise ValueError("token counts must be positive")
    if loc_start < 0 or seg_start < 0:
        raise ValueError("range starts must be nonnegative")
    loc_range = range(loc_start, loc_start + n_loc)
    seg_range = range(seg_start, seg_start + n_seg)
    if max(loc_range.start, seg_range.start) < min(loc_range.stop, seg_range.stop):
        raise RangeOverlap(
            f"loc ids [{loc_range.start}, {loc_range.stop}) overlap "
            f"seg ids [{seg_range.start}, {seg_range.stop})"
        )
    mapping = {f"<loc{i:04d}>": loc_start + i for i in range(n_loc)}
    mapping.update({f"<seg{i:03d}>": seg_start + i for i in range(n_seg)})
    return mapping


def token_map_to_json(mapping: dict) -> str:
    return json.dumps(mapping, indent=2) + "\n"
