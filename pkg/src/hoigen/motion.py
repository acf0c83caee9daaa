"""Motion sequence container and its on-disk formats.

A frame holds left-hand (99), right-hand (99) and object (10) parameter
vectors; the object vector is [translation (3) | rotation 6D (6) | hinge
angle (1)].  Sequences are at most 150 frames.

On-disk formats:
  * JSON-lines: header record {"L", "hand_type", "text", "object_id", "seed",
    ...} then one record per frame {"frame", "lhand":[99], "rhand":[99],
    "obj":[10]}.
  * Binary clip (.hoc): 4-byte little-endian header length, UTF-8 JSON
    header, then L x 208 float32 little-endian row-major frame block
    (columns: lhand 0:99, rhand 99:198, obj 198:208).
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

HAND_DIM = 99
OBJ_DIM = 10
FRAME_DIM = 2 * HAND_DIM + OBJ_DIM  # 208
L_MAX = 150

CLIP_MAGIC = "hoigen-clip-v1"


class MotionFormatError(ValueError):
    pass


@dataclasses.dataclass
class MotionSequence:
    lhand: np.ndarray      # (L, 99)
    rhand: np.ndarray      # (L, 99)
    obj: np.ndarray        # (L, 10)
    hand_type: str = "both"

    def __post_init__(self):
        self.lhand = np.asarray(self.lhand, dtype=np.float64)
        self.rhand = np.asarray(self.rhand, dtype=np.float64)
        self.obj = np.asarray(self.obj, dtype=np.float64)
        L = len(self.obj)
        if not 1 <= L <= L_MAX:
            raise MotionFormatError(f"sequence length {L} outside [1, {L_MAX}]")
        if self.lhand.shape != (L, HAND_DIM) or self.rhand.shape != (L, HAND_DIM):
            raise MotionFormatError("hand channels must be (L, 99)")
        if self.obj.shape != (L, OBJ_DIM):
            raise MotionFormatError("object channel must be (L, 10)")
        if self.hand_type not in ("left", "right", "both"):
            raise MotionFormatError(f"bad hand type {self.hand_type!r}")

    def __len__(self) -> int:
        return len(self.obj)

    def frames(self) -> np.ndarray:
        """(L, 208) concatenated frame matrix."""
        return np.concatenate([self.lhand, self.rhand, self.obj], axis=1)

    @classmethod
    def from_frames(cls, frames, hand_type="both") -> "MotionSequence":
        frames = np.asarray(frames, dtype=np.float64)
        return cls(lhand=frames[:, :HAND_DIM], rhand=frames[:, HAND_DIM:2 * HAND_DIM],
                   obj=frames[:, 2 * HAND_DIM:], hand_type=hand_type)


def write_jsonl(path, seq: MotionSequence, header: dict | None = None):
    header = dict(header or {})
    header.setdefault("L", len(seq))
    header.setdefault("hand_type", seq.hand_type)
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for i in range(len(seq)):
            rec = {"frame": i}
            if seq.hand_type in ("left", "both"):
                rec["lhand"] = [float(x) for x in seq.lhand[i]]
            if seq.hand_type in ("right", "both"):
                rec["rhand"] = [float(x) for x in seq.rhand[i]]
            rec["obj"] = [float(x) for x in seq.obj[i]]
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path) -> tuple[MotionSequence, dict]:
    with open(path) as fh:
        lines = [json.loads(ln) for ln in fh if ln.strip()]
    if not lines:
        raise MotionFormatError(f"{path}: empty motion file")
    header, frames = lines[0], lines[1:]
    L = int(header["L"])
    if len(frames) != L:
        raise MotionFormatError(f"{path}: header says {L} frames, found {len(frames)}")
    hand_type = header.get("hand_type", "both")
    lhand = np.zeros((L, HAND_DIM))
    rhand = np.zeros((L, HAND_DIM))
    obj = np.zeros((L, OBJ_DIM))
    for rec in frames:
        i = int(rec["frame"])
        if "lhand" in rec:
            lhand[i] = rec["lhand"]
        if "rhand" in rec:
            rhand[i] = rec["rhand"]
        obj[i] = rec["obj"]
    return MotionSequence(lhand, rhand, obj, hand_type=hand_type), header


def write_clip(path, seq: MotionSequence, header: dict | None = None):
    header = dict(header or {})
    header.update({"magic": CLIP_MAGIC, "L": len(seq), "hand_type": seq.hand_type,
                   "frame_dim": FRAME_DIM})
    blob = json.dumps(header).encode("utf-8")
    frames = seq.frames().astype("<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(frames.tobytes(order="C"))


def read_clip(path) -> tuple[MotionSequence, dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise MotionFormatError(f"{path}: truncated clip file")
    (hlen,) = struct.unpack("<I", raw[:4])
    try:
        header = json.loads(raw[4:4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MotionFormatError(f"{path}: bad clip header") from exc
    if header.get("magic") != CLIP_MAGIC:
        raise MotionFormatError(f"{path}: not a {CLIP_MAGIC} file")
    L = int(header["L"])
    body = np.frombuffer(raw[4 + hlen:], dtype="<f4")
    if body.size != L * FRAME_DIM:
        raise MotionFormatError(f"{path}: expected {L * FRAME_DIM} floats, found {body.size}")
    frames = body.reshape(L, FRAME_DIM).astype(np.float64)
    return MotionSequence.from_frames(frames, hand_type=header.get("hand_type", "both")), header
