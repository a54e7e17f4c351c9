"""Discrete token vocabulary for the reasoning chain.

Values are quantized to fixed bins:

* 64 coordinate bins covering [-0.64, 0.64) m at 2 cm, used for positions,
  offsets, signed distances, and waypoint translation deltas;
* 32 shared bins used twice: over [-pi, pi) for rotation deltas and over
  [-1, 1] for surface-normal components (renormalized to unit length after
  decoding).

Structural ids (start, end, four separators, the action-readout slots), the
object-class ids, and the instruction verbs complete the vocabulary.  The
chain stream is: BOS, thought-1 .. thought-4 each followed by its separator,
then the action-readout slots.  Disabling a thought removes its content and
its separator from the stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_COORD_BINS = 64
COORD_LO = -0.64
COORD_WIDTH = 0.02

N_BIN32 = 32
ANGLE_LO = -np.pi
ANGLE_WIDTH = 2.0 * np.pi / N_BIN32
UNIT_LO = -1.0
UNIT_WIDTH = 2.0 / N_BIN32

N_CLASSES = 8
N_VERBS = 2
N_ACT = 8

BIN32_BASE = N_COORD_BINS        # 64
BOS = BIN32_BASE + N_BIN32       # 96
EOS = BOS + 1                    # 97
SEP = (98, 99, 100, 101)         # one per thought
ACT_BASE = 102                   # 102..109
CLASS_BASE = ACT_BASE + N_ACT    # 110..117
VERB_BASE = CLASS_BASE + N_CLASSES  # 118..119
VOCAB_SIZE = VERB_BASE + N_VERBS    # 120

VERBS = ("pick", "lift")


def encode_coord(x: float) -> int:
    return int(np.clip(np.floor((x - COORD_LO) / COORD_WIDTH), 0, N_COORD_BINS - 1))


def decode_coord(i: int) -> float:
    return COORD_LO + (i + 0.5) * COORD_WIDTH


def encode_angle(x: float) -> int:
    return BIN32_BASE + int(np.clip(np.floor((x - ANGLE_LO) / ANGLE_WIDTH), 0, N_BIN32 - 1))


def decode_angle(tok: int) -> float:
    return ANGLE_LO + (tok - BIN32_BASE + 0.5) * ANGLE_WIDTH


def encode_unit(x: float) -> int:
    return BIN32_BASE + int(np.clip(np.floor((x - UNIT_LO) / UNIT_WIDTH), 0, N_BIN32 - 1))


def decode_unit(tok: int) -> float:
    return UNIT_LO + (tok - BIN32_BASE + 0.5) * UNIT_WIDTH


@dataclass(frozen=True)
class ChainFlags:
    """Which of the four thoughts are present in the chain."""

    c1: bool = True  # target centroid
    c2: bool = True  # grasp offset + surface normal
    c3: bool = True  # vertical / lateral clearances
    c4: bool = True  # three waypoint deltas

    def to_dict(self) -> dict:
        return {"c1": self.c1, "c2": self.c2, "c3": self.c3, "c4": self.c4}

    @classmethod
    def from_dict(cls, d) -> "ChainFlags":
        return cls(**d)

    @classmethod
    def none(cls) -> "ChainFlags":
        return cls(False, False, False, False)


@dataclass
class ThoughtChain:
    """Continuous-valued annotation that the chain tokens quantize."""

    centroid: np.ndarray          # (3,) target centroid, camera frame
    grasp_offset: np.ndarray      # (3,) grasp point minus centroid
    grasp_normal: np.ndarray      # (3,) unit outward surface normal
    clearances: np.ndarray        # (2,) signed vertical to table, lateral to nearest object
    waypoint_deltas: np.ndarray   # (3, 6) per waypoint: dxyz then rotation-vector delta


@dataclass(frozen=True)
class Slot:
    kind: str        # "struct" | "coord" | "angle" | "unit"
    token: int = -1  # forced id for struct slots
    fld: str = ""   # chain field for value slots
    idx: int = -1    # flat index into that field


def chain_layout(flags: ChainFlags, n_act: int = N_ACT) -> list[Slot]:
    """Slot descriptors for the generated stream, BOS first."""
    slots = [Slot("struct", BOS)]
    if flags.c1:
        slots += [Slot("coord", fld="centroid", idx=i) for i in range(3)]
        slots.append(Slot("struct", SEP[0]))
    if flags.c2:
        slots += [Slot("coord", fld="grasp_offset", idx=i) for i in range(3)]
        slots += [Slot("unit", fld="grasp_normal", idx=i) for i in range(3)]
        slots.append(Slot("struct", SEP[1]))
    if flags.c3:
        slots += [Slot("coord", fld="clearances", idx=i) for i in range(2)]
        slots.append(Slot("struct", SEP[2]))
    if flags.c4:
        for wp in range(3):
            slots += [Slot("coord", fld="waypoint_deltas", idx=wp * 6 + i) for i in range(3)]
            slots += [Slot("angle", fld="waypoint_deltas", idx=wp * 6 + 3 + i) for i in range(3)]
        slots.append(Slot("struct", SEP[3]))
    slots += [Slot("struct", ACT_BASE + i) for i in range(n_act)]
    return slots


def n_supervised(flags: ChainFlags) -> int:
    return sum(1 for s in chain_layout(flags) if s.kind != "struct")


def allowed_ids(slot: Slot) -> np.ndarray:
    """Vocabulary ids a constrained decoder may emit at this slot."""
    if slot.kind == "struct":
        return np.array([slot.token])
    if slot.kind == "coord":
        return np.arange(N_COORD_BINS)
    return np.arange(BIN32_BASE, BIN32_BASE + N_BIN32)


def _field_value(chain: ThoughtChain, slot: Slot) -> float:
    return float(np.asarray(getattr(chain, slot.fld)).reshape(-1)[slot.idx])


def encode_chain(chain: ThoughtChain, flags: ChainFlags, n_act: int = N_ACT) -> np.ndarray:
    """Quantize a chain into the full token stream (structural ids included)."""
    toks = []
    for slot in chain_layout(flags, n_act):
        if slot.kind == "struct":
            toks.append(slot.token)
        elif slot.kind == "coord":
            toks.append(encode_coord(_field_value(chain, slot)))
        elif slot.kind == "angle":
            toks.append(encode_angle(_field_value(chain, slot)))
        else:
            toks.append(encode_unit(_field_value(chain, slot)))
    return np.asarray(toks, dtype=np.int64)


def decode_chain_tokens(tokens, flags: ChainFlags, n_act: int = N_ACT) -> ThoughtChain:
    """De-quantize a token stream back to mid-bin values.

    Disabled thoughts come back as NaN; the decoded surface normal is
    renormalized to unit length.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    layout = chain_layout(flags, n_act)
    if tokens.shape != (len(layout),):
        raise ValueError(
            f"token stream length {tokens.shape} does not match layout {len(layout)}"
        )
    out = ThoughtChain(
        centroid=np.full(3, np.nan),
        grasp_offset=np.full(3, np.nan),
        grasp_normal=np.full(3, np.nan),
        clearances=np.full(2, np.nan),
        waypoint_deltas=np.full((3, 6), np.nan),
    )
    for pos, (tok, slot) in enumerate(zip(tokens, layout)):
        if slot.kind == "struct":
            if tok != slot.token:
                raise ValueError(
                    f"position {pos}: structural slot expected id {slot.token}, got {tok}"
                )
            continue
        lo, hi = (0, N_COORD_BINS) if slot.kind == "coord" else (
            BIN32_BASE, BIN32_BASE + N_BIN32
        )
        if not (lo <= tok < hi):
            raise ValueError(
                f"position {pos}: {slot.kind} slot got out-of-range id {tok}"
            )
        if slot.kind == "coord":
            val = decode_coord(int(tok))
        elif slot.kind == "angle":
            val = decode_angle(int(tok))
        else:
            val = decode_unit(int(tok))
        getattr(out, slot.fld).reshape(-1)[slot.idx] = val
    if flags.c2:
        n = out.grasp_normal
        out.grasp_normal = n / max(np.linalg.norm(n), 1e-12)
    return out
