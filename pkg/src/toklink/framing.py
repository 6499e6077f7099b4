"""Bit-exact packetization, cross-chunk interleaving, and redundancy piggyback.

Wire format (integers little-endian, bitstreams packed MSB-first):

    seq_no            u16
    first_frame_index u32
    n_frames          u8   frames carried by this packet
    prev_frames       u8   frames covered by the piggyback section (0 in pkt 0)
    mask descriptor   2 bits per depth per carried frame (level 0/1/2),
                      zero-padded to a byte boundary
    piggyback desc.   2 bits per depth per previous-packet frame: the previous
                      packet's levels, so a receiver that lost packet k can
                      still learn k's mask from k+1; padded to a byte
    payload           primary tokens (frame order, depth order, levels >= 1),
                      then piggyback copies of the previous packet's level-2
                      tokens (same ordering), bits_per_token each, zero-padded
                      to a byte boundary

Level-2 redundancy rides in the NEXT packet so a single packet loss never
erases both copies. Interleaving swaps even-index token slots between the
adjacent frames that straddle each packet boundary, so the swap always
crosses packets.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FramingConfig:
    n_q: int = 8
    bits_per_token: int = 11
    frames_per_packet: int = 2
    even_base: int = 0  # 0-based even positions are swapped; set 1 for 1-based
    header_bits: int = 320  # emulated transport/network header (40-byte RTP/UDP/IP)
    feedback_period_ms: int = 100
    count_descriptors_as_payload: bool = False

    def __post_init__(self):
        if self.frames_per_packet < 1:
            raise ValueError("frames_per_packet must be >= 1")
        if self.even_base not in (0, 1):
            raise ValueError("even_base must be 0 or 1")
        if self.feedback_period_ms <= 0:
            raise ValueError("feedback_period_ms must be > 0")

    @property
    def ctrl_bps(self) -> float:
        # one-byte loss report each feedback period
        return 8.0 * 1000.0 / self.feedback_period_ms


@dataclass
class TransmitSet:
    """Per-frame transmission state: which depth slots carry tokens, which are
    level-2 (redundant copy piggybacks on the next packet), and - on the
    receiver side - which transmitted slots were erased in transit."""

    frame_index: int
    tokens: np.ndarray     # (n_q,) int32, valid where present
    present: np.ndarray    # (n_q,) bool
    redundant: np.ndarray  # (n_q,) bool, implies present
    erased: np.ndarray = field(default=None)  # (n_q,) bool

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int32)
        self.present = np.asarray(self.present, dtype=bool)
        self.redundant = np.asarray(self.redundant, dtype=bool)
        if self.erased is None:
            self.erased = np.zeros_like(self.present)
        self.erased = np.asarray(self.erased, dtype=bool)

    @property
    def n_q(self) -> int:
        return len(self.tokens)

    def levels(self) -> np.ndarray:
        return self.present.astype(np.uint8) + self.redundant.astype(np.uint8)

    def copy(self) -> "TransmitSet":
        return TransmitSet(
            frame_index=self.frame_index,
            tokens=self.tokens.copy(),
            present=self.present.copy(),
            redundant=self.redundant.copy(),
            erased=self.erased.copy(),
        )

    @classmethod
    def empty(cls, frame_index: int, n_q: int) -> "TransmitSet":
        return cls(
            frame_index=frame_index,
            tokens=np.zeros(n_q, dtype=np.int32),
            present=np.zeros(n_q, dtype=bool),
            redundant=np.zeros(n_q, dtype=bool),
        )


def interleave(a: TransmitSet, b: TransmitSet, even_base: int = 0) -> tuple[TransmitSet, TransmitSet]:
    """Swap even-index token slots (values and markers) between adjacent chunks."""
    if abs(a.frame_index - b.frame_index) != 1:
        raise ValueError(f"chunks must be adjacent, got frames {a.frame_index} and {b.frame_index}")
    a2, b2 = a.copy(), b.copy()
    sel = np.arange(a.n_q) % 2 == (even_base % 2)
    for name in ("tokens", "present", "redundant", "erased"):
        av, bv = getattr(a2, name), getattr(b2, name)
        av[sel], bv[sel] = bv[sel].copy(), av[sel].copy()
    return a2, b2


def deinterleave(a: TransmitSet, b: TransmitSet, even_base: int = 0) -> tuple[TransmitSet, TransmitSet]:
    """Exact inverse of interleave (the swap is an involution)."""
    return interleave(a, b, even_base)


def _boundary_pairs(n_frames: int, frames_per_packet: int) -> list[tuple[int, int]]:
    # disjoint adjacent pairs straddling packet boundaries
    if frames_per_packet == 1:
        return [(i, i + 1) for i in range(0, n_frames - 1, 2)]
    return [(m * frames_per_packet - 1, m * frames_per_packet)
            for m in range(1, (n_frames + frames_per_packet - 1) // frames_per_packet)
            if m * frames_per_packet < n_frames]


def interleave_stream(frames: list[TransmitSet], cfg: FramingConfig) -> list[TransmitSet]:
    out = [f.copy() for f in frames]
    for i, j in _boundary_pairs(len(frames), cfg.frames_per_packet):
        out[i], out[j] = interleave(out[i], out[j], cfg.even_base)
    return out


def deinterleave_stream(frames: list[TransmitSet], cfg: FramingConfig) -> list[TransmitSet]:
    return interleave_stream(frames, cfg)


class _BitWriter:
    def __init__(self):
        self.buf = bytearray()
        self._acc = 0
        self._n = 0

    def write(self, value: int, bits: int) -> None:
        if value < 0 or value >= (1 << bits):
            raise ValueError(f"value {value} does not fit in {bits} bits")
        self._acc = (self._acc << bits) | value
        self._n += bits
        while self._n >= 8:
            self._n -= 8
            self.buf.append((self._acc >> self._n) & 0xFF)
        self._acc &= (1 << self._n) - 1

    def pad_to_byte(self) -> None:
        if self._n:
            self.buf.append((self._acc << (8 - self._n)) & 0xFF)
            self._acc = 0
            self._n = 0

    def bytes(self) -> bytes:
        self.pad_to_byte()
        return bytes(self.buf)


class _BitReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0  # bit position

    def read(self, bits: int) -> int:
        end = self.pos + bits
        if end > 8 * len(self.data):
            raise ValueError("bitstream exhausted")
        value = 0
        for _ in range(bits):
            byte = self.data[self.pos >> 3]
            value = (value << 1) | ((byte >> (7 - (self.pos & 7))) & 1)
            self.pos += 1
        return value

    def align_to_byte(self) -> None:
        self.pos = (self.pos + 7) & ~7


@dataclass
class Packet:
    seq_no: int
    first_frame_index: int
    mask_levels: np.ndarray        # (n_frames, n_q) uint8 in {0, 1, 2}
    piggyback_levels: np.ndarray   # (prev_frames, n_q) uint8, previous packet's levels
    primary_tokens: np.ndarray     # (n_primary,) int32, frame then depth order
    piggyback_tokens: np.ndarray   # (n_piggy,) int32, copies of prev level-2 slots
    lost: bool = False
    # token-granularity channels erase individual copies instead of whole packets
    primary_lost: np.ndarray | None = None
    piggyback_lost: np.ndarray | None = None

    def __post_init__(self):
        self.mask_levels = np.asarray(self.mask_levels, dtype=np.uint8)
        self.piggyback_levels = np.asarray(self.piggyback_levels, dtype=np.uint8)
        self.primary_tokens = np.asarray(self.primary_tokens, dtype=np.int32)
        self.piggyback_tokens = np.asarray(self.piggyback_tokens, dtype=np.int32)

    @property
    def n_frames(self) -> int:
        return self.mask_levels.shape[0]

    def payload_bits(self, bits_per_token: int) -> int:
        return int(self.primary_tokens.size) * bits_per_token

    def piggyback_bits(self, bits_per_token: int) -> int:
        return int(self.piggyback_tokens.size) * bits_per_token

    def descriptor_bits(self) -> int:
        return 2 * int(self.mask_levels.size + self.piggyback_levels.size)

    def to_bytes(self, cfg: FramingConfig) -> bytes:
        head = struct.pack("<HIBB", self.seq_no, self.first_frame_index,
                           self.n_frames, self.piggyback_levels.shape[0])
        w = _BitWriter()
        for lv in self.mask_levels.reshape(-1):
            w.write(int(lv), 2)
        w.pad_to_byte()
        for lv in self.piggyback_levels.reshape(-1):
            w.write(int(lv), 2)
        w.pad_to_byte()
        for tok in self.primary_tokens:
            w.write(int(tok), cfg.bits_per_token)
        for tok in self.piggyback_tokens:
            w.write(int(tok), cfg.bits_per_token)
        return head + w.bytes()

    @classmethod
    def from_bytes(cls, data: bytes, cfg: FramingConfig) -> "Packet":
        if len(data) < 8:
            raise ValueError("packet too short")
        seq_no, first_frame, n_frames, prev_frames = struct.unpack("<HIBB", data[:8])
        r = _BitReader(data[8:])
        mask = np.empty((n_frames, cfg.n_q), dtype=np.uint8)
        for i in range(n_frames * cfg.n_q):
            lv = r.read(2)
            if lv > 2:
                raise ValueError("invalid mask level in descriptor")
            mask[i // cfg.n_q, i % cfg.n_q] = lv
        r.align_to_byte()
        piggy = np.empty((prev_frames, cfg.n_q), dtype=np.uint8)
        for i in range(prev_frames * cfg.n_q):
            lv = r.read(2)
            if lv > 2:
                raise ValueError("invalid level in piggyback descriptor")
            piggy[i // cfg.n_q, i % cfg.n_q] = lv
        r.align_to_byte()
        n_primary = int((mask >= 1).sum())
        n_piggy = int((piggy == 2).sum())
        primary = np.array([r.read(cfg.bits_per_token) for _ in range(n_primary)], dtype=np.int32)
        piggy_toks = np.array([r.read(cfg.bits_per_token) for _ in range(n_piggy)], dtype=np.int32)
        expected_len = 8 + _section_bytes(n_frames * cfg.n_q * 2) + _section_bytes(prev_frames * cfg.n_q * 2) \
            + _section_bytes((n_primary + n_piggy) * cfg.bits_per_token)
        if len(data) != expected_len:
            raise ValueError(f"packet length {len(data)} does not match descriptors ({expected_len})")
        return cls(seq_no=seq_no, first_frame_index=first_frame, mask_levels=mask,
                   piggyback_levels=piggy, primary_tokens=primary, piggyback_tokens=piggy_toks)


def _section_bytes(bits: int) -> int:
    return (bits + 7) // 8


def packetize(frames: list[TransmitSet], cfg: FramingConfig) -> list[Packet]:
    """Pack (already interleaved) transmit sets into packets, piggybacking each
    packet's level-2 tokens on its successor."""
    limit = 1 << cfg.bits_per_token
    packets: list[Packet] = []
    groups = [frames[i:i + cfg.frames_per_packet] for i in range(0, len(frames), cfg.frames_per_packet)]
    prev_levels = np.zeros((0, cfg.n_q), dtype=np.uint8)
    prev_piggy_tokens = np.zeros(0, dtype=np.int32)
    for seq, group in enumerate(groups):
        mask = np.stack([f.levels() for f in group])
        primary = []
        redundant = []
        for f in group:
            for d in range(f.n_q):
                if f.present[d]:
                    tok = int(f.tokens[d])
                    if not 0 <= tok < limit:
                        raise ValueError(f"token {tok} exceeds bits_per_token capacity ({cfg.bits_per_token} bits)")
                    primary.append(tok)
                    if f.redundant[d]:
                        redundant.append(tok)
        packets.append(Packet(
            seq_no=seq & 0xFFFF,
            first_frame_index=group[0].frame_index,
            mask_levels=mask,
            piggyback_levels=prev_levels,
            primary_tokens=np.array(primary, dtype=np.int32),
            piggyback_tokens=prev_piggy_tokens,
        ))
        prev_levels = mask
        prev_piggy_tokens = np.array(redundant, dtype=np.int32)
    if prev_piggy_tokens.size:
        logger.warning("last packet carries %d level-2 tokens whose redundant copies have no carrier",
                       prev_piggy_tokens.size)
    return packets


def _primary_slot_index(mask: np.ndarray) -> dict[tuple[int, int], int]:
    out = {}
    i = 0
    for f in range(mask.shape[0]):
        for d in range(mask.shape[1]):
            if mask[f, d] >= 1:
                out[(f, d)] = i
                i += 1
    return out


def _piggy_slot_index(levels: np.ndarray) -> dict[tuple[int, int], int]:
    out = {}
    i = 0
    for f in range(levels.shape[0]):
        for d in range(levels.shape[1]):
            if levels[f, d] == 2:
                out[(f, d)] = i
                i += 1
    return out


def depacketize(packets: list[Packet], cfg: FramingConfig, n_frames: int | None = None) -> list[TransmitSet]:
    """Recover transmit sets from a packet stream with loss marks.

    Primary tokens come from surviving packets; a lost packet's level-2 tokens
    are recovered from the next packet's piggyback section, and its mask is
    learned from that packet's piggyback descriptor. When both a packet and
    its successor are lost the mask is unknown and every slot of the affected
    frames is marked erased. Ends with de-interleaving, so frames come back in
    their original slot layout.
    """
    if n_frames is None:
        n_frames = max(p.first_frame_index + p.n_frames for p in packets) if packets else 0
    out = [TransmitSet.empty(i, cfg.n_q) for i in range(n_frames)]

    for k, pkt in enumerate(packets):
        nxt = packets[k + 1] if k + 1 < len(packets) else None
        nxt_alive = nxt is not None and not nxt.lost
        piggy_copy = _piggy_lookup(nxt) if nxt_alive else (lambda f, d: None)
        if not pkt.lost:
            slot_of = _primary_slot_index(pkt.mask_levels)
            for f in range(pkt.n_frames):
                ts = out[pkt.first_frame_index + f]
                for d in range(cfg.n_q):
                    lv = int(pkt.mask_levels[f, d])
                    if lv == 0:
                        continue
                    ts.present[d] = True
                    ts.redundant[d] = lv == 2
                    idx = slot_of[(f, d)]
                    copy = piggy_copy(f, d) if lv == 2 else None
                    if pkt.primary_lost is None or not pkt.primary_lost[idx]:
                        ts.tokens[d] = pkt.primary_tokens[idx]
                    elif copy is not None:
                        ts.tokens[d] = copy
                    else:
                        ts.erased[d] = True
        elif nxt_alive and nxt.piggyback_levels.shape[0] == pkt.n_frames:
            # mask recovered from the successor's piggyback descriptor
            for f in range(pkt.n_frames):
                ts = out[pkt.first_frame_index + f]
                for d in range(cfg.n_q):
                    lv = int(nxt.piggyback_levels[f, d])
                    if lv == 0:
                        continue
                    ts.present[d] = True
                    ts.redundant[d] = lv == 2
                    copy = piggy_copy(f, d) if lv == 2 else None
                    if copy is not None:
                        ts.tokens[d] = copy
                    else:
                        ts.erased[d] = True
        else:
            # packet and its successor gone: mask unknown, conceal everything
            for f in range(pkt.n_frames):
                ts = out[pkt.first_frame_index + f]
                ts.present[:] = True
                ts.erased[:] = True

    return deinterleave_stream(out, cfg)


def _piggy_lookup(pkt: Packet):
    slot_of = _piggy_slot_index(pkt.piggyback_levels)

    def copy(frame: int, depth: int) -> int | None:
        idx = slot_of.get((frame, depth))
        if idx is None:
            return None
        if pkt.piggyback_lost is not None and bool(pkt.piggyback_lost[idx]):
            return None
        return int(pkt.piggyback_tokens[idx])

    return copy


@dataclass(frozen=True)
class OverheadProfile:
    r_payload: float  # bps
    n_pkt: float      # packets per second
    r_header: float   # bits per packet
    r_ctrl: float     # bps

    def __post_init__(self):
        if min(self.r_payload, self.n_pkt, self.r_header, self.r_ctrl) < 0:
            raise ValueError("overhead profile fields must be non-negative")


def overhead_estimate(prof: OverheadProfile) -> float:
    """Total bitrate: payload plus per-packet headers plus control signaling."""
    return prof.r_payload + prof.n_pkt * prof.r_header + prof.r_ctrl


@dataclass(frozen=True)
class FeedbackMessage:
    p_hat_q: int  # round(255 * p), single byte
    emit_ms: int
    period_ms: int = 100

    def __post_init__(self):
        if not 0 <= self.p_hat_q <= 255:
            raise ValueError("quantized loss estimate must fit one byte")
        if self.period_ms <= 0:
            raise ValueError("feedback period must be > 0")

    @property
    def p_hat(self) -> float:
        return self.p_hat_q / 255.0


def quantize_loss(p: float) -> int:
    return int(round(255 * min(max(p, 0.0), 1.0)))
