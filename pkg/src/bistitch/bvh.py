"""BVH motion-capture parsing/emission and the binary clip cache.

BVH specifics honoured here:

* Angles in files are degrees; everything internal is radians/quaternions.
* Channel rotations compose intrinsically in channel order, e.g. channels
  ``Zrotation Xrotation Yrotation`` mean ``R = Rz @ Rx @ Ry`` acting on
  column vectors. All six proper Euler orders are supported and the order is
  always read from the file.
* ``End Site`` blocks become regular joints named ``<parent>_end`` with an
  empty channel list; they carry identity rotations in converted clips. The
  emitter maps channel-less leaf joints back to ``End Site`` blocks.
* A non-zero ROOT offset is folded into the root translation channels at
  parse time so skeletons always satisfy the zero-root-offset invariant.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import (
    MotionClip,
    Pose,
    Skeleton,
    StructuralError,
    derive_velocities,
    forward_kinematics,
    quat_canonical,
    quat_from_axis_angle,
    quat_multiply,
    quat_to_matrix,
)

ROTATION_ORDERS = ("XYZ", "XZY", "YXZ", "YZX", "ZXY", "ZYX")

_AXIS_INDEX = {"X": 0, "Y": 1, "Z": 2}
_AXIS_VECTORS = {
    "X": np.array([1.0, 0.0, 0.0]),
    "Y": np.array([0.0, 1.0, 0.0]),
    "Z": np.array([0.0, 0.0, 1.0]),
}
# cyclic permutations of (0, 1, 2) get parity +1
_CYCLIC = {(0, 1, 2), (1, 2, 0), (2, 0, 1)}


class BvhParseError(ValueError):
    """Malformed BVH input; carries the 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class BvhDocument:
    """Parsed BVH file: hierarchy plus verbatim motion rows.

    ``channel_layout[j]`` lists joint j's channel names in file order (empty
    for end sites); ``rotation_order[j]`` is the three-letter Euler order or
    ``""`` when the joint has no rotation channels.
    """

    skeleton: Skeleton
    channel_layout: list[list[str]]
    rotation_order: list[str]
    frames: np.ndarray  # [T, total_channels]
    frame_time: float

    @property
    def channel_count(self) -> int:
        return sum(len(c) for c in self.channel_layout)


# ---------------------------------------------------------------------------
# Euler <-> quaternion for the six proper orders
# ---------------------------------------------------------------------------

def euler_to_quat(angles: np.ndarray, order: str) -> np.ndarray:
    """Quaternion for intrinsic rotations ``order`` applied in channel order.

    ``angles`` are radians, one per axis letter of ``order``.
    """
    if order not in ROTATION_ORDERS:
        raise StructuralError(f"unsupported rotation order {order!r}; supported: {ROTATION_ORDERS}")
    q = np.array([1.0, 0.0, 0.0, 0.0])
    for axis, angle in zip(order, np.asarray(angles, dtype=float)):
        q = quat_multiply(q, quat_from_axis_angle(_AXIS_VECTORS[axis], angle))
    return q


def quat_to_euler(q: np.ndarray, order: str) -> np.ndarray:
    """Extract intrinsic Euler angles (radians) in ``order`` from a quaternion.

    Uses the generic Tait-Bryan matrix extraction; near gimbal lock the third
    angle is fixed to zero.
    """
    if order not in ROTATION_ORDERS:
        raise StructuralError(f"unsupported rotation order {order!r}; supported: {ROTATION_ORDERS}")
    i, j, k = (_AXIS_INDEX[a] for a in order)
    eps = 1.0 if (i, j, k) in _CYCLIC else -1.0
    m = quat_to_matrix(q)
    s2 = float(np.clip(eps * m[i, k], -1.0, 1.0))
    theta2 = np.arcsin(s2)
    if abs(s2) < 1.0 - 1e-9:
        theta1 = np.arctan2(-eps * m[j, k], m[k, k])
        theta3 = np.arctan2(-eps * m[i, j], m[i, i])
    else:
        theta1 = np.arctan2(eps * m[k, j], m[j, j])
        theta3 = 0.0
    return np.array([theta1, theta2, theta3])


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

class _Tokens:
    """Line-aware token stream over the HIERARCHY section."""

    def __init__(self, lines: list[str]):
        self._items: list[tuple[str, int]] = []
        for n, line in enumerate(lines, start=1):
            for tok in line.split():
                self._items.append((tok, n))
        self._pos = 0
        self.last_line = 1

    def peek(self) -> str | None:
        return self._items[self._pos][0] if self._pos < len(self._items) else None

    def next(self, expect: str | None = None) -> str:
        if self._pos >= len(self._items):
            raise BvhParseError("unexpected end of file", self.last_line)
        tok, line = self._items[self._pos]
        self._pos += 1
        self.last_line = line
        if expect is not None and tok != expect:
            raise BvhParseError(f"expected {expect!r}, got {tok!r}", line)
        return tok


def parse_bvh(text: str) -> BvhDocument:
    """Parse a BVH character stream into a :class:`BvhDocument`.

    Raises :class:`BvhParseError` with a line number on malformed input.
    """
    lines = text.splitlines()
    motion_at = None
    for n, line in enumerate(lines):
        if line.strip() == "MOTION":
            motion_at = n
            break
    if motion_at is None:
        raise BvhParseError("missing MOTION section", len(lines) or 1)

    tokens = _Tokens(lines[:motion_at])
    tokens.next("HIERARCHY")

    names: list[str] = []
    parents: list[int] = []
    offsets: list[np.ndarray] = []
    layout: list[list[str]] = []
    orders: list[str] = []

    def read_offset() -> np.ndarray:
        tokens.next("OFFSET")
        vals = []
        for _ in range(3):
            tok = tokens.next()
            try:
                vals.append(float(tok))
            except ValueError:
                raise BvhParseError(f"non-numeric OFFSET value {tok!r}", tokens.last_line) from None
        return np.array(vals)

    def read_channels() -> list[str]:
        tokens.next("CHANNELS")
        count_tok = tokens.next()
        try:
            count = int(count_tok)
        except ValueError:
            raise BvhParseError(f"non-numeric channel count {count_tok!r}", tokens.last_line) from None
        channels = [tokens.next() for _ in range(count)]
        for ch in channels:
            if ch not in (
                "Xposition", "Yposition", "Zposition",
                "Xrotation", "Yrotation", "Zrotation",
            ):
                raise BvhParseError(f"unknown channel {ch!r}", tokens.last_line)
        return channels

    def rotation_order_of(channels: list[str]) -> str:
        rot = [ch[0] for ch in channels if ch.endswith("rotation")]
        if not rot:
            return ""
        order = "".join(rot)
        if order not in ROTATION_ORDERS:
            raise BvhParseError(
                f"rotation order {order!r} unsupported; supported: {ROTATION_ORDERS}",
                tokens.last_line,
            )
        return order

    def read_joint(parent: int) -> None:
        keyword = tokens.next()
        if keyword == "End":
            tokens.next("Site")
            name = names[parent] + "_end"
            tokens.next("{")
            off = read_offset()
            names.append(name)
            parents.append(parent)
            offsets.append(off)
            layout.append([])
            orders.append("")
            tokens.next("}")
            return
        if keyword not in ("ROOT", "JOINT"):
            raise BvhParseError(f"expected ROOT, JOINT or End Site, got {keyword!r}", tokens.last_line)
        if keyword == "ROOT" and parent != -1:
            raise BvhParseError("nested ROOT", tokens.last_line)
        name = tokens.next()
        tokens.next("{")
        off = read_offset()
        channels = read_channels()
        index = len(names)
        names.append(name)
        parents.append(parent)
        offsets.append(off)
        layout.append(channels)
        orders.append(rotation_order_of(channels))
        while tokens.peek() != "}":
            if tokens.peek() is None:
                raise BvhParseError(f"unterminated brace for joint {name!r}", tokens.last_line)
            read_joint(index)
        tokens.next("}")

    if tokens.peek() != "ROOT":
        raise BvhParseError("HIERARCHY must start with ROOT", tokens.last_line)
    read_joint(-1)
    if tokens.peek() is not None:
        raise BvhParseError(f"unexpected token {tokens.peek()!r} after hierarchy", tokens.last_line)

    # fold a non-zero root offset into the translation channels (added to the
    # motion rows below) so the Skeleton keeps a zero root offset
    root_offset = offsets[0].copy()
    offsets[0] = np.zeros(3)
    skeleton = Skeleton(tuple(names), tuple(parents), np.stack(offsets))

    # MOTION section
    idx = motion_at + 1
    def motion_line(expect_prefix: str) -> tuple[str, int]:
        nonlocal idx
        while idx < len(lines) and not lines[idx].strip():
            idx += 1
        if idx >= len(lines):
            raise BvhParseError(f"missing {expect_prefix!r} line", len(lines))
        line = lines[idx].strip()
        idx += 1
        if not line.startswith(expect_prefix):
            raise BvhParseError(f"expected {expect_prefix!r} line, got {line!r}", idx)
        return line, idx

    frames_line, frames_lineno = motion_line("Frames:")
    try:
        frame_count = int(frames_line.split(":", 1)[1])
    except ValueError:
        raise BvhParseError("non-numeric frame count", frames_lineno) from None
    time_line, time_lineno = motion_line("Frame Time:")
    try:
        frame_time = float(time_line.split(":", 1)[1])
    except ValueError:
        raise BvhParseError("non-numeric frame time", time_lineno) from None
    if frame_time <= 0:
        raise BvhParseError("frame time must be positive", time_lineno)

    total_channels = sum(len(c) for c in layout)
    rows = []
    for _ in range(frame_count):
        while idx < len(lines) and not lines[idx].strip():
            idx += 1
        if idx >= len(lines):
            raise BvhParseError(f"expected {frame_count} motion rows, found {len(rows)}", len(lines))
        parts = lines[idx].split()
        if len(parts) != total_channels:
            raise BvhParseError(
                f"motion row {len(rows) + 1} has {len(parts)} values, expected {total_channels}",
                idx + 1,
            )
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise BvhParseError(f"non-numeric value in motion row {len(rows) + 1}", idx + 1) from None
        idx += 1

    frames = np.array(rows, dtype=float).reshape(frame_count, total_channels)
    if np.any(root_offset != 0.0):
        col = 0
        for ch in layout[0]:
            if ch.endswith("position"):
                frames[:, col] += root_offset[_AXIS_INDEX[ch[0]]]
            col += 1
    return BvhDocument(skeleton, layout, orders, frames, frame_time)


# ---------------------------------------------------------------------------
# conversion to/from MotionClip
# ---------------------------------------------------------------------------

def to_clip(doc: BvhDocument) -> MotionClip:
    """Convert a parsed document to a :class:`MotionClip`.

    Euler channels become unit quaternions in the declared per-joint order,
    canonicalized to w >= 0 at frame 0 and hemisphere-aligned across frames.
    Non-root position channels are ignored. Velocities are derived.
    """
    J = doc.skeleton.joint_count
    T = doc.frames.shape[0]
    col_of: list[dict[str, int]] = []
    col = 0
    for channels in doc.channel_layout:
        mapping = {}
        for ch in channels:
            mapping[ch] = col
            col += 1
        col_of.append(mapping)

    root_cols = [col_of[0].get(f"{a}position") for a in "XYZ"]
    quats = np.zeros((T, J, 4))
    quats[..., 0] = 1.0
    for j in range(J):
        order = doc.rotation_order[j]
        if not order:
            continue
        cols = [col_of[j][f"{a}rotation"] for a in order]
        angles = np.deg2rad(doc.frames[:, cols])
        for t in range(T):
            quats[t, j] = euler_to_quat(angles[t], order)
    # canonical sign at frame 0, hemisphere alignment afterwards
    quats[0] = quat_canonical(quats[0])
    for t in range(1, T):
        dots = np.sum(quats[t] * quats[t - 1], axis=-1, keepdims=True)
        quats[t] = np.where(dots < 0.0, -quats[t], quats[t])

    poses = []
    for t in range(T):
        pos = np.array(
            [doc.frames[t, c] if c is not None else 0.0 for c in root_cols], dtype=float
        )
        poses.append(Pose(pos, np.zeros(3), quats[t]))
    clip = MotionClip(doc.skeleton, poses, 1.0 / doc.frame_time)
    if T >= 2:
        clip = derive_velocities(clip)
    return clip


def document_from_clip(clip: MotionClip, rotation_order: str = "ZYX") -> BvhDocument:
    """Build a document from a clip, mapping ``*_end``/channel-less leaves to end sites."""
    if rotation_order not in ROTATION_ORDERS:
        raise StructuralError(
            f"unsupported rotation order {rotation_order!r}; supported: {ROTATION_ORDERS}"
        )
    skeleton = clip.skeleton
    rot_channels = [f"{a}rotation" for a in rotation_order]
    layout: list[list[str]] = []
    orders: list[str] = []
    for j, name in enumerate(skeleton.joint_names):
        is_end = name.endswith("_end") and not skeleton.children(j)
        if j == 0:
            layout.append(["Xposition", "Yposition", "Zposition"] + rot_channels)
            orders.append(rotation_order)
        elif is_end:
            layout.append([])
            orders.append("")
        else:
            layout.append(list(rot_channels))
            orders.append(rotation_order)

    rows = np.zeros((len(clip), sum(len(c) for c in layout)))
    for t, pose in enumerate(clip.frames):
        col = 0
        for j in range(skeleton.joint_count):
            if not layout[j]:
                continue
            if j == 0:
                rows[t, col:col + 3] = pose.root_position
                col += 3
            angles = np.rad2deg(quat_to_euler(pose.local_rotations[j], rotation_order))
            rows[t, col:col + 3] = angles
            col += 3
    return BvhDocument(skeleton, layout, orders, rows, 1.0 / clip.frame_rate)


def render_document(doc: BvhDocument) -> str:
    """Serialize a document back to BVH text (6-decimal fixed point)."""
    skeleton = doc.skeleton
    out: list[str] = ["HIERARCHY"]

    def fmt(values) -> str:
        return " ".join(f"{v:.6f}" for v in values)

    def write_joint(j: int, depth: int) -> None:
        indent = "\t" * depth
        children = skeleton.children(j)
        is_end = not doc.channel_layout[j]
        if is_end:
            out.append(f"{indent}End Site")
            out.append(f"{indent}{{")
            out.append(f"{indent}\tOFFSET {fmt(skeleton.local_offset[j])}")
            out.append(f"{indent}}}")
            return
        keyword = "ROOT" if j == 0 else "JOINT"
        out.append(f"{indent}{keyword} {skeleton.joint_names[j]}")
        out.append(f"{indent}{{")
        out.append(f"{indent}\tOFFSET {fmt(skeleton.local_offset[j])}")
        out.append(
            f"{indent}\tCHANNELS {len(doc.channel_layout[j])} " + " ".join(doc.channel_layout[j])
        )
        for c in children:
            write_joint(c, depth + 1)
        if not children:
            # BVH leaves must close with an End Site block
            out.append(f"{indent}\tEnd Site")
            out.append(f"{indent}\t{{")
            out.append(f"{indent}\t\tOFFSET 0.000000 0.000000 0.000000")
            out.append(f"{indent}\t}}")
        out.append(f"{indent}}}")

    write_joint(0, 0)
    out.append("MOTION")
    out.append(f"Frames: {doc.frames.shape[0]}")
    out.append(f"Frame Time: {doc.frame_time:.8f}")
    for row in doc.frames:
        out.append(fmt(row))
    return "\n".join(out) + "\n"


def emit_bvh(clip: MotionClip, rotation_order: str = "ZYX") -> str:
    """Serialize a clip as BVH text that re-parses to matching FK positions."""
    return render_document(document_from_clip(clip, rotation_order))


def load_bvh_file(path) -> MotionClip:
    with open(path, "r", encoding="utf-8") as fh:
        return to_clip(parse_bvh(fh.read()))


# ---------------------------------------------------------------------------
# binary clip cache
# ---------------------------------------------------------------------------
# Layout (little-endian):
#   magic b"BSTC" | u32 version=1 | u32 clip_count
#   per clip:
#     u32 joint_count J | u32 frame_count T | f32 frame_rate
#     per joint: u16 name_len | utf-8 name | i32 parent | 3*f32 offset
#     per frame: 3*f32 root_position | 3*f32 root_velocity
#                J*4*f32 quaternions | 4*u8 contacts

CACHE_MAGIC = b"BSTC"
CACHE_VERSION = 1


def save_clips(path, clips: list[MotionClip]) -> None:
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<II", CACHE_VERSION, len(clips)))
        for clip in clips:
            skel = clip.skeleton
            J, T = skel.joint_count, len(clip)
            fh.write(struct.pack("<IIf", J, T, float(clip.frame_rate)))
            for name, parent, offset in zip(skel.joint_names, skel.parent_index, skel.local_offset):
                raw = name.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<i", parent))
                fh.write(np.asarray(offset, dtype="<f4").tobytes())
            for pose in clip.frames:
                fh.write(np.asarray(pose.root_position, dtype="<f4").tobytes())
                fh.write(np.asarray(pose.root_velocity, dtype="<f4").tobytes())
                fh.write(np.asarray(pose.local_rotations, dtype="<f4").tobytes())
                fh.write(np.asarray(pose.contacts, dtype=np.uint8).tobytes())


def load_clips(path) -> list[MotionClip]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CACHE_MAGIC:
        raise StructuralError(f"{path}: not a clip cache (bad magic)")
    version, clip_count = struct.unpack_from("<II", data, 4)
    if version != CACHE_VERSION:
        raise StructuralError(f"{path}: unsupported cache version {version}")
    off = 12
    clips = []
    for _ in range(clip_count):
        J, T, frame_rate = struct.unpack_from("<IIf", data, off)
        off += 12
        names, parents, offsets = [], [], []
        for _ in range(J):
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            names.append(data[off:off + name_len].decode("utf-8"))
            off += name_len
            (parent,) = struct.unpack_from("<i", data, off)
            off += 4
            offsets.append(np.frombuffer(data, dtype="<f4", count=3, offset=off).astype(float))
            off += 12
        skeleton = Skeleton(tuple(names), tuple(parents), np.stack(offsets))
        frames = []
        for _ in range(T):
            pos = np.frombuffer(data, dtype="<f4", count=3, offset=off).astype(float)
            off += 12
            vel = np.frombuffer(data, dtype="<f4", count=3, offset=off).astype(float)
            off += 12
            quats = np.frombuffer(data, dtype="<f4", count=J * 4, offset=off).astype(float)
            off += J * 16
            contacts = np.frombuffer(data, dtype=np.uint8, count=4, offset=off).astype(bool)
            off += 4
            frames.append(Pose(pos, vel, quats.reshape(J, 4), contacts))
        clips.append(MotionClip(skeleton, frames, frame_rate))
    return clips


def clip_fk_positions(clip: MotionClip) -> np.ndarray:
    """[T, J, 3] global positions; convenience wrapper over per-frame FK."""
    return np.stack(
        [forward_kinematics(clip.skeleton, f.root_position, f.local_rotations) for f in clip.frames]
    )
