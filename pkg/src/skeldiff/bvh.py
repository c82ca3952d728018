"""BVH 1.0 motion-capture file reading and writing.

The parser keeps a lossless in-memory document: joint hierarchy with exact
channel layouts (rotations stay in degrees, in file order) plus the raw frame
matrix. ``write_bvh(parse_bvh(text))`` reproduces the joint structure exactly
and the channel values to better than 1e-5.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

POSITION_CHANNELS = ("Xposition", "Yposition", "Zposition")
ROTATION_CHANNELS = ("Xrotation", "Yrotation", "Zrotation")
VALID_CHANNELS = set(POSITION_CHANNELS) | set(ROTATION_CHANNELS)


class BvhError(ValueError):
    """Malformed BVH input; carries the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass
class BvhJoint:
    name: str
    parent: int  # -1 for the root
    offset: np.ndarray  # (3,)
    channels: list[str] = field(default_factory=list)
    is_end_site: bool = False


@dataclass
class BvhDocument:
    joints: list[BvhJoint]
    frame_count: int
    frame_time: float
    frames: np.ndarray  # (frame_count, total_channels), rotations in degrees

    @property
    def total_channels(self) -> int:
        return sum(len(j.channels) for j in self.joints)

    def channel_offsets(self) -> list[int]:
        """Starting column of each joint's channel block in ``frames``."""
        offsets = []
        pos = 0
        for j in self.joints:
            offsets.append(pos)
            pos += len(j.channels)
        return offsets

    def parent_array(self) -> list[int | None]:
        return [None if j.parent < 0 else j.parent for j in self.joints]


class _Cursor:
    def __init__(self, text: str):
        self.raw = text.splitlines()
        self.pos = 0

    def peek(self) -> tuple[str, int] | None:
        i = self.pos
        while i < len(self.raw):
            stripped = self.raw[i].strip()
            if stripped:
                return stripped, i + 1
            i += 1
        return None

    def next(self) -> tuple[str, int]:
        item = self.peek()
        if item is None:
            raise BvhError("unexpected end of file", len(self.raw))
        line, num = item
        self.pos = num
        return line, num


def parse_bvh(text: str) -> BvhDocument:
    """Parse BVH text into a :class:`BvhDocument`.

    End Site blocks become leaf joints with empty channel lists, named after
    their parent with an " end" suffix and flagged ``is_end_site``.
    """
    cur = _Cursor(text)
    line, num = cur.next()
    if line != "HIERARCHY":
        raise BvhError("expected HIERARCHY", num)

    joints: list[BvhJoint] = []
    stack: list[int] = []

    def parse_joint_block(header: str, num: int, parent: int):
        words = header.split()
        keyword = words[0]
        if keyword == "End" and len(words) > 1 and words[1] == "Site":
            name = f"{joints[parent].name} end" if parent >= 0 else "end"
            is_end = True
        elif keyword in ("ROOT", "JOINT"):
            if len(words) < 2:
                raise BvhError(f"{keyword} requires a name", num)
            name = " ".join(words[1:])
            is_end = False
        else:
            raise BvhError(f"unexpected token {words[0]!r}", num)

        brace, bnum = cur.next()
        if brace != "{":
            raise BvhError("expected '{'", bnum)
        off_line, onum = cur.next()
        off_words = off_line.split()
        if off_words[0] != "OFFSET" or len(off_words) != 4:
            raise BvhError("expected OFFSET with three values", onum)
        try:
            offset = np.array([float(w) for w in off_words[1:]])
        except ValueError:
            raise BvhError("malformed OFFSET values", onum)

        channels: list[str] = []
        if not is_end:
            ch_line, cnum = cur.next()
            ch_words = ch_line.split()
            if ch_words[0] != "CHANNELS":
                raise BvhError("expected CHANNELS", cnum)
            try:
                n_ch = int(ch_words[1])
            except (IndexError, ValueError):
                raise BvhError("malformed CHANNELS count", cnum)
            channels = ch_words[2:]
            if len(channels) != n_ch:
                raise BvhError(
                    f"CHANNELS declares {n_ch} but lists {len(channels)}", cnum
                )
            for ch in channels:
                if ch not in VALID_CHANNELS:
                    raise BvhError(f"unknown channel {ch!r}", cnum)

        idx = len(joints)
        joints.append(
            BvhJoint(
                name=name,
                parent=parent,
                offset=offset,
                channels=channels,
                is_end_site=is_end,
            )
        )

        while True:
            nxt, nnum = cur.next()
            if nxt == "}":
                return
            parse_joint_block(nxt, nnum, idx)

    header, hnum = cur.next()
    if not header.startswith("ROOT"):
        raise BvhError("expected ROOT", hnum)
    parse_joint_block(header, hnum, -1)

    item = cur.peek()
    if item is None or item[0] != "MOTION":
        raise BvhError("missing MOTION section", item[1] if item else len(cur.raw))
    cur.next()

    fline, fnum = cur.next()
    if not fline.startswith("Frames:"):
        raise BvhError("expected 'Frames:'", fnum)
    try:
        frame_count = int(fline.split(":", 1)[1])
    except ValueError:
        raise BvhError("malformed frame count", fnum)
    tline, tnum = cur.next()
    if not tline.startswith("Frame Time:"):
        raise BvhError("expected 'Frame Time:'", tnum)
    try:
        frame_time = float(tline.split(":", 1)[1])
    except ValueError:
        raise BvhError("malformed frame time", tnum)
    if frame_time <= 0:
        raise BvhError("frame time must be positive", tnum)

    total = sum(len(j.channels) for j in joints)
    frames = np.zeros((frame_count, total))
    for f in range(frame_count):
        row, rnum = cur.next()
        values = row.split()
        if len(values) != total:
            raise BvhError(
                f"frame has {len(values)} channels, hierarchy declares {total}",
                rnum,
            )
        try:
            frames[f] = [float(v) for v in values]
        except ValueError:
            raise BvhError("malformed frame value", rnum)

    return BvhDocument(
        joints=joints, frame_count=frame_count, frame_time=frame_time, frames=frames
    )


def write_bvh(doc: BvhDocument, float_format: str = "%.6f") -> str:
    """Render a document back to BVH text."""
    children: list[list[int]] = [[] for _ in doc.joints]
    root = None
    for i, j in enumerate(doc.joints):
        if j.parent < 0:
            root = i
        else:
            children[j.parent].append(i)
    if root is None:
        raise ValueError("document has no root joint")

    out: list[str] = ["HIERARCHY"]

    def fmt(v: float) -> str:
        return float_format % v

    def emit(idx: int, depth: int):
        j = doc.joints[idx]
        pad = "\t" * depth
        if j.is_end_site:
            out.append(f"{pad}End Site")
        elif j.parent < 0:
            out.append(f"{pad}ROOT {j.name}")
        else:
            out.append(f"{pad}JOINT {j.name}")
        out.append(f"{pad}{{")
        out.append(
            f"{pad}\tOFFSET {fmt(j.offset[0])} {fmt(j.offset[1])} {fmt(j.offset[2])}"
        )
        if not j.is_end_site:
            out.append(f"{pad}\tCHANNELS {len(j.channels)} {' '.join(j.channels)}")
        for c in children[idx]:
            emit(c, depth + 1)
        out.append(f"{pad}}}")

    emit(root, 0)
    out.append("MOTION")
    out.append(f"Frames: {doc.frame_count}")
    out.append(f"Frame Time: {fmt(doc.frame_time)}")
    for f in range(doc.frame_count):
        out.append(" ".join(fmt(v) for v in doc.frames[f]))
    return "\n".join(out) + "\n"
