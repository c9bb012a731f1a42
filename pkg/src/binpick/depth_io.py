"""16-bit PGM depth files with a plain-text sidecar for intrinsics and pose.

Depth is stored in 0.1 mm units, 0 meaning "no measurement". The sidecar
(``<stem>.txt`` next to ``<stem>.pgm``) holds ``key = value`` lines.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .fusion import DepthImage
from .geometry import Intrinsics, Pose

DEPTH_UNIT_MM = 0.1
MAX_DEPTH_MM = 65535 * DEPTH_UNIT_MM


class MalformedDepthFile(ValueError):
    pass


def quantize(img: DepthImage) -> DepthImage:
    """The image as it will read back after a PGM round trip."""
    return decode_counts(encode_counts(img))


def encode_counts(img: DepthImage, drop_out_of_range: bool = False) -> np.ndarray:
    """Big-endian 0.1 mm counts; depths past the format's range raise unless dropped as holes."""
    counts = np.rint(img.depth / DEPTH_UNIT_MM)
    counts[~img.valid] = 0
    far = counts > 65535
    if far.any():
        if not drop_out_of_range:
            raise ValueError(f"depth exceeds the {MAX_DEPTH_MM} mm range of 16-bit PGM")
        counts[far] = 0
    return counts.astype(">u2")


def decode_counts(counts: np.ndarray) -> DepthImage:
    counts = np.asarray(counts, dtype=np.int64)
    return DepthImage(counts * DEPTH_UNIT_MM, counts > 0)


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        if data[pos : pos + 1].isspace():
            pos += 1
        elif data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise MalformedDepthFile("unexpected end of PGM header")
    return data[start:pos], pos


def write_pgm(path, img: DepthImage, drop_out_of_range: bool = False) -> None:
    header = f"P5\n{img.width} {img.height}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + encode_counts(img, drop_out_of_range).tobytes())


def read_pgm(path) -> DepthImage:
    data = Path(path).read_bytes()
    try:
        magic, pos = _read_token(data, 0)
        if magic != b"P5":
            raise MalformedDepthFile(f"not a binary PGM (magic {magic!r})")
        w, pos = _read_token(data, pos)
        h, pos = _read_token(data, pos)
        maxval, pos = _read_token(data, pos)
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        if isinstance(exc, MalformedDepthFile):
            raise
        raise MalformedDepthFile(f"bad PGM header: {exc}") from exc
    if maxval != 65535:
        raise MalformedDepthFile(f"expected 16-bit PGM (maxval 65535), got {maxval}")
    if width <= 0 or height <= 0:
        raise MalformedDepthFile("PGM dimensions must be positive")
    pos += 1  # single whitespace after maxval
    need = width * height * 2
    body = data[pos : pos + need]
    if len(body) != need:
        raise MalformedDepthFile(f"truncated PGM: expected {need} data bytes, found {len(body)}")
    return decode_counts(np.frombuffer(body, dtype=">u2").reshape(height, width))


def sidecar_path(pgm_path) -> Path:
    return Path(pgm_path).with_suffix(".txt")


def write_sidecar(path, k: Intrinsics, pose: Pose) -> None:
    r = " ".join(repr(float(x)) for x in pose.rotation.reshape(-1))
    t = " ".join(repr(float(x)) for x in pose.translation)
    lines = [
        f"fx = {float(k.fx)!r}",
        f"fy = {float(k.fy)!r}",
        f"cx = {float(k.cx)!r}",
        f"cy = {float(k.cy)!r}",
        f"width = {k.width}",
        f"height = {k.height}",
        f"rotation = {r}",
        f"translation = {t}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_sidecar(path) -> tuple[Intrinsics, Pose]:
    fields: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise MalformedDepthFile(f"{path}: cannot read sidecar: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise MalformedDepthFile(f"{path}:{lineno}: expected 'key = value'")
        fields[key.strip()] = value.strip()
    try:
        k = Intrinsics(
            float(fields["fx"]), float(fields["fy"]), float(fields["cx"]), float(fields["cy"]),
            int(fields["width"]), int(fields["height"]),
        )
        rot = np.array([float(x) for x in fields["rotation"].split()]).reshape(3, 3)
        trans = np.array([float(x) for x in fields["translation"].split()]).reshape(3)
        pose = Pose(rot, trans)
    except (KeyError, ValueError) as exc:
        raise MalformedDepthFile(f"{path}: bad sidecar: {exc}") from exc
    return k, pose


def save_view(pgm_path, img: DepthImage, k: Intrinsics, pose: Pose, drop_out_of_range: bool = False) -> None:
    write_pgm(pgm_path, img, drop_out_of_range)
    write_sidecar(sidecar_path(pgm_path), k, pose)


def load_view(pgm_path) -> tuple[DepthImage, Intrinsics, Pose]:
    img = read_pgm(pgm_path)
    k, pose = read_sidecar(sidecar_path(pgm_path))
    if (img.width, img.height) != (k.width, k.height):
        raise MalformedDepthFile(f"{pgm_path}: image size does not match its sidecar")
    return img, k, pose
