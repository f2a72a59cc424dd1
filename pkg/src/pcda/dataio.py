"""Bit-exact readers and writers for all on-disk artifacts.

Four custom little-endian binary formats plus a text manifest:

  point cloud  magic "PCDA", u8 flags (bit0 intensity, bit1 labels), u32 n,
               then n records of f32 x, f32 y, f32 z, [f32 intensity], [i32 label]
  calibration  text lines ``key = v1 v2 ...`` with keys K, R, T, size
  feature map  magic "FMAP", u32 h, u32 w, u32 c, then h*w*c f32 row-major
  mask map     magic "IMSK", u32 h, u32 w, then h*w u16 ids (0 = background)
  manifest     one line per sample:
               ``sample_id domain cloud_path [calib featmap maskmap|-]...``

Byte order is little-endian regardless of host so files reproduce across
machines. Every write-then-read round trip is the identity on the stored
single-precision values.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .core import (
    SOURCE,
    TARGET,
    CameraCalibration,
    DomainSample,
    FeatureMap,
    MaskMap,
    PointCloud,
    validate,
    validate_calibration,
)

PCDA_MAGIC = b"PCDA"
FMAP_MAGIC = b"FMAP"
IMSK_MAGIC = b"IMSK"

FLAG_INTENSITY = 0x01
FLAG_LABELS = 0x02


class DataIOError(Exception):
    """Base class for every dataio failure."""


class BadMagic(DataIOError):
    def __init__(self, path, expected, got, offset=0):
        super().__init__(f"{path}: bad magic at byte {offset}: expected {expected!r}, got {got!r}")
        self.offset = offset


class TruncatedFile(DataIOError):
    def __init__(self, path, needed, have, offset):
        super().__init__(f"{path}: truncated at byte {offset}: need {needed} bytes, have {have}")
        self.offset = offset


class NonFiniteValue(DataIOError):
    def __init__(self, path, offset):
        super().__init__(f"{path}: non-finite value at byte {offset}")
        self.offset = offset


class SizeMismatch(DataIOError):
    def __init__(self, path, declared, actual):
        super().__init__(f"{path}: declared payload {declared} bytes, actual {actual}")


class MissingKey(DataIOError):
    def __init__(self, path, key):
        super().__init__(f"{path}: missing key {key!r}")
        self.key = key


class DuplicateKey(DataIOError):
    def __init__(self, path, key):
        super().__init__(f"{path}: duplicate key {key!r}")
        self.key = key


class ParseError(DataIOError):
    def __init__(self, path, line_no, msg):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


class InvariantViolation(DataIOError):
    def __init__(self, path, violations):
        super().__init__(f"{path}: " + "; ".join(violations))
        self.violations = list(violations)


class DanglingPath(DataIOError):
    def __init__(self, path, line_no, missing):
        super().__init__(f"{path}:{line_no}: referenced path does not exist: {missing}")


class DuplicateSampleId(DataIOError):
    def __init__(self, path, line_no, sample_id):
        super().__init__(f"{path}:{line_no}: duplicate sample_id {sample_id}")


def _read_exact(data, offset, count, path):
    if offset + count > len(data):
        raise TruncatedFile(path, count, len(data) - offset, offset)
    return data[offset : offset + count], offset + count


# ---------------------------------------------------------------------------
# point clouds


def write_point_cloud(path, cloud: PointCloud) -> None:
    flags = 0
    if cloud.intensity is not None:
        flags |= FLAG_INTENSITY
    if cloud.labels is not None:
        flags |= FLAG_LABELS
    n = cloud.n
    pos = np.ascontiguousarray(cloud.positions, dtype="<f4")
    if not np.all(np.isfinite(pos)):
        bad = int(np.flatnonzero(~np.isfinite(pos.reshape(-1)))[0])
        raise NonFiniteValue(path, 9 + _record_stride(flags) * (bad // 3) + 4 * (bad % 3))
    parts = [pos.reshape(n, 3)]
    if cloud.intensity is not None:
        inten = np.ascontiguousarray(cloud.intensity, dtype="<f4").reshape(n, 1)
        if not np.all(np.isfinite(inten)):
            bad = int(np.flatnonzero(~np.isfinite(inten.reshape(-1)))[0])
            raise NonFiniteValue(path, 9 + _record_stride(flags) * bad + 12)
        parts.append(inten)
    if cloud.labels is not None:
        # i32 labels ride along as raw bytes inside the f32 record stream
        lab = np.ascontiguousarray(cloud.labels, dtype="<i4").reshape(n, 1)
        parts.append(lab.view("<f4"))
    records = np.concatenate(parts, axis=1) if n else np.zeros((0, 0), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(PCDA_MAGIC)
        fh.write(struct.pack("<BI", flags, n))
        fh.write(records.tobytes())


def _record_stride(flags: int) -> int:
    stride = 12
    if flags & FLAG_INTENSITY:
        stride += 4
    if flags & FLAG_LABELS:
        stride += 4
    return stride


def read_point_cloud(path) -> PointCloud:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, off = _read_exact(data, 0, 4, path)
    if magic != PCDA_MAGIC:
        raise BadMagic(path, PCDA_MAGIC, magic, 0)
    head, off = _read_exact(data, off, 5, path)
    flags, n = struct.unpack("<BI", head)
    stride = _record_stride(flags)
    payload, off = _read_exact(data, off, stride * n, path)
    if len(data) != off:
        raise SizeMismatch(path, off, len(data))
    records = np.frombuffer(payload, dtype="<f4").reshape(n, stride // 4)
    positions = records[:, :3].astype(np.float64)
    col = 3
    intensity = None
    labels = None
    if flags & FLAG_INTENSITY:
        intensity = records[:, col].astype(np.float64)
        col += 1
    if flags & FLAG_LABELS:
        labels = records[:, col].copy().view("<i4").astype(np.int64)
    floats = records[:, : 3 + bool(flags & FLAG_INTENSITY)]
    if not np.all(np.isfinite(floats)):
        rows, cols = np.nonzero(~np.isfinite(floats))
        raise NonFiniteValue(path, 9 + stride * int(rows[0]) + 4 * int(cols[0]))
    return PointCloud(positions=positions, intensity=intensity, labels=labels)


# ---------------------------------------------------------------------------
# calibrations

_CALIB_KEYS = {"K": 9, "R": 9, "T": 3, "size": 2}


def write_calibration(path, calib: CameraCalibration) -> None:
    lines = []
    for key, values in (
        ("K", calib.intrinsic.reshape(-1)),
        ("R", calib.rotation.reshape(-1)),
        ("T", calib.translation),
    ):
        lines.append(f"{key} = " + " ".join(f"{v:.17g}" for v in values))
    lines.append(f"size = {calib.width} {calib.height}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_calibration(path) -> CameraCalibration:
    seen = {}
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(path, line_no, f"expected 'key = values', got {line!r}")
            key, _, rest = line.partition("=")
            key = key.strip()
            if key not in _CALIB_KEYS:
                raise ParseError(path, line_no, f"unknown key {key!r}")
            if key in seen:
                raise DuplicateKey(path, key)
            tokens = rest.split()
            if len(tokens) != _CALIB_KEYS[key]:
                raise ParseError(path, line_no, f"key {key!r} expects {_CALIB_KEYS[key]} values, got {len(tokens)}")
            try:
                if key == "size":
                    seen[key] = [int(t) for t in tokens]
                else:
                    seen[key] = [float(t) for t in tokens]
            except ValueError as exc:
                raise ParseError(path, line_no, str(exc)) from None
    for key in _CALIB_KEYS:
        if key not in seen:
            raise MissingKey(path, key)
    calib = CameraCalibration(
        intrinsic=np.array(seen["K"]).reshape(3, 3),
        rotation=np.array(seen["R"]).reshape(3, 3),
        translation=np.array(seen["T"]),
        width=seen["size"][0],
        height=seen["size"][1],
    )
    violations = validate_calibration(calib)
    if violations:
        raise InvariantViolation(path, violations)
    return calib


# ---------------------------------------------------------------------------
# feature maps


def write_feature_map(path, fm: FeatureMap) -> None:
    data = np.ascontiguousarray(fm.data, dtype="<f4")
    if not np.all(np.isfinite(data)):
        bad = int(np.flatnonzero(~np.isfinite(data.reshape(-1)))[0])
        raise NonFiniteValue(path, 16 + 4 * bad)
    with open(path, "wb") as fh:
        fh.write(FMAP_MAGIC)
        fh.write(struct.pack("<III", fm.height, fm.width, fm.channels))
        fh.write(data.tobytes())


def read_feature_map(path) -> FeatureMap:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, off = _read_exact(data, 0, 4, path)
    if magic != FMAP_MAGIC:
        raise BadMagic(path, FMAP_MAGIC, magic, 0)
    head, off = _read_exact(data, off, 12, path)
    h, w, c = struct.unpack("<III", head)
    declared = 4 * h * w * c
    actual = len(data) - off
    if declared != actual:
        raise SizeMismatch(path, declared, actual)
    values = np.frombuffer(data, dtype="<f4", offset=off)
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values))[0])
        raise NonFiniteValue(path, off + 4 * bad)
    return FeatureMap(values.reshape(h, w, c).copy())


# ---------------------------------------------------------------------------
# mask maps


def write_mask_map(path, mm: MaskMap) -> None:
    with open(path, "wb") as fh:
        fh.write(IMSK_MAGIC)
        fh.write(struct.pack("<II", mm.height, mm.width))
        fh.write(np.ascontiguousarray(mm.ids, dtype="<u2").tobytes())


def read_mask_map(path) -> MaskMap:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, off = _read_exact(data, 0, 4, path)
    if magic != IMSK_MAGIC:
        raise BadMagic(path, IMSK_MAGIC, magic, 0)
    head, off = _read_exact(data, off, 8, path)
    h, w = struct.unpack("<II", head)
    declared = 2 * h * w
    actual = len(data) - off
    if declared != actual:
        raise SizeMismatch(path, declared, actual)
    ids = np.frombuffer(data, dtype="<u2", offset=off).reshape(h, w)
    return MaskMap(ids.copy())


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    """One manifest line; paths already resolved against the manifest dir."""

    sample_id: int
    domain: str
    cloud_path: str
    views: tuple  # of (calib_path, featmap_path, maskmap_path | None)

    def load(self) -> DomainSample:
        cloud = read_point_cloud(self.cloud_path)
        views = []
        for calib_path, fmap_path, mask_path in self.views:
            calib = read_calibration(calib_path)
            fmap = read_feature_map(fmap_path)
            mask = read_mask_map(mask_path) if mask_path is not None else None
            views.append((calib, fmap, mask))
        sample = DomainSample(cloud=cloud, views=tuple(views), domain=self.domain, sample_id=self.sample_id)
        violations = validate(sample)
        if violations:
            raise InvariantViolation(self.cloud_path, violations)
        return sample


def read_manifest(path) -> list:
    """Parse a manifest into lazily loadable entries.

    Referenced paths are resolved relative to the manifest's directory and
    must exist; call entry.load() for the full DomainSample.
    """
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    seen_ids = set()
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if len(tokens) < 3:
                raise ParseError(path, line_no, "expected 'sample_id domain cloud_path ...'")
            try:
                sample_id = int(tokens[0])
            except ValueError:
                raise ParseError(path, line_no, f"bad sample_id {tokens[0]!r}") from None
            domain = tokens[1]
            if domain not in (SOURCE, TARGET):
                raise ParseError(path, line_no, f"unknown domain {domain!r}")
            if sample_id in seen_ids:
                raise DuplicateSampleId(path, line_no, sample_id)
            seen_ids.add(sample_id)
            rest = tokens[3:]
            if len(rest) % 3 != 0:
                raise ParseError(path, line_no, "view paths must come in (calib featmap maskmap|-) triples")
            paths = [os.path.join(base, tokens[2])]
            views = []
            for i in range(0, len(rest), 3):
                calib_path = os.path.join(base, rest[i])
                fmap_path = os.path.join(base, rest[i + 1])
                mask_path = None if rest[i + 2] == "-" else os.path.join(base, rest[i + 2])
                views.append((calib_path, fmap_path, mask_path))
                paths.extend(p for p in (calib_path, fmap_path, mask_path) if p is not None)
            for p in paths:
                if not os.path.isfile(p):
                    raise DanglingPath(path, line_no, p)
            entries.append(
                ManifestEntry(sample_id=sample_id, domain=domain, cloud_path=paths[0], views=tuple(views))
            )
    return entries


def write_manifest(path, entries) -> None:
    """Write entries with paths re-expressed relative to the manifest dir."""
    base = os.path.dirname(os.path.abspath(path))
    lines = []
    for e in entries:
        tokens = [str(e.sample_id), e.domain, os.path.relpath(e.cloud_path, base)]
        for calib_path, fmap_path, mask_path in e.views:
            tokens.append(os.path.relpath(calib_path, base))
            tokens.append(os.path.relpath(fmap_path, base))
            tokens.append("-" if mask_path is None else os.path.relpath(mask_path, base))
        lines.append(" ".join(tokens))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def load_samples(manifest_path) -> list:
    """Read a manifest and load every sample eagerly."""
    return [e.load() for e in read_manifest(manifest_path)]
