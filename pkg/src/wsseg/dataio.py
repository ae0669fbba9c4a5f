"""On-disk formats: SGT1 tensor files, TSV manifests and checkpoints.

Tensor file layout (little-endian)::

    b"SGT1" | dtype u8 | rank u8 | rank x u32 dims | row-major payload

Manifest: UTF-8, ``#key=value`` header lines, then one tab-separated record
per image with the columns in ``MANIFEST_COLUMNS``. Subsets are comma
separated ids, ``-`` for none. Sparse records use ``axis:index=ids;...``.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .labels import AnnotatedSubset, AnnotatedVolume, ClassSet, InvalidAnnotationError

MAGIC = b"SGT1"
CKPT_MAGIC = b"SGCK"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4"), 2: np.dtype("u1")}
_KIND_CODES = {(dt.kind, dt.itemsize): code for code, dt in DTYPES.items()}
MAX_ELEMENTS = 1 << 31

MANIFEST_COLUMNS = ("image_id", "intensity_path", "labels_path", "dataset_id",
                    "modality_id", "labeling", "subsets", "full_labels_path")


class FormatError(ValueError):
    def __init__(self, msg, offset=None):
        if offset is not None:
            msg = f"{msg} (at byte {offset})"
        super().__init__(msg)
        self.offset = offset


class IngestionError(ValueError):
    pass


def encode_tensor(array) -> bytes:
    a = np.asarray(array)
    code = _KIND_CODES.get((a.dtype.kind, a.dtype.itemsize))
    if code is None:
        raise FormatError(f"unsupported dtype {a.dtype}")
    if a.ndim > 255:
        raise FormatError(f"rank {a.ndim} too large")
    header = MAGIC + struct.pack("<BB", code, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a, dtype=DTYPES[code]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns it and the end offset."""
    if len(buf) - offset < 6:
        raise FormatError("truncated header", offset)
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[offset:offset + 4])!r}", offset)
    code, rank = struct.unpack_from("<BB", buf, offset + 4)
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset + 4)
    pos = offset + 6
    if len(buf) - pos < 4 * rank:
        raise FormatError("truncated dims", pos)
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = 1
    for d in dims:
        count *= d
        if count > MAX_ELEMENTS:
            raise FormatError(f"dims {dims} overflow the element limit", offset + 6)
    nbytes = count * DTYPES[code].itemsize
    if len(buf) - pos < nbytes:
        raise FormatError(
            f"truncated payload: need {nbytes} bytes, have {len(buf) - pos}", pos)
    arr = np.frombuffer(buf, dtype=DTYPES[code], count=count, offset=pos).reshape(dims)
    return arr.copy(), pos + nbytes


def write_tensor(path, array):
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes", end)
    return arr


# manifests ------------------------------------------------------------------

def format_subset(members) -> str:
    return ",".join(str(m) for m in members) if len(members) else "-"


def parse_subset(text: str) -> tuple[int, ...]:
    text = text.strip()
    if text in ("", "-"):
        return ()
    return tuple(int(t) for t in text.split(","))


def format_annotation(ann) -> str:
    if isinstance(ann, AnnotatedSubset):
        return format_subset(ann.members)
    if not ann:
        return "-"
    return ";".join(f"{s.axis}:{s.index}={format_subset(s.members)}" for s in ann)


def parse_annotation(kind: str, text: str):
    if kind == "partial":
        return AnnotatedSubset(parse_subset(text))
    if kind != "sparse":
        raise IngestionError(f"unknown labeling kind {kind!r}")
    text = text.strip()
    if text in ("", "-"):
        return ()
    out = []
    for item in text.split(";"):
        where, ids = item.split("=")
        axis, index = where.split(":")
        out.append(AnnotatedSubset(parse_subset(ids), int(axis), int(index)))
    return tuple(out)


@dataclass
class ManifestRecord:
    image_id: str
    intensity_path: str
    labels_path: str
    dataset_id: str
    modality_id: str
    labeling: str
    subsets: str
    full_labels_path: str | None = None

    def to_line(self) -> str:
        vals = [getattr(self, c) for c in MANIFEST_COLUMNS]
        vals[-1] = vals[-1] or "-"
        return "\t".join(vals)


def write_manifest(path, records, meta: dict):
    lines = [f"#{k}={v}" for k, v in meta.items()]
    lines.append("#" + "\t".join(MANIFEST_COLUMNS))
    lines.extend(r.to_line() for r in records)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> tuple[dict, list[ManifestRecord]]:
    meta: dict[str, str] = {}
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            if "=" in line and "\t" not in line:
                k, v = line[1:].split("=", 1)
                meta[k.strip()] = v.strip()
            continue
        fields = line.split("\t")
        if len(fields) != len(MANIFEST_COLUMNS):
            raise IngestionError(
                f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} fields, got {len(fields)}")
        rec = ManifestRecord(*fields)
        if rec.full_labels_path == "-":
            rec.full_labels_path = None
        expected = f"{rec.dataset_id}_{rec.modality_id}_"
        if not rec.image_id.startswith(expected) or len(rec.image_id) == len(expected):
            raise IngestionError(
                f"{path}:{lineno}: image id {rec.image_id!r} lacks prefix {expected!r}")
        records.append(rec)
    return meta, records


@dataclass
class LoadedImage:
    volume: AnnotatedVolume
    full_labels: np.ndarray | None


def load_corpus(manifest_path) -> tuple[ClassSet, list[LoadedImage]]:
    """Load and validate every record in manifest order."""
    manifest_path = Path(manifest_path)
    meta, records = read_manifest(manifest_path)
    if "n_structures" not in meta:
        raise IngestionError(f"{manifest_path}: missing #n_structures header")
    classes = ClassSet(int(meta["n_structures"]))
    root = manifest_path.parent
    seen = set()
    out = []
    for rec in records:
        if rec.image_id in seen:
            raise IngestionError(f"duplicate image id {rec.image_id!r}")
        seen.add(rec.image_id)
        arrays = []
        for p in (rec.intensity_path, rec.labels_path, rec.full_labels_path):
            if p is None:
                arrays.append(None)
                continue
            fp = root / p
            if not fp.exists():
                raise IngestionError(f"image {rec.image_id!r}: missing file {fp}")
            try:
                arrays.append(read_tensor(fp))
            except FormatError as e:
                raise IngestionError(f"image {rec.image_id!r}: {fp}: {e}") from e
        inten, labels, full = arrays
        try:
            ann = parse_annotation(rec.labeling, rec.subsets)
            vol = AnnotatedVolume(inten, labels, ann, classes,
                                  rec.dataset_id, rec.modality_id, rec.image_id)
        except (InvalidAnnotationError, ValueError) as e:
            raise IngestionError(f"image {rec.image_id!r}: {e}") from e
        if full is not None:
            released = vol.labels > 0
            if full.shape != labels.shape or np.any(full[released] != labels[released]):
                raise IngestionError(
                    f"image {rec.image_id!r}: full labels contradict released labels")
        out.append(LoadedImage(vol, full))
    return classes, out


def write_corpus(out_dir, corpus, meta: dict | None = None):
    """Write tensors plus ``train.tsv``/``test.tsv`` manifests."""
    out_dir = Path(out_dir)
    (out_dir / "tensors").mkdir(parents=True, exist_ok=True)
    by_split: dict[str, list[ManifestRecord]] = {"train": [], "test": []}
    n = None
    for gt in corpus:
        v = gt.volume
        n = v.classes.n_structures
        stem = f"tensors/{v.image_id}"
        write_tensor(out_dir / f"{stem}.img.sgt", v.intensities.astype(np.float32))
        write_tensor(out_dir / f"{stem}.lab.sgt", v.labels.astype(np.int32))
        full = None
        if gt.full_labels is not None:
            full = f"{stem}.full.sgt"
            write_tensor(out_dir / full, gt.full_labels.astype(np.int32))
        kind = "sparse" if v.is_sparse else "partial"
        by_split.setdefault(gt.split, []).append(ManifestRecord(
            v.image_id, f"{stem}.img.sgt", f"{stem}.lab.sgt", v.dataset_id,
            v.modality_id, kind, format_annotation(v.annotation), full))
    header = {"n_structures": n}
    header.update(meta or {})
    paths = {}
    for split, recs in by_split.items():
        paths[split] = out_dir / f"{split}.tsv"
        write_manifest(paths[split], recs, header)
    return paths


# checkpoints ----------------------------------------------------------------

def encode_checkpoint(params: dict, meta: dict) -> bytes:
    """``SGCK | u32 meta length | JSON meta | per param: u16 name length | name | SGT1``."""
    buf = io.BytesIO()
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(CKPT_MAGIC + struct.pack("<I", len(blob)) + blob)
    for name in sorted(params):
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(encode_tensor(params[name]))
    return buf.getvalue()


def decode_checkpoint(buf: bytes) -> tuple[dict, dict]:
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {bytes(buf[:4])!r}", 0)
    if len(buf) < 8:
        raise FormatError("truncated checkpoint header", 4)
    (n,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + n:
        raise FormatError("truncated checkpoint metadata", 8)
    meta = json.loads(buf[8:8 + n].decode("utf-8"))
    pos = 8 + n
    params = {}
    while pos < len(buf):
        if len(buf) - pos < 2:
            raise FormatError("truncated parameter name", pos)
        (ln,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2:pos + 2 + ln].decode("utf-8")
        params[name], pos = decode_tensor(buf, pos + 2 + ln)
    return params, meta


def write_checkpoint(path, params: dict, meta: dict):
    Path(path).write_bytes(encode_checkpoint(params, meta))


def read_checkpoint(path) -> tuple[dict, dict]:
    return decode_checkpoint(Path(path).read_bytes())


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
