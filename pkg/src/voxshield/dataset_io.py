"""Portable bit-exact dataset storage.

Directory layout (a stable external contract):

    <dir>/manifest.json
    <dir>/data/<id>.f32     raw little-endian IEEE-754 float32, C-order (C,D,H,W)
    <dir>/labels/<id>.u8    raw unsigned 8-bit class indices, C-order (D,H,W)

The manifest is the single source of truth for shapes, classes, spacing,
provenance, and per-file CRC-32 checksums; the raw files carry no header.
"""

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .volume import LabelMap, ProtectedVolume, Volume

FORMAT_VERSION = "1"
MANIFEST_NAME = "manifest.json"


class DatasetCorruptionError(Exception):
    """A dataset file is missing, truncated, or fails its checksum."""


@dataclass(frozen=True)
class VolumeEntry:
    id: str
    data_path: str
    label_path: str
    shape: tuple  # (C, D, H, W)
    num_classes: int
    spacing: tuple
    protected: bool
    generator_fingerprint: Optional[str]
    data_crc32: int
    label_crc32: int


@dataclass(frozen=True)
class DatasetManifest:
    format_version: str
    prng_name: str
    config_hash: str
    volumes: tuple

    def ids(self):
        return [v.id for v in self.volumes]

    def to_dict(self):
        return {
            "format_version": self.format_version,
            "prng_name": self.prng_name,
            "config_hash": self.config_hash,
            "volumes": [
                {
                    "id": v.id,
                    "data": v.data_path,
                    "labels": v.label_path,
                    "shape": list(v.shape),
                    "num_classes": v.num_classes,
                    "spacing": list(v.spacing),
                    "protected": v.protected,
                    "generator_fingerprint": v.generator_fingerprint,
                    "data_crc32": v.data_crc32,
                    "label_crc32": v.label_crc32,
                }
                for v in self.volumes
            ],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format_version") != FORMAT_VERSION:
            raise DatasetCorruptionError(
                f"unsupported manifest format_version {d.get('format_version')!r}"
            )
        vols = tuple(
            VolumeEntry(
                id=e["id"],
                data_path=e["data"],
                label_path=e["labels"],
                shape=tuple(e["shape"]),
                num_classes=int(e["num_classes"]),
                spacing=tuple(e["spacing"]),
                protected=bool(e["protected"]),
                generator_fingerprint=e.get("generator_fingerprint"),
                data_crc32=int(e["data_crc32"]),
                label_crc32=int(e["label_crc32"]),
            )
            for e in d["volumes"]
        )
        ids = [v.id for v in vols]
        if len(set(ids)) != len(ids):
            raise DatasetCorruptionError("duplicate volume ids in manifest")
        return cls(d["format_version"], d["prng_name"], d["config_hash"], vols)


def save_dataset(pairs, out_dir, *, prng_name: str, config_hash: str) -> DatasetManifest:
    """Write pairs of (Volume|ProtectedVolume, LabelMap) plus a manifest.

    Refuses to overwrite an existing manifest; cleans up partially written
    files if any write fails. Shape consistency is checked before anything
    touches the disk.
    """
    out_dir = Path(out_dir)
    if (out_dir / MANIFEST_NAME).exists():
        raise FileExistsError(f"{out_dir / MANIFEST_NAME} already exists")

    ids = [vol.id for vol, _ in pairs]
    if len(set(ids)) != len(ids):
        raise ValueError("volume ids must be unique")
    for vol, label in pairs:
        if vol.spatial_shape != label.spatial_shape:
            raise ValueError(
                f"{vol.id}: volume spatial shape {vol.spatial_shape} "
                f"!= label shape {label.spatial_shape}"
            )

    (out_dir / "data").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    written = []
    entries = []
    try:
        for vol, label in pairs:
            data_rel = f"data/{vol.id}.f32"
            label_rel = f"labels/{vol.id}.u8"
            data_bytes = np.ascontiguousarray(vol.data, dtype="<f4").tobytes()
            label_bytes = np.ascontiguousarray(label.classes, dtype=np.uint8).tobytes()
            for rel, blob in ((data_rel, data_bytes), (label_rel, label_bytes)):
                path = out_dir / rel
                path.write_bytes(blob)
                written.append(path)
            entries.append(
                VolumeEntry(
                    id=vol.id,
                    data_path=data_rel,
                    label_path=label_rel,
                    shape=tuple(vol.data.shape),
                    num_classes=label.num_classes,
                    spacing=tuple(vol.spacing),
                    protected=isinstance(vol, ProtectedVolume),
                    generator_fingerprint=getattr(vol, "generator_fingerprint", None),
                    data_crc32=zlib.crc32(data_bytes),
                    label_crc32=zlib.crc32(label_bytes),
                )
            )
        manifest = DatasetManifest(FORMAT_VERSION, prng_name, config_hash, tuple(entries))
        payload = json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n"
        manifest_path = out_dir / MANIFEST_NAME
        manifest_path.write_text(payload)
        written.append(manifest_path)
    except Exception:
        for path in written:
            path.unlink(missing_ok=True)
        raise
    return manifest


def load_manifest(dataset_dir) -> DatasetManifest:
    path = Path(dataset_dir) / MANIFEST_NAME
    if not path.exists():
        raise DatasetCorruptionError(f"missing manifest: {path}")
    return DatasetManifest.from_dict(json.loads(path.read_text()))


def _read_checked(path: Path, expected_bytes: int, expected_crc: int):
    if not path.exists():
        raise DatasetCorruptionError(f"missing file: {path}")
    blob = path.read_bytes()
    if len(blob) != expected_bytes:
        raise DatasetCorruptionError(
            f"{path}: expected {expected_bytes} bytes, found {len(blob)}"
        )
    if zlib.crc32(blob) != expected_crc:
        raise DatasetCorruptionError(f"{path}: CRC-32 mismatch")
    return blob


def load_dataset(dataset_dir):
    """Byte-exact inverse of save_dataset. Returns [(volume, label), ...]."""
    dataset_dir = Path(dataset_dir)
    manifest = load_manifest(dataset_dir)
    pairs = []
    for e in manifest.volumes:
        c, d, h, w = e.shape
        data_blob = _read_checked(dataset_dir / e.data_path, 4 * c * d * h * w, e.data_crc32)
        label_blob = _read_checked(dataset_dir / e.label_path, d * h * w, e.label_crc32)
        data = np.frombuffer(data_blob, dtype="<f4").reshape(e.shape)
        classes = np.frombuffer(label_blob, dtype=np.uint8).reshape((d, h, w))
        if e.protected:
            vol = ProtectedVolume(
                data,
                source_id=e.id,
                generator_fingerprint=e.generator_fingerprint or "",
                spacing=e.spacing,
            )
        else:
            vol = Volume(data, id=e.id, spacing=e.spacing)
        pairs.append((vol, LabelMap(classes, num_classes=e.num_classes)))
    return pairs
