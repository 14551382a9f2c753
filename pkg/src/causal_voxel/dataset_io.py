"""Synthetic cohort generation and the on-disk interchange formats:
a minimal single-file NIfTI-1 subset for volumes (348-byte header,
float32 little-endian payload, magic "n+1") and an RFC 4180 CSV manifest
with a JSON metadata sidecar carrying grid spec and provenance hashes.

All writes are atomic (temp file + rename); the manifest is written last so
a complete manifest implies complete volumes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .mechanisms import mechanisms_to_dict
from .phantom import PhantomGenerator, Volumes, VoxelGrid
from .scm import CausalGraph, sample_prior

__all__ = [
    "NiftiError",
    "NiftiBadMagic",
    "NiftiUnsupportedDataType",
    "NiftiTruncated",
    "write_volume",
    "read_volume",
    "SubjectRecord",
    "DatasetManifest",
    "write_manifest",
    "read_manifest",
    "validate_manifest",
    "sample_dataset",
    "style_for_record",
]

MANIFEST_FORMAT_VERSION = 1
MANIFEST_COLUMNS = [
    "subject_id", "age", "sex", "mmse", "brain_ml", "gm_ml", "ventricle_ml",
    "image_path", "style_seed", "noise_seed", "flagged",
]

NIFTI_HEADER_SIZE = 348
NIFTI_MAGIC = b"n+1\x00"
NIFTI_FLOAT32 = 16
NIFTI_VOX_OFFSET = 352.0


class NiftiError(IOError):
    """Base error for the NIfTI-1 subset reader."""


class NiftiBadMagic(NiftiError):
    pass


class NiftiUnsupportedDataType(NiftiError):
    pass


class NiftiTruncated(NiftiError):
    pass


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def _pack_header(dims, spacing: float) -> bytes:
    nx, ny, nz = dims
    buf = io.BytesIO()
    buf.write(struct.pack("<i", NIFTI_HEADER_SIZE))      # sizeof_hdr
    buf.write(bytes(10))                                 # data_type (unused)
    buf.write(bytes(18))                                 # db_name (unused)
    buf.write(struct.pack("<ihbb", 0, 0, 0, 0))          # extents..dim_info
    buf.write(struct.pack("<8h", 3, nx, ny, nz, 1, 1, 1, 1))  # dim
    buf.write(struct.pack("<3f", 0.0, 0.0, 0.0))         # intent params
    buf.write(struct.pack("<hhhh", 0, NIFTI_FLOAT32, 32, 0))  # intent/datatype/bitpix/slice_start
    buf.write(struct.pack("<8f", 1.0, spacing, spacing, spacing, 0, 0, 0, 0))  # pixdim
    buf.write(struct.pack("<fff", NIFTI_VOX_OFFSET, 1.0, 0.0))  # vox_offset, scl slope/inter
    buf.write(struct.pack("<hbb", 0, 0, 2))              # slice_end, slice_code, xyzt=mm
    buf.write(struct.pack("<4f", 0.0, 0.0, 0.0, 0.0))    # cal_max..toffset
    buf.write(struct.pack("<ii", 0, 0))                  # glmax, glmin (unused)
    buf.write(b"causal-voxel phantom".ljust(80, b"\x00"))  # descrip
    buf.write(bytes(24))                                 # aux_file
    buf.write(struct.pack("<hh", 0, 1))                  # qform_code=0, sform_code=1
    buf.write(struct.pack("<3f", 0.0, 0.0, 0.0))         # quaternion
    buf.write(struct.pack("<3f", 0.0, 0.0, 0.0))         # qoffset
    buf.write(struct.pack("<4f", spacing, 0, 0, 0))      # srow_x
    buf.write(struct.pack("<4f", 0, spacing, 0, 0))      # srow_y
    buf.write(struct.pack("<4f", 0, 0, spacing, 0))      # srow_z
    buf.write(bytes(16))                                 # intent_name
    buf.write(NIFTI_MAGIC)
    header = buf.getvalue()
    if len(header) != NIFTI_HEADER_SIZE:
        raise AssertionError(f"header is {len(header)} bytes, expected {NIFTI_HEADER_SIZE}")
    return header


def write_volume(path, vox: VoxelGrid) -> None:
    """Single-file .nii: header, 4-byte extender, Fortran-order float32."""
    header = _pack_header(vox.dims, float(vox.spacing))
    payload = np.asarray(vox.data, dtype="<f4").tobytes(order="F")
    _atomic_write(path, header + bytes(4) + payload)


def read_volume(path) -> VoxelGrid:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < NIFTI_HEADER_SIZE:
        raise NiftiTruncated(
            f"{path}: header needs {NIFTI_HEADER_SIZE} bytes, file has {len(blob)}"
        )
    if blob[344:348] != NIFTI_MAGIC:
        raise NiftiBadMagic(f"{path}: magic {blob[344:348]!r} is not {NIFTI_MAGIC!r}")
    (datatype,) = struct.unpack_from("<h", blob, 70)
    if datatype != NIFTI_FLOAT32:
        raise NiftiUnsupportedDataType(
            f"{path}: datatype {datatype} unsupported (only float32 = {NIFTI_FLOAT32})"
        )
    dim = struct.unpack_from("<8h", blob, 40)
    if dim[0] != 3:
        raise NiftiError(f"{path}: expected 3 dimensions, header says {dim[0]}")
    nx, ny, nz = dim[1:4]
    pixdim = struct.unpack_from("<8f", blob, 76)
    (vox_offset,) = struct.unpack_from("<f", blob, 108)
    offset = int(vox_offset)
    expected = offset + nx * ny * nz * 4
    if len(blob) < expected:
        raise NiftiTruncated(f"{path}: expected {expected} bytes, file has {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", count=nx * ny * nz, offset=offset)
    data = data.reshape((nx, ny, nz), order="F").astype(np.float64)
    return VoxelGrid(data, float(pixdim[1]))


@dataclass
class SubjectRecord:
    """One synthetic subject: demographics, volumes, and generation seeds."""

    subject_id: str
    age: float
    sex: float
    mmse: float
    brain_ml: float
    gm_ml: float
    ventricle_ml: float
    image_path: str
    style_seed: int
    noise_seed: int
    flagged: bool = False

    def validate(self) -> None:
        if min(self.brain_ml, self.gm_ml, self.ventricle_ml) <= 0:
            raise ValueError(f"{self.subject_id}: volumes must be positive")
        if not 0.0 <= self.mmse <= 30.0:
            raise ValueError(f"{self.subject_id}: MMSE {self.mmse} outside [0, 30]")


@dataclass
class DatasetManifest:
    format_version: int
    grid_dims: tuple
    grid_spacing: float
    seed: int
    provenance: dict = field(default_factory=dict)
    records: list = field(default_factory=list)

    def columns(self) -> dict:
        """Training-ready column arrays keyed by graph variable names."""
        return {
            "a": np.array([r.age for r in self.records]),
            "s": np.array([r.sex for r in self.records]),
            "m": np.array([r.mmse for r in self.records]),
            "b": np.array([r.brain_ml for r in self.records]),
            "g": np.array([r.gm_ml for r in self.records]),
            "v": np.array([r.ventricle_ml for r in self.records]),
        }


def _meta_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".meta.json")


def write_manifest(path, manifest: DatasetManifest) -> None:
    ids = [r.subject_id for r in manifest.records]
    if len(set(ids)) != len(ids):
        raise ValueError("record ids are not unique")
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for r in manifest.records:
        r.validate()
        writer.writerow([
            r.subject_id, repr(r.age), repr(r.sex), repr(r.mmse),
            repr(r.brain_ml), repr(r.gm_ml), repr(r.ventricle_ml),
            r.image_path, r.style_seed, r.noise_seed, int(r.flagged),
        ])
    _atomic_write(path, out.getvalue().encode("utf-8"))
    meta = {
        "format_version": manifest.format_version,
        "grid": {"dims": list(manifest.grid_dims), "spacing": manifest.grid_spacing},
        "seed": manifest.seed,
        "provenance": manifest.provenance,
    }
    _atomic_write(_meta_path(path), (json.dumps(meta, indent=1, sort_keys=True) + "\n").encode())


def read_manifest(path) -> DatasetManifest:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty manifest") from None
        if header != MANIFEST_COLUMNS:
            raise ValueError(f"{path}: header {header} != expected {MANIFEST_COLUMNS}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_COLUMNS):
                raise ValueError(
                    f"{path}:{lineno}: row has {len(row)} fields, expected "
                    f"{len(MANIFEST_COLUMNS)}"
                )
            records.append(SubjectRecord(
                subject_id=row[0], age=float(row[1]), sex=float(row[2]),
                mmse=float(row[3]), brain_ml=float(row[4]), gm_ml=float(row[5]),
                ventricle_ml=float(row[6]), image_path=row[7],
                style_seed=int(row[8]), noise_seed=int(row[9]),
                flagged=bool(int(row[10])),
            ))
    meta_file = _meta_path(path)
    if meta_file.exists():
        meta = json.loads(meta_file.read_text(encoding="utf-8"))
    else:
        meta = {"format_version": MANIFEST_FORMAT_VERSION, "grid": {"dims": [0, 0, 0],
                "spacing": 0.0}, "seed": 0, "provenance": {}}
    return DatasetManifest(
        format_version=meta["format_version"],
        grid_dims=tuple(meta["grid"]["dims"]),
        grid_spacing=meta["grid"]["spacing"],
        seed=meta["seed"],
        provenance=meta.get("provenance", {}),
        records=records,
    )


def validate_manifest(manifest: DatasetManifest, base_dir) -> list:
    """Paths referenced by the manifest that do not exist on disk."""
    base = Path(base_dir)
    return [r.image_path for r in manifest.records if not (base / r.image_path).exists()]


def _hash_dict(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()


def style_for_record(record: SubjectRecord, generator: PhantomGenerator) -> np.ndarray:
    """Deterministically rebuild a record's style vector.

    A seeded base style provides per-subject shape character; a Newton
    correction pins its analytic volumes to the manifest volumes.
    """
    base = generator.sample_style(record.style_seed) * 0.7
    target = Volumes(record.brain_ml, record.gm_ml, record.ventricle_ml)
    return generator.match_volumes(target, base)


def _attainable(brain: float, gm: float, vent: float) -> bool:
    return gm < 0.9 * brain and vent < 0.8 * (brain - gm)


def sample_dataset(graph: CausalGraph, mechanisms: dict, generator: PhantomGenerator,
                   n: int, seed: int, out_dir, with_noise: bool = True,
                   threads: int = 1) -> DatasetManifest:
    """Draw an SCM cohort and synthesize one volume per subject.

    Sampled volumes are realized exactly through the decoder calibration;
    subjects whose sampled volumes are geometrically unattainable get the
    nearest attainable volumes and a flag, never dropped. Returns the
    manifest after all volumes are written.
    """
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    prior = sample_prior(graph, mechanisms, seed=seed, n=n)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    style_seeds = rng.integers(0, 2**62, size=n)
    noise_seeds = rng.integers(0, 2**62, size=n)

    def build(i: int) -> SubjectRecord:
        row = prior.rows[i]
        brain, gm, vent = row["b"], row["g"], row["v"]
        flagged = not _attainable(brain, gm, vent)
        if flagged:
            gm = min(gm, 0.9 * brain)
            vent = min(vent, 0.8 * (brain - gm) * 0.99)
        rel_path = f"volumes/s{i:04d}.nii"
        record = SubjectRecord(
            subject_id=f"s{i:04d}", age=row["a"], sex=row["s"], mmse=row["m"],
            brain_ml=brain, gm_ml=gm, ventricle_ml=vent, image_path=rel_path,
            style_seed=int(style_seeds[i]), noise_seed=int(noise_seeds[i]),
            flagged=flagged,
        )
        w = style_for_record(record, generator)
        if generator.decode_style(w).clamped:
            record.flagged = True
        noise = record.noise_seed if with_noise else None
        write_volume(out / rel_path, generator.generate(w, noise))
        return record

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(build, range(n)))
    else:
        records = [build(i) for i in range(n)]

    manifest = DatasetManifest(
        format_version=MANIFEST_FORMAT_VERSION,
        grid_dims=generator.grid.dims,
        grid_spacing=generator.grid.spacing,
        seed=seed,
        provenance={
            "mechanisms_sha256": _hash_dict(mechanisms_to_dict(mechanisms, graph)),
            "generator_sha256": _hash_dict(generator.to_dict()),
        },
        records=records,
    )
    write_manifest(out / "manifest.csv", manifest)
    return manifest
