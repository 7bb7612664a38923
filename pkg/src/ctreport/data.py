"""Volume / manifest file formats and the deterministic synthetic lesion generator."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .extractor import ConfigError
from .train import Sample

VOLUME_MAGIC = b"MVKT-VOL v1\n"


class DataError(ValueError):
    """Malformed or missing dataset files."""


# -- volume files ----------------------------------------------------------------------------

def write_volume(path, volume: np.ndarray) -> None:
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise DataError(f"volume must be 3-D, got shape {volume.shape}")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<3I", *volume.shape))
        fh.write(np.ascontiguousarray(volume, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_volume(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(VOLUME_MAGIC):
        raise DataError(f"{path}: not a volume file (bad magic)")
    head = len(VOLUME_MAGIC)
    if len(raw) < head + 12:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack("<3I", raw[head:head + 12])
    payload = raw[head + 12:]
    expected = 4 * dims[0] * dims[1] * dims[2]
    if len(payload) != expected:
        raise DataError(f"{path}: payload has {len(payload)} bytes, dims {dims} need {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


# -- manifests ------------------------------------------------------------------------------------

def read_manifest(path) -> list[dict]:
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or not {"id", "volume", "report"} <= rec.keys():
                raise DataError(f"{path}:{lineno}: record needs id, volume and report fields")
            if rec["id"] in seen:
                raise DataError(f"{path}:{lineno}: duplicate id '{rec['id']}'")
            seen.add(rec["id"])
            records.append(rec)
    return records


def write_manifest(path, records: Sequence[dict]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({"id": rec["id"], "volume": rec["volume"], "report": rec["report"]},
                                ensure_ascii=False) + "\n")
    os.replace(tmp, path)


def load_dataset(manifest_path) -> list[Sample]:
    root = Path(manifest_path).parent
    samples = []
    for rec in read_manifest(manifest_path):
        vol_path = root / rec["volume"]
        if not vol_path.exists():
            raise DataError(f"volume file for id '{rec['id']}' not found: {vol_path}")
        try:
            volume = read_volume(vol_path)
        except DataError as exc:
            raise DataError(f"id '{rec['id']}': {exc}") from None
        samples.append(Sample(rec["id"], volume, rec["report"]))
    return samples


def save_dataset(directory, samples: Sequence[Sample], manifest_name: str = "manifest.jsonl") -> Path:
    directory = Path(directory)
    (directory / "volumes").mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        rel = f"volumes/{s.id}.vol"
        write_volume(directory / rel, s.volume)
        records.append({"id": s.id, "volume": rel, "report": s.report})
    path = directory / manifest_name
    write_manifest(path, records)
    return path


def split_dataset(samples: Sequence[Sample], train_fraction: float = 0.8, seed: int = 0):
    """Seeded random split; the train share is round(train_fraction * n)."""
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(round(train_fraction * len(samples)))
    return [samples[i] for i in sorted(order[:n_train])], [samples[i] for i in sorted(order[n_train:])]


# -- synthetic generator --------------------------------------------------------------------------

LESIONS = ("nodule", "effusion", "patchy shadow")
SHAPES = {"nodule": "sphere", "effusion": "slab", "patchy shadow": "blob"}
BINS = (("upper", "left"), ("upper", "right"), ("lower", "left"), ("lower", "right"))
NORMAL_REPORT = "no obvious abnormality was found ."

SENTENCES = {
    "nodule": "a nodule is seen in the {v} {s} lung .",
    "effusion": "pleural effusion is seen in the {v} {s} chest .",
    "patchy shadow": "patchy shadow is seen in the {v} {s} lung field .",
}


@dataclass(frozen=True)
class SyntheticSpec:
    dims: tuple = (32, 32, 32)
    patch: int = 8
    max_lesions: int = 3
    noise: float = 0.02
    lesions: tuple = LESIONS
    bins: tuple = BINS

    def __post_init__(self):
        if len(self.dims) != 3 or any(d % self.patch or d < 2 * self.patch for d in self.dims):
            raise ConfigError(f"volume dims {self.dims} must be multiples of patch {self.patch} "
                              f"and at least two patches wide")


@dataclass(frozen=True)
class Finding:
    lesion: str
    vertical: str  # upper / lower along depth
    side: str  # left / right along width

    def sentence(self) -> str:
        return SENTENCES[self.lesion].format(v=self.vertical, s=self.side)


def report_for(findings: Sequence[Finding]) -> str:
    if not findings:
        return NORMAL_REPORT
    ordered = sorted(findings, key=lambda f: (LESIONS.index(f.lesion), BINS.index((f.vertical, f.side))))
    return " ".join(f.sentence() for f in ordered)


def bin_box(dims, vertical: str, side: str) -> tuple[slice, slice, slice]:
    d, h, w = dims
    ds = slice(0, d // 2) if vertical == "upper" else slice(d // 2, d)
    ws = slice(0, w // 2) if side == "left" else slice(w // 2, w)
    return ds, slice(0, h), ws


def _plant(volume: np.ndarray, finding: Finding, rng: np.random.Generator) -> None:
    """Write one lesion strictly inside its bin; each shape is elongated along a different axis."""
    ds, hs, ws = bin_box(volume.shape, finding.vertical, finding.side)
    sub = volume[ds, hs, ws]
    bd, bh, bw = sub.shape
    zz, yy, xx = np.meshgrid(np.arange(bd), np.arange(bh), np.arange(bw), indexing="ij")
    cz = bd / 2 + rng.uniform(-1, 1)
    cy = bh / 2 + rng.uniform(-bh / 6, bh / 6)
    cx = bw / 2 + rng.uniform(-1, 1)
    shape = SHAPES[finding.lesion]
    if shape == "sphere":
        r = 0.18 * min(bd, bw) + rng.uniform(0, 0.5)
        mask = (zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        value = 0.9
    elif shape == "slab":
        # thin along depth, wide in height and width
        mask = (np.abs(zz - cz) <= 1.0) & (np.abs(yy - cy) <= bh / 4) & (np.abs(xx - cx) <= bw / 3)
        value = 0.7
    else:
        # cluster of small balls strung along the height axis
        mask = np.zeros(sub.shape, dtype=bool)
        for offset in (-bh / 5, 0.0, bh / 5):
            oy = cy + offset + rng.uniform(-1, 1)
            mask |= (zz - cz) ** 2 / 4 + (yy - oy) ** 2 / 9 + (xx - cx) ** 2 / 4 <= 1.0
        value = 0.55
    sub[mask] = np.maximum(sub[mask], value)


def synthesize_pair(spec: SyntheticSpec, index: int, seed: int) -> tuple[np.ndarray, list[Finding]]:
    rng = np.random.default_rng(seed + index)
    options = [Finding(lesion, v, s) for lesion in spec.lesions for v, s in spec.bins]
    n = int(rng.integers(0, spec.max_lesions + 1))
    picked = [options[i] for i in sorted(rng.choice(len(options), size=n, replace=False))]
    base = np.clip(0.1 + spec.noise * rng.standard_normal(spec.dims), 0.0, 1.0)
    volume = base.astype(np.float64)
    for finding in picked:
        _plant(volume, finding, rng)
    return np.clip(volume, 0.0, 1.0).astype(np.float32), picked


def synthetic_samples(n_pairs: int, seed: int = 0, spec: SyntheticSpec = SyntheticSpec()) -> list[Sample]:
    samples = []
    for i in range(n_pairs):
        volume, findings = synthesize_pair(spec, i, seed)
        samples.append(Sample(f"syn{i:05d}", volume, report_for(findings)))
    return samples


def synthetic_reports(n_pairs: int, seed: int = 0, spec: SyntheticSpec = SyntheticSpec()) -> list[str]:
    """Report text only; same draws as ``synthetic_samples`` minus the voxel work."""
    out = []
    options = [Finding(lesion, v, s) for lesion in spec.lesions for v, s in spec.bins]
    for i in range(n_pairs):
        rng = np.random.default_rng(seed + i)
        n = int(rng.integers(0, spec.max_lesions + 1))
        out.append(report_for([options[j] for j in sorted(rng.choice(len(options), size=n, replace=False))]))
    return out


def generate_synthetic(directory, n_pairs: int, seed: int = 0, spec: SyntheticSpec = SyntheticSpec()) -> Path:
    return save_dataset(directory, synthetic_samples(n_pairs, seed, spec))


def bin_mass(volume: np.ndarray, threshold: float = 0.3) -> dict[tuple[str, str], float]:
    """Voxel mass above ``threshold`` in each location bin (read-back oracle for planted lesions)."""
    hot = np.where(volume > threshold, volume, 0.0)
    return {(v, s): float(hot[bin_box(volume.shape, v, s)].sum()) for v, s in BINS}
