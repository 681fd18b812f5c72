"""Artifact persistence: atomic writes, deterministic CSV/NPY/JSON, run manifest."""
from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .simulator import SnapshotSeries

__all__ = [
    "MissingArtifactError",
    "ArtifactWriter",
    "save_snapshots",
    "load_snapshots",
    "read_csv",
    "sha256_file",
    "update_manifest",
    "read_manifest",
    "MANIFEST",
]

MANIFEST = "manifest.json"


class MissingArtifactError(FileNotFoundError):
    pass


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    if v is None:
        return ""
    return str(v)


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class ArtifactWriter:
    """Single writer for a run directory; every file lands via write-to-temp then rename."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name):
        return self.root / name

    def write_bytes(self, name, data: bytes):
        target = self.path(name)
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return target

    def write_text(self, name, text):
        return self.write_bytes(name, text.encode())

    def write_json(self, name, obj):
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def write_npy(self, name, array):
        buf = io.BytesIO()
        np.save(buf, np.ascontiguousarray(array), allow_pickle=False)
        return self.write_bytes(name, buf.getvalue())

    def write_csv(self, name, header, rows):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
        return self.write_text(name, buf.getvalue())


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def save_snapshots(writer: ArtifactWriter, series: SnapshotSeries):
    """Ragged snapshots as one concatenated point array plus per-(replica, time) offsets."""
    R, T, d = series.replicas, len(series.times), series.dimension
    counts = series.counts().reshape(R * T)
    offsets = np.zeros(R * T + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    pts = [np.asarray(g, dtype=float).reshape(-1, d) for rep in series.configs for g in rep]
    points = np.concatenate(pts) if pts else np.zeros((0, d))
    writer.write_npy("snapshots_points.npy", points)
    writer.write_npy("snapshots_offsets.npy", offsets.reshape(-1))
    writer.write_json("snapshots.json", {
        "times": [float(t) for t in series.times],
        "replicas": R,
        "dimension": d,
        "half_width": series.half_width,
        "layout": "points[offsets[r*T + k]:offsets[r*T + k + 1]] is replica r at times[k]",
    })
    writer.write_csv("counts.csv", ["replica", "time", "count"],
                     [(r, series.times[k], int(counts[r * T + k])) for r in range(R) for k in range(T)])


def load_snapshots(root) -> SnapshotSeries:
    root = Path(root)
    meta_path = root / "snapshots.json"
    if not meta_path.is_file():
        raise MissingArtifactError(f"{meta_path} not found; run 'simulate' first")
    meta = json.loads(meta_path.read_text())
    points = np.load(root / "snapshots_points.npy")
    offsets = np.load(root / "snapshots_offsets.npy")
    R, T = meta["replicas"], len(meta["times"])
    configs = [[points[offsets[r * T + k]:offsets[r * T + k + 1]] for k in range(T)] for r in range(R)]
    return SnapshotSeries(np.asarray(meta["times"], dtype=float), configs, meta["half_width"], meta["dimension"])


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_manifest(root):
    p = Path(root) / MANIFEST
    return json.loads(p.read_text()) if p.is_file() else None


def update_manifest(writer: ArtifactWriter, config_data, cfg_hash, version, stage, status, started):
    """Record a stage outcome and refresh the checksum inventory (manifest excluded)."""
    man = read_manifest(writer.root) or {
        "config_hash": cfg_hash,
        "tool_version": version,
        "started": started,
        "stages": {},
    }
    man["config_hash"] = cfg_hash
    man["config"] = config_data
    man["stages"][stage] = {"status": status, "started": started, "finished": _now()}
    man["finished"] = _now()
    inventory = {}
    for p in sorted(writer.root.rglob("*")):
        if p.is_file() and p.name != MANIFEST and not p.name.startswith("."):
            inventory[p.relative_to(writer.root).as_posix()] = sha256_file(p)
    man["inventory"] = inventory
    writer.write_json(MANIFEST, man)
    return man
