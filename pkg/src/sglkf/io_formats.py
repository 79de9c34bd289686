"""Readers and writers for sequence bundles, labels, speeds and results.

Bundle directory layout::

    meta.json          {"sequence_id", "box_dim", "n_frames", "fps", "image_size"|"scene_bounds", "classes"}
    detections.jsonl   one {"frame", "class", "score", "box"} object per line
    gt.txt             KITTI tracking label rows (optional)
    speed.txt          one km/h value per frame (or oxts.txt with KITTI oxts rows)
    embeddings.txt     "frame gt_track_id f_1 ... f_d" rows (optional)

Boxes are center-size everywhere in memory: ``[x, y, w, h]`` for 2D and
``[x, y, z, w, h, l]`` for 3D, where for 3D the three sizes are the extents
along the x, y and z axes of the KITTI camera frame.
"""
from dataclasses import dataclass, field
import json
import math
import os
from typing import Dict, List, Optional, Tuple

import numpy as np

from .association import Detection
from .errors import FormatError

KITTI_CLASSES = ("Car", "Van", "Truck", "Pedestrian", "Person_sitting", "Cyclist", "Tram", "Misc")


def class_id(name):
    if isinstance(name, (int, np.integer)):
        return int(name)
    try:
        return KITTI_CLASSES.index(name)
    except ValueError:
        return len(KITTI_CLASSES)


def class_name(cid):
    return KITTI_CLASSES[cid] if 0 <= cid < len(KITTI_CLASSES) else "Misc"


@dataclass
class GTObject:
    frame: int
    track_id: int
    cls: str
    box: np.ndarray
    truncated: float = 0.0
    occluded: int = 0
    ignore: bool = False  # DontCare region

    @property
    def class_id(self):
        return class_id(self.cls)


@dataclass
class ResultRow:
    frame: int
    track_id: int
    cls: str
    box: np.ndarray
    score: float

    def key(self):
        return (self.frame, self.track_id)

    def __eq__(self, other):
        return (self.frame, self.track_id, self.cls, self.score) == (other.frame, other.track_id, other.cls, other.score) \
            and np.array_equal(self.box, other.box)


@dataclass
class SequenceBundle:
    sequence_id: str
    box_dim: int
    n_frames: int
    detections: Dict[int, List[Detection]]
    speeds: np.ndarray
    gt: Optional[Dict[int, List[GTObject]]] = None
    embeddings: Optional[Dict[Tuple[int, int], np.ndarray]] = None
    image_size: Optional[Tuple[float, float]] = None
    scene_bounds: Optional[Tuple[float, ...]] = None
    fps: float = 10.0
    speed_held: np.ndarray = None
    speed_source: str = "file"
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.speeds = np.asarray(self.speeds, dtype=np.float64)
        if self.speed_held is None:
            self.speed_held = np.zeros(len(self.speeds), dtype=bool)

    @property
    def state_dim(self):
        return 2 * self.box_dim

    def gt_frame(self, frame):
        return [] if self.gt is None else self.gt.get(frame, [])


# -- KITTI labels --------------------------------------------------------------

def _kitti_row_to_box(fields, box_dim):
    l, t, r, b = (float(x) for x in fields[6:10])
    if box_dim == 4:
        return np.array([(l + r) / 2, (t + b) / 2, r - l, b - t])
    h, w, length = (float(x) for x in fields[10:13])
    x, y, z = (float(v) for v in fields[13:16])
    ry = float(fields[16])
    ext_x = abs(math.cos(ry)) * length + abs(math.sin(ry)) * w
    ext_z = abs(math.sin(ry)) * length + abs(math.cos(ry)) * w
    # KITTI location is the bottom center; y points down.
    return np.array([x, y - h / 2, z, ext_x, h, ext_z])


def parse_kitti_tracking_labels(path, box_dim=4):
    """Parse a KITTI tracking label (or result) file.

    Rows have 17 fields, or 18 when a trailing score column is present.
    ``DontCare`` rows are kept with ``ignore=True``.

    Returns:
        dict ``frame -> [GTObject]``.
    """
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) not in (17, 18):
                raise FormatError(f"expected 17 or 18 fields, found {len(fields)}", path, lineno)
            try:
                frame, tid = int(fields[0]), int(fields[1])
                box = _kitti_row_to_box(fields, box_dim)
                trunc, occ = float(fields[3]), int(float(fields[4]))
            except ValueError as exc:
                raise FormatError(f"bad numeric field ({exc})", path, lineno) from None
            cls = fields[2]
            ignore = cls == "DontCare"
            if not ignore and not np.all(np.isfinite(box)):
                raise FormatError("non-finite box", path, lineno)
            out.setdefault(frame, []).append(GTObject(frame, tid, cls, box, trunc, occ, ignore))
    return out


def _fmt(x):
    return f"{x:.6f}"


def _kitti_line(frame, tid, cls, box, score=None, truncated=-1, occluded=-1):
    box = np.asarray(box, dtype=np.float64)
    if len(box) == 4:
        x, y, w, h = box
        bbox = [x - w / 2, y - h / 2, x + w / 2, y + h / 2]
        dims = [-1.0, -1.0, -1.0]
        loc = [-1000.0, -1000.0, -1000.0]
    else:
        x, y, z, ex, ey, ez = box
        bbox = [-1.0, -1.0, -1.0, -1.0]
        dims = [ey, ez, ex]
        loc = [x, y + ey / 2, z]
    parts = [str(int(frame)), str(int(tid)), cls, _fmt(truncated), str(int(occluded)), _fmt(-10.0)]
    parts += [_fmt(v) for v in bbox + dims + loc] + [_fmt(0.0 if len(box) == 6 else -10.0)]
    if score is not None:
        parts.append(_fmt(score))
    return " ".join(parts)


def write_kitti_labels(gt, path):
    lines = []
    for frame in sorted(gt):
        for obj in sorted(gt[frame], key=lambda o: o.track_id):
            lines.append(_kitti_line(frame, obj.track_id, obj.cls, obj.box, None, obj.truncated, obj.occluded))
    _write_text(path, lines)


# -- ego speed -----------------------------------------------------------------

def parse_ego_speed(path, n_frames=None):
    """Per-frame ego speed in km/h.

    Accepts a plain file with one km/h value per line or KITTI oxts rows, for
    which speed is ``sqrt(vn^2 + ve^2) * 3.6`` from the north/east velocity
    fields.  Missing values (``nan`` or empty lines) hold the previous value.

    Returns:
        ``(speeds, held)``: float array and a bool mask of held frames.
    """
    with open(path) as fh:
        lines = fh.read().splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    values = []
    for lineno, line in enumerate(lines, 1):
        fields = line.split()
        if not fields:
            values.append(math.nan)
            continue
        if len(fields) != 1 and len(fields) < 25:
            raise FormatError(f"expected 1 or >=25 fields, found {len(fields)}", path, lineno)
        try:
            if len(fields) == 1:
                values.append(float(fields[0]))
            else:
                vn, ve = float(fields[6]), float(fields[7])
                values.append(math.hypot(vn, ve) * 3.6)
        except ValueError:
            raise FormatError("bad speed value", path, lineno) from None
    speeds = np.array(values, dtype=np.float64)
    if n_frames is not None and len(speeds) != n_frames:
        raise FormatError(f"speed file has {len(speeds)} frames, sequence has {n_frames}", path)
    held = ~np.isfinite(speeds)
    last = 0.0
    for i in range(len(speeds)):
        if held[i]:
            speeds[i] = last
        else:
            last = speeds[i]
    return np.maximum(speeds, 0.0), held


def perturb_speed(speeds, mode="relative", sigma=0.05, seed=0):
    """Inject Gaussian noise into a speed series.

    ``mode="relative"``: ``v * (1 + sigma * n)``; ``mode="noise"``: ``v * n``;
    ``n ~ N(0, 1)`` per frame.  Negative results are clamped to zero.
    """
    speeds = np.asarray(speeds, dtype=np.float64)
    n = np.random.default_rng(seed).standard_normal(speeds.shape)
    if mode == "relative":
        out = speeds * (1.0 + sigma * n)
    elif mode == "noise":
        out = speeds * n
    else:
        raise ValueError(f"unknown perturbation mode {mode!r}")
    return np.maximum(out, 0.0)


# -- detections ----------------------------------------------------------------

def read_detections(path):
    dets = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                emb = rec.get("embedding")
                det = Detection(
                    box=np.asarray(rec["box"], dtype=np.float64),
                    score=float(rec["score"]),
                    class_id=class_id(rec.get("class", 0)),
                    frame=int(rec["frame"]),
                    embedding=None if emb is None else np.asarray(emb, dtype=np.float64),
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise FormatError(f"bad detection record ({exc})", path, lineno) from None
            dets.setdefault(det.frame, []).append(det)
    return dets


def write_detections(dets, path):
    lines = []
    for frame in sorted(dets):
        for d in dets[frame]:
            rec = {"frame": int(frame), "class": class_name(d.class_id), "score": float(d.score),
                   "box": [float(v) for v in d.box]}
            if d.embedding is not None:
                rec["embedding"] = [float(v) for v in d.embedding]
            lines.append(json.dumps(rec))
    _write_text(path, lines)


# -- embeddings ----------------------------------------------------------------

def read_embeddings(path):
    table = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.split()
            if not fields:
                continue
            try:
                table[(int(fields[0]), int(fields[1]))] = np.array([float(x) for x in fields[2:]])
            except ValueError:
                raise FormatError("bad embedding row", path, lineno) from None
    dims = {len(v) for v in table.values()}
    if len(dims) > 1:
        raise FormatError(f"inconsistent embedding widths {sorted(dims)}", path)
    return table


def write_embeddings(table, path):
    lines = [" ".join([str(f), str(t)] + [repr(float(x)) for x in table[(f, t)]]) for f, t in sorted(table)]
    _write_text(path, lines)


# -- results -------------------------------------------------------------------

def write_results(rows, path, fmt="kitti"):
    """Write tracking results sorted by ``(frame, track_id)``.

    ``kitti`` rows follow the tracking-submission layout (17 label fields plus
    score); ``jsonl`` writes ``{"frame", "track_id", "class", "box", "score"}``.
    """
    rows = sorted(rows, key=ResultRow.key)
    if fmt == "kitti":
        lines = [_kitti_line(r.frame, r.track_id, r.cls, r.box, r.score) for r in rows]
    elif fmt == "jsonl":
        lines = [json.dumps({"frame": int(r.frame), "track_id": int(r.track_id), "class": r.cls,
                             "box": [float(v) for v in r.box], "score": float(r.score)}) for r in rows]
    else:
        raise ValueError(f"unknown result format {fmt!r}")
    _write_text(path, lines)


def read_results(path, fmt="kitti", box_dim=4):
    rows = []
    if fmt == "jsonl":
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    rows.append(ResultRow(int(rec["frame"]), int(rec["track_id"]), rec["class"],
                                          np.asarray(rec["box"], dtype=np.float64), float(rec["score"])))
                except (KeyError, ValueError, TypeError) as exc:
                    raise FormatError(f"bad result record ({exc})", path, lineno) from None
        return rows
    if fmt != "kitti":
        raise ValueError(f"unknown result format {fmt!r}")
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 18:
                raise FormatError(f"expected 18 fields, found {len(fields)}", path, lineno)
            try:
                box = _kitti_row_to_box(fields, box_dim)
                rows.append(ResultRow(int(fields[0]), int(fields[1]), fields[2], box, float(fields[17])))
            except ValueError as exc:
                raise FormatError(f"bad numeric field ({exc})", path, lineno) from None
    return rows


# -- bundles -------------------------------------------------------------------

def write_bundle(bundle, directory):
    os.makedirs(directory, exist_ok=True)
    meta = {
        "sequence_id": bundle.sequence_id,
        "box_dim": bundle.box_dim,
        "n_frames": bundle.n_frames,
        "fps": bundle.fps,
        "speed_source": bundle.speed_source,
    }
    if bundle.image_size is not None:
        meta["image_size"] = [float(v) for v in bundle.image_size]
    if bundle.scene_bounds is not None:
        meta["scene_bounds"] = [float(v) for v in bundle.scene_bounds]
    if bundle.extras:
        meta["extras"] = bundle.extras
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_detections(bundle.detections, os.path.join(directory, "detections.jsonl"))
    _write_text(os.path.join(directory, "speed.txt"), [repr(float(v)) for v in bundle.speeds])
    if bundle.gt is not None:
        write_kitti_labels(bundle.gt, os.path.join(directory, "gt.txt"))
    if bundle.embeddings is not None:
        write_embeddings(bundle.embeddings, os.path.join(directory, "embeddings.txt"))


def read_bundle(directory, speed_file=None):
    """Load a bundle directory.  ``speed_file`` overrides the bundle's speeds."""
    with open(os.path.join(directory, "meta.json")) as fh:
        meta = json.load(fh)
    box_dim = int(meta.get("box_dim", 4))
    n_frames = int(meta["n_frames"])
    dets = read_detections(os.path.join(directory, "detections.jsonl"))
    source = meta.get("speed_source", "file")
    if speed_file is None:
        for name in ("speed.txt", "oxts.txt"):
            candidate = os.path.join(directory, name)
            if os.path.exists(candidate):
                speed_file = candidate
                break
    else:
        source = "file"
    if speed_file is None:
        raise FormatError("bundle has no speed.txt or oxts.txt", directory)
    speeds, held = parse_ego_speed(speed_file, n_frames)
    gt_path = os.path.join(directory, "gt.txt")
    gt = parse_kitti_tracking_labels(gt_path, box_dim) if os.path.exists(gt_path) else None
    emb_path = os.path.join(directory, "embeddings.txt")
    emb = read_embeddings(emb_path) if os.path.exists(emb_path) else None
    return SequenceBundle(
        sequence_id=meta["sequence_id"],
        box_dim=box_dim,
        n_frames=n_frames,
        detections=dets,
        speeds=speeds,
        gt=gt,
        embeddings=emb,
        image_size=tuple(meta["image_size"]) if "image_size" in meta else None,
        scene_bounds=tuple(meta["scene_bounds"]) if "scene_bounds" in meta else None,
        fps=float(meta.get("fps", 10.0)),
        speed_held=held,
        speed_source=source,
        extras=meta.get("extras", {}),
    )


def read_manifest(path):
    """Sequence directories listed one per line, relative to the manifest."""
    base = os.path.dirname(os.path.abspath(path))
    dirs = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                dirs.append(line if os.path.isabs(line) else os.path.join(base, line))
    return dirs


def write_manifest(dirs, path):
    base = os.path.dirname(os.path.abspath(path))
    _write_text(path, [os.path.relpath(d, base) for d in dirs])


def _write_text(path, lines):
    with open(path, "w") as fh:
        if lines:
            fh.write("\n".join(lines) + "\n")
