"""File formats: scene JSON, the shared binary container, match tables, reports.

The binary container has one 32-byte little-endian header:

    magic   4s   = b"PWBC"
    version u16  = 1
    kind    u16  (1 field, 2 hypothesis grid, 3 segmentation map, 4 matches)
    width   u32  image width, px
    height  u32  image height, px
    stride  u32  sampling stride (0 where not applicable)
    grid_w  u32  record grid width (match count for kind 4)
    grid_h  u32  record grid height (1 for kind 4)
    pad     4x

followed by the records:

    kind 1: grid_h * grid_w * (tx, ty, plane_id, valid) float32
    kind 2: grid_h * grid_w * (10 float32 attributes + 1 validity byte)
    kind 3: grid_h * grid_w validity-index bytes (0 invalid, 1..9 local)
    kind 4: n * (psx, psy, ptx, pty, confidence) float32

All writes go through a temp file and os.replace, so files are atomic and
byte-deterministic for identical inputs (no timestamps).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .evaluation import MetricReport
from .geometry import CameraIntrinsics, CameraPose, HomographyAttributes, Plane3D
from .hypotheses import HypothesisGrid
from .scene import Camera, GroundTruthField, PlanarScene, ScenePlane
from .segmentation import SegmentationMap

MAGIC = b"PWBC"
CONTAINER_VERSION = 1
SCENE_FORMAT_VERSION = 1
REPORT_FORMAT_VERSION = 1

KIND_FIELD = 1
KIND_HYP_GRID = 2
KIND_SEG_MAP = 3
KIND_MATCHES = 4

_HEADER = struct.Struct("<4sHHIIIII4x")
assert _HEADER.size == 32


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write via a sibling temp file and rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def _header_bytes(kind: int, image_size, stride: int, grid_w: int, grid_h: int) -> bytes:
    w, h = image_size
    return _HEADER.pack(MAGIC, CONTAINER_VERSION, kind, w, h, stride, grid_w, grid_h)


def _read_header(data: bytes, expected_kind: int):
    if len(data) < _HEADER.size:
        raise ValueError("container file is truncated")
    magic, version, kind, w, h, stride, gw, gh = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError("not a planarmatch container file")
    if version != CONTAINER_VERSION:
        raise ValueError(f"unsupported container version {version}")
    if kind != expected_kind:
        raise ValueError(f"container kind {kind}, expected {expected_kind}")
    return (w, h), stride, gw, gh


# -- scene JSON ---------------------------------------------------------------


def _camera_dict(cam: Camera) -> dict:
    return {
        "fx": cam.intrinsics.fx,
        "fy": cam.intrinsics.fy,
        "cx": cam.intrinsics.cx,
        "cy": cam.intrinsics.cy,
        "rotation": cam.pose.R.tolist(),
        "translation": cam.pose.t.tolist(),
    }


def _camera_from_dict(d: dict) -> Camera:
    return Camera(
        intrinsics=CameraIntrinsics(d["fx"], d["fy"], d["cx"], d["cy"]),
        pose=CameraPose(R=np.array(d["rotation"]), t=np.array(d["translation"])),
    )


def scene_to_json(scene: PlanarScene) -> str:
    obj = {
        "format_version": SCENE_FORMAT_VERSION,
        "seed": scene.seed,
        "baseline_scale": scene.baseline_scale,
        "fronto_parallel": scene.fronto_parallel,
        "image_size": list(scene.image_size),
        "cam1": _camera_dict(scene.cam1),
        "cam2": _camera_dict(scene.cam2),
        "planes": [
            {
                "normal": sp.plane.n.tolist(),
                "distance": sp.plane.d,
                "center": sp.center.tolist(),
                "axis_u": sp.axis_u.tolist(),
                "axis_v": sp.axis_v.tolist(),
                "half_u": sp.half_u,
                "half_v": sp.half_v,
            }
            for sp in scene.planes
        ],
    }
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def scene_from_json(text: str) -> PlanarScene:
    obj = json.loads(text)
    if obj.get("format_version") != SCENE_FORMAT_VERSION:
        raise ValueError("unsupported scene format version")
    planes = [
        ScenePlane(
            plane=Plane3D(n=np.array(p["normal"]), d=p["distance"]),
            center=np.array(p["center"]),
            axis_u=np.array(p["axis_u"]),
            axis_v=np.array(p["axis_v"]),
            half_u=p["half_u"],
            half_v=p["half_v"],
        )
        for p in obj["planes"]
    ]
    return PlanarScene(
        planes=planes,
        cam1=_camera_from_dict(obj["cam1"]),
        cam2=_camera_from_dict(obj["cam2"]),
        image_size=tuple(obj["image_size"]),
        seed=obj["seed"],
        baseline_scale=obj["baseline_scale"],
        fronto_parallel=obj["fronto_parallel"],
    )


def save_scene(scene: PlanarScene, path: str) -> None:
    atomic_write_text(path, scene_to_json(scene))


def load_scene(path: str) -> PlanarScene:
    with open(path) as handle:
        return scene_from_json(handle.read())


# -- ground-truth field -------------------------------------------------------


def field_to_bytes(field: GroundTruthField) -> bytes:
    gh, gw = field.grid_shape
    records = np.zeros((gh, gw, 4), dtype="<f4")
    records[..., :2] = np.nan_to_num(field.target, nan=-1.0)
    records[..., 2] = field.plane_id
    records[..., 3] = field.valid
    return _header_bytes(KIND_FIELD, field.image_size, field.stride, gw, gh) + records.tobytes()


def field_from_bytes(data: bytes) -> GroundTruthField:
    image_size, stride, gw, gh = _read_header(data, KIND_FIELD)
    records = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    records = records.reshape(gh, gw, 4).astype(float)
    return GroundTruthField(
        image_size=image_size,
        stride=stride,
        target=records[..., :2].copy(),
        plane_id=records[..., 2].astype(np.int32),
        valid=records[..., 3] > 0.5,
    )


def save_field(field: GroundTruthField, path: str) -> None:
    atomic_write_bytes(path, field_to_bytes(field))


def load_field(path: str) -> GroundTruthField:
    with open(path, "rb") as handle:
        return field_from_bytes(handle.read())


# -- hypothesis grid ----------------------------------------------------------


def hypothesis_grid_to_bytes(grid: HypothesisGrid, image_size) -> bytes:
    gw, gh = grid.grid_size
    out = bytearray(_header_bytes(KIND_HYP_GRID, image_size, 32, gw, gh))
    zero = np.zeros(10, dtype="<f4").tobytes()
    for attrs in grid.attrs:
        if attrs is None:
            out += zero + b"\x00"
        else:
            out += attrs.as_vector().astype("<f4").tobytes() + b"\x01"
    return bytes(out)


def hypothesis_grid_from_bytes(data: bytes) -> HypothesisGrid:
    _, _, gw, gh = _read_header(data, KIND_HYP_GRID)
    record = 10 * 4 + 1
    attrs: list[HomographyAttributes | None] = []
    offset = _HEADER.size
    for _ in range(gw * gh):
        chunk = data[offset : offset + record]
        if len(chunk) < record:
            raise ValueError("hypothesis grid container is truncated")
        if chunk[-1]:
            vec = np.frombuffer(chunk[:-1], dtype="<f4").astype(float)
            attrs.append(HomographyAttributes.from_vector(vec))
        else:
            attrs.append(None)
        offset += record
    return HypothesisGrid(grid_size=(gw, gh), attrs=attrs)


def save_hypothesis_grid(grid: HypothesisGrid, image_size, path: str) -> None:
    atomic_write_bytes(path, hypothesis_grid_to_bytes(grid, image_size))


def load_hypothesis_grid(path: str) -> HypothesisGrid:
    with open(path, "rb") as handle:
        return hypothesis_grid_from_bytes(handle.read())


# -- segmentation map ---------------------------------------------------------


def segmentation_map_to_bytes(smap: SegmentationMap, image_size) -> bytes:
    gw, gh = smap.grid_size
    return _header_bytes(KIND_SEG_MAP, image_size, 8, gw, gh) + smap.choice.astype(np.uint8).tobytes()


def segmentation_map_from_bytes(data: bytes) -> SegmentationMap:
    _, _, gw, gh = _read_header(data, KIND_SEG_MAP)
    choice = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size, count=gw * gh)
    choice = choice.reshape(gh, gw).copy()
    return SegmentationMap(
        grid_size=(gw, gh),
        choice=choice,
        global_ref=np.full((gh, gw), -1, dtype=np.int32),
        valid=choice > 0,
    )


def save_segmentation_map(smap: SegmentationMap, image_size, path: str) -> None:
    atomic_write_bytes(path, segmentation_map_to_bytes(smap, image_size))


def load_segmentation_map(path: str) -> SegmentationMap:
    with open(path, "rb") as handle:
        return segmentation_map_from_bytes(handle.read())


# -- matches ------------------------------------------------------------------


def matches_to_text(p_s, p_t, confidence) -> str:
    lines = ["# psx psy ptx pty confidence"]
    src = np.asarray(p_s, dtype=float).reshape(-1, 2).tolist()
    tgt = np.asarray(p_t, dtype=float).reshape(-1, 2).tolist()
    conf = np.asarray(confidence, dtype=float).reshape(-1).tolist()
    for (sx, sy), (tx, ty), c in zip(src, tgt, conf):
        lines.append(f"{sx!r} {sy!r} {tx!r} {ty!r} {c!r}")
    return "\n".join(lines) + "\n"


def matches_from_text(text: str):
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rows.append([float(v) for v in line.split()])
    arr = np.array(rows, dtype=float).reshape(-1, 5)
    return arr[:, 0:2], arr[:, 2:4], arr[:, 4]


def matches_to_bytes(p_s, p_t, confidence, image_size=(0, 0)) -> bytes:
    p_s = np.asarray(p_s, dtype=float).reshape(-1, 2)
    p_t = np.asarray(p_t, dtype=float).reshape(-1, 2)
    conf = np.asarray(confidence, dtype=float).reshape(-1)
    records = np.hstack([p_s, p_t, conf[:, None]]).astype("<f4")
    return _header_bytes(KIND_MATCHES, image_size, 0, records.shape[0], 1) + records.tobytes()


def matches_from_bytes(data: bytes):
    _, _, n, _ = _read_header(data, KIND_MATCHES)
    records = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(n, 5).astype(float)
    return records[:, 0:2], records[:, 2:4], records[:, 4]


def save_matches(p_s, p_t, confidence, text_path: str, binary_path: str, image_size=(0, 0)) -> None:
    atomic_write_text(text_path, matches_to_text(p_s, p_t, confidence))
    atomic_write_bytes(binary_path, matches_to_bytes(p_s, p_t, confidence, image_size))


# -- metric reports -----------------------------------------------------------


def report_to_text(report: MetricReport, extra_sections: dict | None = None) -> str:
    """Versioned key-value rendering; wall time never appears here."""
    def render(key, value):
        if value is None:
            return f"{key} ="
        if isinstance(value, str):
            return f"{key} = {value}"
        return f"{key} = {value!r}"

    lines = ["[report]", f"format_version = {REPORT_FORMAT_VERSION}"]
    for key, value in report.as_pairs():
        lines.append(render(key, value))
    for name, section in (extra_sections or {}).items():
        lines.append(f"[{name}]")
        for key in sorted(section):
            lines.append(render(key, section[key]))
    return "\n".join(lines) + "\n"


def metrics_csv(rows: list[dict]) -> str:
    """Flat CSV of per-scene metric rows (stable column order)."""
    columns = [
        "seed",
        "variant",
        "n_matches",
        "n_valid_gt",
        "median_endpoint_px",
        "point_accuracy",
        "rot_err_deg",
        "trans_err_deg",
        "pose_err_deg",
        "pose_inliers",
        "corner_error_px",
    ]
    lines = [",".join(columns)]
    for row in rows:
        cells = []
        for col in columns:
            value = row.get(col)
            cells.append("" if value is None else (value if isinstance(value, str) else repr(value)))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
