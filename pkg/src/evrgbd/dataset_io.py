"""On-disk dataset layout, run configuration files and trajectory output.

Layout of a dataset directory::

    calib.txt           key=value camera intrinsics, extrinsic, depth_scale
    events.bin          13-byte LE records (u64 t_us, u16 x, u16 y, i8 p)
      or events.csv     header "t_us,x,y,p"
    rgb/index.txt       "timestamp filename" per line, 8-bit PNGs in rgb/
    depth/index.txt     same, 16-bit PNGs in depth/ (raw units * depth_scale = m)
    groundtruth.txt     optional, TUM format

MVSEC sequences are ingested by an external converter that writes exactly
this layout from per-topic dumps (left DAVIS events, RGB frames rendered to
8-bit PNG, depth reprojected to the frame camera in millimeters, and the
pose topic as groundtruth.txt).
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import cv2
import numpy as np

from .camera import CameraModel, RigCalibration
from .evaluation import Trajectory, read_trajectory
from .events import EventArray
from .frame import Frame
from .geometry import PoseSE3
from .odometry import RunConfig

EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])
DEPTH_MATCH_S = 0.005


class DatasetError(RuntimeError):
    pass


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


# ---------------------------------------------------------------- key=value files

def parse_key_values(text: str, source: str = "<text>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"{source}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in out:
            raise ConfigError(k, f"{source}:{n}: duplicate key")
        out[k] = v
    return out


def _fmt(x: float) -> str:
    """Fixed 9 decimals with trailing zeros stripped ("0", "1.5", "-0.25")."""
    s = f"{float(x):.9f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


_CAM_KEYS = ("fx", "fy", "cx", "cy", "width", "height", "k1", "k2", "p1", "p2")
_EXT_KEYS = ("tx", "ty", "tz", "qx", "qy", "qz", "qw")


def read_calibration(path) -> RigCalibration:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing calibration file {path}")
    kv = parse_key_values(path.read_text(), str(path))

    def cam(prefix):
        args = {}
        for k in _CAM_KEYS:
            key = f"{prefix}_{k}"
            if key not in kv:
                if k in ("k1", "k2", "p1", "p2"):
                    continue
                raise DatasetError(f"{path}: missing key {key}")
            args[k] = int(kv[key]) if k in ("width", "height") else float(kv[key])
        return CameraModel(**args)

    ext = [float(kv.get(f"T_rgb_to_event_{k}", "1" if k == "qw" else "0")) for k in _EXT_KEYS]
    known = {f"{p}_{k}" for p in ("rgb", "event") for k in _CAM_KEYS} \
        | {f"T_rgb_to_event_{k}" for k in _EXT_KEYS} | {"depth_scale"}
    extra = sorted(set(kv) - known)
    if extra:
        raise DatasetError(f"{path}: unknown calibration key {extra[0]}")
    return RigCalibration(cam("rgb"), cam("event"), PoseSE3(ext[3:], ext[:3]),
                          float(kv.get("depth_scale", "0.001")))


def write_calibration(rig: RigCalibration, path) -> None:
    lines = []
    for prefix, c in (("rgb", rig.rgb_cam), ("event", rig.event_cam)):
        for k in _CAM_KEYS:
            v = getattr(c, k)
            lines.append(f"{prefix}_{k}={v if isinstance(v, int) else _fmt(v)}")
    T = rig.T_rgb_to_event
    for k, v in zip(_EXT_KEYS, (*T.translation, *T.rotation)):
        lines.append(f"T_rgb_to_event_{k}={_fmt(v)}")
    lines.append(f"depth_scale={_fmt(rig.depth_scale)}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- events

def read_events(path) -> EventArray:
    """Load events.bin or events.csv; raises on non-monotonic timestamps."""
    path = Path(path)
    if path.suffix == ".bin":
        raw = np.fromfile(path, dtype=EVENT_DTYPE)
        if path.stat().st_size != raw.size * EVENT_DTYPE.itemsize:
            raise DatasetError(f"{path}: size is not a multiple of {EVENT_DTYPE.itemsize} bytes")
        ev = EventArray(raw["t"].astype(np.int64), raw["x"], raw["y"], raw["p"])
    else:
        with open(path) as f:
            header = f.readline().strip().replace(" ", "")
            if header != "t_us,x,y,p":
                raise DatasetError(f"{path}: expected header t_us,x,y,p, got {header!r}")
            data = np.loadtxt(f, delimiter=",", dtype=np.int64, ndmin=2)
        if data.size == 0:
            data = np.zeros((0, 4), dtype=np.int64)
        ev = EventArray(data[:, 0], data[:, 1], data[:, 2], data[:, 3])
    bad = ev.first_unsorted_index()
    if bad is not None:
        raise DatasetError(f"{path}: events not time-sorted at index {bad}")
    return ev


def write_events(events: EventArray, path) -> None:
    path = Path(path)
    if path.suffix == ".bin":
        rec = np.empty(len(events), dtype=EVENT_DTYPE)
        rec["t"], rec["x"], rec["y"], rec["p"] = events.t, events.x, events.y, events.p
        rec.tofile(path)
    else:
        data = np.column_stack([events.t, events.x, events.y, events.p]).astype(np.int64)
        with open(path, "w") as f:
            f.write("t_us,x,y,p\n")
            np.savetxt(f, data, fmt="%d", delimiter=",")


# ---------------------------------------------------------------- images

def _read_index(path: Path) -> list[tuple[float, str]]:
    if not path.is_file():
        raise DatasetError(f"missing image index {path}")
    rows = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            t, name = line.split()[:2]
            rows.append((float(t), name))
    return rows


def _imread(path: Path, flags) -> np.ndarray:
    img = cv2.imread(str(path), flags)
    if img is None:
        raise DatasetError(f"cannot read image {path}")
    return img


@dataclass
class Dataset:
    root: Path
    rig: RigCalibration
    events: EventArray
    rgb_index: list[tuple[float, str]]
    depth_index: list[tuple[float, str]]   # aligned with rgb_index
    groundtruth: Trajectory | None = None
    levels: int = 3

    def __len__(self):
        return len(self.rgb_index)

    def frame(self, i: int) -> Frame:
        t, name = self.rgb_index[i]
        gray = _imread(self.root / "rgb" / name, cv2.IMREAD_UNCHANGED)
        if gray.ndim == 3:
            gray = cv2.cvtColor(gray, cv2.COLOR_BGR2GRAY)
        if gray.dtype != np.uint8:
            raise DatasetError(f"rgb frame {name} is not 8-bit")
        raw = _imread(self.root / "depth" / self.depth_index[i][1], cv2.IMREAD_ANYDEPTH)
        if raw.dtype != np.uint16:
            raise DatasetError(f"depth frame {self.depth_index[i][1]} is not 16-bit")
        return Frame(t, gray, raw.astype(np.float64) * self.rig.depth_scale, self.levels)

    def frames(self) -> Iterator[Frame]:
        for i in range(len(self)):
            yield self.frame(i)


def load_dataset(path, levels: int = 3) -> Dataset:
    root = Path(path)
    rig = read_calibration(root / "calib.txt")
    if (root / "events.bin").is_file():
        events = read_events(root / "events.bin")
    elif (root / "events.csv").is_file():
        events = read_events(root / "events.csv")
    else:
        raise DatasetError(f"{root}: no events.bin or events.csv")
    rgb = _read_index(root / "rgb" / "index.txt")
    depth = _read_index(root / "depth" / "index.txt")
    dt = np.array([t for t, _ in depth])
    matched = []
    for i, (t, name) in enumerate(rgb):
        j = int(np.argmin(np.abs(dt - t))) if len(dt) else -1
        if j < 0 or abs(dt[j] - t) > DEPTH_MATCH_S:
            raise DatasetError(f"rgb frame {i} ({name}, t={t}) has no depth frame within "
                               f"{DEPTH_MATCH_S * 1e3:.0f} ms")
        if not (root / "depth" / depth[j][1]).is_file():
            raise DatasetError(f"depth image for frame {i} missing: {depth[j][1]}")
        matched.append(depth[j])
    for i, (_, name) in enumerate(rgb):
        if not (root / "rgb" / name).is_file():
            raise DatasetError(f"rgb image for frame {i} missing: {name}")
    gt_path = root / "groundtruth.txt"
    gt = read_trajectory(gt_path) if gt_path.is_file() else None
    return Dataset(root, rig, events, rgb, matched, gt, levels)


def write_dataset(path, frames, events: EventArray, rig: RigCalibration,
                  groundtruth=None, event_format: str = "bin") -> Path:
    """Write frames (gray uint8, depth in meters), events, calibration and optional gt."""
    root = Path(path)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    write_calibration(rig, root / "calib.txt")
    write_events(events, root / f"events.{event_format}")
    rgb_lines, depth_lines = [], []
    for i, f in enumerate(frames):
        name = f"{i:06d}.png"
        gray = np.asarray(f.gray)
        if gray.dtype != np.uint8:
            gray = np.clip(np.rint(gray), 0, 255).astype(np.uint8)
        cv2.imwrite(str(root / "rgb" / name), gray)
        d = np.clip(np.rint(np.asarray(f.depth) / rig.depth_scale), 0, 65535).astype(np.uint16)
        cv2.imwrite(str(root / "depth" / name), d)
        stamp = _fmt_stamp(f.timestamp)
        rgb_lines.append(f"{stamp} {name}")
        depth_lines.append(f"{stamp} {name}")
    (root / "rgb" / "index.txt").write_text("\n".join(rgb_lines) + "\n")
    (root / "depth" / "index.txt").write_text("\n".join(depth_lines) + "\n")
    if groundtruth is not None:
        write_trajectory(groundtruth, root / "groundtruth.txt")
    return root


# ---------------------------------------------------------------- trajectories

def _fmt_stamp(t: float) -> str:
    return repr(float(t))


def format_pose(p: PoseSE3) -> str:
    vals = (*p.translation, *p.rotation)
    return " ".join([_fmt_stamp(p.timestamp)] + [_fmt(v) for v in vals])


def write_trajectory(traj, path) -> None:
    """TUM text format "timestamp tx ty tz qx qy qz qw"."""
    lines = [format_pose(p) for p in traj]
    Path(path).write_text("".join(line + "\n" for line in lines))


# ---------------------------------------------------------------- run configuration

_SECTIONS = {f.name: f for f in dataclasses.fields(RunConfig)}
_NOT_CONFIGURABLE = {("ats", "pattern")}


def _convert(key: str, text: str, typ):
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        return float(text)
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {typ.__name__}") from None


def _section_types(section: str) -> dict[str, type]:
    cls = _SECTIONS[section].default_factory().__class__
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)
            if (section, f.name) not in _NOT_CONFIGURABLE}


def config_from_dict(kv: dict[str, str]) -> RunConfig:
    """Build a RunConfig from flat "section.field" keys; unknown keys raise ConfigError."""
    updates: dict[str, dict] = {}
    for key, text in kv.items():
        section, _, name = key.partition(".")
        if section not in _SECTIONS or name not in _section_types(section):
            raise ConfigError(key, "unknown configuration key")
        updates.setdefault(section, {})[name] = _convert(key, text, _section_types(section)[name])
    parts = {}
    for section, f in _SECTIONS.items():
        base = f.default_factory()
        if section in updates:
            try:
                base = dataclasses.replace(base, **updates[section])
            except ValueError as exc:
                raise ConfigError(f"{section}.*", str(exc)) from None
        parts[section] = base
    return RunConfig(**parts)


def load_config(path) -> RunConfig:
    return config_from_dict(parse_key_values(Path(path).read_text(), str(path)))


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for name in _section_types(section):
            v = getattr(obj, name)
            lines.append(f"{section}.{name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
