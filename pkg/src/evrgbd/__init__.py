"""Direct sparse visual odometry fusing RGB-D frames with event-camera time surfaces."""

from .camera import CameraModel, RigCalibration
from .events import Event, EventArray
from .frame import Frame
from .geometry import PoseSE3
from .odometry import RunConfig, run_odometry, track_frame
from .time_surface import AtsConfig, render_ats, render_ts

__version__ = "0.1.0"

__all__ = ["AtsConfig", "CameraModel", "Event", "EventArray", "Frame", "PoseSE3", "RigCalibration",
           "RunConfig", "render_ats", "render_ts", "run_odometry", "track_frame"]
