"""In-memory form of one survey session: frames, poses, masks."""
from __future__ import annotations

from dataclasses import dataclass, field

from .geo import LocalFrame
from .octree import OccupancyOctree
from .perception import CameraIntrinsics, CameraPose, SegmentMask


@dataclass
class FrameRecord:
    frame_id: str
    timestamp: float
    camera_id: str
    pose: CameraPose
    plot: str = ""


@dataclass
class Session:
    """Everything the mapping step needs from one deployment.

    ``season_time`` is the session's position on the season axis, used as
    the time coordinate of persistence updates.
    """
    session_id: str
    season_tag: str
    season_time: float
    frame: LocalFrame
    cameras: dict[str, CameraIntrinsics]
    frames: list[FrameRecord]
    masks: list[SegmentMask]
    ground_height: float = 0.0
    octree: OccupancyOctree | None = None
    camera_roles: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        ids = [f.frame_id for f in self.frames]
        if len(set(ids)) != len(ids):
            raise ValueError("frame ids must be unique")

    def frame_index(self) -> dict[str, FrameRecord]:
        return {f.frame_id: f for f in self.frames}

    def role(self, camera_id: str) -> str:
        """``down`` or ``front``; defaults to the camera id itself."""
        return self.camera_roles.get(camera_id, camera_id)
