"""Frame, annotation and clip records shared by the pipeline and the I/O layer."""

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo


@dataclass
class ObjectAnnotation:
    """One object in one frame.

    ``box`` is in that frame's camera coordinates, ``box_world`` in the
    clip's reference frame, ``prompt`` is ``(x0, y0, x1, y1)`` in pixels.
    """

    instance_id: int
    category: str
    box: geo.OrientedBox3D
    box_world: geo.OrientedBox3D
    prompt: tuple
    score: float = 1.0


@dataclass
class FrameRecord:
    index: int
    pose: geo.RigidTransform
    intrinsics: geo.CameraIntrinsics
    depth: np.ndarray
    instance: np.ndarray
    objects: list = field(default_factory=list)
    image: str = None


@dataclass
class SequenceClip:
    """A run of frames. After re-referencing, ``frames[0].pose`` is the identity."""

    sequence_id: str
    scene_id: str
    frames: list
    start: int = 0

    def __len__(self):
        return len(self.frames)

    @property
    def poses(self):
        return [f.pose for f in self.frames]

    @property
    def annotations(self):
        return [f.objects for f in self.frames]
