"""Planar skid-steer / unicycle pose prediction from velocity commands.

Integration is exact for piecewise-constant commands: each command moves the
robot along a circular arc (or a straight segment when the turn rate
vanishes), so no integrator step size needs tuning.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .geometry import RigidPose, compose, invert

STRAIGHT_TOL = 1e-9


def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = math.remainder(theta, 2 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2 * math.pi
    return wrapped


@dataclass(frozen=True)
class PlanarPose:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))


@dataclass(frozen=True)
class VelocityCommand:
    v: float
    omega: float
    timestamp: float = 0.0


@dataclass(frozen=True)
class KinematicParams:
    mu: float = 1.0
    eta: float = 1.0
    camera_mount: RigidPose = field(default_factory=RigidPose.identity)

    def __post_init__(self):
        if not (self.mu > 0 and self.eta > 0):
            raise ValueError(f"friction coefficients must be positive, got mu={self.mu}, eta={self.eta}")


class CommandBuffer:
    """Immutable, timestamp-ordered snapshot of velocity commands."""

    def __init__(self, commands: Sequence[VelocityCommand] = ()):
        cmds = tuple(commands)
        for a, b in zip(cmds, cmds[1:]):
            if not b.timestamp > a.timestamp:
                raise ValueError(
                    f"command timestamps must be strictly increasing ({a.timestamp} then {b.timestamp})"
                )
        if any(not math.isfinite(c.timestamp) for c in cmds):
            raise ValueError("command timestamps must be finite")
        self._cmds = cmds
        self._times = [c.timestamp for c in cmds]

    def __len__(self):
        return len(self._cmds)

    def __iter__(self):
        return iter(self._cmds)

    def __getitem__(self, i):
        return self._cmds[i]

    def until(self, t: float) -> "CommandBuffer":
        """Commands issued at or before ``t``."""
        return CommandBuffer(self._cmds[: bisect.bisect_right(self._times, t)])

    def appended(self, cmd: VelocityCommand) -> "CommandBuffer":
        return CommandBuffer(self._cmds + (cmd,))

    def active_at(self, t: float) -> int:
        """Index of the command in force at ``t`` (-1 if none yet)."""
        return bisect.bisect_right(self._times, t) - 1


def step(pose: PlanarPose, cmd: VelocityCommand, dt: float, params: KinematicParams = KinematicParams()) -> PlanarPose:
    """Advance ``pose`` under a constant command for ``dt`` seconds."""
    if dt < 0:
        raise ValueError(f"dt must be non-negative, got {dt}")
    v = params.mu * cmd.v
    w = params.eta * cmd.omega
    th = pose.theta
    if abs(w) < STRAIGHT_TOL:
        return PlanarPose(pose.x + v * math.cos(th) * dt, pose.y + v * math.sin(th) * dt, th)
    th1 = th + w * dt
    r = v / w
    return PlanarPose(
        pose.x + r * (math.sin(th1) - math.sin(th)),
        pose.y + r * (math.cos(th) - math.cos(th1)),
        th1,
    )


class Prediction(NamedTuple):
    pose: PlanarPose
    no_commands: bool


def predict(
    pose: PlanarPose,
    pose_time: float,
    commands: CommandBuffer | Sequence[VelocityCommand],
    horizon_end: float,
    params: KinematicParams = KinematicParams(),
) -> Prediction:
    """Integrate buffered commands from ``pose_time`` to ``horizon_end``.

    A command is in force from its own timestamp until the next one; the last
    command extends to ``horizon_end``. Before the first command the robot is
    assumed stationary.
    """
    if horizon_end < pose_time:
        raise ValueError(f"horizon_end {horizon_end} precedes pose timestamp {pose_time}")
    if not isinstance(commands, CommandBuffer):
        commands = CommandBuffer(commands)
    if len(commands) == 0:
        return Prediction(pose, True)
    current = pose
    t = pose_time
    i = max(commands.active_at(pose_time), 0)
    while t < horizon_end and i < len(commands):
        cmd = commands[i]
        start = max(t, cmd.timestamp)
        end = commands[i + 1].timestamp if i + 1 < len(commands) else horizon_end
        end = min(end, horizon_end)
        if end > start:
            current = step(current, cmd, end - start, params)
            t = end
        i += 1
    return Prediction(current, False)


def planar_to_base(pose: PlanarPose) -> RigidPose:
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return RigidPose(R, np.array([pose.x, pose.y, 0.0]))


def planar_to_camera(pose: PlanarPose, params: KinematicParams = KinematicParams()) -> RigidPose:
    """Embed (x, y, theta) on the z=0 ground plane and attach the camera mount."""
    return compose(planar_to_base(pose), params.camera_mount)


def camera_to_planar(camera_pose: RigidPose, params: KinematicParams = KinematicParams()) -> PlanarPose:
    """Factor the mount out of a camera pose and drop z, pitch and roll."""
    base = compose(camera_pose, invert(params.camera_mount))
    R = base.rotation
    return PlanarPose(base.translation[0], base.translation[1], math.atan2(R[1, 0], R[0, 0]))


def forward_camera_mount(height: float, pitch: float = 0.0, forward_offset: float = 0.0) -> RigidPose:
    """Camera looking along the base +x axis, ``height`` meters above ground.

    Base frame is x forward, y left, z up; the camera optical frame is x right,
    y down, z forward. Positive ``pitch`` tilts the camera down.
    """
    # columns: camera x, y, z axes expressed in the base frame
    R0 = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    c, s = math.cos(pitch), math.sin(pitch)
    Ry = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return RigidPose(Ry @ R0, np.array([forward_offset, 0.0, height]))
