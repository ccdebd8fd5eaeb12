"""Rotation and translation error between two camera paths.

Both metrics compare poses relative to the first frame; translation error
additionally normalizes each path by its mean camera distance, so a
uniformly scaled path scores zero.
"""
import numpy as np

from dualcam.camera import CameraTrajectory, Intrinsics, Pose, axis_angle, rotation_error, translation_error
from dualcam.scenes import make_trajectory

gt = make_trajectory("orbit", {"degrees": 40.0, "target": (0.0, 0.0, 3.0)}, frames=9)

tilt = axis_angle((0, 0, 1), 10.0)
tilted = CameraTrajectory(gt.intrinsics, [gt.poses[0]] + [
    Pose(gt.poses[0].rotation @ (gt.poses[0].rotation.T @ p.rotation) @ tilt, p.translation)
    for p in gt.poses[1:]], gt.width, gt.height)
print("RE with a 10 degree roll on every later frame:", round(rotation_error(gt, tilted), 6))

scaled = CameraTrajectory(gt.intrinsics, [Pose(p.rotation, 2.5 * p.translation) for p in gt.poses],
                          gt.width, gt.height)
print("TE of the same path scaled by 2.5:", translation_error(gt, scaled))

intr = Intrinsics(32, 32, 16, 16)
drift = CameraTrajectory(intr, [Pose(np.eye(3), [0.1 * k, 0.0, 0.02 * k * k]) for k in range(9)])
print("RE/TE against a drifting straight path:",
      round(rotation_error(gt, drift), 3), round(translation_error(gt, drift), 3))
