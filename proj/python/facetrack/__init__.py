"""Blendshape face tracking on RGBD sequences."""

from ._facetrack import (
    CoreTensor,
    FacetrackError,
    depth,
    evaluate,
    gen_rig_tensor,
    mae_mm,
    mean_identity,
    read_color,
    read_depth_pgm16,
    read_depth_raw,
    read_track,
    recover_depth,
    set_thread_count,
    synth,
    track,
    train_synthetic,
)

__all__ = [
    "CoreTensor",
    "FacetrackError",
    "depth",
    "evaluate",
    "gen_rig_tensor",
    "mae_mm",
    "mean_identity",
    "read_color",
    "read_depth_pgm16",
    "read_depth_raw",
    "read_track",
    "recover_depth",
    "set_thread_count",
    "synth",
    "track",
    "train_synthetic",
]
