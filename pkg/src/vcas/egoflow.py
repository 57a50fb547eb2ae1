"""Camera-induced (ego) optical flow from depth and relative pose.

Pixel ``(u, v)`` is column ``u``, row ``v``; integer coordinates are pixel
centres. A :class:`PoseSE3` maps frame-1 camera coordinates to frame-2 camera
coordinates: ``X2 = R @ X1 + t``.

Storage formats:

* flow PNG: 16-bit, 3 channels (u, v, valid), ``value = round(64 * f) + 32768``
* depth PNG: 16-bit, 1 channel, ``depth = value / 256`` metres, 0 = invalid
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import cv2
import numpy as np

from ._png import decode_png16, encode_png16

MIN_DEPTH = 1e-6
FLOW_SCALE = 64.0
FLOW_OFFSET = 2**15
DEPTH_SCALE = 256.0


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}


@dataclass(frozen=True)
class PoseSE3:
    r: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r, np.float64).reshape(3, 3)
        t = np.asarray(self.t, np.float64).reshape(3)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    def check(self, tol: float = 1e-9) -> None:
        if not np.all(np.isfinite(self.r)) or not np.all(np.isfinite(self.t)):
            raise ValueError("pose has non-finite entries")
        err = np.abs(self.r.T @ self.r - np.eye(3)).max()
        if err > tol:
            raise ValueError(f"rotation is not orthonormal (max |R^T R - I| = {err:.3g})")
        det = np.linalg.det(self.r)
        if abs(det - 1.0) > tol:
            raise ValueError(f"rotation determinant is {det:.12g}, expected 1")

    def inverse(self) -> "PoseSE3":
        return PoseSE3(self.r.T, -self.r.T @ self.t)

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """``self`` after ``other``."""
        return PoseSE3(self.r @ other.r, self.r @ other.t + self.t)

    @classmethod
    def from_dict(cls, d: dict) -> "PoseSE3":
        return cls(np.array(d["R"], float), np.array(d["t"], float))

    def to_dict(self) -> dict:
        return {"R": self.r.tolist(), "t": self.t.tolist()}


def rotation_from_axis_angle(rotvec) -> np.ndarray:
    """Rodrigues' formula."""
    w = np.asarray(rotvec, np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-15:
        return np.eye(3)
    k = w / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * (kx @ kx)


@dataclass
class DepthMap:
    z: np.ndarray
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        self.z = np.asarray(self.z, np.float64)
        if self.z.ndim != 2:
            raise ValueError("depth map must be 2-D")
        if self.valid is None:
            self.valid = np.isfinite(self.z) & (self.z > 0)
        else:
            self.valid = np.asarray(self.valid, bool) & np.isfinite(self.z) & (self.z > 0)

    @property
    def shape(self):
        return self.z.shape


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        self.u = np.asarray(self.u, np.float64)
        self.v = np.asarray(self.v, np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError("u and v must be 2-D arrays of equal shape")
        finite = np.isfinite(self.u) & np.isfinite(self.v)
        self.valid = finite if self.valid is None else np.asarray(self.valid, bool) & finite

    @property
    def shape(self):
        return self.u.shape

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    def norm(self) -> np.ndarray:
        """Per-pixel magnitude; 0 where invalid."""
        return np.where(self.valid, np.hypot(self.u, self.v), 0.0)


def compute_ego_flow(
    depth: DepthMap,
    k: CameraIntrinsics,
    pose: PoseSE3,
    invert_pose: bool = False,
) -> FlowField:
    """Flow that camera motion alone induces on a static scene.

    Each valid pixel is back-projected with its depth, moved by ``pose`` and
    re-projected. Pixels landing at or behind the second camera
    (``z' <= 1e-6``) are marked invalid. ``invert_pose`` accepts poses given
    in the opposite (frame-2 to frame-1) convention.
    """
    pose.check()
    if invert_pose:
        pose = pose.inverse()
    h, w = depth.shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    z = np.where(depth.valid, depth.z, 1.0)
    a = (u - k.cx) / k.fx
    b = (v - k.cy) / k.fy
    # (R P + t) / z with P = z (a, b, 1); the 1/z scale cancels in the
    # projection and keeps the identity pose exactly flow-free
    q = np.stack([a, b, np.ones_like(a)], axis=-1) @ pose.r.T + pose.t / z[..., None]
    ahead = q[..., 2] * z > MIN_DEPTH
    qz = np.where(ahead, q[..., 2], 1.0)
    du = k.fx * (q[..., 0] / qz - a)
    dv = k.fy * (q[..., 1] / qz - b)
    valid = depth.valid & ahead
    return FlowField(np.where(valid, du, 0.0), np.where(valid, dv, 0.0), valid)


def suppress_ego_flow(observed: FlowField, ego: FlowField) -> FlowField:
    """Residual flow ``observed - ego``; invalid where either input is."""
    if observed.shape != ego.shape:
        raise ValueError(f"dimension mismatch: {observed.shape} vs {ego.shape}")
    valid = observed.valid & ego.valid
    return FlowField(
        np.where(valid, observed.u - ego.u, 0.0),
        np.where(valid, observed.v - ego.v, 0.0),
        valid,
    )


# -- codecs ---------------------------------------------------------------------


def encode_flow_png(f: FlowField) -> bytes:
    """Encode to a 16-bit RGB PNG (u, v, valid). Raises on out-of-range flow."""
    valid = f.valid
    su = np.rint(np.where(valid, f.u, 0.0) * FLOW_SCALE) + FLOW_OFFSET
    sv = np.rint(np.where(valid, f.v, 0.0) * FLOW_SCALE) + FLOW_OFFSET
    for name, s in (("u", su), ("v", sv)):
        if s.size and (s.min() < 0 or s.max() > 65535):
            raise ValueError(f"flow component {name} outside the encodable range (|f| < 512 px)")
    rgb = np.stack([su, sv, valid.astype(np.float64)], axis=-1).astype(np.uint16)
    return encode_png16(rgb[..., ::-1])


def decode_flow_png(data: bytes) -> FlowField:
    rgb = decode_png16(data, 3)[..., ::-1].astype(np.float64)
    valid = rgb[..., 2] > 0
    u = np.where(valid, (rgb[..., 0] - FLOW_OFFSET) / FLOW_SCALE, 0.0)
    v = np.where(valid, (rgb[..., 1] - FLOW_OFFSET) / FLOW_SCALE, 0.0)
    return FlowField(u, v, valid)


def encode_depth_png(d: DepthMap) -> bytes:
    s = np.where(d.valid, np.rint(np.where(d.valid, d.z, 0.0) * DEPTH_SCALE), 0.0)
    if np.any(d.valid & ((s < 1) | (s > 65535))):
        raise ValueError("depth outside the encodable range [1/512, 256) m")
    return encode_png16(s.astype(np.uint16))


def decode_depth_png(data: bytes) -> DepthMap:
    raw = decode_png16(data, 1).astype(np.float64)
    return DepthMap(raw / DEPTH_SCALE, raw > 0)


def read_flow(path) -> FlowField:
    with open(path, "rb") as f:
        return decode_flow_png(f.read())


def write_flow(path, flow: FlowField) -> None:
    with open(path, "wb") as f:
        f.write(encode_flow_png(flow))


def read_depth(path) -> DepthMap:
    with open(path, "rb") as f:
        return decode_depth_png(f.read())


def write_depth(path, depth: DepthMap) -> None:
    with open(path, "wb") as f:
        f.write(encode_depth_png(depth))


# -- visualisation --------------------------------------------------------------


def flow_to_color(f: FlowField, max_norm: Union[float, str, None] = "auto") -> np.ndarray:
    """Colour-code a flow field as 8-bit RGB, shape ``(H, W, 3)``.

    Hue follows the flow direction ``atan2(v, u)``, saturation grows linearly
    with ``|f| / max_norm`` and saturates at 1. Zero flow is white and invalid
    pixels are black. ``max_norm="auto"`` uses the largest valid magnitude.
    """
    mag = f.norm()
    if max_norm in (None, "auto"):
        max_norm = float(mag.max()) if mag.size else 0.0
    max_norm = float(max_norm)
    if max_norm <= 0:
        max_norm = 1.0
    hue = np.degrees(np.arctan2(f.v, f.u)) % 360.0
    sat = np.clip(mag / max_norm, 0.0, 1.0)
    hsv = np.stack([hue, sat, np.ones_like(sat)], axis=-1).astype(np.float32)
    rgb = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)
    rgb = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    rgb[~f.valid] = 0
    return rgb
