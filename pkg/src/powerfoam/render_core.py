"""Cameras, segment compositing and image output shared by both renderers."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .geometry import Ray

EARLY_STOP_T = 1e-4


class InvalidPixelError(ValueError):
    pass


class CameraError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole or equidistant-fisheye camera.

    Camera space looks down ``+z`` with ``+x`` right and ``+y`` down. ``pose``
    maps camera coordinates to world coordinates. For fisheye cameras only
    ``fx`` is used as the focal length ``f``.
    """

    model: str
    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray
    width: int
    height: int
    near: float = 1e-3
    far: float = 1e3

    def __post_init__(self):
        object.__setattr__(self, "pose", np.asarray(self.pose, dtype=np.float64).reshape(4, 4))
        for name in ("fx", "fy", "cx", "cy", "near", "far"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        self.validate()

    @classmethod
    def pinhole(cls, fx, fy, cx, cy, pose, width, height, near=1e-3, far=1e3) -> "Camera":
        return cls("pinhole", fx, fy, cx, cy, pose, width, height, near, far)

    @classmethod
    def fisheye(cls, f, cx, cy, pose, width, height, near=1e-3, far=1e3) -> "Camera":
        return cls("fisheye", f, f, cx, cy, pose, width, height, near, far)

    def validate(self) -> None:
        if self.model not in ("pinhole", "fisheye"):
            raise CameraError(f"unknown camera model {self.model!r}")
        if self.width <= 0 or self.height <= 0:
            raise CameraError("resolution must be positive")
        if not (0.0 < self.near < self.far):
            raise CameraError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        if not (self.fx > 0 and self.fy > 0):
            raise CameraError("focal lengths must be positive")
        if not np.all(np.isfinite(self.pose)):
            raise CameraError("pose must be finite")
        r = self.rotation
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9 or np.linalg.det(r) < 0:
            raise CameraError("pose rotation is not orthonormal and right-handed")
        if not np.array_equal(self.pose[3], [0.0, 0.0, 0.0, 1.0]):
            raise CameraError("pose must be a rigid transform")
        if self.model == "fisheye":
            corners = np.array([[0.5, 0.5], [self.width - 0.5, 0.5], [0.5, self.height - 0.5],
                                [self.width - 0.5, self.height - 0.5]])
            rho = np.hypot(corners[:, 0] - self.cx, corners[:, 1] - self.cy).max()
            if rho / self.fx > np.pi:
                raise CameraError("fisheye field of view exceeds 360 degrees at the image corners")

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    @property
    def origin(self) -> np.ndarray:
        return self.pose[:3, 3].copy()

    @property
    def focal_min(self) -> float:
        return min(self.fx, self.fy)

    def camera_directions(self, px: np.ndarray) -> np.ndarray:
        """Unit camera-space directions for ``(..., 2)`` pixel coordinates."""
        px = np.asarray(px, dtype=np.float64)
        x = px[..., 0] - self.cx
        y = px[..., 1] - self.cy
        if self.model == "pinhole":
            d = np.stack([x / self.fx, y / self.fy, np.ones_like(x)], axis=-1)
            return d / np.linalg.norm(d, axis=-1, keepdims=True)
        rho = np.hypot(x, y)
        theta = rho / self.fx
        if np.any(theta > np.pi):
            raise InvalidPixelError("fisheye pixel beyond 180 degrees from the optical axis")
        phi = np.arctan2(y, x)
        s = np.sin(theta)
        return np.stack([s * np.cos(phi), s * np.sin(phi), np.cos(theta)], axis=-1)

    def ray_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Origins and unit world directions for every pixel centre, row-major."""
        ys, xs = np.mgrid[0:self.height, 0:self.width]
        px = np.stack([xs + 0.5, ys + 0.5], axis=-1).reshape(-1, 2)
        d = self.camera_directions(px) @ self.rotation.T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(self.origin, d.shape).copy()
        return o, np.ascontiguousarray(d)

    def scaled(self, factor: float) -> "Camera":
        """Same camera with the resolution divided by ``factor``."""
        w = max(1, int(round(self.width / factor)))
        h = max(1, int(round(self.height / factor)))
        sx, sy = w / self.width, h / self.height
        return Camera(self.model, self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
                      self.pose, w, h, self.near, self.far)


def ray_for_pixel(cam: Camera, px) -> Ray:
    px = np.asarray(px, dtype=np.float64)
    if not (0.0 <= px[0] <= cam.width and 0.0 <= px[1] <= cam.height):
        raise InvalidPixelError(f"pixel {tuple(px)} outside {cam.width}x{cam.height}")
    d = cam.rotation @ cam.camera_directions(px)
    return Ray(cam.origin, d / np.linalg.norm(d))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-from-camera pose looking from ``eye`` towards ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [0.0, 1.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = x, y, z, eye
    return pose


def orbit_cameras(center, distance: float, n: int, *, width=64, height=64, model="pinhole",
                  fov_deg: float = 60.0, elevation: float = 0.35, near=1e-3, far=1e3,
                  phase: float = 0.0) -> list[Camera]:
    """``n`` cameras on a horizontal circle around ``center`` looking at it."""
    center = np.asarray(center, dtype=np.float64)
    cams = []
    for k in range(n):
        a = phase + 2.0 * np.pi * k / n
        eye = center + distance * np.array([np.cos(a) * np.cos(elevation), np.sin(a) * np.cos(elevation),
                                            np.sin(elevation)])
        pose = look_at(eye, center)
        if model == "pinhole":
            f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
            cams.append(Camera.pinhole(f, f, width / 2, height / 2, pose, width, height, near, far))
        else:
            f = 0.5 * width / np.radians(fov_deg / 2)
            cams.append(Camera.fisheye(f, width / 2, height / 2, pose, width, height, near, far))
    return cams


# ---------------------------------------------------------------------------
# compositing


class SegmentSample(NamedTuple):
    cell: int
    length: float
    density: float
    color: np.ndarray


def integrate_segments(samples: Sequence[SegmentSample], background=(0.0, 0.0, 0.0),
                       early_stop: float = EARLY_STOP_T) -> tuple[np.ndarray, float]:
    """Front-to-back alpha compositing of ordered segments.

    Accumulation stops as soon as the transmittance drops below ``early_stop``.
    """
    color = np.zeros(3)
    t = 1.0
    for s in samples:
        if s.length < 0 or not np.isfinite(s.length):
            raise ValueError(f"invalid segment length {s.length}")
        att = np.exp(-s.density * s.length)
        color += t * (1.0 - att) * np.asarray(s.color, dtype=np.float64)
        t *= att
        if t < early_stop:
            break
    return color + t * np.asarray(background, dtype=np.float64), t


# ---------------------------------------------------------------------------
# images


@dataclass(eq=False)
class Image:
    width: int
    height: int
    pixels: np.ndarray = field(repr=False)  # (height, width, 3) linear RGB

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(self.height, self.width, 3)

    @classmethod
    def from_array(cls, arr) -> "Image":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr.shape[1], arr.shape[0], arr)


def linear_to_srgb(c):
    c = np.clip(np.asarray(c, dtype=np.float64), 0.0, 1.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * np.power(c, 1.0 / 2.4) - 0.055)


def srgb_to_linear(s):
    s = np.asarray(s, dtype=np.float64)
    return np.where(s <= 0.04045, s / 12.92, np.power((s + 0.055) / 1.055, 2.4))


def encode_srgb8(pixels) -> np.ndarray:
    return np.floor(linear_to_srgb(pixels) * 255.0 + 0.5).astype(np.uint8)


def write_ppm(img: Image, path) -> None:
    data = encode_srgb8(img.pixels)
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(data.tobytes())
    except OSError as e:
        raise OSError(f"cannot write image {os.fspath(path)!r}: {e.strerror or e}") from e


def read_ppm(path) -> Image:
    """Read an 8-bit binary P6 file back into linear RGB."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise OSError(f"cannot read image {os.fspath(path)!r}: {e.strerror or e}") from e
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{os.fspath(path)!r} is not an 8-bit binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise ValueError(f"{os.fspath(path)!r} is truncated")
    return Image(w, h, srgb_to_linear(data.reshape(h, w, 3) / 255.0))
