"""JSON scene and camera files.

Floats are written with ``repr`` (shortest round-trip decimal), so loading a
saved scene reproduces every array bit for bit.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .render_core import Camera, CameraError
from .scene import NUM_AXES, Scene, SceneValidationError, separate_coincident, validate_scene

FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed scene or camera file."""


def _floats(a) -> list:
    return np.asarray(a, dtype=np.float64).tolist()


def scene_to_dict(scene: Scene) -> dict:
    cells = []
    for i in range(scene.n_cells):
        steiner = bool(scene.is_steiner[i])
        details = [] if steiner else [
            {"uv": _floats(scene.detail_uv[i, j]), "displacement": float(scene.detail_disp[i, j]),
             "values": _floats(scene.detail_values[i, j])}
            for j in range(scene.k)
        ]
        cells.append({
            "position": _floats(scene.positions[i]), "radius": float(scene.radii[i]),
            "normal": _floats(scene.normals[i]), "density": float(scene.densities[i]),
            "is_steiner": steiner, "details": details,
        })
    return {
        "format_version": FORMAT_VERSION, "temperature": float(scene.temperature),
        "background": _floats(scene.background), "sv_gamma": float(scene.gamma),
        "axes": _floats(scene.axes), "detail_count": scene.k, "cells": cells,
    }


def _arr(value, shape, what):
    try:
        a = np.array(value, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise FormatError(f"{what}: expected numbers") from e
    if a.shape != shape:
        raise FormatError(f"{what}: expected shape {shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise FormatError(f"{what}: non-finite value")
    return a


def _num(value, what) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise FormatError(f"{what}: expected a number")
    if not np.isfinite(value):
        raise FormatError(f"{what}: non-finite value")
    return float(value)


def scene_from_dict(doc: dict, validate: bool = True) -> Scene:
    try:
        if doc.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"unsupported format_version {doc.get('format_version')!r}")
        cells = doc["cells"]
        n = len(cells)
        k = int(doc.get("detail_count", max((len(c["details"]) for c in cells), default=0)))
        pos = np.zeros((n, 3))
        rad = np.zeros(n)
        nrm = np.zeros((n, 3))
        dens = np.zeros(n)
        st = np.zeros(n, dtype=bool)
        uv = np.zeros((n, k, 2))
        disp = np.zeros((n, k))
        vals = np.zeros((n, k, NUM_AXES, 3))
        for i, c in enumerate(cells):
            pos[i] = _arr(c["position"], (3,), f"cell {i} position")
            rad[i] = _num(c["radius"], f"cell {i} radius")
            nrm[i] = _arr(c["normal"], (3,), f"cell {i} normal")
            dens[i] = _num(c["density"], f"cell {i} density")
            if not isinstance(c["is_steiner"], bool):
                raise FormatError(f"cell {i} is_steiner: expected true/false")
            st[i] = c["is_steiner"]
            det = c["details"]
            if st[i] and det:
                raise FormatError(f"cell {i}: Steiner cells carry no detail sites")
            if not st[i] and len(det) != k:
                raise FormatError(f"cell {i}: expected {k} detail sites, got {len(det)}")
            for j, s in enumerate(det):
                uv[i, j] = _arr(s["uv"], (2,), f"cell {i} detail {j} uv")
                disp[i, j] = _num(s["displacement"], f"cell {i} detail {j} displacement")
                vals[i, j] = _arr(s["values"], (NUM_AXES, 3), f"cell {i} detail {j} values")
        scene = Scene(positions=pos, radii=rad, normals=nrm, densities=dens, is_steiner=st, detail_uv=uv,
                      detail_disp=disp, detail_values=vals,
                      temperature=_num(doc["temperature"], "temperature"),
                      background=_arr(doc["background"], (3,), "background"),
                      axes=_arr(doc["axes"], (NUM_AXES, 3), "axes"),
                      gamma=_num(doc["sv_gamma"], "sv_gamma"))
    except KeyError as e:
        raise FormatError(f"missing field {e.args[0]!r}") from e
    except (TypeError, AttributeError) as e:
        raise FormatError(f"malformed scene document: {e}") from e
    if validate:
        try:
            if np.all(np.isfinite(scene.positions)) and np.all(np.isfinite(scene.radii)):
                scene = separate_coincident(scene)
            validate_scene(scene)
        except SceneValidationError as e:
            raise FormatError(f"invalid scene: {e}") from e
    return scene


def dumps_scene(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), allow_nan=False, separators=(",", ":")) + "\n"


def save_scene(scene: Scene, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(dumps_scene(scene))


def _read_json(path, what):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as e:
        raise FormatError(f"cannot read {what} {os.fspath(path)!r}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{os.fspath(path)!r} is not valid JSON: {e}") from e


def load_scene(path, validate: bool = True) -> Scene:
    doc = _read_json(path, "scene")
    if not isinstance(doc, dict):
        raise FormatError(f"{os.fspath(path)!r}: expected a JSON object")
    try:
        return scene_from_dict(doc, validate)
    except FormatError as e:
        raise FormatError(f"{os.fspath(path)!r}: {e}") from e


# ---------------------------------------------------------------------------
# cameras


def camera_to_dict(cam: Camera) -> dict:
    if cam.model == "pinhole":
        intr = {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy}
    else:
        intr = {"f": cam.fx, "cx": cam.cx, "cy": cam.cy}
    return {"model": cam.model, "intrinsics": intr, "world_from_camera": _floats(cam.pose),
            "resolution": [cam.width, cam.height], "near": cam.near, "far": cam.far}


def camera_from_dict(doc: dict) -> Camera:
    try:
        model = doc["model"]
        intr = doc["intrinsics"]
        pose = _arr(doc["world_from_camera"], (4, 4), "world_from_camera")
        w, h = doc["resolution"]
        if not (isinstance(w, int) and isinstance(h, int)):
            raise FormatError("resolution must be two integers")
        near = _num(doc.get("near", 1e-3), "near")
        far = _num(doc.get("far", 1e3), "far")
        if model == "pinhole":
            return Camera.pinhole(_num(intr["fx"], "fx"), _num(intr["fy"], "fy"), _num(intr["cx"], "cx"),
                                  _num(intr["cy"], "cy"), pose, w, h, near, far)
        if model == "fisheye":
            return Camera.fisheye(_num(intr["f"], "f"), _num(intr["cx"], "cx"), _num(intr["cy"], "cy"),
                                  pose, w, h, near, far)
        raise FormatError(f"unknown camera model {model!r}")
    except KeyError as e:
        raise FormatError(f"missing camera field {e.args[0]!r}") from e
    except FormatError:
        raise
    except CameraError as e:
        raise FormatError(f"invalid camera: {e}") from e
    except (TypeError, ValueError) as e:
        raise FormatError(f"malformed camera: {e}") from e


def save_camera(cam: Camera, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(json.dumps(camera_to_dict(cam), allow_nan=False, indent=1) + "\n")


def load_camera(path) -> Camera:
    doc = _read_json(path, "camera")
    if not isinstance(doc, dict):
        raise FormatError(f"{os.fspath(path)!r}: expected a JSON object")
    try:
        return camera_from_dict(doc)
    except FormatError as e:
        raise FormatError(f"{os.fspath(path)!r}: {e}") from e
