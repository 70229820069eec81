"""On-disk formats: FMAP float maps, 8-bit PNG frames, manifests and bundle directories.

All writers go through a temporary file in the destination directory and
an ``os.replace``, so readers never observe a partially written file.
"""

from __future__ import annotations

import contextlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
_FMAP_HEADER = struct.Struct("<4sHHII")
MANIFEST_NAME = "manifest.json"


class FormatError(ValueError):
    """A file exists but its contents do not parse."""


@contextlib.contextmanager
def atomic_write(path, mode: str = "wb"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix="." + path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


# -- float maps ---------------------------------------------------------------------------

def encode_fmap(a: np.ndarray) -> bytes:
    a = np.asarray(a, dtype="<f4")
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise FormatError(f"float map must be (C, H, W) or (H, W), got shape {a.shape}")
    c, h, w = a.shape
    return _FMAP_HEADER.pack(FMAP_MAGIC, FMAP_VERSION, c, h, w) + np.ascontiguousarray(a).tobytes()


def decode_fmap(buf: bytes) -> np.ndarray:
    if len(buf) < _FMAP_HEADER.size:
        raise FormatError("float map truncated in header")
    magic, version, c, h, w = _FMAP_HEADER.unpack_from(buf)
    if magic != FMAP_MAGIC:
        raise FormatError(f"bad float map magic {magic!r}")
    if version != FMAP_VERSION:
        raise FormatError(f"unsupported float map version {version}")
    n = c * h * w
    body = buf[_FMAP_HEADER.size:]
    if len(body) != 4 * n:
        raise FormatError(f"float map body holds {len(body)} bytes, expected {4 * n}")
    return np.frombuffer(body, dtype="<f4").reshape(c, h, w).astype(np.float32)


def write_fmap(path, a: np.ndarray) -> None:
    with atomic_write(path) as fh:
        fh.write(encode_fmap(a))


def read_fmap(path) -> np.ndarray:
    return decode_fmap(Path(path).read_bytes())


# -- images ------------------------------------------------------------------------------------

def to_uint8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) floats in [0, 1] to (H, W, 3) bytes, rounding to nearest."""
    a = np.asarray(image, dtype=np.float64)
    return np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(a: np.ndarray) -> np.ndarray:
    # divide in float64 so k/255 matches the generator's quantized textures bit for bit
    return (a.transpose(2, 0, 1).astype(np.float64) / 255.0).astype(np.float32)


def write_png(path, image: np.ndarray) -> None:
    with atomic_write(path) as fh:
        Image.fromarray(to_uint8(image), mode="RGB").save(fh, format="PNG")


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return from_uint8(np.asarray(im.convert("RGB")))
    except OSError as exc:
        raise FormatError(f"cannot decode image {path}: {exc}") from exc


def quantize(image: np.ndarray) -> np.ndarray:
    """The exact values an image takes after a PNG round trip."""
    return from_uint8(to_uint8(image))


# -- json -----------------------------------------------------------------------------------------

def write_json(path, obj) -> None:
    with atomic_write(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed JSON in {path}: {exc}") from exc


# -- bundles ------------------------------------------------------------------------------------

def frame_name(view: int, i: int) -> str:
    return f"view{'LR'[view]}_f{i}.png"


def _map_name(kind: str, view: int, i: int) -> str:
    return f"{kind}{'LR'[view]}_f{i}.fmap"


MANIFEST_KEYS = ("format_version", "height", "width", "frames", "files")


def save_bundle(bundle, out_dir) -> Path:
    """Write frames, guidance maps and the manifest (last, so its presence marks completion)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"frames": {}, "disparity": {}, "occlusion": {}, "flow_next": {}, "flow_prev": {}}
    for i in range(bundle.n_frames):
        for v in (0, 1):
            key = f"{'LR'[v]}{i}"
            write_png(out / frame_name(v, i), bundle.frames[i, v])
            files["frames"][key] = frame_name(v, i)
            write_fmap(out / _map_name("disp", v, i), bundle.disparity[i, v])
            files["disparity"][key] = _map_name("disp", v, i)
            write_fmap(out / _map_name("occ", v, i), bundle.occlusion[i, v])
            files["occlusion"][key] = _map_name("occ", v, i)
            if (v, i) in bundle.flow_next:
                write_fmap(out / _map_name("fnext", v, i), bundle.flow_next[(v, i)])
                files["flow_next"][key] = _map_name("fnext", v, i)
            if (v, i) in bundle.flow_prev:
                write_fmap(out / _map_name("fprev", v, i), bundle.flow_prev[(v, i)])
                files["flow_prev"][key] = _map_name("fprev", v, i)
    manifest = dict(bundle.manifest)
    manifest["files"] = files
    manifest["frame_times"] = [i / (bundle.n_frames - 1) for i in range(bundle.n_frames)]
    write_json(out / MANIFEST_NAME, manifest)
    return out


def read_manifest(scene_dir) -> dict:
    path = Path(scene_dir) / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {scene_dir}")
    manifest = read_json(path)
    missing = [k for k in MANIFEST_KEYS if k not in manifest]
    if missing:
        raise FormatError(f"manifest lacks {', '.join(missing)}")
    return manifest


def load_bundle(scene_dir, with_scene: bool = True):
    """Read a bundle directory back; regenerates the analytic scene when the preset is known."""
    from .scenegen import SceneBundle, SceneError, regenerate

    root = Path(scene_dir)
    m = read_manifest(root)
    n, h, w = int(m["frames"]), int(m["height"]), int(m["width"])
    files = m["files"]
    frames = np.zeros((n, 2, 3, h, w), dtype=np.float32)
    disp = np.zeros((n, 2, h, w), dtype=np.float32)
    occ = np.ones((n, 2, h, w), dtype=np.float32)
    flow_next, flow_prev = {}, {}

    def need(group, key):
        try:
            return root / files[group][key]
        except KeyError:
            raise FormatError(f"manifest has no {group} entry for {key}") from None

    for i in range(n):
        for v in (0, 1):
            key = f"{'LR'[v]}{i}"
            img = read_png(need("frames", key))
            if img.shape != (3, h, w):
                raise FormatError(f"{files['frames'][key]} is {img.shape[1:]}, manifest says {(h, w)}")
            frames[i, v] = img
            disp[i, v] = read_fmap(need("disparity", key))[0]
            if key in files.get("occlusion", {}):
                occ[i, v] = read_fmap(need("occlusion", key))[0]
            if key in files.get("flow_next", {}):
                flow_next[(v, i)] = read_fmap(need("flow_next", key))
            if key in files.get("flow_prev", {}):
                flow_prev[(v, i)] = read_fmap(need("flow_prev", key))
    scene = None
    if with_scene and "preset" in m:
        try:
            scene = regenerate(m)
        except (SceneError, KeyError):
            scene = None
    return SceneBundle(scene, frames, disp, occ, flow_next, flow_prev, m)
