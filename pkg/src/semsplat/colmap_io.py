"""COLMAP sparse-model reader/writer.

Follows the published text and binary layouts bit for bit (cameras, images,
points3D). Only perspective models without distortion are accepted: PINHOLE
and SIMPLE_PINHOLE (whose single focal expands to fx = fy). Per-image 2D
observations and per-point tracks are parsed past but not retained; the
writer emits empty lists for them.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import CorruptFileError, DataError, UnsupportedModelError

# model_id -> (name, param count) from COLMAP's camera model table.
_CAMERA_MODELS = {
    0: ("SIMPLE_PINHOLE", 3),
    1: ("PINHOLE", 4),
    2: ("SIMPLE_RADIAL", 4),
    3: ("RADIAL", 5),
    4: ("OPENCV", 8),
    5: ("OPENCV_FISHEYE", 8),
    6: ("FULL_OPENCV", 12),
    7: ("FOV", 5),
    8: ("SIMPLE_RADIAL_FISHEYE", 4),
    9: ("RADIAL_FISHEYE", 5),
    10: ("THIN_PRISM_FISHEYE", 12),
}
_MODEL_IDS = {name: mid for mid, (name, _) in _CAMERA_MODELS.items()}
SUPPORTED_MODELS = ("SIMPLE_PINHOLE", "PINHOLE")


@dataclass
class ColmapCamera:
    camera_id: int
    model: str
    width: int
    height: int
    params: np.ndarray  # raw COLMAP params for the model

    @property
    def intrinsics(self) -> tuple[float, float, float, float]:
        """(fx, fy, cx, cy); SIMPLE_PINHOLE's f expands to fx = fy."""
        if self.model == "SIMPLE_PINHOLE":
            f, cx, cy = self.params
            return float(f), float(f), float(cx), float(cy)
        fx, fy, cx, cy = self.params
        return float(fx), float(fy), float(cx), float(cy)


@dataclass
class ColmapImage:
    image_id: int
    qvec: np.ndarray  # (4,) w, x, y, z; world-to-camera rotation
    tvec: np.ndarray  # (3,)
    camera_id: int
    name: str

    def world_to_camera(self) -> np.ndarray:
        q = self.qvec / np.linalg.norm(self.qvec)
        w, x, y, z = q
        R = np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )
        W = np.eye(4)
        W[:3, :3] = R
        W[:3, 3] = self.tvec
        return W


@dataclass
class ColmapPoint:
    point_id: int
    xyz: np.ndarray  # (3,)
    rgb: np.ndarray  # (3,) uint8
    error: float


@dataclass
class SparseModel:
    cameras: dict[int, ColmapCamera] = field(default_factory=dict)
    images: dict[int, ColmapImage] = field(default_factory=dict)
    points: dict[int, ColmapPoint] = field(default_factory=dict)

    def validate(self) -> None:
        for img in self.images.values():
            if img.camera_id not in self.cameras:
                raise DataError(
                    f"image {img.image_id} ({img.name}) references missing camera {img.camera_id}"
                )
            norm = np.linalg.norm(img.qvec)
            if abs(norm - 1.0) > 1e-4:
                raise DataError(f"image {img.image_id} quaternion norm {norm:.6f} deviates from 1")

    def point_cloud(self):
        """(positions (N,3), colors (N,3) in [0,1]) ordered by point id."""
        ids = sorted(self.points)
        xyz = np.array([self.points[i].xyz for i in ids], dtype=np.float64).reshape(-1, 3)
        rgb = np.array([self.points[i].rgb for i in ids], dtype=np.float64).reshape(-1, 3) / 255.0
        return xyz, rgb


def _check_model(model: str) -> None:
    if model not in SUPPORTED_MODELS:
        raise UnsupportedModelError(
            f"unsupported COLMAP camera model {model!r}; supported: {', '.join(SUPPORTED_MODELS)}"
        )


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CorruptFileError(f"truncated file while reading {what}", byte_offset=fh.tell())
    return data


def _unpack(fh, fmt: str, what: str):
    size = struct.calcsize(fmt)
    return struct.unpack(fmt, _read_exact(fh, size, what))


def _read_cameras_text(path: Path) -> dict[int, ColmapCamera]:
    cameras = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        elems = line.split()
        model = elems[1]
        _check_model(model)
        cameras[int(elems[0])] = ColmapCamera(
            camera_id=int(elems[0]),
            model=model,
            width=int(elems[2]),
            height=int(elems[3]),
            params=np.array([float(e) for e in elems[4:]]),
        )
    return cameras


def _read_images_text(path: Path) -> dict[int, ColmapImage]:
    images = {}
    lines = [l for l in path.read_text().splitlines()]
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line or line.startswith("#"):
            continue
        elems = line.split()
        image_id = int(elems[0])
        images[image_id] = ColmapImage(
            image_id=image_id,
            qvec=np.array([float(e) for e in elems[1:5]]),
            tvec=np.array([float(e) for e in elems[5:8]]),
            camera_id=int(elems[8]),
            name=elems[9],
        )
        i += 1  # second line per image: 2D points, not retained
    return images


def _read_points_text(path: Path) -> dict[int, ColmapPoint]:
    points = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        elems = line.split()
        pid = int(elems[0])
        points[pid] = ColmapPoint(
            point_id=pid,
            xyz=np.array([float(e) for e in elems[1:4]]),
            rgb=np.array([int(e) for e in elems[4:7]], dtype=np.uint8),
            error=float(elems[7]),
        )
    return points


def _read_cameras_binary(path: Path) -> dict[int, ColmapCamera]:
    cameras = {}
    with open(path, "rb") as fh:
        (num,) = _unpack(fh, "<Q", "camera count")
        for _ in range(num):
            cid, model_id, width, height = _unpack(fh, "<iiQQ", "camera header")
            if model_id not in _CAMERA_MODELS:
                raise CorruptFileError(f"unknown camera model id {model_id}", byte_offset=fh.tell())
            name, nparams = _CAMERA_MODELS[model_id]
            _check_model(name)
            params = _unpack(fh, f"<{nparams}d", "camera params")
            cameras[cid] = ColmapCamera(
                camera_id=cid, model=name, width=int(width), height=int(height),
                params=np.array(params),
            )
    return cameras


def _read_images_binary(path: Path) -> dict[int, ColmapImage]:
    images = {}
    with open(path, "rb") as fh:
        (num,) = _unpack(fh, "<Q", "image count")
        for _ in range(num):
            props = _unpack(fh, "<idddddddi", "image header")
            image_id = props[0]
            name_bytes = bytearray()
            while True:
                ch = _read_exact(fh, 1, "image name")
                if ch == b"\x00":
                    break
                name_bytes.extend(ch)
            (num_points2d,) = _unpack(fh, "<Q", "image 2D point count")
            _read_exact(fh, 24 * num_points2d, "image 2D points")
            images[image_id] = ColmapImage(
                image_id=image_id,
                qvec=np.array(props[1:5]),
                tvec=np.array(props[5:8]),
                camera_id=props[8],
                name=name_bytes.decode("utf-8"),
            )
    return images


def _read_points_binary(path: Path) -> dict[int, ColmapPoint]:
    points = {}
    with open(path, "rb") as fh:
        (num,) = _unpack(fh, "<Q", "point count")
        for _ in range(num):
            props = _unpack(fh, "<QdddBBBd", "point record")
            (track_len,) = _unpack(fh, "<Q", "track length")
            _read_exact(fh, 8 * track_len, "track elements")
            points[props[0]] = ColmapPoint(
                point_id=props[0],
                xyz=np.array(props[1:4]),
                rgb=np.array(props[4:7], dtype=np.uint8),
                error=float(props[7]),
            )
    return points


def parse_colmap(model_dir, format: str = "auto") -> SparseModel:
    """Load a COLMAP sparse model directory.

    format: "text", "binary", or "auto" (prefer binary when both exist).
    Image quaternions are renormalized; referential integrity is checked.
    """
    model_dir = Path(model_dir)
    if format == "auto":
        format = "binary" if (model_dir / "cameras.bin").exists() else "text"
    if format not in ("text", "binary"):
        raise DataError(f"unknown COLMAP format {format!r} (expected 'text' or 'binary')")
    ext = ".txt" if format == "text" else ".bin"
    for stem in ("cameras", "images", "points3D"):
        if not (model_dir / f"{stem}{ext}").exists():
            raise DataError(f"missing COLMAP file: {model_dir / (stem + ext)}")
    if format == "text":
        model = SparseModel(
            cameras=_read_cameras_text(model_dir / "cameras.txt"),
            images=_read_images_text(model_dir / "images.txt"),
            points=_read_points_text(model_dir / "points3D.txt"),
        )
    else:
        model = SparseModel(
            cameras=_read_cameras_binary(model_dir / "cameras.bin"),
            images=_read_images_binary(model_dir / "images.bin"),
            points=_read_points_binary(model_dir / "points3D.bin"),
        )
    model.validate()
    for img in model.images.values():
        norm = np.linalg.norm(img.qvec)
        if abs(norm - 1.0) > 1e-12:  # keep already-unit quaternions bit-exact
            img.qvec = img.qvec / norm
    return model


def _fmt(x: float) -> str:
    """Shortest decimal text that round-trips the float exactly."""
    return repr(float(x))


def write_colmap(model: SparseModel, model_dir, format: str) -> None:
    """Write a sparse model in COLMAP's text or binary layout."""
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    if format == "text":
        _write_text(model, model_dir)
    elif format == "binary":
        _write_binary(model, model_dir)
    else:
        raise DataError(f"unknown COLMAP format {format!r} (expected 'text' or 'binary')")


def _write_text(model: SparseModel, model_dir: Path) -> None:
    with open(model_dir / "cameras.txt", "w") as fh:
        fh.write("# Camera list with one line of data per camera:\n")
        fh.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for cid in sorted(model.cameras):
            cam = model.cameras[cid]
            params = " ".join(_fmt(p) for p in cam.params)
            fh.write(f"{cam.camera_id} {cam.model} {cam.width} {cam.height} {params}\n")
    with open(model_dir / "images.txt", "w") as fh:
        fh.write("# Image list with two lines of data per image:\n")
        fh.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for iid in sorted(model.images):
            img = model.images[iid]
            q = " ".join(_fmt(v) for v in img.qvec)
            t = " ".join(_fmt(v) for v in img.tvec)
            fh.write(f"{img.image_id} {q} {t} {img.camera_id} {img.name}\n\n")
    with open(model_dir / "points3D.txt", "w") as fh:
        fh.write("# 3D point list with one line of data per point:\n")
        fh.write("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        for pid in sorted(model.points):
            pt = model.points[pid]
            xyz = " ".join(_fmt(v) for v in pt.xyz)
            rgb = " ".join(str(int(v)) for v in pt.rgb)
            fh.write(f"{pt.point_id} {xyz} {rgb} {_fmt(pt.error)}\n")


def _write_binary(model: SparseModel, model_dir: Path) -> None:
    with open(model_dir / "cameras.bin", "wb") as fh:
        fh.write(struct.pack("<Q", len(model.cameras)))
        for cid in sorted(model.cameras):
            cam = model.cameras[cid]
            fh.write(struct.pack("<iiQQ", cam.camera_id, _MODEL_IDS[cam.model], cam.width, cam.height))
            fh.write(struct.pack(f"<{len(cam.params)}d", *cam.params))
    with open(model_dir / "images.bin", "wb") as fh:
        fh.write(struct.pack("<Q", len(model.images)))
        for iid in sorted(model.images):
            img = model.images[iid]
            fh.write(struct.pack("<idddddddi", img.image_id, *img.qvec, *img.tvec, img.camera_id))
            fh.write(img.name.encode("utf-8") + b"\x00")
            fh.write(struct.pack("<Q", 0))  # no retained 2D observations
    with open(model_dir / "points3D.bin", "wb") as fh:
        fh.write(struct.pack("<Q", len(model.points)))
        for pid in sorted(model.points):
            pt = model.points[pid]
            fh.write(struct.pack("<QdddBBBd", pt.point_id, *pt.xyz, *(int(v) for v in pt.rgb), pt.error))
            fh.write(struct.pack("<Q", 0))  # empty track
