"""Class assignment, whole-class removal/extraction, and PLY assets.

Removal is pure indicator filtering on the per-Gaussian argmax class: kept
Gaussians keep their parameters bit for bit, with no geometric
post-processing. Assets travel as a single binary PLY whose vertex layout
matches the de-facto Gaussian splatting format, with the semantic fields
appended as extra properties so standard viewers still load the file.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import sh
from .exceptions import DataError, InvalidParameterError
from .scene import ClassTable, GaussianSet, class_probs

PLY_MAGIC = b"ply"


@dataclass
class ClassAssignment:
    """Hard class decision per Gaussian."""

    class_ids: np.ndarray  # (N,) int64 argmax class
    confidence: np.ndarray  # (N,) max softmax probability


def assign_classes(gs: GaussianSet) -> ClassAssignment:
    """Argmax class per Gaussian; ties resolve to the lowest class id."""
    if gs.num_classes < 1:
        raise InvalidParameterError("scene has no semantic classes")
    if gs.count == 0:
        return ClassAssignment(np.zeros(0, dtype=np.int64), np.zeros(0))
    probs = class_probs(gs.semantic_logits)
    return ClassAssignment(
        class_ids=np.argmax(gs.semantic_logits, axis=1).astype(np.int64),
        confidence=probs.max(axis=1),
    )


def remove_classes(
    gs: GaussianSet,
    remove_set,
    min_confidence: float | None = None,
) -> GaussianSet:
    """Drop every Gaussian whose assigned class is in remove_set.

    Pure operation: survivors are bitwise copies. With min_confidence set,
    only Gaussians of a targeted class whose confidence reaches the
    threshold are dropped; low-confidence ones survive.
    """
    remove = set(int(c) for c in remove_set)
    bad = [c for c in remove if not 0 <= c < gs.num_classes]
    if bad:
        raise InvalidParameterError(f"class ids {sorted(bad)} outside 0..{gs.num_classes - 1}")
    if not remove or gs.count == 0:
        return gs.take(slice(None))
    assignment = assign_classes(gs)
    targeted = np.isin(assignment.class_ids, sorted(remove))
    if min_confidence is not None:
        targeted &= assignment.confidence >= min_confidence
    kept = gs.take(~targeted)
    if kept.count == 0:
        warnings.warn("removal left an empty Gaussian set", stacklevel=2)
    return kept


def extract_classes(gs: GaussianSet, keep_set) -> GaussianSet:
    """Complement of remove_classes: keep only the listed classes."""
    keep = set(int(c) for c in keep_set)
    bad = [c for c in keep if not 0 <= c < gs.num_classes]
    if bad:
        raise InvalidParameterError(f"class ids {sorted(bad)} outside 0..{gs.num_classes - 1}")
    return remove_classes(gs, set(range(gs.num_classes)) - keep)


def _ply_property_names(sh_degree: int, num_classes: int) -> list[str]:
    names = ["x", "y", "z", "nx", "ny", "nz"]
    names += [f"f_dc_{i}" for i in range(3)]
    rest = sh.num_coeffs(sh_degree) - 1
    names += [f"f_rest_{i}" for i in range(3 * rest)]
    names += ["opacity"]
    names += [f"scale_{i}" for i in range(3)]
    names += [f"rot_{i}" for i in range(4)]
    names += ["sem_class"]
    names += [f"sem_logit_{i}" for i in range(num_classes)]
    return names


def export_ply(gs: GaussianSet, path, class_table: ClassTable | None = None) -> None:
    """Write the set as a binary little-endian PLY asset.

    Layout per vertex: x y z, zero normals, f_dc_0..2, f_rest_*, opacity
    (raw logit), scale_0..2 (log), rot_0..3, then the semantic extension:
    sem_class (assigned id, float-encoded) and sem_logit_0..C-1. The class
    table rides in header comments.
    """
    n = gs.count
    degree = gs.max_sh_degree
    rest = sh.num_coeffs(degree) - 1
    names = _ply_property_names(degree, gs.num_classes)

    columns = np.zeros((n, len(names)), dtype=np.float32)
    columns[:, 0:3] = gs.positions
    # normals stay zero for ecosystem compatibility
    columns[:, 6:9] = gs.sh_coeffs[:, :, 0]
    if rest:
        columns[:, 9 : 9 + 3 * rest] = gs.sh_coeffs[:, :, 1:].reshape(n, 3 * rest)
    base = 9 + 3 * rest
    columns[:, base] = gs.opacity_logits
    columns[:, base + 1 : base + 4] = gs.log_scales
    columns[:, base + 4 : base + 8] = gs.rotations
    if n:
        assignment = assign_classes(gs)
        columns[:, base + 8] = assignment.class_ids.astype(np.float32)
    columns[:, base + 9 :] = gs.semantic_logits

    header = ["ply", "format binary_little_endian 1.0"]
    header.append(f"comment semantic_classes {gs.num_classes}")
    if class_table is not None:
        if class_table.num_classes != gs.num_classes:
            raise InvalidParameterError(
                f"class table has {class_table.num_classes} classes, scene has {gs.num_classes}"
            )
        for cid, name in enumerate(class_table.names):
            header.append(f"comment class {cid} {name}")
    header.append(f"element vertex {n}")
    header += [f"property float {name}" for name in names]
    header.append("end_header")

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(columns).tobytes())


def _parse_ply_header(fh):
    first = fh.readline().strip()
    if first != PLY_MAGIC:
        raise DataError("not a PLY file (missing 'ply' magic)")
    fmt = fh.readline().strip()
    if fmt != b"format binary_little_endian 1.0":
        raise DataError(f"unsupported PLY format line: {fmt.decode('ascii', 'replace')}")
    properties: list[str] = []
    comments: list[str] = []
    count = None
    while True:
        line = fh.readline()
        if not line:
            raise DataError("PLY header ended before end_header")
        text = line.strip().decode("ascii", "replace")
        if text == "end_header":
            break
        if text.startswith("comment"):
            comments.append(text[len("comment") :].strip())
        elif text.startswith("element vertex"):
            count = int(text.split()[-1])
        elif text.startswith("element"):
            raise DataError(f"unexpected PLY element: {text}")
        elif text.startswith("property"):
            parts = text.split()
            if parts[1] != "float":
                raise DataError(f"only float properties are supported, got: {text}")
            properties.append(parts[2])
    if count is None:
        raise DataError("PLY header declares no vertex element")
    return count, properties, comments


def import_ply(path, num_classes: int | None = None):
    """Load a PLY asset back into a GaussianSet.

    Returns (GaussianSet, ClassTable | None). Standard Gaussian splatting
    files without sem_ properties import with zeroed semantic logits
    (uniform class belief) and a warning; num_classes sizes that fallback.
    """
    with open(path, "rb") as fh:
        count, properties, comments = _parse_ply_header(fh)
        data = np.fromfile(fh, dtype="<f4", count=count * len(properties))
    if data.size != count * len(properties):
        raise DataError(
            f"{path}: expected {count * len(properties)} floats, file holds {data.size}"
        )
    data = data.reshape(count, len(properties)).astype(np.float64)
    col = {name: i for i, name in enumerate(properties)}

    for required in ("x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                     "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"):
        if required not in col:
            raise DataError(f"{path}: missing required property {required!r}")

    rest_names = sorted(
        (name for name in properties if name.startswith("f_rest_")),
        key=lambda s: int(s.split("_")[-1]),
    )
    if len(rest_names) % 3 != 0:
        raise DataError(f"{path}: f_rest property count {len(rest_names)} is not divisible by 3")
    rest = len(rest_names) // 3
    try:
        degree = sh.degree_for_coeffs(rest + 1)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc

    coeffs = np.zeros((count, 3, rest + 1))
    coeffs[:, :, 0] = data[:, [col["f_dc_0"], col["f_dc_1"], col["f_dc_2"]]]
    if rest:
        rest_block = data[:, [col[n] for n in rest_names]]
        coeffs[:, :, 1:] = rest_block.reshape(count, 3, rest)

    logit_names = sorted(
        (name for name in properties if name.startswith("sem_logit_")),
        key=lambda s: int(s.split("_")[-1]),
    )
    declared = None
    class_names = {}
    for comment in comments:
        parts = comment.split()
        if parts[:1] == ["semantic_classes"]:
            declared = int(parts[1])
        elif parts[:1] == ["class"] and len(parts) >= 3:
            class_names[int(parts[1])] = " ".join(parts[2:])

    if logit_names:
        if declared is not None and declared != len(logit_names):
            raise DataError(
                f"{path}: header declares {declared} classes but file has "
                f"{len(logit_names)} sem_logit properties"
            )
        semantic = data[:, [col[n] for n in logit_names]]
    else:
        c = num_classes or (declared or 1)
        warnings.warn(
            f"{path} carries no semantic properties; importing with uniform class belief",
            stacklevel=2,
        )
        semantic = np.zeros((count, c))

    table = None
    if class_names:
        if sorted(class_names) != list(range(len(class_names))):
            raise DataError(f"{path}: class comments are not dense 0..C-1")
        table = ClassTable(names=tuple(class_names[i] for i in range(len(class_names))))

    gs = GaussianSet(
        positions=data[:, [col["x"], col["y"], col["z"]]],
        rotations=data[:, [col["rot_0"], col["rot_1"], col["rot_2"], col["rot_3"]]],
        log_scales=data[:, [col["scale_0"], col["scale_1"], col["scale_2"]]],
        opacity_logits=data[:, col["opacity"]],
        sh_coeffs=coeffs,
        semantic_logits=semantic,
        active_sh_degree=degree,
    )
    return gs, table
