"""Real spherical-harmonics basis used for view-dependent color.

Basis convention and constants follow the one used throughout the Gaussian
splatting ecosystem (Condon-Shortley phase folded into the constants), so
exported assets shade identically in third-party viewers. Degree D uses
(D+1)^2 basis functions.
"""

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

MAX_DEGREE = 3


def num_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def degree_for_coeffs(n: int) -> int:
    """Inverse of num_coeffs; raises for counts that are not (D+1)^2."""
    for d in range(MAX_DEGREE + 1):
        if num_coeffs(d) == n:
            return d
    raise ValueError(f"{n} is not a valid SH coefficient count (expected 1, 4, 9 or 16)")


def eval_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate the real SH basis at unit directions.

    dirs: (N, 3) unit vectors. Returns (N, (degree+1)^2).
    """
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = dirs.shape[0]
    out = np.empty((n, num_coeffs(degree)), dtype=np.float64)
    out[:, 0] = C0
    if degree < 1:
        return out
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out[:, 1] = -C1 * y
    out[:, 2] = C1 * z
    out[:, 3] = -C1 * x
    if degree < 2:
        return out
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out[:, 4] = C2[0] * xy
    out[:, 5] = C2[1] * yz
    out[:, 6] = C2[2] * (2.0 * zz - xx - yy)
    out[:, 7] = C2[3] * xz
    out[:, 8] = C2[4] * (xx - yy)
    if degree < 3:
        return out
    out[:, 9] = C3[0] * y * (3.0 * xx - yy)
    out[:, 10] = C3[1] * xy * z
    out[:, 11] = C3[2] * y * (4.0 * zz - xx - yy)
    out[:, 12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[:, 13] = C3[4] * x * (4.0 * zz - xx - yy)
    out[:, 14] = C3[5] * z * (xx - yy)
    out[:, 15] = C3[6] * x * (xx - 3.0 * yy)
    return out


def eval_basis_jacobian(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d(basis)/d(direction) at unit directions, shape (N, (degree+1)^2, 3).

    Derivatives are taken w.r.t. the raw direction components; composing with
    the normalization Jacobian is the caller's job.
    """
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = dirs.shape[0]
    jac = np.zeros((n, num_coeffs(degree), 3), dtype=np.float64)
    if degree < 1:
        return jac
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    jac[:, 1, 1] = -C1
    jac[:, 2, 2] = C1
    jac[:, 3, 0] = -C1
    if degree < 2:
        return jac
    jac[:, 4, 0] = C2[0] * y
    jac[:, 4, 1] = C2[0] * x
    jac[:, 5, 1] = C2[1] * z
    jac[:, 5, 2] = C2[1] * y
    jac[:, 6, 0] = C2[2] * (-2.0 * x)
    jac[:, 6, 1] = C2[2] * (-2.0 * y)
    jac[:, 6, 2] = C2[2] * (4.0 * z)
    jac[:, 7, 0] = C2[3] * z
    jac[:, 7, 2] = C2[3] * x
    jac[:, 8, 0] = C2[4] * (2.0 * x)
    jac[:, 8, 1] = C2[4] * (-2.0 * y)
    if degree < 3:
        return jac
    xx, yy, zz = x * x, y * y, z * z
    jac[:, 9, 0] = C3[0] * 6.0 * x * y
    jac[:, 9, 1] = C3[0] * (3.0 * xx - 3.0 * yy)
    jac[:, 10, 0] = C3[1] * y * z
    jac[:, 10, 1] = C3[1] * x * z
    jac[:, 10, 2] = C3[1] * x * y
    jac[:, 11, 0] = C3[2] * (-2.0 * x * y)
    jac[:, 11, 1] = C3[2] * (4.0 * zz - xx - 3.0 * yy)
    jac[:, 11, 2] = C3[2] * (8.0 * y * z)
    jac[:, 12, 0] = C3[3] * (-6.0 * x * z)
    jac[:, 12, 1] = C3[3] * (-6.0 * y * z)
    jac[:, 12, 2] = C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
    jac[:, 13, 0] = C3[4] * (4.0 * zz - 3.0 * xx - yy)
    jac[:, 13, 1] = C3[4] * (-2.0 * x * y)
    jac[:, 13, 2] = C3[4] * (8.0 * x * z)
    jac[:, 14, 0] = C3[5] * (2.0 * x * z)
    jac[:, 14, 1] = C3[5] * (-2.0 * y * z)
    jac[:, 14, 2] = C3[5] * (xx - yy)
    jac[:, 15, 0] = C3[6] * (3.0 * xx - 3.0 * yy)
    jac[:, 15, 1] = C3[6] * (-6.0 * x * y)
    return jac
