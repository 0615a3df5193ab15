"""Pixel grids, the 4-neighbourhood graph, bilinear warping and Jacobians.

Array conventions used throughout the package:

* images and feature maps are ``(C, H, W)`` float arrays (channel-major);
* displacement fields are ``(2, H, W)`` arrays where component 0 is the
  displacement along x (columns) and component 1 along y (rows), in pixels;
* score maps are ``(H, W)`` arrays.

A field lives on the grid of the image it maps *into*: sample ``k`` of the
warped output is read from the source at ``y_k + field[:, k]``.
"""

from __future__ import annotations

import numpy as np


class InvalidFieldError(ValueError):
    """Raised when a displacement field contains non-finite values or has the wrong shape."""


def as_image(img) -> np.ndarray:
    """Return ``img`` as a ``(C, H, W)`` float64 array, promoting 2-D input to one channel."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected a (C, H, W) or (H, W) image, got shape {arr.shape}")
    if arr.shape[1] < 2 or arr.shape[2] < 2:
        raise ValueError(f"image grid must be at least 2x2, got {arr.shape[1:]}")
    return arr


def check_field(field) -> np.ndarray:
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 3 or field.shape[0] != 2:
        raise InvalidFieldError(f"invalid field: expected shape (2, H, W), got {field.shape}")
    if not np.all(np.isfinite(field)):
        raise InvalidFieldError("invalid field: non-finite displacement")
    return field


def identity_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates ``(x, y)`` of an ``height x width`` grid."""
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    return xs, ys


class NeighborGraph:
    """Implicit 4-neighbourhood graph of an ``height x width`` pixel grid.

    Pixels are indexed row-major, ``k = row * width + col``.
    """

    def __init__(self, height: int, width: int):
        if height < 2 or width < 2:
            raise ValueError("neighbourhood graph requires at least 2 pixels per axis")
        self.height = int(height)
        self.width = int(width)
        deg = np.full((self.height, self.width), 4, dtype=np.int64)
        deg[0, :] -= 1
        deg[-1, :] -= 1
        deg[:, 0] -= 1
        deg[:, -1] -= 1
        self.degree = deg

    @property
    def n(self) -> int:
        return self.height * self.width

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def num_edges(self) -> int:
        h, w = self.height, self.width
        return 2 * h * w - h - w

    @classmethod
    def for_grid(cls, arr) -> "NeighborGraph":
        arr = np.asarray(arr)
        return cls(arr.shape[-2], arr.shape[-1])

    def neighbors(self, k: int) -> list[int]:
        r, c = divmod(int(k), self.width)
        out = []
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < self.height and 0 <= cc < self.width:
                out.append(rr * self.width + cc)
        return out

    def apply_laplacian(self, u: np.ndarray) -> np.ndarray:
        """Compute ``Lambda @ u`` over the trailing two (grid) axes of ``u``."""
        u = np.asarray(u, dtype=np.float64)
        out = self.degree * u
        out[..., 1:, :] -= u[..., :-1, :]
        out[..., :-1, :] -= u[..., 1:, :]
        out[..., :, 1:] -= u[..., :, :-1]
        out[..., :, :-1] -= u[..., :, 1:]
        return out

    def neighbor_sq_diff(self, u: np.ndarray) -> np.ndarray:
        """Per-pixel ``sum_{l in N(k)} (u_k - u_l)^2`` over the trailing grid axes."""
        u = np.asarray(u, dtype=np.float64)
        out = np.zeros_like(u)
        dv = (u[..., 1:, :] - u[..., :-1, :]) ** 2
        dh = (u[..., :, 1:] - u[..., :, :-1]) ** 2
        out[..., 1:, :] += dv
        out[..., :-1, :] += dv
        out[..., :, 1:] += dh
        out[..., :, :-1] += dh
        return out

    def dense_laplacian(self) -> np.ndarray:
        """The ``n x n`` graph Laplacian, assembled explicitly (small grids only)."""
        n = self.n
        lap = np.zeros((n, n))
        for k in range(n):
            nb = self.neighbors(k)
            lap[k, k] = len(nb)
            for l in nb:
                lap[k, l] = -1.0
        return lap


def _sample_coords(h: int, w: int, field: np.ndarray):
    xs, ys = identity_grid(field.shape[1], field.shape[2])
    x = xs + field[0]
    y = ys + field[1]
    in_x = (x >= 0) & (x <= w - 1)
    in_y = (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    # right-sided cell at integer coordinates; last pixel falls back to the left cell
    x0 = np.minimum(np.floor(xc), w - 2).astype(np.intp)
    y0 = np.minimum(np.floor(yc), h - 2).astype(np.intp)
    fx = xc - x0
    fy = yc - y0
    return x0, y0, fx, fy, in_x, in_y


def warp(img, field) -> np.ndarray:
    """Bilinearly resample ``img`` at ``y_k + field_k`` with clamp-to-edge borders.

    Parameters
    ----------
    img : array, (C, h, w) or (h, w)
        Source image; its grid may differ from the field's.
    field : array, (2, H, W)
        Displacement field on the output grid.

    Returns
    -------
    (C, H, W) array (or (H, W) if ``img`` was 2-D).
    """
    squeeze = np.ndim(img) == 2
    src = as_image(img)
    field = check_field(field)
    h, w = src.shape[1:]
    x0, y0, fx, fy, _, _ = _sample_coords(h, w, field)
    a = src[:, y0, x0]
    b = src[:, y0, x0 + 1]
    c = src[:, y0 + 1, x0]
    d = src[:, y0 + 1, x0 + 1]
    out = (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)
    return out[0] if squeeze else out


def warp_gradient(img, field, upstream) -> np.ndarray:
    """Gradient of ``sum(upstream * warp(img, field))`` with respect to ``field``.

    ``upstream`` has the shape of the warp output. Channels are summed. In a
    clamped direction the derivative is zero.
    """
    src = as_image(img)
    field = check_field(field)
    up = np.asarray(upstream, dtype=np.float64)
    if up.ndim == 2:
        up = up[None]
    h, w = src.shape[1:]
    x0, y0, fx, fy, in_x, in_y = _sample_coords(h, w, field)
    a = src[:, y0, x0]
    b = src[:, y0, x0 + 1]
    c = src[:, y0 + 1, x0]
    d = src[:, y0 + 1, x0 + 1]
    dx = (1 - fy) * (b - a) + fy * (d - c)
    dy = (1 - fx) * (c - a) + fx * (d - b)
    grad = np.empty_like(field)
    grad[0] = np.sum(up * dx, axis=0) * in_x
    grad[1] = np.sum(up * dy, axis=0) * in_y
    return grad


def compose_scoremap(score_map, field) -> np.ndarray:
    """Pull a score map living on the field's target domain onto the field's grid."""
    return warp(np.asarray(score_map, dtype=np.float64), field)


def resize(arr, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of the trailing grid axes (pixel-centre aligned)."""
    arr = np.asarray(arr, dtype=np.float64)
    squeeze = arr.ndim == 2
    src = as_image(arr)
    h, w = src.shape[1:]
    H, W = shape
    xs, ys = identity_grid(H, W)
    field = np.stack([(xs + 0.5) * (w / W) - 0.5 - xs, (ys + 0.5) * (h / H) - 0.5 - ys])
    out = warp(src, field)
    return out[0] if squeeze else out


def jacobian_determinant(field) -> np.ndarray:
    """Determinant of the Jacobian of ``x -> x + field(x)`` at every pixel.

    Central differences in the interior, one-sided at the borders.
    """
    field = check_field(field)
    dux_dy, dux_dx = np.gradient(field[0])
    duy_dy, duy_dx = np.gradient(field[1])
    return (1.0 + dux_dx) * (1.0 + duy_dy) - dux_dy * duy_dx
