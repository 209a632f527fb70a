"""Affine crops between image pixels and crop-normalised coordinates."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class Crop:
    """Affine frame ``x = origin + axes @ n`` mapping crop coords to image coords.

    Crop coordinates ``n`` lie in ``[0, 1]^2`` over the crop.  An output
    pixel ``(u, v)`` of an ``S x S`` crop sits at ``n = ((u + .5)/S, (v + .5)/S)``.
    """

    origin: tuple
    axes: tuple

    @classmethod
    def from_bbox(cls, bbox):
        x1, y1, x2, y2 = (float(v) for v in bbox)
        return cls((x1, y1), ((x2 - x1, 0.0), (0.0, y2 - y1)))

    @classmethod
    def rotated_square(cls, centre, side, rotation):
        """Square of ``side`` px centred at ``centre``, rotated by ``rotation`` rad."""
        c, s = math.cos(rotation), math.sin(rotation)
        axes = np.array([[c, -s], [s, c]]) * side
        origin = np.asarray(centre, dtype=float) - axes @ np.array([0.5, 0.5])
        return cls(tuple(origin), tuple(map(tuple, axes)))

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.axes, dtype=float)

    def to_image(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.matrix.T + np.asarray(self.origin)

    def to_crop(self, points) -> np.ndarray:
        inv = np.linalg.inv(self.matrix)
        return (np.asarray(points, dtype=float) - np.asarray(self.origin)) @ inv.T

    def sample(self, image, size) -> np.ndarray:
        """Bilinear resample of ``image`` (H, W, C) into a ``size x size`` crop.

        Pixels falling outside the source image are filled with zeros.
        """
        grid = (np.arange(size) + 0.5) / size
        nx, ny = np.meshgrid(grid, grid)
        pts = self.to_image(np.stack([nx.ravel(), ny.ravel()], axis=1))
        return warp(image, pts, (size, size))


def warp(image, source_points, out_hw) -> np.ndarray:
    """Bilinear sampling of ``image`` at ``source_points`` (x, y), zero fill."""
    image = np.asarray(image, dtype=float)
    coords = np.stack([source_points[:, 1], source_points[:, 0]])
    out = np.empty((*out_hw, image.shape[2]))
    for ch in range(image.shape[2]):
        out[..., ch] = ndimage.map_coordinates(
            image[..., ch], coords, order=1, mode="constant", cval=0.0
        ).reshape(out_hw)
    return out


def affine_warp(image, matrix, offset) -> np.ndarray:
    """Warp ``image`` by the forward map ``x' = matrix @ x + offset`` (same size)."""
    h, w = image.shape[:2]
    inv = np.linalg.inv(np.asarray(matrix, dtype=float))
    xs, ys = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    dst = np.stack([xs.ravel(), ys.ravel()], axis=1)
    src = (dst - np.asarray(offset)) @ inv.T
    return warp(image, src, (h, w))


def crop_samples(images, shapes, bboxes, size):
    """Crop every sample's box to ``size x size``.

    Returns ``(X, Y)`` with ``X`` of shape ``(N, size, size, C)`` and ``Y`` the
    landmarks in crop-normalised coordinates, shape ``(N, L, 2)``.
    """
    n = len(images)
    X = np.empty((n, size, size, images[0].shape[-1]))
    Y = np.empty((n, *np.asarray(shapes[0]).shape))
    for i in range(n):
        crop = Crop.from_bbox(bboxes[i])
        X[i] = crop.sample(images[i], size)
        Y[i] = crop.to_crop(shapes[i])
    return X, Y
