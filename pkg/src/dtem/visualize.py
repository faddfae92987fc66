"""Merge-group maps as plain-text portable pixmaps (P3).

Each input patch is painted with the color of the final token it was merged
into. A band above the grid shows the color of the class token's group.
"""

from __future__ import annotations

import numpy as np

_MULT = 0x9E3779B1


def group_color(index: int) -> tuple[int, int, int]:
    """Deterministic RGB for a group index; distinct indices below 2**24 get distinct colors."""
    if not 0 <= index < 1 << 24:
        raise ValueError("group index out of range")
    # odd multiplier modulo 2**24 is a bijection on 24-bit values
    h = ((index + 1) * _MULT) & 0xFFFFFF
    return (h >> 16) & 0xFF, (h >> 8) & 0xFF, h & 0xFF


def group_grid(assignment: np.ndarray, grid: int) -> tuple[int, np.ndarray]:
    """(class-token group, patch groups [grid, grid]) from one assignment row."""
    assignment = np.asarray(assignment)
    if assignment.ndim != 1 or assignment.size != grid * grid + 1:
        raise ValueError(f"expected an assignment of length {grid * grid + 1}")
    return int(assignment[0]), assignment[1:].reshape(grid, grid)


def render_ppm(assignment: np.ndarray, grid: int, cell: int = 8, band: int = 4) -> bytes:
    """P3 pixmap of width grid*cell and height band + grid*cell."""
    cls_group, groups = group_grid(assignment, grid)
    width = grid * cell
    height = band + grid * cell
    rows = []
    cls_rgb = " ".join(map(str, group_color(cls_group)))
    for _ in range(band):
        rows.append(" ".join([cls_rgb] * width))
    for gy in range(grid):
        line = " ".join(" ".join(map(str, group_color(int(g)))) for g in groups[gy] for _ in range(cell))
        rows.extend([line] * cell)
    header = f"P3\n{width} {height}\n255\n"
    return (header + "\n".join(rows) + "\n").encode("ascii")


def parse_ppm(data: bytes) -> np.ndarray:
    """Decode a P3 pixmap into an [H, W, 3] uint8 array (validates the header)."""
    tokens = [t for line in data.decode("ascii").splitlines()
              for t in line.split("#", 1)[0].split()]
    if not tokens or tokens[0] != "P3":
        raise ValueError("not a P3 pixmap")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    values = np.array(tokens[4:], dtype=np.int64)
    if values.size != width * height * 3:
        raise ValueError(f"expected {width * height * 3} samples, found {values.size}")
    if maxval != 255 or values.min(initial=0) < 0 or values.max(initial=0) > maxval:
        raise ValueError("sample values out of range")
    return values.reshape(height, width, 3).astype(np.uint8)


def count_colors(image: np.ndarray) -> int:
    return len(np.unique(image.reshape(-1, 3), axis=0))
