"""Built-in desk-scale test environments (10 x 8 m at 0.1 m/cell unless noted).

The layouts are analogues of the four benchmark families used for equitable
partitioning studies (open rooms, rooms, spiral, maze) plus two small fixtures
used by the tests.
"""

from __future__ import annotations

import numpy as np

from .environment import Environment


def _block(free: np.ndarray, res: float, x0: float, y0: float, x1: float, y1: float, value=False):
    j0, j1 = int(round(x0 / res)), int(round(x1 / res))
    i0, i1 = int(round(y0 / res)), int(round(y1 / res))
    free[i0:i1, j0:j1] = value


def _canvas(width_m: float, height_m: float, res: float) -> np.ndarray:
    return np.ones((int(round(height_m / res)), int(round(width_m / res))), dtype=bool)


def open_rooms(res: float = 0.1) -> Environment:
    f = _canvas(10, 8, res)
    # two partial vertical walls and one partial horizontal wall, wide openings
    _block(f, res, 3.3, 0.0, 3.5, 3.0)
    _block(f, res, 3.3, 5.0, 3.5, 8.0)
    _block(f, res, 6.6, 2.0, 6.8, 8.0)
    _block(f, res, 6.8, 4.0, 8.5, 4.2)
    _block(f, res, 0.0, 5.0, 1.8, 5.2)
    return Environment(f, res, name="open_rooms")


def rooms(res: float = 0.1) -> Environment:
    f = _canvas(10, 8, res)
    # spine wall between the small rooms (left) and the large room (right)
    _block(f, res, 6.0, 0.0, 6.2, 8.0)
    _block(f, res, 6.0, 1.2, 6.2, 2.2, True)
    _block(f, res, 6.0, 5.8, 6.2, 6.8, True)
    # left block: 2 x 3 grid of small rooms off a horizontal corridor
    _block(f, res, 0.0, 3.4, 6.0, 3.6)
    _block(f, res, 0.0, 4.6, 6.0, 4.8)
    for x in (2.0, 4.0):
        _block(f, res, x, 0.0, x + 0.2, 3.4)
        _block(f, res, x, 4.8, x + 0.2, 8.0)
    for x in (0.6, 2.6, 4.6):
        _block(f, res, x, 3.4, x + 0.8, 3.6, True)
        _block(f, res, x, 4.6, x + 0.8, 4.8, True)
    # corridor exit toward the big room
    _block(f, res, 6.0, 3.6, 6.2, 4.6, True)
    # large room: one partial wall
    _block(f, res, 7.6, 4.0, 10.0, 4.2)
    return Environment(f, res, name="rooms")


def spiral(res: float = 0.1) -> Environment:
    f = _canvas(10, 8, res)
    # concentric rectangular walls, each opened on alternating sides
    _block(f, res, 1.2, 1.2, 8.8, 1.4)
    _block(f, res, 8.6, 1.2, 8.8, 6.8)
    _block(f, res, 1.2, 6.6, 8.8, 6.8)
    _block(f, res, 1.2, 2.8, 1.4, 6.8)
    _block(f, res, 2.8, 2.6, 7.2, 2.8)
    _block(f, res, 7.0, 2.6, 7.2, 5.2)
    _block(f, res, 2.8, 5.0, 7.2, 5.2)
    _block(f, res, 2.8, 2.6, 3.0, 4.0)
    return Environment(f, res, name="spiral")


def maze(res: float = 0.1) -> Environment:
    f = _canvas(10, 8, res)
    for k, x in enumerate((1.6, 3.3, 5.0, 6.7, 8.4)):
        if k % 2 == 0:
            _block(f, res, x, 0.0, x + 0.2, 6.4)
        else:
            _block(f, res, x, 1.6, x + 0.2, 8.0)
    _block(f, res, 1.8, 3.2, 2.6, 3.4)
    _block(f, res, 4.1, 4.6, 5.0, 4.8)
    _block(f, res, 5.2, 2.4, 6.0, 2.6)
    _block(f, res, 7.6, 4.6, 8.4, 4.8)
    return Environment(f, res, name="maze")


def two_rooms(res: float = 0.1) -> Environment:
    """6 x 4 m, two rooms joined by a door near the top of the dividing wall."""
    f = _canvas(6, 4, res)
    _block(f, res, 2.9, 0.0, 3.1, 4.0)
    _block(f, res, 2.9, 2.8, 3.1, 3.6, True)
    return Environment(f, res, name="two_rooms")


def gradient_fixture(res: float = 0.1) -> Environment:
    """60 x 48 cells: an L-shaped wall and a pillar, for gradient checks."""
    f = _canvas(6.0, 4.8, res)
    _block(f, res, 2.4, 1.2, 2.6, 3.6)
    _block(f, res, 2.6, 3.4, 4.2, 3.6)
    _block(f, res, 4.2, 1.0, 4.8, 1.6)
    return Environment(f, res, name="gradient_fixture")


def empty(width_cells: int, height_cells: int, res: float = 0.1) -> Environment:
    return Environment(np.ones((height_cells, width_cells), dtype=bool), res, name="empty")


BUILTIN = {
    "open_rooms": open_rooms,
    "rooms": rooms,
    "spiral": spiral,
    "maze": maze,
    "two_rooms": two_rooms,
    "gradient_fixture": gradient_fixture,
}


def builtin(name: str, res: float = 0.1) -> Environment:
    try:
        return BUILTIN[name](res)
    except KeyError:
        raise KeyError(f"unknown built-in map {name!r}; choose from {sorted(BUILTIN)}") from None
