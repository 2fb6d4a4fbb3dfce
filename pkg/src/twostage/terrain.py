"""Procedural heightfields, the body-centred height scan and the terrain curriculum."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

TERRAIN_TYPES = ("slope_normal", "slope_rough", "stairs_up", "stairs_down", "waves", "discrete_steps")
NUM_LEVELS = 10

# governing property per terrain type: (name, min, max, unit)
LEVEL_PROPERTIES = {
    "slope_normal": ("inclination_deg", 0.0, 25.0),
    "slope_rough": ("inclination_deg", 0.0, 25.0),
    "stairs_up": ("step_height", 0.05, 0.2),
    "stairs_down": ("step_height", 0.05, 0.2),
    "waves": ("wave_amplitude", 0.2, 0.5),
    "discrete_steps": ("step_height", 0.05, 0.15),
}

RESOLUTION = 0.05
STAIR_WIDTH = 0.30
PLATFORM_HALF = 0.5
WAVE_LENGTH = 2.0
BLOCK_SIZE = 0.5

SCAN_X = np.linspace(-0.8, 0.8, 17)
SCAN_Y = np.linspace(-0.5, 0.5, 11)
SCAN_POINTS = np.stack(np.meshgrid(SCAN_X, SCAN_Y, indexing="ij"), axis=-1).reshape(-1, 2)


@dataclass(frozen=True)
class TerrainMap:
    """Heights on a regular grid; ``grid[iy, ix]`` sits at ``origin + (ix, iy) * resolution``."""

    grid: np.ndarray
    resolution: float = RESOLUTION
    origin: tuple = (0.0, 0.0)
    terrain_type: str = "flat"
    level: int = 0

    def __post_init__(self):
        if not np.all(np.isfinite(self.grid)):
            raise ValueError("terrain heights must be finite")
        self.grid.setflags(write=False)

    @property
    def size(self) -> tuple[float, float]:
        ny, nx = self.grid.shape
        return (nx - 1) * self.resolution, (ny - 1) * self.resolution

    @property
    def center(self) -> np.ndarray:
        sx, sy = self.size
        return np.array([self.origin[0] + 0.5 * sx, self.origin[1] + 0.5 * sy])


def level_property(terrain_type: str, level: int) -> float:
    """Governing property interpolated linearly from the easiest to the hardest level."""
    if not 0 <= level < NUM_LEVELS:
        raise ValueError(f"level {level} outside [0, {NUM_LEVELS - 1}]")
    _, lo, hi = LEVEL_PROPERTIES[terrain_type]
    return lo + (level / (NUM_LEVELS - 1)) * (hi - lo)


def flat(size: float = 20.0, height: float = 0.0, resolution: float = RESOLUTION,
         origin=None) -> TerrainMap:
    n = int(round(size / resolution)) + 1
    if origin is None:
        origin = (-0.5 * size, -0.5 * size)
    return TerrainMap(np.full((n, n), float(height)), resolution, tuple(origin), "flat", 0)


def generate(terrain_type: str, level: int, seed: int = 0, size: float = 6.0,
             resolution: float = RESOLUTION) -> TerrainMap:
    """One square tile of ``terrain_type`` at difficulty ``level``.

    Slopes, stairs and discrete steps are laid out as four-sided pyramids
    around a flat platform in the tile centre where robots spawn. Waves are
    periodic over the tile so their border matches the neighbouring tile.
    """
    if terrain_type not in LEVEL_PROPERTIES:
        raise ValueError(f"unknown terrain type {terrain_type!r}")
    prop = level_property(terrain_type, level)
    rng = np.random.default_rng(seed)
    n = int(round(size / resolution)) + 1
    coords = np.arange(n) * resolution - 0.5 * size
    x, y = np.meshgrid(coords, coords, indexing="xy")
    # distance from the border of the pyramid, 0 at the tile edge
    ring = 0.5 * size - np.maximum(np.abs(x), np.abs(y))
    climb = np.clip(ring, 0.0, 0.5 * size - PLATFORM_HALF)

    if terrain_type in ("slope_normal", "slope_rough"):
        grid = np.tan(np.radians(prop)) * climb
        if terrain_type == "slope_rough":
            amp = 0.02 * (1 + level)
            grid = grid + rng.uniform(-amp, amp, size=grid.shape)
    elif terrain_type in ("stairs_up", "stairs_down"):
        steps = np.floor(climb / STAIR_WIDTH + 1e-9)
        # robots start on the central platform; stairs_up descends into a pit
        # toward the centre so walking outward climbs
        sign = -1.0 if terrain_type == "stairs_up" else 1.0
        grid = sign * prop * steps
    elif terrain_type == "waves":
        grid = 0.25 * prop * (np.cos(2 * np.pi * x / WAVE_LENGTH) + np.cos(2 * np.pi * y / WAVE_LENGTH))
    else:  # discrete_steps
        nb = int(np.ceil(size / BLOCK_SIZE))
        blocks = rng.choice([-prop, 0.0, prop], size=(nb, nb))
        bi = np.minimum(((coords + 0.5 * size) / BLOCK_SIZE).astype(int), nb - 1)
        grid = blocks[np.ix_(bi, bi)]
        grid = np.where(ring > 0.5 * size - PLATFORM_HALF, 0.0, grid)

    return TerrainMap(np.ascontiguousarray(grid, dtype=float), resolution,
                      (-0.5 * size, -0.5 * size), terrain_type, level)


def height_at(terrain: TerrainMap, x, y):
    """Bilinear height lookup.

    Returns ``(height, clamped)``; points outside the grid are clamped to
    the nearest edge and flagged. Non-finite queries give NaN heights.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    grid = terrain.grid
    ny, nx = grid.shape
    fx = (x - terrain.origin[0]) / terrain.resolution
    fy = (y - terrain.origin[1]) / terrain.resolution
    clamped = (fx < 0) | (fx > nx - 1) | (fy < 0) | (fy > ny - 1)
    bad = ~(np.isfinite(fx) & np.isfinite(fy))
    fx = np.clip(np.where(bad, 0.0, fx), 0.0, nx - 1)
    fy = np.clip(np.where(bad, 0.0, fy), 0.0, ny - 1)
    ix = np.minimum(np.floor(fx).astype(np.intp), nx - 2)
    iy = np.minimum(np.floor(fy).astype(np.intp), ny - 2)
    tx = fx - ix
    ty = fy - iy
    h00 = grid[iy, ix]
    h01 = grid[iy, ix + 1]
    h10 = grid[iy + 1, ix]
    h11 = grid[iy + 1, ix + 1]
    h = (h00 * (1 - tx) + h01 * tx) * (1 - ty) + (h10 * (1 - tx) + h11 * tx) * ty
    if bad.any():
        h = np.where(bad, np.nan, h)
    return h, clamped


def scan_points_world(base_position, base_yaw):
    """World xy of the 187 yaw-aligned scan points, shape (N, 187, 2)."""
    base_position = np.atleast_2d(base_position)
    yaw = np.atleast_1d(base_yaw)
    c, s = np.cos(yaw)[:, None], np.sin(yaw)[:, None]
    px, py = SCAN_POINTS[:, 0], SCAN_POINTS[:, 1]
    wx = base_position[:, 0:1] + c * px - s * py
    wy = base_position[:, 1:2] + s * px + c * py
    return np.stack([wx, wy], axis=-1)


def height_scan(terrain: TerrainMap, base_position, base_yaw):
    """Base height above the terrain at 17 x 11 points, 0.1 m apart, row-major (N, 187)."""
    base_position = np.atleast_2d(base_position)
    pts = scan_points_world(base_position, base_yaw)
    h, _ = height_at(terrain, pts[..., 0], pts[..., 1])
    return base_position[:, 2:3] - h


def export_csv(terrain: TerrainMap, path) -> None:
    """Rows are grid y, columns grid x, values in metres."""
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows([[repr(float(v)) for v in row] for row in terrain.grid])


# ----------------------------------------------------------------------------
# stitched curriculum field


@dataclass(frozen=True)
class TerrainGrid:
    """All (level, type) tiles stitched into one map.

    Tile ``(level, k)`` covers rows ``level`` and column ``k`` of the layout;
    ``origins[level, k]`` is the world xy of that tile's centre.
    """

    map: TerrainMap
    origins: np.ndarray  # (levels, types, 2)
    types: tuple

    def spawn_xy(self, levels, type_ids):
        return self.origins[np.asarray(levels), np.asarray(type_ids)]


def build_grid(types=TERRAIN_TYPES, seed: int = 0, tile_size: float = 6.0, border: float = 3.0,
               resolution: float = RESOLUTION) -> TerrainGrid:
    n_tile = int(round(tile_size / resolution))
    nb = int(round(border / resolution))
    rows = NUM_LEVELS * n_tile + 2 * nb + 1
    cols = len(types) * n_tile + 2 * nb + 1
    grid = np.zeros((rows, cols))
    origins = np.zeros((NUM_LEVELS, len(types), 2))
    ss = np.random.SeedSequence(seed)
    child = iter(ss.spawn(NUM_LEVELS * len(types)))
    for lvl in range(NUM_LEVELS):
        for k, t in enumerate(types):
            tile = generate(t, lvl, seed=int(next(child).generate_state(1)[0]), size=tile_size,
                            resolution=resolution)
            r0, c0 = nb + lvl * n_tile, nb + k * n_tile
            grid[r0:r0 + n_tile + 1, c0:c0 + n_tile + 1] = tile.grid
            origins[lvl, k] = ((c0 + 0.5 * n_tile) * resolution, (r0 + 0.5 * n_tile) * resolution)
    return TerrainGrid(TerrainMap(grid, resolution, (0.0, 0.0), "grid", 0), origins, tuple(types))


# ----------------------------------------------------------------------------
# curriculum

PROMOTE_FRACTION = 0.8
DEMOTE_FRACTION = 0.4
YAW_RANDOM, YAW_CONSTANT = 0, 1


@dataclass(frozen=True)
class CurriculumState:
    """Per-environment curriculum bookkeeping (all arrays share the env axis)."""

    terrain_type: np.ndarray
    level: np.ndarray
    episodes_at_level: np.ndarray
    graduated: np.ndarray
    yaw_mode: np.ndarray

    @classmethod
    def start(cls, num_envs: int, rng: np.random.Generator, num_types: int = len(TERRAIN_TYPES),
              max_init_level: int = 0) -> "CurriculumState":
        types = np.arange(num_envs) % num_types
        levels = rng.integers(0, max_init_level + 1, size=num_envs)
        return cls(types, levels, np.zeros(num_envs, int), np.zeros(num_envs, bool),
                   np.full(num_envs, YAW_RANDOM))

    def histogram(self) -> list[int]:
        return np.bincount(self.level, minlength=NUM_LEVELS).tolist()


def curriculum_update(state: CurriculumState, tracking_fraction, rng: np.random.Generator,
                      mask=None) -> CurriculumState:
    """Promote/demote environments from their episode tracking-reward fraction.

    ``tracking_fraction`` is the episode's mean linear tracking term over its
    maximum (1.0). Only entries selected by ``mask`` (default: all) change.
    Promotion past the top level sends the env back to a random level and
    pins its yaw command.
    """
    frac = np.asarray(tracking_fraction, dtype=float)
    if np.any((frac < 0) | (frac > 1)):
        raise ValueError("tracking fraction must lie in [0, 1]")
    n = state.level.shape[0]
    sel = np.ones(n, bool) if mask is None else np.asarray(mask, bool)
    frac = np.broadcast_to(frac, (n,))
    up = sel & (frac > PROMOTE_FRACTION)
    down = sel & (frac < DEMOTE_FRACTION)
    level = state.level + up.astype(int) - down.astype(int)
    wrap = level > NUM_LEVELS - 1
    # draw for every env so the stream does not depend on which ones wrapped
    resample = rng.integers(0, NUM_LEVELS, size=n)
    level = np.where(wrap, resample, np.clip(level, 0, NUM_LEVELS - 1))
    moved = level != state.level
    return replace(
        state,
        level=level,
        episodes_at_level=np.where(sel & ~moved, state.episodes_at_level + 1,
                                   np.where(moved, 0, state.episodes_at_level)),
        graduated=state.graduated | wrap,
        yaw_mode=np.where(wrap, YAW_CONSTANT, state.yaw_mode),
    )
