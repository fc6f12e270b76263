"""Named benchmark worlds: terrain recipe plus start and goal."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ParameterError
from .terrain import TerrainSpec


@dataclass(frozen=True)
class World:
    name: str
    terrain: TerrainSpec
    start: tuple   # (x, y, heading)
    goal: tuple    # (x, y)


def flat_world(seed: int = 0, extent=(10.0, 10.0)) -> World:
    return World("flat", TerrainSpec("flat", extent=extent), (1.0, 1.0, 0.0),
                 (extent[0] - 1.0, extent[1] - 1.0))


def band_gap_world(seed: int = 0, gap=(6.0, 8.0), amplitude: float = 0.2) -> World:
    """A rough band across x in [4, 6] that is impassable except for a smooth
    gap at ``gap`` (y range)."""
    comps = [TerrainSpec("rough", seed=seed, params={"amplitude": amplitude, "correlation_length": 0.15},
                         region=(4.0, 0.0, 6.0, gap[0])),
             TerrainSpec("rough", seed=seed + 1, params={"amplitude": amplitude, "correlation_length": 0.15},
                         region=(4.0, gap[1], 6.0, 10.0))]
    return World("band_gap", TerrainSpec("composite", seed=seed, components=comps),
                 (1.5, 2.0, 0.0), (8.5, 2.0))


def two_corridor_world(seed: int = 0, amplitude: float = 0.08, correlation_length: float = 0.6,
                       extent=(10.0, 8.0)) -> World:
    """Straight shortcut across a band of undulating terrain (x in [3, 7],
    y < 4.5) next to a flat detour corridor (y > 4.5).

    The band is gentle enough that the geometric scores rate it nearly
    perfect, but walking it at full speed puts instability in the fall regime.
    """
    band = TerrainSpec("rough", seed=seed,
                       params={"amplitude": amplitude, "correlation_length": correlation_length},
                       region=(3.0, 0.0, 7.0, 4.5))
    return World("two_corridor", TerrainSpec("composite", extent=extent, seed=seed, components=[band]),
                 (1.0, 2.0, 0.0), (9.0, 2.0))


def rough_world(seed: int = 0, amplitude: float = 0.05, extent=(8.0, 4.0)) -> World:
    spec = TerrainSpec("rough", extent=extent, seed=seed,
                       params={"amplitude": amplitude, "correlation_length": 0.3})
    return World("rough", spec, (1.0, extent[1] / 2, 0.0), (extent[0] - 1.0, extent[1] / 2))


WORLDS = {
    "flat": flat_world,
    "band_gap": band_gap_world,
    "two_corridor": two_corridor_world,
    "rough": rough_world,
}


def get_world(name: str, **kwargs) -> World:
    try:
        return WORLDS[name](**kwargs)
    except KeyError:
        raise ParameterError(f"unknown world {name!r}; choose from {sorted(WORLDS)}") from None
