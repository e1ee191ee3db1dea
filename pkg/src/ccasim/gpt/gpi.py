"""Granule protection information values."""

import enum

from ccasim.world import World


class Gpi(enum.IntEnum):
    NO_ACCESS = 0b0000
    SECURE = 0b1000
    NON_SECURE = 0b1001
    ROOT = 0b1010
    REALM = 0b1011
    ANY = 0b1111


_WORLD_GPI = {
    World.SECURE: Gpi.SECURE,
    World.NORMAL: Gpi.NON_SECURE,
    World.REALM: Gpi.REALM,
    World.ROOT: Gpi.ROOT,
}


def gpc_permits(gpi: Gpi, world: World) -> bool:
    """Granule protection check for an access from ``world``.

    Root may access every physical address space.
    """
    if world is World.ROOT:
        return gpi is not Gpi.NO_ACCESS
    return gpi is Gpi.ANY or gpi is _WORLD_GPI[world]
