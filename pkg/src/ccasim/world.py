"""Security worlds and their derivation from the (NS, NSE) bit pair."""

import enum

from ccasim.errors import InvalidSecurityState


class World(enum.Enum):
    NORMAL = "normal"
    SECURE = "secure"
    REALM = "realm"
    ROOT = "root"


class EL(enum.IntEnum):
    EL0 = 0
    EL1 = 1
    EL2 = 2
    EL3 = 3


# (NS, NSE) -> world below EL3. (0, 1) is reserved below EL3.
WORLD_ENCODING = {
    (1, 0): World.NORMAL,
    (1, 1): World.REALM,
    (0, 0): World.SECURE,
}
ENCODING_OF = {world: bits for bits, world in WORLD_ENCODING.items()}


def derive_world(ns: int, nse: int, el: EL) -> World:
    if el == EL.EL3:
        return World.ROOT
    try:
        return WORLD_ENCODING[(ns, nse)]
    except KeyError:
        raise InvalidSecurityState(f"NS={ns} NSE={nse} is not a lower-EL world") from None
