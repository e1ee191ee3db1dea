"""Exception hierarchy shared by all simulator modules."""


class CcaSimError(Exception):
    """Base class for every error raised by the simulator."""


class UnknownRegister(CcaSimError):
    pass


class ReadOnlyOnProfile(CcaSimError):
    pass


class IllegalRegisterValue(CcaSimError):
    pass


class ProfileError(CcaSimError):
    pass


class OverlappingRegions(CcaSimError):
    pass


class UnalignedRegion(CcaSimError):
    pass


class OutOfRange(CcaSimError):
    pass


class Unaligned(CcaSimError):
    pass


class IllegalGranuleTransition(CcaSimError):
    pass


class InvalidSecurityState(CcaSimError):
    pass


class UnsupportedVaBits(CcaSimError):
    pass


class UnsupportedOnProfile(CcaSimError):
    pass


class NotOwnedGranule(CcaSimError):
    pass


class Unmapped(CcaSimError):
    pass


class RealmNotActive(CcaSimError):
    pass


class UnknownPrimitive(CcaSimError):
    pass


class NegativeWeight(CcaSimError):
    pass


class UnderdeterminedSystem(CcaSimError):
    pass


class EmptySamples(CcaSimError):
    pass


class EmptyRows(CcaSimError):
    pass


class MismatchedRows(CcaSimError):
    pass


class InvalidParams(CcaSimError):
    pass


class BootError(CcaSimError):
    pass
