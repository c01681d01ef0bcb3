"""Exception types raised by the simulation engine."""


class MpcdError(Exception):
    """Base class for all package errors."""


class ConfigError(MpcdError):
    """Invalid or inconsistent configuration value. Names the offending key."""


class TopologyError(MpcdError):
    """A particle or message was routed to a rank that does not own it."""


class BinningError(MpcdError):
    """A position fell outside the local cell grid during binning."""

    def __init__(self, message, particle_index=None, dimension=None):
        super().__init__(message)
        self.particle_index = particle_index
        self.dimension = dimension
