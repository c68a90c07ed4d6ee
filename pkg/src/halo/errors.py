"""Exception types raised across the package."""


class HaloError(Exception):
    """Base class for all package errors."""


class ProfileError(HaloError, ValueError):
    """A weight profile is malformed or incomplete."""


class ContainerError(HaloError, ValueError):
    """A tensor or model container on disk is invalid."""


class NoFeasibleLevelError(HaloError):
    """No DVFS level has a clock period long enough for the critical path."""


class TimingViolationError(HaloError):
    """A schedule runs weights faster than their critical path allows."""


class ScheduleError(HaloError, ValueError):
    """A schedule does not cover the model or references unknown classes."""
