"""Exception hierarchy shared by every fdglab module."""


class FdglabError(Exception):
    """Base class for all errors raised by fdglab."""


class DimensionError(FdglabError, ValueError):
    """A tensor had the wrong extent along some axis."""

    def __init__(self, message, axis=None):
        super().__init__(message if axis is None else f"{message} (axis {axis})")
        self.axis = axis


class DegenerateReductionError(FdglabError, ValueError):
    """A statistic was requested over too few elements to be defined."""


class LabelError(FdglabError, ValueError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ContractError(FdglabError, RuntimeError):
    """An operation was called outside its contract (e.g. backward on a non-scalar)."""


class ConsistencyError(FdglabError, RuntimeError):
    pass


class SpecValidationError(FdglabError, ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid model spec: " + "; ".join(self.violations))


class SchemaError(FdglabError, ValueError):
    """Two parameter registries (or a file and a registry) do not line up."""


class ConfigurationError(FdglabError, ValueError):
    pass


class DegenerateWeightsError(FdglabError, ValueError):
    pass


class CapacityError(FdglabError, ValueError):
    pass


class CheckpointError(FdglabError, ValueError):
    pass


class RoundError(FdglabError, RuntimeError):
    """A client failed during a federated round; nothing was aggregated."""

    def __init__(self, round_index, client_id, cause):
        super().__init__(f"round {round_index}: client {client_id} failed: {cause!r}")
        self.round_index = round_index
        self.client_id = client_id
        self.cause = cause


class ExperimentError(FdglabError, RuntimeError):
    pass
