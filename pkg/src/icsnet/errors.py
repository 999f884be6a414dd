"""Exception types shared across the simulator."""


class IcsnetError(Exception):
    """Base class for all simulator errors."""


class ConfigError(IcsnetError):
    """Invalid runtime configuration (duplicate addresses, unroutable noise, ...)."""


class ValidationError(IcsnetError):
    """Scenario file failed validation. Carries the full list of violations."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class CapacityError(IcsnetError):
    """Address space exhausted on a segment."""


class Unreachable(IcsnetError):
    """No route between the requested endpoints."""


class FlowClosed(IcsnetError):
    """Send attempted on a closed flow."""


class NotOnSegment(IcsnetError):
    """Interposition requested from a node outside the link's segment."""


class AlreadyInterposed(IcsnetError):
    """Link already has an active interposer."""


class TimeReversal(IcsnetError):
    """run_until called with a target before the current clock."""


class EncodeError(IcsnetError):
    """Malformed PDU handed to the encoder."""


class ScheduleOverflow(IcsnetError):
    """Attack schedule does not fit inside the scenario duration."""


class ActorError(IcsnetError):
    """Attack actor started with unmet runtime prerequisites (schedule bug)."""


class GatewayModeError(IcsnetError):
    """Gateway start attempted outside paced mode."""


class IntegrityError(IcsnetError):
    """Cross-file consistency violation found while labeling or verifying."""


class StageError(IcsnetError):
    """A pipeline stage failed; carries the stage name for the CLI."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
