"""Shared exception types."""


class ContractViolation(ValueError):
    """Raised when an operation is called with inputs that break its contract.

    The message always names the offending value(s) so that callers and the
    CLI can report a single actionable diagnostic line.
    """
