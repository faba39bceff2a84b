"""Exception types shared across the package."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


class ConfigError(ValueError):
    """Invalid configuration (unknown key, bad value, inconsistent sizes)."""


class DimensionError(ValueError):
    """Shape mismatch in network math; message names the offending layer."""
