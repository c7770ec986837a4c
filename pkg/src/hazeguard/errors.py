"""Exception types raised across the toolkit."""


class HazeguardError(Exception):
    """Base class for toolkit errors."""


class ShapeError(HazeguardError, ValueError):
    """Arrays with incompatible or unsupported dimensions."""


class SizeError(ShapeError):
    """Image too small for the requested operation."""


class DomainError(HazeguardError, ValueError):
    """A scalar argument outside its valid domain (negative beta, sigma, ...)."""


class ConfigError(HazeguardError, ValueError):
    """Invalid configuration values or unknown configuration keys."""


class StructureError(HazeguardError, RuntimeError):
    """A model lacks the structure an operation needs."""


class ContractError(HazeguardError, ValueError):
    """A caller-supplied callable broke its contract (e.g. non-scalar objective)."""


class ImageIOError(HazeguardError, OSError):
    """Missing, unreadable or unsupported image file."""
