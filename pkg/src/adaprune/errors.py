"""Exception types raised across the package."""


class AdapruneError(Exception):
    pass


class ShapeError(AdapruneError, ValueError):
    pass


class MaskError(AdapruneError, ValueError):
    pass


class LayoutError(AdapruneError, ValueError):
    pass


class ConfigError(AdapruneError, ValueError):
    pass


class InputError(AdapruneError, ValueError):
    pass


class StateError(AdapruneError, RuntimeError):
    pass
