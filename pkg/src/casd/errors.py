"""Shared exception types.

ShapeError    incompatible tensor shapes or geometry.
ContractError a caller broke a documented precondition (non-scalar backward,
              mining an image with no positive label, bad config value, ...).
FormatError   malformed serialized data (tensor files, manifests, configs).
"""


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class FormatError(ValueError):
    pass
