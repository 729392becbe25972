"""Exception types shared across the package."""


class MirrorGANError(Exception):
    pass


class DimensionError(MirrorGANError, ValueError):
    """Tensor shapes do not conform."""


class ContractError(MirrorGANError, RuntimeError):
    """A call violated a documented pre- or post-condition."""


class InputError(MirrorGANError, ValueError):
    """Invalid user-level input (captions, token ids, dataset contents)."""


class ParseError(InputError):
    def __init__(self, message, position=None):
        super().__init__(message if position is None else f"{message} (at token {position})")
        self.position = position


class CheckpointError(MirrorGANError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class MissingTensorError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass
