class DataError(ValueError):
    """Inputs are inconsistent: missing labels, wrong target, bad split, etc."""


class NumericalError(RuntimeError):
    """A non-finite value appeared during training."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or incomplete."""
