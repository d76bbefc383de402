class Div2xError(Exception):
    """Base class for every error raised on purpose by this package"""
    exit_code = 1


class ConfigurationError(Div2xError):
    """Invalid configuration document or command-line flags"""
    exit_code = 1


class DataError(Div2xError):
    """Malformed, missing or inconsistent input files"""
    exit_code = 2


class NumericalError(Div2xError):
    """Non-finite values where finite ones are required"""
    exit_code = 3


class TrainingDivergedError(NumericalError):
    """Raised when a training loss stops being finite"""

    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"Training diverged at step {step} (loss={loss})")
