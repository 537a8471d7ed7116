"""Exception hierarchy shared by every pipeline stage."""


class GaitDiagError(Exception):
    """Base class for all package errors."""


# signal
class InsufficientSamples(GaitDiagError):
    pass


class NonFiniteSample(GaitDiagError):
    pass


class InvalidCutoff(GaitDiagError):
    pass


class OddOrder(GaitDiagError):
    pass


class StreamFormatError(GaitDiagError):
    pass


# features
class EmptyChannel(GaitDiagError):
    pass


class ChannelTooShort(GaitDiagError):
    pass


class BinOutOfRange(GaitDiagError):
    pass


# classifier
class DimensionMismatch(GaitDiagError):
    pass


class NonFiniteInput(GaitDiagError):
    pass


class DegenerateDataset(GaitDiagError):
    pass


class DivergedTraining(GaitDiagError):
    """Loss went non-finite; ``history`` holds the epochs completed so far."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


class EmptyTestSet(GaitDiagError):
    pass


# quantizer
class EmptyCalibrationSet(GaitDiagError):
    pass


class UncalibratedTensor(GaitDiagError):
    pass


class AccumulatorOverflow(GaitDiagError):
    pass


class ChecksumMismatch(GaitDiagError):
    pass


class ModelFormatError(GaitDiagError):
    pass


# anomaly
class TooFewSamples(GaitDiagError):
    pass


class UnfittedModel(GaitDiagError):
    pass


# synth
class InvalidProfile(GaitDiagError):
    pass


# runtime
class ModelVersionMismatch(GaitDiagError):
    pass


class ConfigError(GaitDiagError):
    pass
