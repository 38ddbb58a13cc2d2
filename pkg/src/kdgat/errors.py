"""Exception hierarchy shared by every stage of the pipeline.

``DataError`` covers anything wrong with input files or traces (CLI exit 3);
``ModelError`` covers checkpoints, architectures and numerics (CLI exit 4).
"""


class KdGatError(Exception):
    """Base class for all package errors."""


class DataError(KdGatError):
    pass


class ModelError(KdGatError):
    pass


# -- ingestion -------------------------------------------------------------

class ParseError(DataError, ValueError):
    pass


class MalformedLine(ParseError):
    pass


class IdOutOfRange(ParseError):
    pass


class DlcMismatch(ParseError):
    pass


class BadByte(ParseError):
    pass


class OddHexLength(ParseError):
    pass


class NonMonotonicTimestamp(DataError):
    pass


class UnsupportedFormat(DataError):
    pass


class TraceIoError(DataError, OSError):
    pass


# -- synthesis ---------------------------------------------------------------

class EmptyProfileSet(DataError, ValueError):
    pass


class WindowOutOfRange(DataError, ValueError):
    pass


class ReplaySourceEmpty(DataError, ValueError):
    pass


class ScenarioError(DataError, ValueError):
    pass


# -- graphs ------------------------------------------------------------------

class WindowTooSmall(DataError, ValueError):
    pass


class EmptyTrace(DataError, ValueError):
    pass


class IdNotInWindow(DataError, KeyError):
    pass


class GraphFileError(DataError):
    pass


# -- tensors / layers --------------------------------------------------------

class ShapeMismatch(ModelError, ValueError):
    pass


class InvalidAxis(ModelError, ValueError):
    pass


class NonFiniteValue(ModelError, FloatingPointError):
    pass


class NonScalarLoss(ModelError, ValueError):
    pass


class EdgeIndexOutOfRange(ModelError, IndexError):
    pass


class EmptyLayerList(ModelError, ValueError):
    pass


class EmptyGraph(ModelError, ValueError):
    pass


class NonPositiveTemperature(ModelError, ValueError):
    pass


class InvalidLabel(ModelError, ValueError):
    pass


class ProbabilityOutOfRange(ModelError, ValueError):
    pass


# -- models / training -------------------------------------------------------

class InvalidArch(ModelError, ValueError):
    pass


class ArchMismatch(ModelError):
    pass


class VersionMismatch(ModelError):
    pass


class CorruptCheckpoint(ModelError):
    pass


class SingleClassDataset(DataError, ValueError):
    pass


class EmptyDataset(DataError, ValueError):
    pass


# -- evaluation --------------------------------------------------------------

class LengthMismatch(DataError, ValueError):
    pass


class EmptyCounts(DataError, ValueError):
    pass


# -- configuration ---------------------------------------------------------

class ConfigError(KdGatError, ValueError):
    """Bad run configuration; the CLI treats it as a usage error (exit 2)."""
