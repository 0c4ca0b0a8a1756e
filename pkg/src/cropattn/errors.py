"""Exception hierarchy shared by every module of the package."""


class CropAttnError(Exception):
    """Base class for all errors raised by cropattn."""


# dataset
class DegenerateInput(CropAttnError, ValueError):
    pass


class ParseError(CropAttnError, ValueError):
    pass


class SchemaError(CropAttnError, ValueError):
    pass


class EmptyDataset(CropAttnError, ValueError):
    pass


class InvalidConfig(CropAttnError, ValueError):
    pass


class LengthExceeded(CropAttnError, ValueError):
    pass


class TooShort(CropAttnError, ValueError):
    pass


class OddDimension(CropAttnError, ValueError):
    pass


# model / training
class ShapeMismatch(CropAttnError, ValueError):
    pass


class NonFiniteLoss(CropAttnError, FloatingPointError):
    pass


class NonFiniteLogits(CropAttnError, FloatingPointError):
    pass


class DivergedLoss(CropAttnError, FloatingPointError):
    pass


class EmptySplit(CropAttnError, ValueError):
    pass


# explain
class EmptyRecord(CropAttnError, ValueError):
    pass


class NoParcelsForCrop(CropAttnError, ValueError):
    pass


class EmptyInput(CropAttnError, ValueError):
    pass


class TopTooLarge(CropAttnError, ValueError):
    pass


class EmptyResult(CropAttnError, ValueError):
    pass


class DateAbsent(CropAttnError, KeyError):
    pass


# sensitivity
class UnknownCrop(CropAttnError, KeyError):
    pass


class TooFewClasses(CropAttnError, ValueError):
    pass


class ParcelMismatch(CropAttnError, ValueError):
    pass
