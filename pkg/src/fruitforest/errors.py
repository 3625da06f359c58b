"""Exception types shared across the package."""


class FruitForestError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatchError(FruitForestError):
    """Operands disagree in shape, length, or dimension."""


class InvalidSpecError(FruitForestError):
    """A layer, pooling, model, or generator configuration is unusable."""


class NonFiniteInputError(FruitForestError):
    """An input contains NaN or infinity where finite values are required."""


class LabelRangeError(FruitForestError):
    """A class label falls outside [0, n_classes)."""


class UnknownTapError(FruitForestError):
    """A requested tap name is not in the model's registry."""


class EmptyNodeError(FruitForestError):
    """A tree node was asked to summarize zero samples."""


class ContainerError(FruitForestError):
    """A binary container file is malformed."""


class ChecksumError(ContainerError):
    """Stored checksum does not match the file contents."""


class VersionMismatchError(ContainerError):
    """File format version differs from the supported version."""


class DatasetError(FruitForestError):
    """Base class for dataset layout and loading problems."""


class MissingSplitError(DatasetError):
    """Dataset root lacks a Training/ or Test/ directory."""


class UnknownTestClassError(DatasetError):
    """Test split contains a class absent from the training split."""


class EmptyClassError(DatasetError):
    """A class folder holds no readable images."""


class EmptyDatasetError(DatasetError):
    """No samples are available where at least one is required."""


class ClassTooSmallError(DatasetError):
    """A class has too few samples to be split."""


class DecodeError(DatasetError):
    """An image file could not be decoded."""


class UnknownSubclassError(FruitForestError):
    """A category group names a class missing from the label space."""
