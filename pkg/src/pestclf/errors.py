"""Exception types shared across the toolkit.

Every error raised by pestclf derives from PestclfError so the CLI can map
any failure to a nonzero exit status with the failing operation named in
the message.
"""


class PestclfError(Exception):
    """Base class for all pestclf errors."""


# data_io
class EmptyDataset(PestclfError):
    """Dataset root has fewer than two usable class folders."""


class UnreadableRoot(PestclfError):
    """Dataset root does not exist or cannot be listed."""


class ClassTooSmall(PestclfError):
    """A class cannot populate all three splits at the given ratios."""


class MalformedLine(PestclfError):
    """A manifest line does not follow 'path<SP>label_index'."""


class LabelOutOfRange(PestclfError):
    """A label index falls outside [0, C)."""


class DecodeFailure(PestclfError):
    """An image file could not be decoded."""


# preprocess
class ImageTooSmall(PestclfError):
    """Image smaller than the requested crop window."""


# models
class ShapeMismatch(PestclfError):
    """Tensor shapes violate an operation's contract."""


class InputTooSmall(PestclfError):
    """Input spatial size below the extractor's minimum."""


class WindowTooLarge(PestclfError):
    """A part-proposal window does not fit within the feature map."""


# metrics / ensemble
class LengthMismatch(PestclfError):
    """Paired label sequences have different lengths."""


class EmptyClass(PestclfError):
    """A class never appears in the ground truth."""


class MemberMismatch(PestclfError):
    """Ensemble members disagree on samples or class count."""


# trainer
class NonFiniteLoss(PestclfError):
    """Training loss became NaN/Inf; diagnostic state was dumped."""


class LabelSpaceMismatch(PestclfError):
    """Checkpoint classes differ from the manifest's label space."""


# explain
class UnsupportedLayer(PestclfError):
    """Model does not expose a layer suitable for Grad-CAM."""


class WriteFailure(PestclfError):
    """An output image file could not be written."""


# cli
class EmptyLedger(PestclfError):
    """Results ledger is missing or has no data rows."""
