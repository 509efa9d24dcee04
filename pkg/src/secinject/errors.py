"""Exception hierarchy. Every structural failure is a typed error."""


class SecInjectError(Exception):
    pass


class PeFormatError(SecInjectError):
    """Input bytes are not a PE32 file this toolkit can represent."""


class MissingMzSignature(PeFormatError):
    pass


class MissingPeSignature(PeFormatError):
    pass


class TruncatedHeader(PeFormatError):
    pass


class SectionTableOutOfBounds(PeFormatError):
    pass


class NoSections(PeFormatError):
    pass


class UnsupportedFormat(PeFormatError):
    """PE32+ or an unknown optional-header magic."""


class RawDataOutOfBounds(PeFormatError):
    pass


class UnsupportedLayout(PeFormatError):
    """Layout that cannot be reproduced byte-for-byte (overlapping raw data,
    section data inside the header table, non-zero bytes between sections)."""


class OverlappingRawRegions(SecInjectError):
    pass


class InjectionError(SecInjectError):
    pass


class InsufficientHeaderSlack(InjectionError):
    pass


class AdversarialDonorSameFamily(InjectionError):
    pass


class InvalidAlignment(InjectionError):
    pass


class TooFewSections(SecInjectError):
    pass


class InputTooSmall(SecInjectError):
    pass


class WrongDimensions(SecInjectError):
    pass


class EmptyIndex(SecInjectError):
    pass


class NoFamiliesFound(SecInjectError):
    pass


class FamilyTooSmall(SecInjectError):
    def __init__(self, family, size=None):
        self.family = family
        self.size = size
        msg = f"family {family!r} is too small to split"
        if size is not None:
            msg += f" ({size} samples)"
        super().__init__(msg)


class LengthMismatch(SecInjectError):
    pass
