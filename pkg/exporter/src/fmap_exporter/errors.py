class ExporterError(Exception):
    """Base class for exporter failures."""


class SpecError(ExporterError):
    """Export spec is invalid or inconsistent."""


class WeightLoadError(ExporterError):
    """Backbone weights cannot be read or do not describe a ViT."""


class EmptyInputError(ExporterError):
    """No tiles found to export."""


class FrozenWeightError(ExporterError):
    """Backbone parameters changed during export."""


class WriteError(ExporterError):
    """Output file cannot be written."""
