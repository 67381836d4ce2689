"""Converters from the published ITOP and UBC3V archive formats into the
DPC1 dataset container used by the depthpose toolkit."""

from .convert import IngestError, SourceManifest, convert

__version__ = "0.1.0"
