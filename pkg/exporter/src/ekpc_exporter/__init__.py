"""EKFT feature exporter: frozen token embeddings from image datasets."""

from .ekft import write_ekft
from .embedders import ModelError, PatchProjectionEmbedder, make_embedder
from .export import DatasetError, ExportJob, export, scan_dataset

__version__ = "0.1.0"
