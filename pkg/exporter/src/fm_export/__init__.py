from .export import ExportJob, export

__version__ = "0.1.0"
__all__ = ["ExportJob", "export", "__version__"]
