"""checkport: model-assisted porting of C code toward the Checked C dialect."""

__version__ = "0.1.0"
