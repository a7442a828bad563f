"""Speaker-verification toolkit: ResUnet embeddings, angular-margin losses,
pseudo-label clustering adaptation, and a cosine scoring back-end with
duration-based calibration and fusion."""

__version__ = "0.1.0"
