"""capvid: text-to-video retrieval training and evaluation on
precomputed embeddings, supervised by automatically generated and
filtered frame captions."""

__version__ = "0.1.0"
