"""Encoders that turn captions and images into SYNCEMB1 embedding files."""
