"""Transductive threshold calibration for metric-learning embeddings."""
