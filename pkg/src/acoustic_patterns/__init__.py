"""Unsupervised discovery of two-level acoustic patterns and spoken term detection."""
