"""HTTP service around the inference core."""
