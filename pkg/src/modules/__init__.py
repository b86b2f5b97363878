"""Model, objectives, training and decoding modules."""
