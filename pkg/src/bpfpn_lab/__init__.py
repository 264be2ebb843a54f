"""Gradient-flow laboratory for a backpropagation-designed FPN neck."""
